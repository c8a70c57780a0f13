"""Two-step transfer estimator: pooled transferring fit, then target debiasing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import CoefVector, Dataset, DimensionMismatchError, pool_datasets
from .selection import CvConfig, bic_select, cv_select, default_bandwidth
from .smoothing import Kernel
from .solver import FitConfig, SqrFit, fit_l1_sqr

BIC_POOL_SIZE = 2000


@dataclass(frozen=True)
class TransferParams:
    """Settings for the two-step estimator.

    Unset bandwidths fall back to the default rule evaluated at each
    step's own sample size (pooled n for the transferring step, n0 for the
    debiasing step).  Unset penalties are chosen per ``selection``:
    "cv" scores with k-fold CV, "bic" with the quantile BIC, and "fixed"
    requires both lambdas up front.  CV on a pooled transferring fit with
    more than 2000 rows switches to BIC as a cost expedient.  Fold
    randomness derives from ``seed``; the nested CvConfig seed is ignored.
    """

    tau: float = 0.5
    kernel: Kernel = Kernel.GAUSSIAN
    lambda_w: float | None = None
    lambda_delta: float | None = None
    h_w: float | None = None
    h_delta: float | None = None
    selection: str = "cv"
    seed: int = 0
    cv: CvConfig = field(default_factory=CvConfig)
    tol: float = 1e-5
    max_iter: int = 5000

    def __post_init__(self):
        if self.selection not in ("cv", "bic", "fixed"):
            raise ValueError(f"selection must be cv, bic or fixed, got {self.selection!r}")
        if self.selection == "fixed" and (self.lambda_w is None or self.lambda_delta is None):
            raise ValueError("fixed selection requires both lambda_w and lambda_delta")
        object.__setattr__(self, "kernel", Kernel(self.kernel))


@dataclass(frozen=True)
class TransferEstimate:
    """Transferring-step coefficients, the correction, and their sum."""

    w_hat: CoefVector
    delta_hat: CoefVector
    beta_hat: CoefVector
    transferring_fit: SqrFit
    debias_fit: SqrFit
    lambda_w: float
    lambda_delta: float
    h_w: float
    h_delta: float


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, stream)).generate_state(1)[0])


def _select_lambda(
    data: Dataset, cfg: FitConfig, params: TransferParams, stream: int, pooled: bool
) -> float:
    cv = replace(params.cv, seed=_derive_seed(params.seed, stream))
    if params.selection == "bic" or (pooled and data.n > BIC_POOL_SIZE):
        return bic_select(data, cfg, cv)
    lam, _ = cv_select(data, cfg, cv)
    return lam


def _fit_step(
    data: Dataset,
    params: TransferParams,
    lam: float | None,
    h: float | None,
    stream: int,
    pooled: bool = False,
    warm_start: CoefVector | None = None,
) -> tuple[SqrFit, float, float]:
    if h is None:
        h = default_bandwidth(params.tau, data.n, data.p)
    cfg = FitConfig(
        tau=params.tau, h=h, lam=0.0, kernel=params.kernel,
        tol=params.tol, max_iter=params.max_iter,
    )
    if lam is None:
        lam = _select_lambda(data, cfg, params, stream, pooled)
    cfg = FitConfig(
        tau=params.tau, h=h, lam=lam, kernel=params.kernel,
        tol=params.tol, max_iter=params.max_iter,
    )
    return fit_l1_sqr(data, cfg, warm_start), lam, h


def debias(
    target: Dataset,
    w_hat: CoefVector,
    lambda_delta: float | None,
    h_delta: float | None,
    tau: float,
    kernel: Kernel,
    params: TransferParams | None = None,
) -> CoefVector:
    """Fit the correction on target residuals y - (intercept + x'w_hat).

    The full linear predictor of the transferring fit (intercept included)
    is subtracted, and the returned correction carries its own intercept.
    """
    if w_hat.p != target.p:
        raise DimensionMismatchError(f"w_hat has p={w_hat.p} but target has p={target.p}")
    if params is None:
        params = TransferParams(tau=tau, kernel=kernel)
    residual_data = Dataset(
        target.X, target.y - w_hat.predict(target.X), site_id=target.site_id
    )
    fit, _, _ = _fit_step(residual_data, params, lambda_delta, h_delta, stream=1)
    return fit.coef


def oracle_trans_sqr(
    target: Dataset, sources: list[Dataset], params: TransferParams
) -> TransferEstimate:
    """Two-step transfer fit over the given (assumed transferable) sources.

    Step 1 pools the sources with the target and fits l1-SQR at
    (lambda_w, h_w); step 2 refits the target residuals at
    (lambda_delta, h_delta).  An empty source list is valid: the pool is
    the target alone and the procedure degenerates to a target-only fit
    plus a residual correction.
    """
    for s in sources:
        if s.p != target.p:
            raise DimensionMismatchError(
                f"source p={s.p} does not match target p={target.p}"
            )
    pooled = pool_datasets(list(sources) + [target])
    w_fit, lam_w, h_w = _fit_step(
        pooled, params, params.lambda_w, params.h_w, stream=0, pooled=True
    )
    w_hat = w_fit.coef

    residual_data = Dataset(
        target.X, target.y - w_hat.predict(target.X), site_id=target.site_id
    )
    d_fit, lam_d, h_d = _fit_step(
        residual_data, params, params.lambda_delta, params.h_delta, stream=1
    )
    delta_hat = d_fit.coef

    return TransferEstimate(
        w_hat=w_hat,
        delta_hat=delta_hat,
        beta_hat=w_hat + delta_hat,
        transferring_fit=w_fit,
        debias_fit=d_fit,
        lambda_w=lam_w,
        lambda_delta=lam_d,
        h_w=h_w,
        h_delta=h_d,
    )
