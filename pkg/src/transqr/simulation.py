"""Data generators and the Monte-Carlo experiment runner.

The generative design: target covariates follow an AR(1) correlation
structure (rho = 0.7), source covariates add a rank-one inflation drawn
once per source, responses are linear with intercept 0.5 and i.i.d.
gaussian or t(3) noise, and source coefficients perturb the target's
inside or outside the transferable set as controlled by eta.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri, stdtrit

from ._rng import make_rng, rademacher, standard_normal, student_t
from .core import CoefVector, Dataset
from .detection import DetectionParams, trans_sqr
from .distributed import DistributedParams, SiteHandle, distributed_oracle_trans_sqr
from .selection import CvConfig, cv_select, default_bandwidth
from .smoothing import Kernel
from .solver import FitConfig, fit_l1_sqr
from .transfer import TransferParams, oracle_trans_sqr

AR_RHO = 0.7
INTERCEPT_TRUE = 0.5
SLOPE_TRUE = 0.5
SMALL_H = 0.01

METHODS = (
    "L1-SQR",
    "Oracle-TSQR",
    "Naive-TSQR",
    "TSQR",
    "Distributed",
    "SmallH-Baseline",
)


@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte-Carlo scenario."""

    n0: int = 150
    K: int = 20
    n_k: int = 100
    p: int = 500
    s: int = 16
    eta: float = 5.0
    A: int = 8
    delta_design: float = 0.3
    error_dist: str = "gaussian"
    tau: float = 0.5
    replications: int = 100
    seed: int = 0
    methods: tuple = ("L1-SQR", "Oracle-TSQR", "Naive-TSQR", "TSQR")
    scenario_id: str = ""
    # knobs shared by every method in the scenario
    folds: int = 5
    grid_size: int = 50
    grid_min_ratio: float = 0.01
    threshold: float = 0.2
    rho0: float = 0.2
    dist_T: int | None = None
    h_w: float | None = None
    h_delta: float | None = None
    include_intercept_error: bool = False
    kernel: Kernel = Kernel.GAUSSIAN

    def __post_init__(self):
        if not 0 <= self.A <= self.K:
            raise ValueError(f"need 0 <= A <= K, got A={self.A}, K={self.K}")
        if self.s > self.p:
            raise ValueError(f"need s <= p, got s={self.s}, p={self.p}")
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if self.error_dist not in ("gaussian", "t3"):
            raise ValueError(f"error_dist must be gaussian or t3, got {self.error_dist!r}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        object.__setattr__(self, "kernel", Kernel(self.kernel))


@dataclass(frozen=True)
class CoefficientSet:
    """True target coefficients plus per-source variants."""

    beta_true: CoefVector
    w_sources: tuple
    A_eta: frozenset
    H_sets: tuple

    def contrast(self, k: int) -> np.ndarray:
        """delta^(k) = beta - w^(k), slopes only."""
        return self.beta_true.slopes - self.w_sources[k - 1].slopes


def perturb_set_size(p: int) -> int:
    """200 at the reference dimension p=500, floor(0.4 p) otherwise."""
    return 200 if p == 500 else int(0.4 * p)


def gen_coefficients(cfg: ScenarioConfig, seed) -> CoefficientSet:
    """Draw the source coefficient variants around the target truth.

    Transferable sources (k = 1..A) perturb the target slopes by
    +-eta/|H| on a random index set H outside the support, so each
    contrast has l1 norm exactly eta.  The rest get fresh coefficients
    +-2 eta/|H| supported on H union the target support.
    """
    rng = make_rng(seed)
    slopes = np.zeros(cfg.p)
    slopes[: cfg.s] = SLOPE_TRUE
    beta = CoefVector(INTERCEPT_TRUE, slopes)
    m = perturb_set_size(cfg.p)
    if m > cfg.p - cfg.s:
        raise ValueError(
            f"perturbation set of size {m} does not fit outside the support "
            f"(p={cfg.p}, s={cfg.s})"
        )
    if m < 1 and cfg.eta > 0:
        raise ValueError(f"p={cfg.p} leaves no room for coefficient perturbations")
    mag = cfg.eta / m if m else 0.0
    A_eta = frozenset(range(1, cfg.A + 1))
    w_sources = []
    H_sets = []
    for k in range(1, cfg.K + 1):
        H = np.sort(rng.choice(np.arange(cfg.s, cfg.p), size=m, replace=False))
        H_sets.append(H)
        signs = rademacher(rng, m)
        wk = np.array(beta.slopes)
        if k in A_eta:
            wk[H] += mag * signs
        else:
            wk = np.zeros(cfg.p)
            wk[H] = 2.0 * mag * signs
            wk[: cfg.s] = 2.0 * mag * rademacher(rng, cfg.s)
        w_sources.append(CoefVector(INTERCEPT_TRUE, wk))
    return CoefficientSet(
        beta_true=beta,
        w_sources=tuple(w_sources),
        A_eta=A_eta,
        H_sets=tuple(tuple(int(j) for j in H) for H in H_sets),
    )


def _ar1_rows(rng, n: int, p: int) -> np.ndarray:
    z = standard_normal(rng, (n, p))
    X = np.empty((n, p))
    X[:, 0] = z[:, 0]
    scale = np.sqrt(1.0 - AR_RHO**2)
    for j in range(1, p):
        X[:, j] = AR_RHO * X[:, j - 1] + scale * z[:, j]
    return X


def _errors(rng, dist: str, n: int) -> np.ndarray:
    if dist == "gaussian":
        return standard_normal(rng, n)
    return student_t(rng, 3.0, n)


def gen_dataset(role: str, cfg: ScenarioConfig, coef: CoefficientSet, seed, k: int = 0) -> Dataset:
    """Generate one study's data.

    Target covariates are AR(1)-correlated gaussians; a source adds a
    rank-one direction (~N(0, delta^2 I), one draw per source) scaled by a
    fresh standard normal per row, realizing the inflated covariance.
    """
    rng = make_rng(seed)
    if role == "target":
        n, w = cfg.n0, coef.beta_true
        X = _ar1_rows(rng, n, cfg.p)
        site = 0
    elif role == "source":
        if not 1 <= k <= cfg.K:
            raise ValueError(f"source index k must lie in 1..{cfg.K}, got {k}")
        n, w = cfg.n_k, coef.w_sources[k - 1]
        direction = cfg.delta_design * standard_normal(rng, cfg.p)
        X = _ar1_rows(rng, n, cfg.p)
        X = X + standard_normal(rng, n)[:, None] * direction[None, :]
        site = k
    else:
        raise ValueError(f"role must be 'target' or 'source', got {role!r}")
    eps = _errors(rng, cfg.error_dist, n)
    y = INTERCEPT_TRUE + X @ w.slopes + eps
    return Dataset(X, y, site_id=site)


def true_quantile_beta(coef: CoefficientSet, tau: float, error_dist: str) -> CoefVector:
    """Coefficients of the tau-th conditional quantile under i.i.d. errors.

    Only the intercept moves: it absorbs the error quantile F^-1(tau).
    """
    if error_dist == "gaussian":
        q = float(ndtri(tau))
    elif error_dist == "t3":
        q = float(stdtrit(3.0, tau))
    else:
        raise ValueError(f"unknown error_dist {error_dist!r}")
    return CoefVector(coef.beta_true.intercept + q, coef.beta_true.slopes)


@dataclass
class ResultRow:
    scenario_id: str
    replication: int
    method: str
    tau: float
    error: float
    seconds: float
    converged: bool


@dataclass
class ResultsTable:
    """Per-replication error records plus summary statistics."""

    rows: list = field(default_factory=list)

    def append(self, row: ResultRow):
        self.rows.append(row)

    def errors(self, method: str) -> np.ndarray:
        return np.array(
            [r.error for r in self.rows if r.method == method and np.isfinite(r.error)]
        )

    def summary(self) -> list[dict]:
        out = []
        for method in dict.fromkeys(r.method for r in self.rows):
            errs = self.errors(method)
            out.append(
                {
                    "method": method,
                    "replications": int(len(errs)),
                    "mean_error": float(np.mean(errs)) if len(errs) else float("nan"),
                    "sd_error": float(np.std(errs, ddof=1)) if len(errs) > 1 else float("nan"),
                }
            )
        return out


def _slope_error_sq(beta_hat: CoefVector, beta_tau: CoefVector, include_intercept: bool) -> float:
    d = beta_hat.slopes - beta_tau.slopes
    err = float(d @ d)
    if include_intercept:
        err += (beta_hat.intercept - beta_tau.intercept) ** 2
    return err


def _cv_config(cfg: ScenarioConfig, seed: int) -> CvConfig:
    return CvConfig(
        folds=cfg.folds, grid_size=cfg.grid_size,
        grid_min_ratio=cfg.grid_min_ratio, seed=seed,
    )


def _transfer_params(cfg: ScenarioConfig, seed: int, **overrides) -> TransferParams:
    kw = dict(
        tau=cfg.tau, kernel=cfg.kernel, seed=seed,
        cv=_cv_config(cfg, seed), h_w=cfg.h_w, h_delta=cfg.h_delta,
    )
    kw.update(overrides)
    return TransferParams(**kw)


def _target_only_fit(target: Dataset, cfg: ScenarioConfig, seed: int, h: float) -> tuple[CoefVector, bool]:
    fit_cfg = FitConfig(tau=cfg.tau, h=h, lam=0.0, kernel=cfg.kernel)
    lam, _ = cv_select(target, fit_cfg, _cv_config(cfg, seed))
    fit = fit_l1_sqr(target, FitConfig(tau=cfg.tau, h=h, lam=lam, kernel=cfg.kernel))
    return fit.coef, fit.converged


def run_method(
    method: str,
    target: Dataset,
    sources: list[Dataset],
    coef: CoefficientSet,
    cfg: ScenarioConfig,
    seed: int,
) -> tuple[CoefVector, bool]:
    """Produce one method's estimate for a generated replication."""
    oracle_sources = [sources[k - 1] for k in sorted(coef.A_eta)]
    if method == "L1-SQR":
        h = cfg.h_w or default_bandwidth(cfg.tau, target.n, target.p)
        return _target_only_fit(target, cfg, seed, h)
    if method == "SmallH-Baseline":
        est = oracle_trans_sqr(
            target, oracle_sources,
            _transfer_params(cfg, seed, h_w=SMALL_H, h_delta=SMALL_H),
        )
        ok = est.transferring_fit.converged and est.debias_fit.converged
        return est.beta_hat, ok
    if method == "Oracle-TSQR":
        est = oracle_trans_sqr(target, oracle_sources, _transfer_params(cfg, seed))
        ok = est.transferring_fit.converged and est.debias_fit.converged
        return est.beta_hat, ok
    if method == "Naive-TSQR":
        est = oracle_trans_sqr(target, list(sources), _transfer_params(cfg, seed))
        ok = est.transferring_fit.converged and est.debias_fit.converged
        return est.beta_hat, ok
    if method == "TSQR":
        det = DetectionParams(
            threshold=cfg.threshold, tau=cfg.tau, kernel=cfg.kernel,
            seed=seed, cv=_cv_config(cfg, seed),
        )
        est, _ = trans_sqr(target, list(sources), det, _transfer_params(cfg, seed))
        ok = est.transferring_fit.converged and est.debias_fit.converged
        return est.beta_hat, ok
    if method == "Distributed":
        params = DistributedParams(
            rho0=cfg.rho0, T=cfg.dist_T, tau=cfg.tau, kernel=cfg.kernel,
            seed=seed, cv=_cv_config(cfg, seed), h_w=cfg.h_w, h_delta=cfg.h_delta,
        )
        est, _ = distributed_oracle_trans_sqr(
            SiteHandle(target), [SiteHandle(s) for s in oracle_sources], params
        )
        return est.beta_hat, est.debias_fit.converged
    raise ValueError(f"unknown method {method!r}")


def run_replication(cfg: ScenarioConfig, r: int) -> list[ResultRow]:
    """Run all methods on replication ``r``; derived seed is base_seed + r.

    Data and method-internal randomness derive from (rep_seed, stream)
    seed sequences, so each replication is reproducible in isolation and
    methods do not perturb each other's streams.
    """
    rep_seed = cfg.seed + r
    coef = gen_coefficients(cfg, (rep_seed, 0))
    for k in coef.A_eta:
        l1 = float(np.sum(np.abs(coef.contrast(k))))
        if abs(l1 - cfg.eta) > 1e-10 * max(1.0, cfg.eta):
            raise AssertionError(f"contrast l1 norm {l1} != eta {cfg.eta} for source {k}")
    target = gen_dataset("target", cfg, coef, (rep_seed, 1))
    sources = [
        gen_dataset("source", cfg, coef, (rep_seed, 1 + k), k=k) for k in range(1, cfg.K + 1)
    ]
    beta_tau = true_quantile_beta(coef, cfg.tau, cfg.error_dist)

    rows = []
    for m, method in enumerate(cfg.methods):
        method_seed = int(np.random.SeedSequence((rep_seed, 1000 + m)).generate_state(1)[0])
        start = time.perf_counter()
        try:
            beta_hat, converged = run_method(method, target, sources, coef, cfg, method_seed)
            err = _slope_error_sq(beta_hat, beta_tau, cfg.include_intercept_error)
        except Exception:
            err, converged = float("nan"), False
        rows.append(
            ResultRow(
                scenario_id=cfg.scenario_id,
                replication=r,
                method=method,
                tau=cfg.tau,
                error=err,
                seconds=time.perf_counter() - start,
                converged=converged,
            )
        )
    return rows


def run_experiment(cfg: ScenarioConfig, jobs: int = 1) -> ResultsTable:
    """Run every replication of a scenario, optionally across processes.

    Results merge in replication order regardless of completion order, so
    the table is identical for any job count.
    """
    table = ResultsTable()
    if jobs <= 1:
        for r in range(cfg.replications):
            for row in run_replication(cfg, r):
                table.append(row)
        return table
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for rows in pool.map(run_replication, [cfg] * cfg.replications, range(cfg.replications)):
            for row in rows:
                table.append(row)
    return table
