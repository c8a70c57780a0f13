"""Transferable-source detection and the detect-then-transfer pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, empirical_check_loss, pool_datasets
from .selection import CvConfig, cv_select, default_bandwidth
from .smoothing import Kernel
from .solver import FitConfig, fit_l1_sqr
from .transfer import TransferEstimate, TransferParams, _derive_seed, oracle_trans_sqr

BENCHMARK_FLOOR = 0.01


@dataclass(frozen=True)
class DetectionParams:
    """Source-detection settings.

    ``lambda_k`` / ``h_k`` override the per-source penalty and bandwidth;
    index 0 refers to the target-only benchmark fit, 1..K to sources.
    Unset values fall back to CV and the default bandwidth rule at the
    fit's own sample size.
    """

    threshold: float = 0.2
    tau: float = 0.5
    kernel: Kernel = Kernel.GAUSSIAN
    seed: int = 0
    lambda_k: dict = field(default_factory=dict)
    h_k: dict = field(default_factory=dict)
    cv: CvConfig = field(default_factory=CvConfig)
    tol: float = 1e-5
    max_iter: int = 5000

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        object.__setattr__(self, "kernel", Kernel(self.kernel))


@dataclass(frozen=True)
class DetectionReport:
    """Per-source transferability indices and the detected set."""

    T_hat: np.ndarray
    benchmark_loss: float
    detected_set: frozenset
    train_idx: np.ndarray
    val_idx: np.ndarray
    threshold: float


def split_target(n0: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split of [0, n0) into train and validation, |val| = floor(n0/2)."""
    if n0 < 4:
        raise ValueError(f"need n0 >= 4 to form usable halves, got {n0}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    perm = rng.permutation(n0)
    n_val = n0 // 2
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


def detect_transferable(T_hat: np.ndarray, benchmark_loss: float, t: float) -> frozenset:
    """Sources with index strictly below t * max(benchmark, 0.01); 1-based labels."""
    cutoff = t * max(benchmark_loss, BENCHMARK_FLOOR)
    return frozenset(int(k) + 1 for k in np.flatnonzero(np.asarray(T_hat) < cutoff))


def _detection_fit(data, params: DetectionParams, k: int):
    h = params.h_k.get(k)
    if h is None:
        h = default_bandwidth(params.tau, data.n, data.p)
    cfg = FitConfig(
        tau=params.tau, h=h, lam=0.0, kernel=params.kernel,
        tol=params.tol, max_iter=params.max_iter,
    )
    lam = params.lambda_k.get(k)
    if lam is None:
        cv = replace(params.cv, seed=_derive_seed(params.seed, 100 + k))
        lam, _ = cv_select(data, cfg, cv)
    cfg = FitConfig(
        tau=params.tau, h=h, lam=lam, kernel=params.kernel,
        tol=params.tol, max_iter=params.max_iter,
    )
    return fit_l1_sqr(data, cfg)


def transferability_indices(
    target: Dataset, sources: list[Dataset], params: DetectionParams
) -> DetectionReport:
    """Validation check-loss gaps between source-augmented and target-only fits.

    The target is split in half; a benchmark fit uses the training half and
    each source fit pools that half with one source.  Indices are scored on
    the held-out half with the raw check loss, so negative values mean the
    source improved target risk.
    """
    if not sources:
        raise ValueError("need at least one source to compute transferability indices")
    train_idx, val_idx = split_target(target.n, params.seed)
    train = target.subset(train_idx)
    val = target.subset(val_idx)

    bench_fit = _detection_fit(train, params, k=0)
    benchmark_loss = empirical_check_loss(bench_fit.coef, val, params.tau)

    T_hat = np.empty(len(sources))
    for j, source in enumerate(sources):
        try:
            pooled = pool_datasets([source, train])
            fit_k = _detection_fit(pooled, params, k=j + 1)
        except Exception as exc:
            raise RuntimeError(f"detection fit failed for source k={j + 1}") from exc
        T_hat[j] = empirical_check_loss(fit_k.coef, val, params.tau) - benchmark_loss

    detected = detect_transferable(T_hat, benchmark_loss, params.threshold)
    return DetectionReport(
        T_hat=T_hat,
        benchmark_loss=benchmark_loss,
        detected_set=detected,
        train_idx=train_idx,
        val_idx=val_idx,
        threshold=params.threshold,
    )


def trans_sqr(
    target: Dataset,
    sources: list[Dataset],
    detection: DetectionParams,
    transfer: TransferParams,
    force_detected: frozenset | None = None,
) -> tuple[TransferEstimate, DetectionReport | None]:
    """Detect transferable sources, then run the two-step fit with them.

    The final fit uses the full target (both halves) plus the detected
    sources.  ``force_detected`` bypasses detection (used to realize the
    all-sources and no-sources baselines with identical plumbing); the
    report is None in that case.
    """
    if force_detected is not None:
        report = None
        detected = force_detected
    elif not sources:
        report = None
        detected = frozenset()
    else:
        report = transferability_indices(target, sources, detection)
        detected = report.detected_set
    chosen = [sources[k - 1] for k in sorted(detected)]
    estimate = oracle_trans_sqr(target, chosen, transfer)
    return estimate, report
