"""Bandwidth defaults, lambda grids, cross-validation, and BIC selection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import CoefVector, Dataset, check_loss
from .smoothing import _objective_grad, _packed_design, smoothed_quantile
from .solver import FitConfig, SqrFit, _cold_start, _lamm

BANDWIDTH_FLOOR = 0.05


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation and grid settings."""

    folds: int = 5
    grid_size: int = 50
    grid_min_ratio: float = 0.01
    seed: int = 0
    stratify_by_site: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")
        if self.grid_size < 1:
            raise ValueError(f"grid_size must be >= 1, got {self.grid_size}")
        if not 0 < self.grid_min_ratio <= 1:
            raise ValueError("grid_min_ratio must lie in (0, 1]")


def default_bandwidth(tau: float, n: int, p: int) -> float:
    """max{0.05, sqrt(tau(1-tau)) (log p / n)^(1/4)} with n from the fit at hand."""
    if n < 2 or p < 1:
        raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    return max(BANDWIDTH_FLOOR, np.sqrt(tau * (1.0 - tau)) * (np.log(p) / n) ** 0.25)


def _intercept_only_slope_grad(data: Dataset, cfg: FitConfig) -> np.ndarray:
    """Slope gradient of the smoothed objective at the optimal slope-free fit."""
    b = smoothed_quantile(data.y, cfg.tau, cfg.h, cfg.kernel)
    Xa, y = _packed_design(data)
    w = np.zeros(data.p + 1)
    w[0] = b
    _, g = _objective_grad(Xa, y, w, cfg.tau, cfg.h, cfg.kernel)
    return g[1:]


def lambda_grid(data: Dataset, cfg: FitConfig, cv: CvConfig) -> np.ndarray:
    """Log-spaced grid from lambda_max down to grid_min_ratio * lambda_max.

    lambda_max is the sup-norm of the slope gradient at the intercept-only
    fit, so the top of the grid provably yields the all-zero slope vector.
    A constant response makes lambda_max zero; the grid degenerates to {0}.
    """
    lam_max = float(np.max(np.abs(_intercept_only_slope_grad(data, cfg))))
    # root-find noise in the intercept leaves a ~1e-15 residual gradient on
    # constant responses; anything at that scale is an exact zero
    if lam_max <= 1e-12 * max(1.0, float(np.max(np.abs(data.X)))):
        return np.array([0.0])
    if cv.grid_size == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, cv.grid_min_ratio * lam_max, cv.grid_size)


def fit_lambda_path(
    data: Dataset, cfg: FitConfig, grid: np.ndarray, warm_start: CoefVector | None = None
) -> list[SqrFit]:
    """Fit the grid from largest to smallest lambda, warm-starting each step."""
    Xa, y = _packed_design(data)
    w = warm_start.to_array() if warm_start is not None else _cold_start(y, data.p, cfg.tau)
    fits = []
    for lam in grid:
        fit = _lamm(Xa, y, replace(cfg, lam=float(lam)), w)
        fits.append(fit)
        w = fit.coef.to_array()
    return fits


def fold_assignments(n: int, cv: CvConfig, row_sites: np.ndarray | None = None) -> np.ndarray:
    """Deterministic fold label per row from the CV seed.

    Labels come from a seeded permutation split into near-equal chunks;
    with stratify_by_site the permutation runs within each site's rows so
    every fold sees every site.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cv.seed))
    labels = np.empty(n, dtype=np.int64)
    if cv.stratify_by_site and row_sites is not None:
        for sid in np.unique(row_sites):
            idx = np.flatnonzero(row_sites == sid)
            perm = idx[rng.permutation(len(idx))]
            for f, chunk in enumerate(np.array_split(perm, cv.folds)):
                labels[chunk] = f
    else:
        perm = rng.permutation(n)
        for f, chunk in enumerate(np.array_split(perm, cv.folds)):
            labels[chunk] = f
    return labels


def cv_select(
    data: Dataset,
    cfg: FitConfig,
    cv: CvConfig,
    grid: np.ndarray | None = None,
    fold_labels: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Pick lambda by k-fold CV scored with the non-smoothed check loss.

    Held-out folds are scored with the raw check loss (the estimand's own
    risk), not the smoothed surrogate.  Returns the minimizing lambda and
    the mean validation curve over the grid (largest lambda first).
    """
    if cv.folds > data.n:
        raise ValueError(f"folds={cv.folds} exceeds n={data.n}")
    if grid is None:
        grid = lambda_grid(data, cfg, cv)
    if len(grid) == 1:
        return float(grid[0]), np.array([np.nan])
    if fold_labels is None:
        fold_labels = fold_assignments(data.n, cv, data.row_sites)
    curve = np.zeros(len(grid))
    for f in range(cv.folds):
        val = fold_labels == f
        train = data.subset(~val)
        Xv, yv = data.X[val], data.y[val]
        try:
            fits = fit_lambda_path(train, cfg, grid)
        except Exception as exc:
            raise RuntimeError(f"CV fold {f} failed along the lambda grid") from exc
        for i, fit in enumerate(fits):
            res = yv - fit.coef.predict(Xv)
            curve[i] += np.sum(check_loss(res, cfg.tau))
    curve /= data.n
    return float(grid[int(np.argmin(curve))]), curve


def bic_select(
    data: Dataset, cfg: FitConfig, cv: CvConfig, grid: np.ndarray | None = None
) -> float:
    """Pick lambda minimizing a high-dimensional quantile BIC along the grid.

    Criterion: log(sum_i check_loss(res_i)) + |active| log(n) log(p) / (2n),
    where the active set counts nonzero slopes.
    """
    if grid is None:
        grid = lambda_grid(data, cfg, cv)
    if len(grid) == 1:
        return float(grid[0])
    fits = fit_lambda_path(data, cfg, grid)
    n, p = data.n, data.p
    scores = np.empty(len(grid))
    for i, fit in enumerate(fits):
        res = data.y - fit.coef.predict(data.X)
        total = np.sum(check_loss(res, cfg.tau))
        active = int(np.count_nonzero(fit.coef.slopes))
        scores[i] = np.log(max(total, 1e-300)) + active * np.log(n) * np.log(p) / (2.0 * n)
    return float(grid[int(np.argmin(scores))])
