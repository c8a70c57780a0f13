"""Shared data model and non-smoothed quantile-loss primitives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TARGET_SITE = 0


class DimensionMismatchError(ValueError):
    """Raised when datasets or coefficient vectors disagree on p."""


class DataValidationError(ValueError):
    """Raised on malformed or non-finite input data."""


class NumericalBlowupError(RuntimeError):
    """Raised when an iterative fit produces a non-finite objective.

    Carries the last finite iterate in ``last_coef``.
    """

    def __init__(self, message, last_coef=None):
        super().__init__(message)
        self.last_coef = last_coef


def validate_quantile_level(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DataValidationError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def validate_bandwidth(h: float) -> float:
    h = float(h)
    if not (np.isfinite(h) and h > 0.0):
        raise DataValidationError(f"bandwidth must be a positive real, got {h}")
    return h


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """One study's design matrix and responses.

    Arguments
    ---------
    X : (n, p) matrix of covariates, one observation per row.

    y : length-n vector of responses.

    site_id : integer study label; 0 is the target, 1..K are sources.

    row_sites : optional length-n per-row site labels.  Filled by
        :func:`pool_datasets` so a pooled dataset can be split back into
        its constituent studies; ``None`` means all rows belong to
        ``site_id``.
    """

    X: np.ndarray
    y: np.ndarray
    site_id: int = TARGET_SITE
    row_sites: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2:
            raise DataValidationError(f"X must be 2-d, got shape {X.shape}")
        if y.ndim != 1:
            raise DataValidationError(f"y must be 1-d, got shape {y.shape}")
        n, p = X.shape
        if n < 1 or p < 1:
            raise DataValidationError(f"need n >= 1 and p >= 1, got X of shape {X.shape}")
        if len(y) != n:
            raise DimensionMismatchError(f"X has {n} rows but y has {len(y)} entries")
        if not np.all(np.isfinite(X)):
            raise DataValidationError("X contains non-finite entries")
        if not np.all(np.isfinite(y)):
            raise DataValidationError("y contains non-finite entries")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "site_id", int(self.site_id))
        if self.row_sites is not None:
            rs = np.ascontiguousarray(self.row_sites, dtype=np.int64)
            if rs.shape != (n,):
                raise DimensionMismatchError("row_sites must have one label per row")
            rs.flags.writeable = False
            object.__setattr__(self, "row_sites", rs)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        """Row-subset keeping the site label (used for CV folds and splits)."""
        idx = np.asarray(idx)
        rs = None if self.row_sites is None else self.row_sites[idx]
        return Dataset(self.X[idx], self.y[idx], self.site_id, rs)


@dataclass(frozen=True)
class CoefVector:
    """Intercept plus slope vector of a linear quantile model."""

    intercept: float
    slopes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        slopes = np.asarray(self.slopes, dtype=np.float64)
        if slopes.ndim != 1:
            raise DataValidationError(f"slopes must be 1-d, got shape {slopes.shape}")
        if not np.isfinite(self.intercept) or not np.all(np.isfinite(slopes)):
            raise DataValidationError("coefficients must be finite")
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "slopes", _readonly(slopes))

    @property
    def p(self) -> int:
        return len(self.slopes)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.p:
            raise DimensionMismatchError(
                f"model has p={self.p} but X has {X.shape[1]} columns"
            )
        return self.intercept + X @ self.slopes

    def to_array(self) -> np.ndarray:
        """Packed representation [intercept, slopes...] used by the solver."""
        return np.concatenate(([self.intercept], self.slopes))

    @staticmethod
    def from_array(w: np.ndarray) -> "CoefVector":
        w = np.asarray(w, dtype=np.float64)
        return CoefVector(w[0], w[1:])

    def __add__(self, other: "CoefVector") -> "CoefVector":
        if self.p != other.p:
            raise DimensionMismatchError("cannot add coefficient vectors of different p")
        return CoefVector(self.intercept + other.intercept, self.slopes + other.slopes)


def check_loss(r, tau: float):
    """Asymmetric absolute (pinball) loss r * (tau - 1{r <= 0}).

    Accepts scalars or arrays; nonnegative, piecewise linear with slope
    tau for positive residuals and tau - 1 for negative ones.
    """
    r = np.asarray(r, dtype=np.float64)
    out = r * (tau - (r <= 0)) + 0.0  # + 0.0 normalizes -0.0 at r = 0
    return float(out) if out.ndim == 0 else out


def empirical_check_loss(w: CoefVector, data: Dataset, tau: float) -> float:
    """Mean check loss of ``w`` on ``data``; the intercept enters the predictor."""
    validate_quantile_level(tau)
    res = data.y - w.predict(data.X)
    return float(np.mean(check_loss(res, tau)))


def pool_datasets(datasets: list[Dataset]) -> Dataset:
    """Row-concatenate studies: sources in ascending site_id, target last.

    Per-observation weight is uniform, which realizes the sample-size
    weighting of the pooled estimand implicitly.  The result carries
    ``row_sites`` so :func:`split_by_site` can undo the pooling.
    """
    if not datasets:
        raise DataValidationError("cannot pool an empty list of datasets")
    p = datasets[0].p
    for d in datasets[1:]:
        if d.p != p:
            raise DimensionMismatchError(
                f"cannot pool datasets with p={p} and p={d.p}"
            )
    if len(datasets) == 1:
        return datasets[0]
    ordered = sorted(datasets, key=lambda d: (d.site_id == TARGET_SITE, d.site_id))
    X = np.vstack([d.X for d in ordered])
    y = np.concatenate([d.y for d in ordered])
    sites = np.concatenate(
        [
            d.row_sites if d.row_sites is not None else np.full(d.n, d.site_id, np.int64)
            for d in ordered
        ]
    )
    return Dataset(X, y, site_id=ordered[-1].site_id, row_sites=sites)


def split_by_site(pooled: Dataset) -> list[Dataset]:
    """Invert :func:`pool_datasets`, returning one dataset per site label.

    Row order within each site is preserved; datasets come back in pooled
    order (first appearance of each label).
    """
    labels = pooled.row_sites
    if labels is None:
        return [pooled]
    seen = list(dict.fromkeys(labels.tolist()))
    out = []
    for sid in seen:
        mask = labels == sid
        out.append(Dataset(pooled.X[mask], pooled.y[mask], site_id=sid))
    return out
