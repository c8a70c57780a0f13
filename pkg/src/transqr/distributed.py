"""Communication-efficient distributed transferring step over simulated sites.

Sites hold their rows privately; only three message kinds cross the site
boundary, all through one byte-counted codec: the pilot subsample, model
broadcasts, and per-round gradient sums.  The coordinator is co-located
with the target site, so the debiasing step runs on local target rows
without any wire traffic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CoefVector, Dataset, DimensionMismatchError, pool_datasets
from .selection import CvConfig, cv_select, default_bandwidth
from .smoothing import Kernel, _packed_design, kernel_cdf
from .solver import FitConfig, SqrFit, _cold_start, _lamm
from .transfer import TransferEstimate, TransferParams, _derive_seed, _fit_step

MSG_GRAD = 1
MSG_PILOT = 2
MSG_MODEL = 3

_HEADER = struct.Struct("<BQ")


def encode_message(tag: int, payload: np.ndarray) -> bytes:
    """tag byte, then payload length, then little-endian float64 array."""
    flat = np.ascontiguousarray(payload, dtype="<f8").ravel()
    return _HEADER.pack(tag, flat.size) + flat.tobytes()


def decode_message(blob: bytes) -> tuple[int, np.ndarray]:
    tag, size = _HEADER.unpack_from(blob)
    payload = np.frombuffer(blob, dtype="<f8", count=size, offset=_HEADER.size)
    return tag, payload.copy()


@dataclass
class MessageLog:
    """Audit log of everything that crossed a site boundary."""

    records: list = field(default_factory=list)

    def record(self, site_id: int, tag: int, blob: bytes, direction: str):
        self.records.append((site_id, tag, len(blob), direction))

    def bytes_by_tag(self, tag: int) -> int:
        return sum(r[2] for r in self.records if r[1] == tag)

    def count_by_tag(self, tag: int) -> int:
        return sum(1 for r in self.records if r[1] == tag)


@dataclass(frozen=True)
class CommStats:
    """Per-site, per-round traffic plus the one-time pilot transfer."""

    bytes_sent: dict
    rounds: int
    pilot_bytes: int
    log: MessageLog


class SiteHandle:
    """A study's data held behind the message interface.

    Rows never leave the site except the pilot subsample; gradient and
    pilot requests return encoded messages so the log sees every byte.
    """

    def __init__(self, data: Dataset):
        self.data = data
        self.site_id = data.site_id
        self.n_k = data.n
        self.p = data.p
        self._Xa, self._y = _packed_design(data)

    def receive_model(self, blob: bytes) -> np.ndarray:
        tag, w = decode_message(blob)
        if tag != MSG_MODEL:
            raise ValueError(f"expected MODEL message, got tag {tag}")
        return w

    def gradient_message(self, w: np.ndarray, h: float, tau: float, kernel: Kernel) -> bytes:
        """Encode the local gradient SUM (coordinator divides by total n)."""
        weights = kernel_cdf(kernel, (self._Xa @ w - self._y) / h) - tau
        grad_sum = self._Xa.T @ weights
        return encode_message(MSG_GRAD, grad_sum)

    def pilot_message(self, idx: np.ndarray) -> bytes:
        """Serialize the selected rows as [x..., y] records."""
        rows = np.hstack([self.data.X[idx], self.data.y[idx, None]])
        return encode_message(MSG_PILOT, rows)


def local_gradient(
    site: SiteHandle, w: CoefVector, h: float, tau: float, kernel: Kernel
) -> tuple[np.ndarray, int]:
    """Site-local gradient sum and row count, bypassing the codec.

    The distributed driver uses the message path; this is the plain
    in-memory operation for direct use and testing.
    """
    if w.p != site.p:
        raise DimensionMismatchError(f"w has p={w.p} but site has p={site.p}")
    _, grad_sum = decode_message(site.gradient_message(w.to_array(), h, tau, kernel))
    return grad_sum, site.n_k


@dataclass(frozen=True)
class PilotSample:
    """Pooled pilot rows drawn once via a single multinomial allocation."""

    data: Dataset
    counts: dict
    rho0: float
    n_star: int


@dataclass(frozen=True)
class DistributedParams:
    """Settings for the distributed transferring step.

    Iterations default to ceil(log(total n / pilot n)) with floor 1; the
    per-round penalty interpolates geometrically from lambda_star down to
    lambda_w.  Unset lambda_w scales lambda_star by sqrt(n_star / n_total),
    matching the sqrt(log p / n) penalty order without moving non-pilot
    rows.  Bandwidths must satisfy h_w <= h_star.
    """

    rho0: float = 0.2
    T: int | None = None
    lambda_star: float | None = None
    lambda_w: float | None = None
    lambda_delta: float | None = None
    lambda_schedule: tuple | None = None
    h_star: float | None = None
    h_w: float | None = None
    h_delta: float | None = None
    tau: float = 0.5
    kernel: Kernel = Kernel.GAUSSIAN
    seed: int = 0
    cv: CvConfig = field(default_factory=CvConfig)
    tol: float = 1e-5
    max_iter: int = 5000

    def __post_init__(self):
        if not 0.0 < self.rho0 < 1.0:
            raise ValueError(f"rho0 must lie in (0, 1), got {self.rho0}")
        if self.T is not None and self.T < 1:
            raise ValueError(f"need T >= 1, got {self.T}")
        if self.h_star is not None and self.h_w is not None and not (self.h_w <= self.h_star):
            raise ValueError(f"need h_w <= h_star, got h_w={self.h_w}, h_star={self.h_star}")
        object.__setattr__(self, "kernel", Kernel(self.kernel))


def draw_pilot(
    sites: list[SiteHandle], rho0: float, seed: int, log: MessageLog | None = None
) -> PilotSample:
    """One multinomial draw of per-site pilot counts, then uniform subsamples.

    Counts exceeding a site's n_k are capped and the shortfall moves to the
    site with the most remaining capacity (deterministic tie-break on site
    order), preserving the total.
    """
    if not 0.0 < rho0 < 1.0:
        raise ValueError(f"rho0 must lie in (0, 1), got {rho0}")
    n_total = sum(s.n_k for s in sites)
    n_star = max(1, int(round(rho0 * n_total)))
    alpha = np.array([s.n_k / n_total for s in sites])
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    counts = rng.multinomial(n_star, alpha).astype(np.int64)

    caps = np.array([s.n_k for s in sites], dtype=np.int64)
    over = counts > caps
    if over.any():
        excess = int(np.sum(counts[over] - caps[over]))
        counts[over] = caps[over]
        while excess > 0:
            room = caps - counts
            k = int(np.argmax(room))
            take = min(excess, int(room[k]))
            counts[k] += take
            excess -= take

    pieces = []
    count_map = {}
    for s, c in zip(sites, counts):
        count_map[s.site_id] = int(c)
        if c == 0:
            continue
        idx = np.sort(rng.choice(s.n_k, size=int(c), replace=False))
        blob = s.pilot_message(idx)
        if log is not None:
            log.record(s.site_id, MSG_PILOT, blob, "to_coordinator")
        _, flat = decode_message(blob)
        rows = flat.reshape(int(c), s.p + 1)
        pieces.append(Dataset(rows[:, :-1], rows[:, -1], site_id=s.site_id))
    pooled = pool_datasets(pieces)
    return PilotSample(data=pooled, counts=count_map, rho0=rho0, n_star=n_star)


def surrogate_step(
    pilot: PilotSample,
    w_prev: CoefVector,
    global_grad: np.ndarray,
    pilot_grad: np.ndarray,
    lambda_t: float,
    h_star: float,
    tau: float,
    kernel: Kernel,
    tol: float = 1e-5,
    max_iter: int = 5000,
) -> CoefVector:
    """Minimize the shifted pilot loss plus the l1 penalty, from w_prev.

    The shift (pilot gradient minus full-data gradient, both at w_prev)
    folds into the solver as a linear term, so the surrogate's gradient at
    w_prev equals the full-data gradient there.
    """
    shift = np.asarray(pilot_grad, dtype=np.float64) - np.asarray(global_grad, dtype=np.float64)
    cfg = FitConfig(tau=tau, h=h_star, lam=lambda_t, kernel=kernel, tol=tol, max_iter=max_iter)
    Xa, y = _packed_design(pilot.data)
    fit = _lamm(Xa, y, cfg, w_prev.to_array(), shift=shift)
    return fit.coef


def _pilot_gradient(pilot: PilotSample, w: np.ndarray, h: float, tau: float, kernel: Kernel):
    Xa, y = _packed_design(pilot.data)
    weights = kernel_cdf(kernel, (Xa @ w - y) / h) - tau
    return Xa.T @ weights / len(y)


def distributed_oracle_trans_sqr(
    target_site: SiteHandle,
    source_sites: list[SiteHandle],
    params: DistributedParams,
) -> tuple[TransferEstimate, CommStats]:
    """Distributed transferring step plus the standard target debiasing.

    Protocol: draw the pilot, fit it at (lambda_star, h_star) for the
    initial iterate, then run T rounds of broadcast / gradient-gather /
    surrogate minimization.  Every site (target included) talks through
    the byte-counted codec; sites x T gradient messages of p+1 reals each.
    """
    sites = [target_site] + list(source_sites)
    p = target_site.p
    for s in sites:
        if s.p != p:
            raise DimensionMismatchError("sites disagree on p")
    n_total = sum(s.n_k for s in sites)
    log = MessageLog()

    pilot = draw_pilot(sites, params.rho0, params.seed, log)
    pilot_bytes = log.bytes_by_tag(MSG_PILOT)

    h_star = params.h_star
    if h_star is None:
        h_star = default_bandwidth(params.tau, pilot.n_star, p)
    h_w = params.h_w
    if h_w is None:
        h_w = min(default_bandwidth(params.tau, n_total, p), h_star)
    if not h_w <= h_star:
        raise ValueError(f"need h_w <= h_star, got h_w={h_w}, h_star={h_star}")

    cfg0 = FitConfig(tau=params.tau, h=h_star, lam=0.0, kernel=params.kernel,
                     tol=params.tol, max_iter=params.max_iter)
    lam_star = params.lambda_star
    if lam_star is None:
        cv = replace(params.cv, seed=_derive_seed(params.seed, 2))
        lam_star, _ = cv_select(pilot.data, cfg0, cv)
    lam_w = params.lambda_w
    if lam_w is None:
        lam_w = lam_star * np.sqrt(pilot.n_star / n_total)

    T = params.T
    if T is None:
        T = max(1, int(np.ceil(np.log(n_total / pilot.n_star))))
    if params.lambda_schedule is not None:
        if len(params.lambda_schedule) != T:
            raise ValueError(f"lambda schedule must have T={T} entries")
        schedule = [float(l) for l in params.lambda_schedule]
    elif lam_star <= 0 or lam_w <= 0:
        schedule = [lam_w] * T
    else:
        schedule = [float(lam_star * (lam_w / lam_star) ** (t / T)) for t in range(1, T + 1)]

    Xp, yp = _packed_design(pilot.data)
    w0_fit = _lamm(Xp, yp, replace(cfg0, lam=lam_star),
                   _cold_start(yp, p, params.tau))
    w = w0_fit.coef

    bytes_sent = {s.site_id: [] for s in sites}
    for t in range(1, T + 1):
        w_arr = w.to_array()
        model_blob = encode_message(MSG_MODEL, w_arr)
        grad_sum = np.zeros(p + 1)
        for s in sites:
            log.record(target_site.site_id, MSG_MODEL, model_blob, f"broadcast_round_{t}")
            w_local = s.receive_model(model_blob)
            blob = s.gradient_message(w_local, h_w, params.tau, params.kernel)
            log.record(s.site_id, MSG_GRAD, blob, f"gather_round_{t}")
            bytes_sent[s.site_id].append(len(blob))
            _, g = decode_message(blob)
            grad_sum += g
        global_grad = grad_sum / n_total
        pilot_grad = _pilot_gradient(pilot, w_arr, h_star, params.tau, params.kernel)
        w = surrogate_step(
            pilot, w, global_grad, pilot_grad, schedule[t - 1], h_star,
            params.tau, params.kernel, tol=params.tol, max_iter=params.max_iter,
        )

    # Debias on the full target, local to the coordinator's own site.
    h_d = params.h_delta
    if h_d is None:
        h_d = default_bandwidth(params.tau, target_site.n_k, p)
    tparams = TransferParams(
        tau=params.tau, kernel=params.kernel, seed=_derive_seed(params.seed, 3),
        cv=params.cv, tol=params.tol, max_iter=params.max_iter,
    )
    residual = Dataset(
        target_site.data.X,
        target_site.data.y - w.predict(target_site.data.X),
        site_id=target_site.site_id,
    )
    d_fit, lam_d, h_d = _fit_step(residual, tparams, params.lambda_delta, h_d, stream=1)
    delta = d_fit.coef

    estimate = TransferEstimate(
        w_hat=w,
        delta_hat=delta,
        beta_hat=w + delta,
        transferring_fit=w0_fit,
        debias_fit=d_fit,
        lambda_w=lam_w,
        lambda_delta=lam_d,
        h_w=h_w,
        h_delta=h_d,
    )
    stats = CommStats(
        bytes_sent=bytes_sent, rounds=T, pilot_bytes=pilot_bytes, log=log
    )
    return estimate, stats
