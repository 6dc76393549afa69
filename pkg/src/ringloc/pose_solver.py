"""Relative orientation and translation from RING / TI-RING pairs.

Conventions: ``alpha`` is the yaw of the query sensor expressed in the map
sensor's frame and ``(dx, dy)`` its position there, so the global query pose
is ``T_D.compose(Se2Pose(dx, dy, alpha))``.  A query yawed by ``+alpha`` sees
the scene turned by ``-alpha``, so the TI-RING alignment shift ``b`` maps to
``alpha = -b * 2*pi / n_theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .descriptor import TiRing, similarity, ti_ring
from .radon_core import Sinogram, circular_row_shift, radon, theta_samples
from .scan_ingest import PointCloud, Se2Pose, remove_ground, to_bev, wrap_angle

MIN_ROW_PEAK = 0.1
MAX_CONDITION = 1e8


class DegenerateGeometryError(RuntimeError):
    """Too few usable rows, or their directions do not pin down a translation.

    When raised from :func:`localize`, ``entry_id`` and ``estimate`` carry the
    retrieval result that was obtained before the translation solve failed.
    """

    def __init__(self, msg, entry_id=None, estimate=None):
        super().__init__(msg)
        self.entry_id = entry_id
        self.estimate = estimate


@dataclass(frozen=True)
class RowShifts:
    """Per-row tau offsets in meters; NaN marks rows excluded from the solve."""

    meters: np.ndarray
    peaks: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.meters)


@dataclass(frozen=True)
class PoseEstimate:
    alpha: float
    dx: float
    dy: float
    similarity: float
    residual: float
    row_shifts: np.ndarray = field(repr=False)
    shift_bins: int = 0

    @property
    def relative(self) -> Se2Pose:
        return Se2Pose(self.dx, self.dy, self.alpha)


def shift_to_angle(shift: int, n_theta: int) -> float:
    return float(wrap_angle(-2.0 * math.pi * shift / n_theta))


def estimate_orientation(q: TiRing, d: TiRing, normalize: bool = True) -> tuple[float, float]:
    """Exhaustive circular correlation over every theta shift.

    Returns ``(alpha, score)``.  TI-RING rows at ``theta`` and ``theta + pi``
    carry identical magnitudes, so ``alpha`` is only determined modulo pi
    here; :func:`estimate_pose` resolves the half turn on the raw sinograms.
    """
    res = similarity(q, d, normalize=normalize)
    return shift_to_angle(res.best_shift, q.n_theta), res.score


def _circular_xcorr_rows(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """``c[i, k] = sum_j q[i, j] * d[i, j + k]`` (circular in j)."""
    n = q.shape[1]
    return np.fft.irfft(np.conj(np.fft.rfft(q, axis=1)) * np.fft.rfft(d, axis=1), n=n, axis=1)


def estimate_row_shifts(q_sino: Sinogram, d_sino_aligned: Sinogram,
                        min_peak: float = MIN_ROW_PEAK) -> RowShifts:
    """Per-row tau offset ``s_i`` with ``d_i(tau) ~ q_i(tau - s_i)``, in meters.

    The integer lag comes from the circular cross-correlation maximum (equal
    peaks resolve to the smallest |lag|) and is refined with a 3-point
    parabola.  Rows with no energy, or whose normalized peak is below
    ``min_peak``, come back as NaN.
    """
    q, d = q_sino.data, d_sino_aligned.data
    if q.shape != d.shape:
        raise ValueError(f"sinogram shapes differ: {q.shape} vs {d.shape}")
    n_theta, n = q.shape
    corr = _circular_xcorr_rows(q, d)
    energy = np.linalg.norm(q, axis=1) * np.linalg.norm(d, axis=1)
    lags = np.arange(n)
    signed = np.where(lags > n // 2, lags - n, lags)
    shifts = np.full(n_theta, np.nan)
    peaks = np.zeros(n_theta)
    for i in range(n_theta):
        if energy[i] <= 0:
            continue
        c = corr[i]
        top = c.max()
        ties = np.flatnonzero(c >= top - 1e-12 * abs(top))
        k = int(ties[np.argmin(np.abs(signed[ties]))])
        peaks[i] = top / energy[i]
        if peaks[i] < min_peak:
            continue
        y0, ym, yp = c[k], c[(k - 1) % n], c[(k + 1) % n]
        denom = ym - 2.0 * y0 + yp
        frac = 0.5 * (ym - yp) / denom if denom < 0 else 0.0
        shifts[i] = (signed[k] + float(np.clip(frac, -0.5, 0.5))) * q_sino.tau_step
    return RowShifts(shifts, peaks)


def solve_translation(row_shifts, alpha: float, thetas=None, weights=None):
    """Least-squares ``(dx, dy)`` from ``dx cos(t_i + alpha) + dy sin(t_i + alpha) = s_i``.

    Non-finite shifts are skipped.  Solved through the 2x2 normal equations;
    returns ``(dx, dy, rms_residual)``.
    """
    s = np.asarray(getattr(row_shifts, "meters", row_shifts), dtype=np.float64)
    if thetas is None:
        thetas = theta_samples(s.size)
    ok = np.isfinite(s)
    if np.count_nonzero(ok) < 2:
        raise DegenerateGeometryError(f"only {np.count_nonzero(ok)} valid rows; need 2")
    ang = np.asarray(thetas, dtype=np.float64)[ok] + alpha
    a = np.column_stack([np.cos(ang), np.sin(ang)])
    w = np.ones(a.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)[ok]
    normal = a.T @ (a * w[:, None])
    rhs = a.T @ (s[ok] * w)
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateGeometryError(f"row directions are degenerate (condition {cond:.3g})")
    (n11, n12), (_, n22) = normal
    det = n11 * n22 - n12 * n12
    dx = (n22 * rhs[0] - n12 * rhs[1]) / det
    dy = (n11 * rhs[1] - n12 * rhs[0]) / det
    resid = a @ np.array([dx, dy]) - s[ok]
    return float(dx), float(dy), float(np.sqrt(np.mean(resid ** 2)))


def estimate_pose(q_sino: Sinogram, d_sino: Sinogram, q_ti: TiRing | None = None,
                  d_ti: TiRing | None = None, normalize: bool = True,
                  weighted: bool = False, resolve_half_turn: bool = True) -> PoseEstimate:
    """Orientation from TI-RING, then translation from the compensated RINGs.

    Both the TI-RING optimum and its half-turn twin are tried: each compensates
    the map sinogram and the one whose rows correlate better with the query
    (mean normalized row peak) wins.
    """
    q_ti = ti_ring(q_sino) if q_ti is None else q_ti
    d_ti = ti_ring(d_sino) if d_ti is None else d_ti
    sim = similarity(q_ti, d_ti, normalize=normalize)
    n_theta = q_sino.n_theta
    candidates = [sim.best_shift]
    if resolve_half_turn:
        candidates.append((sim.best_shift + n_theta // 2) % n_theta)
    best = None
    for b in candidates:
        rs = estimate_row_shifts(q_sino, circular_row_shift(d_sino, b))
        quality = float(np.mean(rs.peaks))
        if best is None or quality > best[0]:
            best = (quality, b, rs)
    _, b, rs = best
    alpha = shift_to_angle(b, n_theta)
    weights = rs.peaks if weighted else None
    dx, dy, resid = solve_translation(rs, alpha, q_sino.thetas, weights)
    return PoseEstimate(alpha, dx, dy, sim.score, resid, rs.meters, b)


def scan_to_sinogram(cloud: PointCloud, config) -> Sinogram:
    grid = to_bev(remove_ground(cloud, config.z_min), config.bev)
    return radon(grid, config.n_theta, config.n_tau)


def localize(query: PointCloud, db, config=None):
    """Place recognition plus pose estimation against a :class:`PlaceDatabase`.

    Returns ``(entry_id, estimate, global_pose)``.  A degenerate translation
    solve raises :class:`DegenerateGeometryError` carrying the retrieved id.
    """
    from .config import Config

    config = db.pipeline_config(config or Config())
    if len(db) == 0:
        raise ValueError("place database is empty")
    sino = scan_to_sinogram(query, config)
    return localize_sinogram(sino, db, config)


def localize_sinogram(sino: Sinogram, db, config):
    q_ti = ti_ring(sino)
    entry_id, _ = db.query_topk(q_ti, 1, normalize=config.normalize)[0]
    entry = db[entry_id]
    try:
        est = estimate_pose(sino, entry.sinogram, q_ti, entry.ti_ring,
                            normalize=config.normalize, weighted=config.weighted)
    except DegenerateGeometryError as exc:
        raise DegenerateGeometryError(str(exc), entry_id=entry_id) from exc
    return entry_id, est, entry.pose.compose(est.relative)
