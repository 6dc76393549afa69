"""Discrete Radon transform (RING sinogram) of BEV grids.

Geometry, in pixel units with the origin at the grid centre (the sensor):

* pixel ``(r, c)`` has its centre at ``x = c + 0.5 - n/2``, ``y = r + 0.5 - n/2``
  and the image is the bilinear interpolant of the pixel values, zero outside;
* row ``i`` of a sinogram is the angle ``theta_i = 2*pi*i / n_theta``;
* column ``j`` is the line offset ``tau_j = -D/2 + j * D / n_tau`` with
  ``D = n * sqrt(2)`` the grid diagonal (column ``n_tau / 2`` is ``tau = 0`` for
  even ``n_tau``); tau is treated as periodic with period ``D``;
* an entry is the line integral along ``x cos(theta) + y sin(theta) = tau``
  averaged across the column with a Gaussian weight of ``STRIP_SIGMA``
  columns and multiplied by the column spacing, so each row sums to the
  image mass.  The Gaussian is what keeps the per-row DFT magnitudes stable
  under sub-column shifts.

Rotating the image counter-clockwise by ``m`` angular bins moves row ``i``
to row ``i + m`` (see :func:`circular_row_shift`); translating it by
``(dx, dy)`` pixels moves row ``i`` by ``dx cos(theta_i) + dy sin(theta_i)``
along tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .scan_ingest import BevGrid

DEFAULT_N_THETA = 120
DEFAULT_N_TAU = 120
# std-dev of the weight across each tau column, in columns
STRIP_SIGMA = 0.8
_KERNEL_SPAN = 4.0  # kernel support, in sigmas
_TABLE_STEP = 1.0 / 64.0  # footprint table spacing, pixels


@dataclass(frozen=True)
class Sinogram:
    """``data[i, j]`` is the strip mass at ``(theta_i, tau_j)``.

    ``resolution`` is the source grid's meters/pixel and ``grid_size`` its side
    in pixels; together they fix the metric tau spacing.
    """

    data: np.ndarray
    resolution: float = 1.0
    grid_size: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("sinogram data must be 2-D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_theta(self) -> int:
        return self.data.shape[0]

    @property
    def n_tau(self) -> int:
        return self.data.shape[1]

    @property
    def tau_step_px(self) -> float:
        return self.grid_size * math.sqrt(2.0) / self.n_tau

    @property
    def tau_step(self) -> float:
        """Column spacing in meters."""
        return self.tau_step_px * self.resolution

    @property
    def thetas(self) -> np.ndarray:
        return theta_samples(self.n_theta)

    def taus(self) -> np.ndarray:
        """Column offsets in meters."""
        return tau_samples_px(self.grid_size, self.n_tau) * self.resolution

    def with_data(self, data) -> "Sinogram":
        return Sinogram(data, self.resolution, self.grid_size)


def theta_samples(n_theta: int) -> np.ndarray:
    return 2.0 * math.pi * np.arange(n_theta) / n_theta


def tau_samples_px(grid_size: int, n_tau: int) -> np.ndarray:
    diag = grid_size * math.sqrt(2.0)
    return -diag / 2.0 + np.arange(n_tau) * (diag / n_tau)


def _check_dims(n_theta: int, n_tau: int) -> None:
    if n_theta < 4 or n_theta % 2:
        raise ValueError(f"n_theta must be even and >= 4, got {n_theta}")
    if n_tau < 2:
        raise ValueError(f"n_tau must be >= 2, got {n_tau}")


def _image_of(grid):
    if isinstance(grid, BevGrid):
        img, res = grid.occupancy, grid.resolution
    else:
        img, res = np.asarray(grid), 1.0
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"radon expects a square image, got {img.shape}")
    return img, res


def _sampled_tri(half_width: float, h: float) -> np.ndarray:
    """Unit-sum triangle of the given half width sampled at spacing ``h``."""
    m = int(math.floor(half_width / h))
    if m < 1:
        return np.ones(1)
    t = np.arange(-m, m + 1) * h
    w = np.clip(1.0 - np.abs(t) / half_width, 0.0, None)
    return w / w.sum()


@lru_cache(maxsize=16)
def footprint_tables(n_theta: int, dtau: float, sigma: float = STRIP_SIGMA):
    """Per-angle weight of a unit pixel on a column ``delta`` pixels away.

    The bilinear basis ``tri(x) tri(y)`` projects at angle ``theta`` onto the
    convolution of two triangles with half widths ``|cos|`` and ``|sin|``;
    that profile is convolved with the Gaussian column weight.  Returns
    ``(tables, half_extent, step)`` where ``tables[i, k]`` is the density at
    ``delta = -half_extent + k * step``.
    """
    h = _TABLE_STEP
    sig = sigma * dtau
    mg = int(math.ceil(_KERNEL_SPAN * sig / h))
    tg = np.arange(-mg, mg + 1) * h
    gauss = np.exp(-0.5 * (tg / sig) ** 2)
    gauss /= gauss.sum()
    half = mg + int(math.ceil(2.0 / h)) + 2
    size = 2 * half + 1
    tables = np.zeros((n_theta, size))
    for i, th in enumerate(theta_samples(n_theta)):
        prof = np.convolve(_sampled_tri(abs(math.cos(th)), h), _sampled_tri(abs(math.sin(th)), h))
        prof = np.convolve(prof, gauss)
        off = (size - prof.size) // 2
        tables[i, off:off + prof.size] = prof / h
    tables.setflags(write=False)
    return tables, half * h, h


def _splat(xs, ys, vals, n_theta: int, n_tau: int, diag: float) -> np.ndarray:
    dtau = diag / n_tau
    tables, half_extent, h = footprint_tables(n_theta, dtau)
    th = theta_samples(n_theta)[:, None]
    taup = xs[None, :] * np.cos(th) + ys[None, :] * np.sin(th)
    reach = int(math.ceil(half_extent / dtau))
    nearest = np.rint((taup + diag / 2.0) / dtau).astype(np.int64)
    rows = np.arange(n_theta)[:, None]
    out = np.zeros(n_theta * n_tau)
    last = tables.shape[1] - 2
    for k in range(-reach, reach + 1):
        j = nearest + k
        pos = ((-diag / 2.0 + j * dtau) - taup + half_extent) / h
        k0 = np.clip(np.floor(pos).astype(np.int64), 0, last)
        frac = np.clip(pos - k0, 0.0, 1.0)
        w = tables[rows, k0] * (1.0 - frac) + tables[rows, k0 + 1] * frac
        # spill past either end of the tau range wraps (tau has period diag)
        flat = rows * n_tau + np.mod(j, n_tau)
        out += np.bincount(flat.ravel(), weights=(w * (vals * dtau)[None, :]).ravel(),
                           minlength=n_theta * n_tau)
    return out.reshape(n_theta, n_tau)


def radon(grid, n_theta: int = DEFAULT_N_THETA, n_tau: int = DEFAULT_N_TAU) -> Sinogram:
    """RING of a BEV grid (or any square 2-D array).

    Each nonzero pixel's bilinear footprint is projected exactly onto every
    angle and spread over the tau columns, so the cost scales with the number
    of occupied cells and every row conserves the image mass.
    """
    img, res = _image_of(grid)
    _check_dims(n_theta, n_tau)
    n = img.shape[0]
    r, c = np.nonzero(img)
    if not r.size:
        return Sinogram(np.zeros((n_theta, n_tau)), res, n)
    vals = img[r, c].astype(np.float64)
    data = _splat(c + 0.5 - n / 2.0, r + 0.5 - n / 2.0, vals, n_theta, n_tau,
                  n * math.sqrt(2.0))
    return Sinogram(data, res, n)


def _bilinear_gather(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear image values at pixel-unit coordinates, zero outside."""
    n = img.shape[0]
    padded = np.zeros((n + 2, n + 2))
    padded[1:-1, 1:-1] = img
    # index into the zero-bordered copy; far-away samples clamp onto the border
    cf = np.clip(xs + n / 2.0 + 0.5, 0.0, n + 1.0)
    rf = np.clip(ys + n / 2.0 + 0.5, 0.0, n + 1.0)
    c0 = np.minimum(np.floor(cf).astype(np.int64), n)
    r0 = np.minimum(np.floor(rf).astype(np.int64), n)
    fc = cf - c0
    fr = rf - r0
    return (padded[r0, c0] * (1 - fr) * (1 - fc) + padded[r0, c0 + 1] * (1 - fr) * fc
            + padded[r0 + 1, c0] * fr * (1 - fc) + padded[r0 + 1, c0 + 1] * fr * fc)


def radon_oracle(grid, n_theta: int, n_tau: int, samples_per_line: int | None = None,
                 lines_per_bin: int = 16) -> Sinogram:
    """Reference Radon transform by direct quadrature of the defining integral.

    Every entry is a midpoint Riemann sum of ``samples_per_line`` bilinear
    image samples along each of ``lines_per_bin`` parallel lines across the
    column, combined with the same Gaussian column weight :func:`radon` uses.
    Shares no code with the fast path; slow, for verification only.
    """
    img, res = _image_of(grid)
    img = img.astype(np.float64)
    n = img.shape[0]
    if samples_per_line is None:
        samples_per_line = 4 * n
    if samples_per_line < 2 * n:
        raise ValueError("samples_per_line must be at least twice the grid side")
    _check_dims(n_theta, n_tau)
    out = np.zeros((n_theta, n_tau))
    if not img.any():
        return Sinogram(out, res, n)
    diag = n * math.sqrt(2.0)
    dtau = diag / n_tau
    ds = diag / samples_per_line
    t = -diag / 2.0 + (np.arange(samples_per_line) + 0.5) * ds
    sig = STRIP_SIGMA * dtau
    offs = ((np.arange(lines_per_bin) + 0.5) / lines_per_bin - 0.5) * 2 * _KERNEL_SPAN * sig
    wts = np.exp(-0.5 * (offs / sig) ** 2)
    wts /= wts.sum()
    cols = np.arange(n_tau)[:, None]
    for i in range(n_theta):
        th = 2.0 * math.pi * i / n_theta
        c, s = math.cos(th), math.sin(th)
        for off, w in zip(offs, wts):
            tau = -diag / 2.0 + cols * dtau + off
            tau = np.mod(tau + diag / 2.0, diag) - diag / 2.0
            out[i] += w * _bilinear_gather(img, tau * c - t * s, tau * s + t * c).sum(axis=1)
    out *= ds * dtau
    return Sinogram(out, res, n)


def circular_row_shift(s: Sinogram, rows: int) -> Sinogram:
    """Output row ``i`` is input row ``(i - rows) mod n_theta``."""
    return s.with_data(np.roll(s.data, int(rows), axis=0))


def rotate_image(img, angle: float, order: int = 1) -> np.ndarray:
    """Rotate an image counter-clockwise by ``angle`` radians about the grid centre.

    Uses the same pixel-centre geometry as :func:`radon`; samples falling
    outside the source are zero.
    """
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    centre = np.arange(n) + 0.5 - n / 2.0
    yy, xx = np.meshgrid(centre, centre, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    # inverse-map each output pixel back into the source image
    xs = c * xx + s * yy
    ys = -s * xx + c * yy
    coords = np.stack([ys + n / 2.0 - 0.5, xs + n / 2.0 - 0.5])
    return ndimage.map_coordinates(img, coords, order=order, mode="constant", cval=0.0)
