"""Translation-invariant TI-RING descriptor and the rotation-invariant score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .radon_core import Sinogram

# profile values within this fraction of the maximum count as ties
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class TiRing:
    """Per-row DFT magnitudes of a sinogram, shape (n_theta, n_tau//2 + 1)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("TI-RING data must be 2-D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "norm", float(np.linalg.norm(data)))

    @property
    def n_theta(self) -> int:
        return self.data.shape[0]

    @property
    def n_omega(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SimilarityResult:
    score: float
    best_shift: int
    correlation_profile: np.ndarray


def ti_ring(s: Sinogram) -> TiRing:
    """Magnitude spectrum of each sinogram row (DFT length = n_tau, no padding)."""
    return TiRing(np.abs(np.fft.rfft(s.data, axis=1)))


def _as_matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def first_argmax(values: np.ndarray, rtol: float = TIE_RTOL) -> int:
    """Index of the maximum; near-equal maxima resolve to the smallest index."""
    top = values.max()
    tol = rtol * max(abs(top), np.finfo(float).tiny)
    return int(np.flatnonzero(values >= top - tol)[0])


def correlation_profile(q, d, normalize: bool = True) -> np.ndarray:
    """``profile[b] = sum_i sum_w q[i, w] * d[i - b, w]`` for every shift ``b``.

    Computed per frequency column with FFTs along the theta axis.  ``b`` is the
    number of rows ``d`` must be rolled forward (towards larger theta) to
    line up with ``q``.
    """
    qm, dm = _as_matrix(q), _as_matrix(d)
    if qm.shape != dm.shape:
        raise ValueError(f"descriptor shapes differ: {qm.shape} vs {dm.shape}")
    if normalize:
        # scale to unit norm first so tiny inputs cannot underflow the product
        nq, nd = np.linalg.norm(qm), np.linalg.norm(dm)
        if nq == 0 or nd == 0:
            return np.zeros(qm.shape[0])
        qm, dm = qm / nq, dm / nd
    cross = np.fft.fft(qm, axis=0) * np.conj(np.fft.fft(dm, axis=0))
    return np.fft.ifft(cross.sum(axis=1)).real


def similarity(q, d, normalize: bool = True) -> SimilarityResult:
    """Max circular cross-correlation over theta shifts.

    With ``normalize`` the profile is divided by ``|q| |d|`` so scores lie in
    [0, 1] for nonnegative descriptors; without it the raw inner products are
    returned.  Also accepts raw sinograms (the RING-only retrieval variant).
    """
    profile = correlation_profile(q, d, normalize)
    b = first_argmax(profile)
    return SimilarityResult(float(profile[b]), b, profile)
