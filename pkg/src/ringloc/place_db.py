"""Map-scan database: descriptors + poses, brute-force top-k retrieval, RINGDB1 files.

File layout (all little-endian)::

    magic        8 bytes   b"RINGDB1\\0"
    n_theta      u32
    n_tau        u32
    n_omega      u32
    grid_size    u32
    count        u64
    resolution   f64       meters / pixel
    count x entry:
        id           u64
        x, y, yaw    3 x f64
        label_len    u32, then label_len bytes of UTF-8
        ti_ring      n_theta * n_omega f32, row-major
        sinogram     n_theta * n_tau f32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .descriptor import SimilarityResult, TiRing, first_argmax, ti_ring
from .radon_core import Sinogram
from .scan_ingest import Se2Pose

MAGIC = b"RINGDB1\x00"
_HEADER = struct.Struct("<IIIIQd")
_ENTRY_HEAD = struct.Struct("<Qddd")
_U32 = struct.Struct("<I")


class DatabaseError(ValueError):
    """Bad insert or malformed database file; ``reason`` names the failure."""

    def __init__(self, reason: str, msg: str):
        super().__init__(f"{reason}: {msg}")
        self.reason = reason


@dataclass(frozen=True)
class MapEntry:
    id: int
    pose: Se2Pose
    ti_ring: TiRing
    sinogram: Sinogram
    source_label: str = ""

    @classmethod
    def from_sinogram(cls, id: int, pose: Se2Pose, sinogram: Sinogram, label: str = ""):
        return cls(int(id), pose, ti_ring(sinogram), sinogram, label)


class PlaceDatabase:
    """Ordered map entries built with one grid / sinogram configuration."""

    def __init__(self, n_theta: int, n_tau: int, grid_size: int, resolution: float):
        self.n_theta = int(n_theta)
        self.n_tau = int(n_tau)
        self.n_omega = self.n_tau // 2 + 1
        self.grid_size = int(grid_size)
        self.resolution = float(resolution)
        self.entries: list[MapEntry] = []
        self._index: dict[int, int] = {}
        self._spectra: dict[tuple, np.ndarray] = {}

    @classmethod
    def for_config(cls, config) -> "PlaceDatabase":
        return cls(config.n_theta, config.n_tau, config.grid_size, config.resolution)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, entry_id: int) -> MapEntry:
        return self.entries[self._index[entry_id]]

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def pipeline_config(self, config):
        """``config`` with the grid and sinogram dimensions this map was built with."""
        return replace(config, roi_side=self.resolution * self.grid_size,
                       grid_size=self.grid_size, n_theta=self.n_theta, n_tau=self.n_tau)

    def insert(self, entry: MapEntry) -> "PlaceDatabase":
        if entry.id in self._index:
            raise DatabaseError("duplicate-id", f"entry id {entry.id} already present")
        if entry.id < 0:
            raise DatabaseError("bad-id", "entry ids must be non-negative")
        s = entry.sinogram
        if s.data.shape != (self.n_theta, self.n_tau):
            raise DatabaseError(
                "dimension-mismatch",
                f"sinogram {s.data.shape} != ({self.n_theta}, {self.n_tau})")
        if entry.ti_ring.data.shape != (self.n_theta, self.n_omega):
            raise DatabaseError(
                "dimension-mismatch",
                f"TI-RING {entry.ti_ring.data.shape} != ({self.n_theta}, {self.n_omega})")
        if s.grid_size != self.grid_size or not np.isclose(s.resolution, self.resolution):
            raise DatabaseError("dimension-mismatch", "sinogram built from a different grid")
        self._index[entry.id] = len(self.entries)
        self.entries.append(entry)
        self._spectra.clear()
        return self

    def _spectrum(self, representation: str, normalize: bool) -> np.ndarray:
        key = (representation, normalize)
        spectrum = self._spectra.get(key)
        if spectrum is None:
            if representation == "ti_ring":
                stack = np.stack([e.ti_ring.data for e in self.entries])
            elif representation == "ring":
                stack = np.stack([e.sinogram.data for e in self.entries])
            else:
                raise ValueError(f"unknown representation {representation!r}")
            if normalize:
                norms = np.linalg.norm(stack.reshape(len(stack), -1), axis=1)
                stack = np.divide(stack, norms[:, None, None], out=np.zeros_like(stack),
                                  where=norms[:, None, None] > 0)
            spectrum = np.conj(np.fft.fft(stack, axis=1))
            self._spectra[key] = spectrum
        return spectrum

    def score_all(self, q, normalize: bool = True, representation: str = "ti_ring") -> np.ndarray:
        """Correlation profiles of ``q`` against every entry, shape (len, n_theta)."""
        if not self.entries:
            raise DatabaseError("empty", "database has no entries")
        qm = np.asarray(getattr(q, "data", q), dtype=np.float64)
        conj_stack = self._spectrum(representation, normalize)
        if qm.shape != conj_stack.shape[1:]:
            raise DatabaseError("dimension-mismatch",
                                f"query {qm.shape} vs database {conj_stack.shape[1:]}")
        if normalize:
            nq = np.linalg.norm(qm)
            qm = qm / nq if nq > 0 else np.zeros_like(qm)
        cross = (np.fft.fft(qm, axis=0)[None] * conj_stack).sum(axis=2)
        return np.fft.ifft(cross, axis=1).real

    def query_topk(self, q, k: int = 1, normalize: bool = True,
                   representation: str = "ti_ring") -> list[tuple[int, SimilarityResult]]:
        """Entries ranked by descending score; equal scores rank by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        profiles = self.score_all(q, normalize, representation)
        results = []
        for entry, prof in zip(self.entries, profiles):
            b = first_argmax(prof)
            results.append((entry.id, SimilarityResult(float(prof[b]), b, prof)))
        results.sort(key=lambda item: (-item[1].score, item[0]))
        return results[:k]

    def save(self, path) -> None:
        out = bytearray(MAGIC)
        out += _HEADER.pack(self.n_theta, self.n_tau, self.n_omega, self.grid_size,
                            len(self.entries), self.resolution)
        for e in self.entries:
            label = e.source_label.encode("utf-8")
            out += _ENTRY_HEAD.pack(e.id, e.pose.x, e.pose.y, e.pose.yaw)
            out += _U32.pack(len(label)) + label
            out += e.ti_ring.data.astype("<f4").tobytes()
            out += e.sinogram.data.astype("<f4").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "PlaceDatabase":
        buf = memoryview(Path(path).read_bytes())
        if len(buf) < len(MAGIC):
            raise DatabaseError("truncated", f"{path}: shorter than the magic bytes")
        magic = bytes(buf[:len(MAGIC)])
        if magic != MAGIC:
            if magic[:6] == MAGIC[:6]:
                raise DatabaseError("version", f"{path}: unsupported version {magic[6:7]!r}")
            raise DatabaseError("magic", f"{path}: not a RINGDB file (magic {magic!r})")
        pos = len(MAGIC)

        def take(nbytes: int, what: str):
            nonlocal pos
            if pos + nbytes > len(buf):
                raise DatabaseError("truncated", f"{path}: file ends inside {what} at byte {pos}")
            chunk = buf[pos:pos + nbytes]
            pos += nbytes
            return chunk

        n_theta, n_tau, n_omega, grid_size, count, res = _HEADER.unpack(take(_HEADER.size, "header"))
        if n_omega != n_tau // 2 + 1:
            raise DatabaseError("header", f"{path}: n_omega {n_omega} inconsistent with n_tau {n_tau}")
        db = cls(n_theta, n_tau, grid_size, res)
        for k in range(count):
            eid, x, y, yaw = _ENTRY_HEAD.unpack(take(_ENTRY_HEAD.size, f"entry {k}"))
            (nlab,) = _U32.unpack(take(_U32.size, f"entry {k} label length"))
            label = bytes(take(nlab, f"entry {k} label")).decode("utf-8")
            ti = np.frombuffer(take(4 * n_theta * n_omega, f"entry {k} TI-RING"), dtype="<f4")
            sino = np.frombuffer(take(4 * n_theta * n_tau, f"entry {k} sinogram"), dtype="<f4")
            db.insert(MapEntry(
                eid,
                _exact_pose(x, y, yaw),
                TiRing(ti.reshape(n_theta, n_omega).astype(np.float64)),
                Sinogram(sino.reshape(n_theta, n_tau).astype(np.float64), res, grid_size),
                label,
            ))
        if pos != len(buf):
            raise DatabaseError("trailing-data", f"{path}: {len(buf) - pos} unexpected bytes")
        return db


def _exact_pose(x: float, y: float, yaw: float) -> Se2Pose:
    # stored yaw is already wrapped; re-wrapping could perturb the last bit
    pose = Se2Pose(x, y, 0.0)
    object.__setattr__(pose, "yaw", float(yaw))
    return pose
