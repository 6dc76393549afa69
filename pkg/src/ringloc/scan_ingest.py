"""Point-cloud / pose file ingestion and binary BEV rasterization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_ROI_SIDE = 140.0
DEFAULT_GRID_SIZE = 120
DEFAULT_Z_MIN = -1.5

FORMATS = ("binary-xyzf32", "ascii-xyz")
_RECORD = np.dtype("<f4")
_RECORD_BYTES = 16


class ScanFormatError(ValueError):
    """Raised when a scan or pose file cannot be parsed."""


def wrap_angle(a):
    """Wrap an angle (or array of angles) to [-pi, pi)."""
    return (np.asarray(a, dtype=float) + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Se2Pose:
    """Planar pose; ``yaw`` is normalized to [-pi, pi) on construction."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def compose(self, other: "Se2Pose") -> "Se2Pose":
        """Return ``self * other`` (``other`` expressed in this pose's frame)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Se2Pose(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Se2Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Se2Pose(-c * self.x - s * self.y, s * self.x - c * self.y, -self.yaw)

    def between(self, other: "Se2Pose") -> "Se2Pose":
        """Pose of ``other`` expressed in the frame of ``self``."""
        return self.inverse().compose(other)

    def distance(self, other: "Se2Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class PointCloud:
    """Points in the sensor frame, shape (N, 3), meters.

    ``dropped`` counts non-finite records removed at load time.
    """

    points: np.ndarray
    intensity: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class BevConfig:
    roi_side: float = DEFAULT_ROI_SIDE
    grid_size: int = DEFAULT_GRID_SIZE

    def __post_init__(self):
        if not self.roi_side > 0:
            raise ValueError(f"roi_side must be > 0, got {self.roi_side}")
        if int(self.grid_size) < 2:
            raise ValueError(f"grid_size must be >= 2, got {self.grid_size}")

    @property
    def resolution(self) -> float:
        return self.roi_side / self.grid_size


@dataclass(frozen=True)
class BevGrid:
    """Square binary occupancy raster centred on the sensor.

    ``occupancy[i, j]`` covers x in ``[-L/2 + j*res, -L/2 + (j+1)*res)`` and
    y in ``[-L/2 + i*res, -L/2 + (i+1)*res)`` where ``L = size * res``.
    """

    occupancy: np.ndarray
    resolution: float

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 2 or occ.shape[0] != occ.shape[1]:
            raise ValueError(f"BEV grid must be square, got shape {occ.shape}")
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        if not np.all((occ == 0) | (occ == 1)):
            raise ValueError("occupancy must be binary")
        occ = occ.astype(np.uint8)
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def size(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.size

    @property
    def height(self) -> int:
        return self.size

    @property
    def roi_side(self) -> float:
        return self.size * self.resolution

    def __eq__(self, other):
        if not isinstance(other, BevGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(
            self.occupancy, other.occupancy
        )


def load_point_cloud(path, format: str = "binary-xyzf32") -> PointCloud:
    """Load a scan file.

    ``binary-xyzf32`` is little-endian float32 ``(x, y, z, intensity)``
    records of 16 bytes; ``ascii-xyz`` is one ``x y z`` triple per line
    (extra columns are read as intensity, blank lines and ``#`` comments are
    skipped). Non-finite points are dropped and counted in ``dropped``.
    """
    path = Path(path)
    if format == "binary-xyzf32":
        raw = path.read_bytes()
        if len(raw) % _RECORD_BYTES:
            whole = len(raw) - len(raw) % _RECORD_BYTES
            raise ScanFormatError(
                f"{path}: truncated binary record at byte offset {whole} "
                f"(file size {len(raw)} is not a multiple of {_RECORD_BYTES})"
            )
        rec = np.frombuffer(raw, dtype=_RECORD).reshape(-1, 4).astype(np.float64)
        xyz, inten = rec[:, :3], rec[:, 3]
    elif format == "ascii-xyz":
        rows, inten_rows = [], []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                tokens = line.replace(",", " ").split()
                if len(tokens) < 3:
                    raise ScanFormatError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
                try:
                    vals = [float(t) for t in tokens[:4]]
                except ValueError as exc:
                    raise ScanFormatError(f"{path}:{lineno}: non-numeric token ({exc})") from None
                rows.append(vals[:3])
                inten_rows.append(vals[3] if len(vals) > 3 else 0.0)
        xyz = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(inten_rows, dtype=np.float64)
    else:
        raise ValueError(f"unknown point-cloud format {format!r}; expected one of {FORMATS}")

    finite = np.all(np.isfinite(xyz), axis=1)
    dropped = int(np.count_nonzero(~finite))
    if dropped:
        log.info("%s: dropped %d non-finite points", path, dropped)
    return PointCloud(xyz[finite], inten[finite], dropped)


def save_point_cloud(cloud: PointCloud, path, format: str = "binary-xyzf32") -> None:
    path = Path(path)
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    if format == "binary-xyzf32":
        rec = np.empty((len(cloud), 4), dtype=_RECORD)
        rec[:, :3] = cloud.points
        rec[:, 3] = inten
        path.write_bytes(rec.tobytes())
    elif format == "ascii-xyz":
        with path.open("w", encoding="utf-8") as fh:
            for x, y, z in cloud.points.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n")
    else:
        raise ValueError(f"unknown point-cloud format {format!r}")


def remove_ground(cloud: PointCloud, z_min: float = DEFAULT_Z_MIN) -> PointCloud:
    """Keep points strictly above ``z_min`` (order preserved)."""
    keep = cloud.points[:, 2] > z_min
    inten = None if cloud.intensity is None else np.asarray(cloud.intensity)[keep]
    return PointCloud(cloud.points[keep], inten, cloud.dropped)


def bin_indices(xy: np.ndarray, config: BevConfig):
    """Map metric (x, y) to (row, col) cell indices; returns (rows, cols, inside)."""
    half = config.roi_side / 2.0
    res = config.resolution
    n = int(config.grid_size)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    inside = (xy[:, 0] >= -half) & (xy[:, 0] < half) & (xy[:, 1] >= -half) & (xy[:, 1] < half)
    cols = np.floor((xy[:, 0] + half) / res).astype(np.int64)
    rows = np.floor((xy[:, 1] + half) / res).astype(np.int64)
    # float rounding can push a point just below `half` into cell n
    inside &= (cols >= 0) & (cols < n) & (rows >= 0) & (rows < n)
    return rows, cols, inside


def to_bev(cloud: PointCloud, config: BevConfig = BevConfig()) -> BevGrid:
    """Rasterize a (ground-removed) cloud into a binary occupancy grid.

    Summing a height-voxelized volume and binarizing it yields the same
    raster as marking every (x, y) cell that holds at least one point, so the
    volume is never materialized.
    """
    n = int(config.grid_size)
    occ = np.zeros((n, n), dtype=np.uint8)
    rows, cols, inside = bin_indices(cloud.points[:, :2], config)
    occ[rows[inside], cols[inside]] = 1
    return BevGrid(occ, config.resolution)


def load_poses(path) -> dict[int, Se2Pose]:
    """Read a pose CSV with header ``id,x,y,yaw`` (yaw in radians)."""
    path = Path(path)
    poses: dict[int, Se2Pose] = {}
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y", "yaw"]:
            raise ScanFormatError(f"{path}: expected header 'id,x,y,yaw', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ScanFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                pid = int(row[0])
                x, y, yaw = (float(v) for v in row[1:])
            except ValueError as exc:
                raise ScanFormatError(f"{path}:{lineno}: {exc}") from None
            if pid in poses:
                raise ScanFormatError(f"{path}:{lineno}: duplicate pose id {pid}")
            poses[pid] = Se2Pose(x, y, yaw)
    return poses


def save_poses(poses: dict[int, Se2Pose], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "yaw"])
        for pid in sorted(poses):
            p = poses[pid]
            w.writerow([pid, repr(p.x), repr(p.y), repr(p.yaw)])
