"""Place-recognition and pose-accuracy evaluation over map/query sessions.

Metric conventions
------------------
* A query is *correctly recognized* when its rank-1 map pose lies within
  ``revisit_threshold`` meters (planar distance; yaw ignored).
* Precision/recall sweep every observed score as an acceptance threshold
  (accept ``score >= t``).  Precision is ``TP / accepted``; recall is
  ``TP / (number of correctly recognized queries)``.  The curve is prefixed
  with a ``recall = 0`` point carrying the first precision and integrated
  with the trapezoid rule, so uninformative scores give an AUC near the base
  rate and perfect separation gives 1.
* ``accuracy`` is the precision at full recall, i.e. when every query is
  accepted.
* TSR/OSR/LSR count every query; a query without a pose estimate fails all
  three.  The per-query error lists only cover correctly recognized queries.

CSV files written by :func:`emit_report`
----------------------------------------
``pr_curve.csv``      threshold,precision,recall
``f1_curve.csv``      threshold,recall,f1
``pose_errors.csv``   query_id,map_id,yaw_error_deg,translation_error_m
``queries.csv``       query_id,map_id,score,correct,distance_m,est_x,est_y,est_yaw
``summary.csv``       metric,value

External baseline scores are read from ``query_id,map_id,score`` CSVs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .descriptor import ti_ring
from .place_db import MapEntry, PlaceDatabase
from .pose_solver import DegenerateGeometryError, estimate_pose
from .radon_core import Sinogram, radon
from .scan_ingest import Se2Pose, wrap_angle
from .synth_bench import (
    DEFAULT_SENSOR_RANGE, SyntheticWorld, query_poses, render_scan, route_poses, world_for_route,
)

_FMT = "%.9g"


def subsample_trajectory(poses, interval: float) -> list[int]:
    """Greedy arc-length subsampling: keep the first pose, then each pose whose
    path distance from the last kept one reaches ``interval``."""
    if not interval > 0:
        raise ValueError(f"interval must be positive, got {interval}")
    if not poses:
        return []
    keep = [0]
    run = 0.0
    for i in range(1, len(poses)):
        run += poses[i - 1].distance(poses[i])
        # tolerance so evenly spaced poses land exactly on multiples
        if run >= interval * (1.0 - 1e-9):
            keep.append(i)
            run = 0.0
    return keep


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    gt_pose: Se2Pose
    map_id: int
    score: float
    map_pose: Se2Pose
    est_pose: Se2Pose | None = None

    @property
    def distance(self) -> float:
        return self.gt_pose.distance(self.map_pose)


@dataclass
class EvalRun:
    map_poses: dict
    place_density: float
    revisit_threshold: float
    records: list = field(default_factory=list)

    def __post_init__(self):
        for r in self.records:
            if r.map_id not in self.map_poses:
                raise ValueError(f"query {r.query_id} references unknown map entry {r.map_id}")
        self.records = sorted(self.records, key=lambda r: r.query_id)

    def correct(self) -> np.ndarray:
        return np.array([r.distance <= self.revisit_threshold for r in self.records], dtype=bool)


@dataclass
class MetricsReport:
    n_queries: int
    n_correct: int
    recall_at_1: float
    accuracy: float
    pr_curve: list  # (threshold, precision, recall)
    f1_curve: list  # (threshold, recall, f1)
    auc: float
    max_f1: float
    tsr: float
    osr: float
    lsr: float
    pose_errors: list  # (query_id, map_id, yaw_error_deg, translation_error_m)
    queries: list = field(default_factory=list)

    @property
    def orientation_errors(self) -> np.ndarray:
        return np.array([e[2] for e in self.pose_errors])

    @property
    def translation_errors(self) -> np.ndarray:
        return np.array([e[3] for e in self.pose_errors])


def recall_at_1(run: EvalRun) -> float:
    if not run.records:
        return 0.0
    return float(np.mean(run.correct()))


def pr_curve(scores, truth) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` at every distinct score, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    positives = int(truth.sum())
    out = []
    for t in np.unique(scores)[::-1]:
        accepted = scores >= t
        tp = int(np.count_nonzero(accepted & truth))
        precision = tp / int(accepted.sum())
        recall = tp / positives if positives else 0.0
        out.append((float(t), precision, recall))
    return out


def auc_of(curve) -> float:
    """Trapezoid area under precision vs recall, starting from recall 0."""
    if not curve:
        return 0.0
    rec = np.array([0.0] + [c[2] for c in curve])
    prec = np.array([curve[0][1]] + [c[1] for c in curve])
    return float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0))


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def pr_f1_auc(run: EvalRun):
    """Returns ``(pr_curve, f1_curve, auc, max_f1, accuracy)``."""
    scores = [r.score for r in run.records]
    curve = pr_curve(scores, run.correct())
    f1 = [(t, r, _f1(p, r)) for t, p, r in curve]
    accuracy = curve[-1][1] if curve else 0.0
    max_f1 = max((x[2] for x in f1), default=0.0)
    return curve, f1, auc_of(curve), max_f1, accuracy


def pose_error(est: Se2Pose, gt: Se2Pose) -> tuple[float, float]:
    """(|yaw error| degrees, planar translation error meters)."""
    return abs(math.degrees(float(wrap_angle(est.yaw - gt.yaw)))), est.distance(gt)


def success_rates(run: EvalRun, yaw_tol: float = 3.0, trans_tol: float = 3.0):
    """``(tsr, osr, lsr)`` over all queries of the run."""
    if not run.records:
        return 0.0, 0.0, 0.0
    t_ok = o_ok = both = 0
    for r in run.records:
        if r.est_pose is None:
            continue
        yaw_err, trans_err = pose_error(r.est_pose, r.gt_pose)
        t = trans_err <= trans_tol
        o = yaw_err <= yaw_tol
        t_ok += t
        o_ok += o
        both += t and o
    n = len(run.records)
    return t_ok / n, o_ok / n, both / n


def evaluate(run: EvalRun, yaw_tol: float = 3.0, trans_tol: float = 3.0) -> MetricsReport:
    curve, f1, auc, max_f1, accuracy = pr_f1_auc(run)
    tsr, osr, lsr = success_rates(run, yaw_tol, trans_tol)
    correct = run.correct()
    errors, rows = [], []
    for r, ok in zip(run.records, correct):
        if ok and r.est_pose is not None:
            errors.append((r.query_id, r.map_id) + pose_error(r.est_pose, r.gt_pose))
        est = r.est_pose
        est_xyz = (np.nan,) * 3 if est is None else (est.x, est.y, est.yaw)
        rows.append((r.query_id, r.map_id, r.score, int(ok), r.distance) + est_xyz)
    return MetricsReport(
        n_queries=len(run.records), n_correct=int(correct.sum()),
        recall_at_1=recall_at_1(run), accuracy=accuracy, pr_curve=curve, f1_curve=f1,
        auc=auc, max_f1=max_f1, tsr=tsr, osr=osr, lsr=lsr, pose_errors=errors, queries=rows,
    )


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header.split(","))
        for row in rows:
            w.writerow([_FMT % v if isinstance(v, float) else v for v in row])


def emit_report(report: MetricsReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = [
        ("n_queries", report.n_queries), ("n_correct", report.n_correct),
        ("n_pose_evaluated", len(report.pose_errors)),
        ("recall_at_1", report.recall_at_1), ("accuracy", report.accuracy),
        ("auc", report.auc), ("max_f1", report.max_f1),
        ("tsr", report.tsr), ("osr", report.osr), ("lsr", report.lsr),
    ]
    errs = report.pose_errors
    if errs:
        summary += [
            ("mean_yaw_error_deg", float(np.mean([e[2] for e in errs]))),
            ("mean_translation_error_m", float(np.mean([e[3] for e in errs]))),
        ]
    files = {
        "pr_curve.csv": ("threshold,precision,recall", report.pr_curve),
        "f1_curve.csv": ("threshold,recall,f1", report.f1_curve),
        "pose_errors.csv": ("query_id,map_id,yaw_error_deg,translation_error_m", errs),
        "queries.csv": ("query_id,map_id,score,correct,distance_m,est_x,est_y,est_yaw",
                        report.queries),
        "summary.csv": ("metric,value", summary),
    }
    paths = []
    for name, (header, rows) in files.items():
        _write_csv(out / name, header, rows)
        paths.append(out / name)
    return paths


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def load_external_scores(path) -> dict[int, tuple[int, float]]:
    """Rank-1 ``(map_id, score)`` per query from a ``query_id,map_id,score`` CSV.

    When a query has several rows the highest score wins (ties: lower map id).
    """
    header, rows = read_csv(path)
    if [h.strip() for h in header] != ["query_id", "map_id", "score"]:
        raise ValueError(f"{path}: expected header query_id,map_id,score, got {header}")
    best: dict[int, tuple[int, float]] = {}
    for k, row in enumerate(rows, start=2):
        try:
            q, m, s = int(row[0]), int(row[1]), float(row[2])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{k}: bad row {row}") from exc
        cur = best.get(q)
        if cur is None or s > cur[1] or (s == cur[1] and m < cur[0]):
            best[q] = (m, s)
    return best


def run_from_scores(scores: dict, map_poses: dict, query_poses: dict,
                    place_density: float, revisit_threshold: float | None = None) -> EvalRun:
    """Retrieval-only run from externally computed rank-1 results."""
    revisit = place_density / 2.0 if revisit_threshold is None else revisit_threshold
    records = []
    for qid, (mid, score) in scores.items():
        if qid not in query_poses:
            raise ValueError(f"no ground-truth pose for query {qid}")
        if mid not in map_poses:
            raise ValueError(f"query {qid} references unknown map entry {mid}")
        records.append(QueryRecord(qid, query_poses[qid], mid, score, map_poses[mid]))
    return EvalRun(dict(map_poses), place_density, revisit, records)


def run_queries(db: PlaceDatabase, queries, place_density: float,
                revisit_threshold: float | None = None, config: Config = Config(),
                representation: str = "ti_ring") -> EvalRun:
    """Localize each ``(query_id, gt_pose, sinogram)`` against ``db``.

    ``representation="ring"`` retrieves with raw sinograms instead of
    TI-RINGs (the translation-sensitive variant); pose estimation is the same.
    """
    revisit = place_density / 2.0 if revisit_threshold is None else revisit_threshold
    records = []
    for qid, gt, sino in queries:
        q = ti_ring(sino) if representation == "ti_ring" else sino
        mid, sim = db.query_topk(q, 1, normalize=config.normalize,
                                 representation=representation)[0]
        entry = db[mid]
        try:
            est = estimate_pose(sino, entry.sinogram, None, entry.ti_ring,
                                normalize=config.normalize, weighted=config.weighted)
            est_pose = entry.pose.compose(est.relative)
        except DegenerateGeometryError:
            est_pose = None
        records.append(QueryRecord(qid, gt, mid, sim.score, entry.pose, est_pose))
    return EvalRun({e.id: e.pose for e in db}, place_density, revisit, records)


class SyntheticSession:
    """One synthetic world with a map route and revisit queries.

    Map scans are rendered lazily on a 1 m route lattice so databases at
    several place densities share renders; query sinograms are cached too.
    """

    def __init__(self, seed: int, config: Config = Config(), route_length: float = 300.0,
                 query_spacing: float = 5.0, lateral: float = 3.0,
                 max_range: float | None = DEFAULT_SENSOR_RANGE,
                 world: SyntheticWorld | None = None):
        self.seed = seed
        self.config = config
        self.max_range = max_range
        if world is None:
            world = world_for_route(seed, route_length, config.roi_side)
        self.world = world
        self.route = route_poses(route_length, 1.0)
        self.queries = query_poses(seed, route_length, query_spacing, lateral)
        self._map_sinos: dict[int, Sinogram] = {}
        self._query_sinos: list[Sinogram] | None = None

    def sinogram(self, pose: Se2Pose) -> Sinogram:
        c = self.config
        return radon(render_scan(self.world, pose, c.bev, self.max_range), c.n_theta, c.n_tau)

    def map_db(self, place_density: float) -> PlaceDatabase:
        db = PlaceDatabase.for_config(self.config)
        for i in subsample_trajectory(self.route, place_density):
            if i not in self._map_sinos:
                self._map_sinos[i] = self.sinogram(self.route[i])
            db.insert(MapEntry.from_sinogram(i, self.route[i], self._map_sinos[i], f"route-{i}"))
        return db

    def query_set(self):
        if self._query_sinos is None:
            self._query_sinos = [self.sinogram(p) for p in self.queries]
        return [(k, p, s) for k, (p, s) in enumerate(zip(self.queries, self._query_sinos))]

    def run(self, place_density: float, representation: str = "ti_ring",
            revisit_threshold: float | None = None) -> EvalRun:
        return run_queries(self.map_db(place_density), self.query_set(), place_density,
                           revisit_threshold, self.config, representation)
