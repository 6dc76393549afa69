"""``ringloc`` command line: build maps, localize scans, evaluate, synthesize data, self-test.

Exit codes: 0 success, 2 input error, 3 degenerate geometry, 4 format error.
Every pipeline flag can also be set through ``RINGLOC_<FIELD>`` environment
variables (``RINGLOC_ROI_SIDE``, ``RINGLOC_GRID_SIZE``, ``RINGLOC_N_THETA``,
``RINGLOC_N_TAU``, ``RINGLOC_Z_MIN``, ``RINGLOC_NORMALIZE``,
``RINGLOC_WEIGHTED``); explicit flags win over the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config
from .descriptor import similarity, ti_ring
from .eval_harness import (
    emit_report, evaluate, load_external_scores, run_from_scores, run_queries,
    subsample_trajectory,
)
from .place_db import DatabaseError, MapEntry, PlaceDatabase
from .pose_solver import (
    DegenerateGeometryError, estimate_pose, localize_sinogram,
    scan_to_sinogram, solve_translation,
)
from .radon_core import circular_row_shift, radon, radon_oracle
from .scan_ingest import (
    ScanFormatError, load_point_cloud, load_poses, save_point_cloud, save_poses,
    wrap_angle,
)
from .synth_bench import (
    DEFAULT_SENSOR_RANGE, SplitMix64, query_poses, random_pair, render_cloud, render_scan,
    route_poses, world_for_route,
)

log = logging.getLogger("ringloc")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_FORMAT = 0, 2, 3, 4
SCAN_SUFFIXES = {".bin": "binary-xyzf32", ".txt": "ascii-xyz", ".xyz": "ascii-xyz"}
_FORMAT_REASONS = {"magic", "version", "truncated", "header", "trailing-data"}


class InputError(Exception):
    """Bad user input (missing files, ids without poses, empty inputs)."""


def _pipeline_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline settings")
    g.add_argument("--roi", type=float, help="side of the square BEV crop around the sensor, m (default 140)")
    g.add_argument("--grid", type=int, help="BEV cells per side (default 120, i.e. ~1.17 m cells)")
    g.add_argument("--ntheta", type=int, help="sinogram angle bins over [0, 2pi) (default 120, 3 deg)")
    g.add_argument("--ntau", type=int, help="sinogram offset bins across the grid diagonal (default 120)")
    g.add_argument("--zmin", type=float, help="ground removal: keep points with z above this, m (default -1.5)")
    norm = g.add_mutually_exclusive_group()
    norm.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                      help="cosine-normalized similarity scores (default)")
    norm.add_argument("--raw-score", dest="normalize", action="store_false",
                      help="unnormalized correlation scores")
    g.add_argument("--weighted-ls", action="store_true", default=None,
                   help="weight translation rows by their correlation peak")
    return p


def config_from_args(args, environ=None) -> Config:
    cfg = Config().with_env(environ)
    updates = {
        "roi_side": args.roi, "grid_size": args.grid, "n_theta": args.ntheta,
        "n_tau": args.ntau, "z_min": args.zmin, "normalize": args.normalize,
        "weighted": args.weighted_ls,
    }
    cfg = replace(cfg, **{k: v for k, v in updates.items() if v is not None})
    if cfg.roi_side <= 0 or cfg.grid_size < 1:
        raise InputError("--roi and --grid must be positive")
    if cfg.n_theta < 4 or cfg.n_theta % 2 or cfg.n_tau < 2:
        raise InputError("--ntheta must be even and >= 4, --ntau >= 2")
    return cfg


def _scan_files(directory) -> dict[int, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    out = {}
    for f in sorted(d.iterdir()):
        if f.suffix not in SCAN_SUFFIXES:
            continue
        try:
            sid = int(f.stem)
        except ValueError:
            raise InputError(f"{f}: scan file names must be integer ids") from None
        if sid in out:
            raise InputError(f"{f}: scan id {sid} appears twice")
        out[sid] = f
    if not out:
        raise InputError(f"{d}: no scan files ({', '.join(SCAN_SUFFIXES)})")
    return out


def _load_scan(path: Path):
    return load_point_cloud(path, SCAN_SUFFIXES.get(path.suffix, "binary-xyzf32"))


def _scans_with_poses(scan_dir, pose_csv):
    scans = _scan_files(scan_dir)
    poses = load_poses(pose_csv)
    for sid in scans:
        if sid not in poses:
            raise InputError(f"scan {sid} has no pose in {pose_csv}")
    return scans, poses


def cmd_build_map(args) -> int:
    cfg = config_from_args(args)
    if not args.interval > 0:
        raise InputError(f"--interval must be positive, got {args.interval}")
    scans, poses = _scans_with_poses(args.scan_dir, args.poses)
    ids = sorted(scans)
    keep = subsample_trajectory([poses[i] for i in ids], args.interval)
    db = PlaceDatabase.for_config(cfg)
    for k in keep:
        sid = ids[k]
        sino = scan_to_sinogram(_load_scan(scans[sid]), cfg)
        db.insert(MapEntry.from_sinogram(sid, poses[sid], sino, scans[sid].name))
    db.save(args.out)
    print(f"{len(db)} entries written to {args.out}")
    return EXIT_OK


def _open_db(path) -> PlaceDatabase:
    if not Path(path).is_file():
        raise InputError(f"{path}: no such database file")
    db = PlaceDatabase.load(path)
    if len(db) == 0:
        raise InputError(f"{path}: database has no entries")
    return db


def cmd_localize(args) -> int:
    cfg = config_from_args(args)
    db = _open_db(args.db)
    cfg = db.pipeline_config(cfg)
    scan = Path(args.scan)
    if not scan.is_file():
        raise InputError(f"{scan}: no such scan file")
    sino = scan_to_sinogram(_load_scan(scan), cfg)
    ranked = db.query_topk(ti_ring(sino), args.topk, normalize=cfg.normalize)
    try:
        entry_id, est, pose = localize_sinogram(sino, db, cfg)
    except DegenerateGeometryError as exc:
        print(json.dumps({"status": "degenerate", "entry_id": exc.entry_id, "error": str(exc)}))
        print(f"degenerate geometry against entry {exc.entry_id}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    record = {
        "status": "ok", "entry_id": entry_id, "similarity": est.similarity,
        "alpha": est.alpha, "dx": est.dx, "dy": est.dy,
        "x": pose.x, "y": pose.y, "yaw": pose.yaw,
        "candidates": [[eid, res.score] for eid, res in ranked],
    }
    print(json.dumps(record))
    print(f"retrieved entry {entry_id} ({db[entry_id].source_label}) similarity {est.similarity:.4f}\n"
          f"relative: alpha {math.degrees(est.alpha):.2f} deg, dx {est.dx:.3f} m, dy {est.dy:.3f} m\n"
          f"global:   x {pose.x:.3f} m, y {pose.y:.3f} m, yaw {math.degrees(pose.yaw):.2f} deg",
          file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    if not args.interval > 0:
        raise InputError(f"--interval must be positive, got {args.interval}")
    db = _open_db(args.db)
    cfg = db.pipeline_config(cfg)
    query_gt = load_poses(args.poses)
    if args.scores:
        scores = load_external_scores(args.scores)
        run = run_from_scores(scores, {e.id: e.pose for e in db}, query_gt, args.interval, args.revisit)
    else:
        scans = _scan_files(args.query_dir)
        missing = [sid for sid in scans if sid not in query_gt]
        if missing:
            raise InputError(f"query scans without poses: {missing[:10]}")
        queries = [(sid, query_gt[sid], scan_to_sinogram(_load_scan(scans[sid]), cfg))
                   for sid in sorted(scans)]
        run = run_queries(db, queries, args.interval, args.revisit, cfg,
                          "ring" if args.ring_only else "ti_ring")
    report = evaluate(run)
    emit_report(report, args.out)
    print(f"queries {report.n_queries}  recall@1 {report.recall_at_1:.4f}  AUC {report.auc:.4f}  "
          f"max F1 {report.max_f1:.4f}  TSR {report.tsr:.4f}  OSR {report.osr:.4f}  LSR {report.lsr:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.map_scans < 0 or args.query_scans < 0:
        raise InputError("scan counts must be non-negative")
    cfg = config_from_args(args)
    length = max(args.map_scans - 1, 0) * args.map_spacing
    world = world_for_route(args.seed, length, cfg.roi_side)
    map_route = route_poses(length, args.map_spacing)[:args.map_scans]
    queries = query_poses(args.seed, length, args.query_spacing, args.lateral)[:args.query_scans]
    out = Path(args.out)
    fmt = "binary-xyzf32" if args.format == "binary" else "ascii-xyz"
    ext = ".bin" if args.format == "binary" else ".txt"
    for name, poses in (("map", map_route), ("query", queries)):
        scan_dir = out / name / "scans"
        scan_dir.mkdir(parents=True, exist_ok=True)
        for k, pose in enumerate(poses):
            cloud = render_cloud(world, pose, cfg.bev, args.sensor_range)
            save_point_cloud(cloud, scan_dir / f"{k:06d}{ext}", fmt)
        save_poses(dict(enumerate(poses)), out / name / "poses.csv")
    with open(out / "world.csv", "w") as fh:
        fh.write("kind,x0,y0,x1,y1\n")
        for kind, rows in (("rect", world.rects), ("segment", world.segments)):
            for r in rows:
                fh.write(kind + "," + ",".join(repr(float(v)) for v in r) + "\n")
    print(f"world seed {args.seed}: {len(map_route)} map scans, {len(queries)} query scans in {out}")
    return EXIT_OK


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def selftest_checks(inject_fault: bool = False):
    """Fast property checks; yields ``(name, passed, detail)``."""
    rng = np.random.default_rng(20240601)
    grid = (rng.random((32, 32)) < 0.15).astype(float)

    s = radon(grid, 32, 32)
    yield "radon row mass", bool(np.allclose(s.data.sum(axis=1), grid.sum(), rtol=1e-5)), \
        f"max dev {np.abs(s.data.sum(axis=1) - grid.sum()).max():.2e}"

    err = _rel(s.data, radon_oracle(grid, 32, 32).data)
    yield "radon vs quadrature", err <= 0.02, f"rel err {err:.4f}"

    s120 = radon(grid, 120, 64)
    turned = np.rot90(grid, k=1, axes=(1, 0))  # exact quarter turn, 30 bins
    shift = 30 + (1 if inject_fault else 0)
    err = _rel(radon(turned, 120, 64).data, circular_row_shift(s120, shift).data)
    yield "rotation = row shift", err <= 0.05, f"rel err {err:.2e}"

    rolled = s120.with_data(np.roll(s120.data, 17, axis=1))
    err = _rel(ti_ring(rolled).data, ti_ring(s120).data)
    yield "TI-RING tau-shift invariance", err <= 1e-9, f"rel err {err:.1e}"

    q = ti_ring(s120)
    d = ti_ring(circular_row_shift(s120, -23))
    loop = [float(np.sum(q.data * np.roll(d.data, b, axis=0))) for b in range(120)]
    res = similarity(q, d, normalize=False)
    yield "orientation = exhaustive loop", res.best_shift == int(np.argmax(loop)), \
        f"shift {res.best_shift}"

    thetas = 2 * np.pi * np.arange(120) / 120
    alpha, dx, dy = 0.7, 3.25, -1.5
    shifts = dx * np.cos(thetas + alpha) + dy * np.sin(thetas + alpha)
    ex, ey, _ = solve_translation(shifts, alpha)
    yield "translation solve", math.hypot(ex - dx, ey - dy) <= 1e-9, \
        f"err {math.hypot(ex - dx, ey - dy):.1e} m"

    world = world_for_route(7, 0.0, 140.0)
    pair = random_pair(world, SplitMix64(7), 10.0)
    qs = radon(render_scan(world, pair.query_pose, max_range=DEFAULT_SENSOR_RANGE))
    ds = radon(render_scan(world, pair.map_pose, max_range=DEFAULT_SENSOR_RANGE))
    est = estimate_pose(qs, ds)
    rel = pair.relative
    yaw_err = abs(math.degrees(float(wrap_angle(est.alpha - rel.yaw))))
    t_err = math.hypot(est.dx - rel.x, est.dy - rel.y)
    yield "synthetic pose 3 deg / 3 m", yaw_err <= 3.0 and t_err <= 3.0, \
        f"yaw {yaw_err:.2f} deg, trans {t_err:.2f} m"


def cmd_selftest(args) -> int:
    failures = 0
    print(f"{'check':34s} {'result':6s}  detail")
    start = time.perf_counter()
    for name, ok, detail in selftest_checks(args.inject_fault):
        failures += not ok
        print(f"{name:34s} {'PASS' if ok else 'FAIL':6s}  {detail}")
    print(f"{failures} failed, {time.perf_counter() - start:.1f} s")
    return 1 if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    flags = _pipeline_flags()
    p = argparse.ArgumentParser(prog="ringloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-map", parents=[flags], help="build a place database from map scans")
    b.add_argument("scan_dir")
    b.add_argument("poses", help="pose CSV with header id,x,y,yaw")
    b.add_argument("out", help="output database file")
    b.add_argument("--interval", type=float, default=50.0,
                   help="place density: path distance between stored places, m (default 50)")
    b.set_defaults(func=cmd_build_map)

    lo = sub.add_parser("localize", parents=[flags], help="global pose of one scan against a database")
    lo.add_argument("db")
    lo.add_argument("scan")
    lo.add_argument("--topk", type=int, default=1, help="candidates listed in the output (default 1)")
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("eval", parents=[flags], help="recall, PR/F1 curves and success rates")
    e.add_argument("db")
    e.add_argument("query_dir")
    e.add_argument("poses", help="ground-truth query poses, CSV id,x,y,yaw")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--interval", type=float, default=50.0,
                   help="place density the database was built with, m (default 50)")
    e.add_argument("--revisit", type=float, default=None,
                   help="revisit threshold, m (default: half the place density)")
    e.add_argument("--ring-only", action="store_true",
                   help="retrieve with raw sinograms instead of TI-RING")
    e.add_argument("--scores", help="external rank-1 scores CSV query_id,map_id,score")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[flags], help="write a synthetic map/query session")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--map-scans", type=int, default=41)
    s.add_argument("--map-spacing", type=float, default=5.0, help="m between map scans (default 5)")
    s.add_argument("--query-scans", type=int, default=20)
    s.add_argument("--query-spacing", type=float, default=5.0, help="m between queries (default 5)")
    s.add_argument("--lateral", type=float, default=3.0, help="max query lateral offset, m (default 3)")
    s.add_argument("--sensor-range", type=float, default=DEFAULT_SENSOR_RANGE,
                   help=f"synthetic sensor range, m (default {DEFAULT_SENSOR_RANGE:g})")
    s.add_argument("--format", choices=("binary", "ascii"), default="binary")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("selftest", help="fast property checks")
    t.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateGeometryError as exc:
        print(f"error: degenerate geometry: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ScanFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DatabaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT if exc.reason in _FORMAT_REASONS else EXIT_INPUT
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
