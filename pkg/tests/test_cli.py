import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from ringloc.cli import EXIT_DEGENERATE, EXIT_FORMAT, EXIT_INPUT, EXIT_OK, main, selftest_checks
from ringloc.place_db import PlaceDatabase
from ringloc.scan_ingest import PointCloud, Se2Pose, load_point_cloud, load_poses, save_point_cloud, save_poses

SMALL = ["--grid", "32", "--ntheta", "16", "--ntau", "16"]


def yaw_err_deg(a, b):
    return abs(math.degrees(math.remainder(a - b, 2 * math.pi)))


@pytest.fixture(scope="module")
def session(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "3", "--out", str(out), "--map-scans", "11",
                 "--map-spacing", "10", "--query-scans", "6", "--query-spacing", "15"]) == EXIT_OK
    db = out / "map.ringdb"
    assert main(["build-map", str(out / "map" / "scans"), str(out / "map" / "poses.csv"),
                 str(db), "--interval", "10"]) == EXIT_OK
    return out, db


class TestBuildMap:
    @pytest.fixture
    def line_scans(self, tmp_path):
        rng = np.random.default_rng(0)
        scans = tmp_path / "scans"
        scans.mkdir()
        poses = {}
        for k in range(101):
            save_point_cloud(PointCloud(rng.uniform(-50, 50, (40, 3))), scans / f"{k}.bin")
            poses[k] = Se2Pose(10.0 * k, 0.0, 0.0)
        save_poses(poses, tmp_path / "poses.csv")
        return scans, tmp_path / "poses.csv"

    def test_one_km_line(self, line_scans, tmp_path, capsys):
        scans, poses = line_scans
        assert main(["build-map", str(scans), str(poses), str(tmp_path / "m.db"), *SMALL]) == EXIT_OK
        db = PlaceDatabase.load(tmp_path / "m.db")
        assert len(db) == 21
        assert db.ids[:3] == [0, 5, 10]
        assert "21 entries" in capsys.readouterr().out

    def test_zero_interval(self, line_scans, tmp_path):
        scans, poses = line_scans
        assert main(["build-map", str(scans), str(poses), str(tmp_path / "m.db"),
                     "--interval", "0"]) == EXIT_INPUT

    def test_missing_pose_names_scan(self, line_scans, tmp_path, capsys):
        scans, poses = line_scans
        text = poses.read_text().splitlines()
        poses.write_text("\n".join(t for t in text if not t.startswith("37,")) + "\n")
        assert main(["build-map", str(scans), str(poses), str(tmp_path / "m.db")]) == EXIT_INPUT
        assert "scan 37" in capsys.readouterr().err

    def test_corrupt_scan(self, line_scans, tmp_path):
        scans, poses = line_scans
        (scans / "5.bin").write_bytes(b"\x00" * 7)
        assert main(["build-map", str(scans), str(poses), str(tmp_path / "m.db")]) == EXIT_FORMAT

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        save_poses({}, tmp_path / "p.csv")
        assert main(["build-map", str(tmp_path / "empty"), str(tmp_path / "p.csv"),
                     str(tmp_path / "m.db")]) == EXIT_INPUT


class TestLocalize:
    def test_map_scan_localizes_to_itself(self, session, capsys):
        out, db = session
        assert main(["localize", str(db), str(out / "map" / "scans" / "000004.bin")]) == EXIT_OK
        rec = json.loads(capsys.readouterr().out)
        truth = load_poses(out / "map" / "poses.csv")[4]
        assert rec["status"] == "ok" and rec["entry_id"] == 4
        assert (rec["x"], rec["y"]) == pytest.approx((truth.x, truth.y), abs=1e-6)
        assert rec["similarity"] == pytest.approx(1.0, abs=1e-6)

    def test_query_scans(self, session, capsys):
        out, db = session
        truth = load_poses(out / "query" / "poses.csv")
        for qid in (1, 3):
            assert main(["localize", str(db), str(out / "query" / "scans" / f"{qid:06d}.bin"),
                         "--topk", "3"]) == EXIT_OK
            captured = capsys.readouterr()
            rec = json.loads(captured.out)
            assert len(rec["candidates"]) == 3
            assert rec["candidates"][0][0] == rec["entry_id"]
            assert yaw_err_deg(rec["yaw"], truth[qid].yaw) <= 3.0
            assert math.hypot(rec["x"] - truth[qid].x, rec["y"] - truth[qid].y) <= 3.0
            assert "global" in captured.err

    def test_empty_db(self, tmp_path):
        PlaceDatabase(8, 8, 8, 1.0).save(tmp_path / "e.db")
        save_point_cloud(PointCloud(np.ones((1, 3))), tmp_path / "s.bin")
        assert main(["localize", str(tmp_path / "e.db"), str(tmp_path / "s.bin")]) == EXIT_INPUT

    def test_missing_db(self, tmp_path):
        assert main(["localize", str(tmp_path / "nope.db"), str(tmp_path / "s.bin")]) == EXIT_INPUT

    def test_corrupt_db(self, session, tmp_path):
        _, db = session
        (tmp_path / "bad.db").write_bytes(db.read_bytes()[:100])
        save_point_cloud(PointCloud(np.ones((1, 3))), tmp_path / "s.bin")
        assert main(["localize", str(tmp_path / "bad.db"), str(tmp_path / "s.bin")]) == EXIT_FORMAT

    def test_degenerate(self, session, tmp_path, capsys):
        _, db = session
        save_point_cloud(PointCloud(np.zeros((0, 3))), tmp_path / "empty.bin")
        assert main(["localize", str(db), str(tmp_path / "empty.bin")]) == EXIT_DEGENERATE
        assert json.loads(capsys.readouterr().out)["status"] == "degenerate"


class TestEval:
    def test_reports(self, session, tmp_path, capsys):
        out, db = session
        assert main(["eval", str(db), str(out / "query" / "scans"), str(out / "query" / "poses.csv"),
                     "--out", str(tmp_path / "rep"), "--interval", "10"]) == EXIT_OK
        for name in ("pr_curve.csv", "f1_curve.csv", "pose_errors.csv", "queries.csv", "summary.csv"):
            assert (tmp_path / "rep" / name).is_file()
        assert "recall@1" in capsys.readouterr().out
        rows = (tmp_path / "rep" / "queries.csv").read_text().splitlines()
        assert len(rows) == 7

    def test_ring_only(self, session, tmp_path):
        out, db = session
        assert main(["eval", str(db), str(out / "query" / "scans"), str(out / "query" / "poses.csv"),
                     "--out", str(tmp_path / "rep"), "--ring-only"]) == EXIT_OK

    def test_external_scores(self, session, tmp_path):
        out, db = session
        (tmp_path / "s.csv").write_text("query_id,map_id,score\n0,0,0.9\n1,1,0.3\n")
        assert main(["eval", str(db), str(out / "query" / "scans"), str(out / "query" / "poses.csv"),
                     "--out", str(tmp_path / "rep"), "--scores", str(tmp_path / "s.csv")]) == EXIT_OK
        assert len((tmp_path / "rep" / "queries.csv").read_text().splitlines()) == 3

    def test_missing_query_poses(self, session, tmp_path):
        out, db = session
        save_poses({0: Se2Pose(0, 0, 0)}, tmp_path / "p.csv")
        assert main(["eval", str(db), str(out / "query" / "scans"), str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "rep")]) == EXIT_INPUT

    def test_empty_query_dir(self, session, tmp_path):
        _, db = session
        (tmp_path / "q").mkdir()
        save_poses({}, tmp_path / "p.csv")
        assert main(["eval", str(db), str(tmp_path / "q"), str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "rep")]) == EXIT_INPUT


class TestSynth:
    def test_deterministic(self, tmp_path):
        args = ["synth", "--seed", "9", "--map-scans", "3", "--query-scans", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 8
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_zero_scans(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--map-scans", "0", "--query-scans", "0"]) == EXIT_OK
        assert (tmp_path / "map" / "poses.csv").read_text() == "id,x,y,yaw\n"
        assert load_poses(tmp_path / "query" / "poses.csv") == {}

    def test_ascii_output_parses(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--map-scans", "1", "--query-scans", "0",
                     "--format", "ascii"]) == EXIT_OK
        cloud = load_point_cloud(tmp_path / "map" / "scans" / "000000.txt", "ascii-xyz")
        assert len(cloud) > 0

    def test_negative_count(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--map-scans", "-1"]) == EXIT_INPUT


class TestSelftest:
    def test_passes(self, capsys):
        start = time.perf_counter()
        assert main(["selftest"]) == EXIT_OK
        assert time.perf_counter() - start <= 60.0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "0 failed" in out

    def test_injected_fault_caught(self, capsys):
        assert main(["selftest", "--inject-fault"]) == 1
        assert "FAIL" in capsys.readouterr().out
        names = [name for name, ok, _ in selftest_checks(True) if not ok]
        assert names == ["rotation = row shift"]

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "ringloc.cli", "selftest"],
                              capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stdout + proc.stderr


class TestConfig:
    def test_env_then_flags(self, tmp_path, monkeypatch):
        rng = np.random.default_rng(1)
        (tmp_path / "s").mkdir()
        save_point_cloud(PointCloud(rng.uniform(-30, 30, (50, 3))), tmp_path / "s" / "0.bin")
        save_poses({0: Se2Pose(0, 0, 0)}, tmp_path / "p.csv")
        monkeypatch.setenv("RINGLOC_N_THETA", "20")
        monkeypatch.setenv("RINGLOC_GRID_SIZE", "40")
        assert main(["build-map", str(tmp_path / "s"), str(tmp_path / "p.csv"),
                     str(tmp_path / "m.db"), "--grid", "24"]) == EXIT_OK
        db = PlaceDatabase.load(tmp_path / "m.db")
        assert (db.n_theta, db.grid_size) == (20, 24)

    def test_bad_ntheta(self, tmp_path):
        assert main(["build-map", str(tmp_path), str(tmp_path / "p.csv"), str(tmp_path / "m.db"),
                     "--ntheta", "7"]) == EXIT_INPUT
