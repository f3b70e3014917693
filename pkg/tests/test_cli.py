import json
import math

import numpy as np
import pytest

from sosik.chain import Goal, sample_feasible
from sosik.cli import main

from conftest import TABLE1_LENGTHS, TABLE1_LIMITS, table1_chain


@pytest.fixture
def spec6_file(tmp_path):
    spec = {
        "dimension": 2,
        "links": list(TABLE1_LENGTHS[:6]),
        "angle_limits": list(TABLE1_LIMITS[:6]),
        "base": [0.0, 0.0],
        "goal": {"kind": "position", "xN": [5.0, 5.0]},
    }
    path = tmp_path / "spec6.json"
    path.write_text(json.dumps(spec))
    return path


def test_solve_feasible_goal_exit_zero(spec6_file, tmp_path, capsys):
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 3)
    goal = cfg.end_point
    out = tmp_path / "result.json"
    code = main(["solve", str(spec6_file), "--goal", str(goal[0]), str(goal[1]),
                 "--seed", "4", "--polish", "--out", str(out)])
    assert code == 0
    rec = json.loads(out.read_text())
    assert rec["certificate"] == "GlobalOptimum"
    assert rec["position_error"] < 1e-3


def test_solve_out_of_reach_exit_two(spec6_file, capsys):
    code = main(["solve", str(spec6_file), "--goal", "14.0", "0.0"])
    assert code == 2


def test_solve_missing_file_exit_one(capsys):
    assert main(["solve", "/nonexistent/spec.json"]) == 1


def test_solve_reference_file(spec6_file, tmp_path, capsys):
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 8)
    ref = tmp_path / "ref.json"
    ref.write_text(json.dumps({"positions": cfg.joints.tolist()}))
    code = main(["solve", str(spec6_file), "--goal",
                 str(cfg.end_point[0]), str(cfg.end_point[1]),
                 "--reference", f"file:{ref}"])
    assert code == 0


def test_heatmap_rejects_3d(tmp_path, capsys):
    spec = {"dimension": 3, "links": [1, 1], "angle_limits": [1.0],
            "base": [0, 0, 0], "goal": {"kind": "position", "xN": [2, 0, 0]}}
    path = tmp_path / "spec3d.json"
    path.write_text(json.dumps(spec))
    assert main(["heatmap", str(path)]) == 1


def test_heatmap_all_infeasible_box(spec6_file, tmp_path, capsys):
    prefix = tmp_path / "hm"
    code = main(["heatmap", str(spec6_file), "--grid", "3", "3", "--refs", "1",
                 "--seed", "1", "--box", "20", "26", "20", "26",
                 "--out", str(prefix), "--jobs", "1"])
    assert code == 0
    rows = (tmp_path / "hm_union.csv").read_text().strip().splitlines()
    assert rows[0] == "x,y,status"
    assert all(line.endswith("Infeasible") for line in rows[1:])
    ppm = (tmp_path / "hm_ref0.ppm").read_text().splitlines()
    assert ppm[0] == "P3" and ppm[1] == "3 3"


def test_heatmap_single_feasible_cell(spec6_file, tmp_path, capsys):
    spec = table1_chain(6)
    goal = sample_feasible(spec, 3).end_point
    prefix = tmp_path / "one"
    code = main(["heatmap", str(spec6_file), "--grid", "1", "1", "--refs", "1",
                 "--seed", "0", "--polish",
                 "--box", str(goal[0] - 0.05), str(goal[0] + 0.05),
                 str(goal[1] - 0.05), str(goal[1] + 0.05),
                 "--out", str(prefix), "--jobs", "1"])
    assert code == 0
    rows = (tmp_path / "one_ref0.csv").read_text().strip().splitlines()
    assert rows[1].endswith("Rank1")


def test_bench_single_instance_both_solvers(spec6_file, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code = main(["bench", str(spec6_file), "--instances", "1", "--seed", "11",
                 "--goal-kind", "position", "--polish", "--out", str(out),
                 "--jobs", "1"])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 3  # header + sos + local
    assert lines[1].split(",")[6] == "1"  # sos solved
    assert lines[2].split(",")[6] == "1"  # local solved


def test_bench_unknown_solver(spec6_file, capsys):
    assert main(["bench", str(spec6_file), "--solvers", "sos,ikfast"]) == 1


def test_bench_csv_deterministic(spec6_file, tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    args = ["bench", str(spec6_file), "--instances", "3", "--seed", "123",
            "--goal-kind", "pose", "--polish", "--jobs", "1"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
