"""Command line front end: single solves, rank-region heatmaps, benchmarks.

All commands are reproducible from (spec file, flags, seed): benchmark and
heatmap workers run in a process pool but results are gathered in instance
order, and the CSV outputs carry no timing columns.  See docs/formats.md
for the file formats.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import chain as chain_mod
from .baseline import LocalOptions, solve_local
from .chain import ChainSpec, Goal, chain_spec_from_dict, chain_spec_to_dict
from .extract import outcome_record, reach_feasible
from .pipeline import SolveOptions, solve_ik
from .qcqp import build_variety, reference_vector

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_INDETERMINATE = 3

STATUS_RANK1 = "Rank1"
STATUS_HIGHER = "HigherRank"
STATUS_INFEASIBLE = "Infeasible"

_COLORS = {STATUS_RANK1: (40, 70, 220), STATUS_HIGHER: (220, 50, 40),
           STATUS_INFEASIBLE: (200, 200, 200)}


def _load_spec(path) -> ChainSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return chain_spec_from_dict(json.load(fh))


def _solve_options(args) -> SolveOptions:
    return SolveOptions(
        multiplier_degree=args.d,
        rank_tol=args.rank_tol,
        polish=args.polish,
        polish_iters=args.polish_iters,
    )


# ---------------------------------------------------------------------------
# sosik solve

def cmd_solve(args) -> int:
    try:
        spec = _load_spec(args.spec)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load spec: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        if args.goal is not None:
            spec = spec.with_goal(Goal(kind="position", x_n=tuple(args.goal)))
        reference = None
        if args.reference != "random":
            if not args.reference.startswith("file:"):
                raise ValueError("--reference must be 'random' or 'file:PATH'")
            with open(args.reference[5:], "r", encoding="utf-8") as fh:
                data = json.load(fh)
            if "positions" in data:
                reference = chain_mod.Configuration(np.asarray(data["positions"]))
            else:
                reference = np.asarray(data["xi"], dtype=float)
        outcome = solve_ik(spec, reference=reference, seed=args.seed,
                           options=_solve_options(args))
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    record = outcome_record(outcome)
    text = json.dumps(record, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    if outcome.certificate == "GlobalOptimum":
        return EXIT_OK
    if outcome.certificate == "Infeasible":
        return EXIT_INFEASIBLE
    return EXIT_INDETERMINATE


# ---------------------------------------------------------------------------
# sosik heatmap

def _heatmap_cell(payload):
    spec_dict, xi, goal, opts_kw = payload
    spec = chain_spec_from_dict(spec_dict).with_goal(
        Goal(kind="position", x_n=tuple(goal)))
    if not reach_feasible(spec):
        return STATUS_INFEASIBLE
    out = solve_ik(spec, reference=np.asarray(xi), options=SolveOptions(**opts_kw))
    if out.certificate == "GlobalOptimum":
        return STATUS_RANK1
    if out.certificate == "Infeasible":
        return STATUS_INFEASIBLE
    return STATUS_HIGHER


def _write_ppm(path, grid_status, nx, ny):
    # P3 text pixmap, top row = largest y
    lines = ["P3", f"{nx} {ny}", "255"]
    for row in range(ny - 1, -1, -1):
        vals = []
        for col in range(nx):
            r, g, b = _COLORS[grid_status[row * nx + col]]
            vals.append(f"{r} {g} {b}")
        lines.append(" ".join(vals))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_grid_csv(path, xs, ys, status, nx):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "status"])
        for row, y in enumerate(ys):
            for col, x in enumerate(xs):
                w.writerow([f"{x:.9g}", f"{y:.9g}", status[row * nx + col]])


def cmd_heatmap(args) -> int:
    try:
        spec = _load_spec(args.spec)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load spec: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if spec.dimension != 2:
        print("error: heatmaps are defined for planar chains only", file=sys.stderr)
        return EXIT_ERROR
    nx, ny = args.grid
    reach = spec.reach
    box = args.box if args.box is not None else [-reach, reach, -reach, reach]
    xs = np.linspace(box[0], box[1], nx + 1)[:-1] + (box[1] - box[0]) / (2 * nx)
    ys = np.linspace(box[2], box[3], ny + 1)[:-1] + (box[3] - box[2]) / (2 * ny)

    spec_dict = chain_spec_to_dict(spec)
    opts_kw = dict(multiplier_degree=args.d, rank_tol=args.rank_tol,
                   polish=args.polish, polish_iters=args.polish_iters)
    ss = np.random.SeedSequence(args.seed)
    refs = []
    for child in ss.spawn(args.refs):
        cfg = chain_mod.sample_feasible(spec, child)
        xi = reference_vector(build_variety(spec), cfg)
        refs.append((cfg, xi))

    t0 = time.perf_counter()
    union = [STATUS_INFEASIBLE] * (nx * ny)
    per_ref_status = []
    for ridx, (cfg, xi) in enumerate(refs):
        payloads = [
            (spec_dict, list(xi), (float(x), float(y)), opts_kw)
            for y in ys for x in xs
        ]
        status = _run_pool(_heatmap_cell, payloads, args.jobs)
        per_ref_status.append(status)
        for k, stv in enumerate(status):
            if stv == STATUS_RANK1:
                union[k] = STATUS_RANK1
            elif stv == STATUS_HIGHER and union[k] != STATUS_RANK1:
                union[k] = STATUS_HIGHER
        _write_grid_csv(f"{args.out}_ref{ridx}.csv", xs, ys, status, nx)
        _write_ppm(f"{args.out}_ref{ridx}.ppm", status, nx, ny)
        done = sum(1 for s in status if s != STATUS_INFEASIBLE)
        print(f"reference {ridx}: {status.count(STATUS_RANK1)}/{done} rank-1 cells "
              f"({time.perf_counter() - t0:.1f}s)")
    _write_grid_csv(f"{args.out}_union.csv", xs, ys, union, nx)
    _write_ppm(f"{args.out}_union.ppm", union, nx, ny)
    feas = sum(1 for s in union if s != STATUS_INFEASIBLE)
    blue = union.count(STATUS_RANK1)
    print(f"union: {blue}/{feas} rank-1 over feasible cells "
          f"({100.0 * blue / max(feas, 1):.1f}%)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sosik bench

def _bench_instance(payload):
    spec_dict, goal_kind, goal, ref_seed, seed_local, opts_kw, local_kw, solvers = payload
    if goal_kind == "pose":
        g = Goal(kind="pose", x_n=tuple(goal[0]), x_nm1=tuple(goal[1]))
    else:
        g = Goal(kind="position", x_n=tuple(goal[0]))
    spec = chain_spec_from_dict(spec_dict).with_goal(g)
    rec = {}
    if "sos" in solvers:
        t0 = time.perf_counter()
        out = solve_ik(spec, reference=None, seed=ref_seed,
                       options=SolveOptions(**opts_kw))
        err = out.position_error
        rec["sos"] = {
            "certificate": out.certificate,
            "position_error": None if math.isnan(err) else err,
            "solved": bool(out.configuration is not None
                           and not math.isnan(err) and err < 1e-3),
            "objective": None if math.isinf(out.t_star) else out.t_star,
            "polished": out.polished,
            "time": time.perf_counter() - t0,
        }
    if "local" in solvers:
        seed_cfg = chain_mod.sample_feasible(spec, seed_local)
        seed_angles = chain_mod.angles_from_positions(spec, seed_cfg)
        t0 = time.perf_counter()
        res = solve_local(spec, seed_angles, LocalOptions(**local_kw),
                          restart_seed=seed_local)
        rec["local"] = {
            "certificate": "converged" if res.converged else "failed",
            "position_error": res.position_error,
            "solved": bool(res.converged),
            "objective": None,
            "polished": False,
            "time": time.perf_counter() - t0,
        }
    return rec


def cmd_bench(args) -> int:
    try:
        spec = _load_spec(args.spec)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load spec: {exc}", file=sys.stderr)
        return EXIT_ERROR
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()]
    for s in solvers:
        if s not in ("sos", "local"):
            print(f"error: unknown solver {s!r}", file=sys.stderr)
            return EXIT_ERROR

    spec_dict = chain_spec_to_dict(spec)
    opts_kw = dict(multiplier_degree=args.d, rank_tol=args.rank_tol,
                   polish=args.polish, polish_iters=args.polish_iters)
    local_kw = dict(restarts=args.restarts)
    ss = np.random.SeedSequence(args.seed)
    goal_seeds = ss.spawn(args.instances)

    payloads = []
    goals = []
    for k, child in enumerate(goal_seeds):
        cfg = chain_mod.sample_feasible(spec, child)
        if args.goal_kind == "pose":
            goal = (tuple(cfg.joints[-1]), tuple(cfg.joints[-2]))
        else:
            goal = (tuple(cfg.end_point),)
        goals.append(goal)
        payloads.append((spec_dict, args.goal_kind, goal,
                         1_000_000 + args.seed + k, 2_000_000 + args.seed + k,
                         opts_kw, local_kw, solvers))

    t0 = time.perf_counter()
    records = _run_pool(_bench_instance, payloads, args.jobs)
    total = time.perf_counter() - t0

    if args.out:
        _write_bench_csv(args.out, goals, records, solvers, args.goal_kind)

    print(f"instances: {args.instances}  seed: {args.seed}  goal kind: {args.goal_kind}")
    header = f"{'metric':<26}" + "".join(f"{s:>14}" for s in solvers)
    print(header)
    summary = {}
    for s in solvers:
        errs = [r[s]["position_error"] for r in records
                if r[s]["position_error"] is not None]
        solved = sum(1 for r in records if r[s]["solved"])
        times = [r[s]["time"] for r in records]
        summary[s] = {
            "mean_error": float(np.mean(errs)) if errs else math.nan,
            "median_error": float(np.median(errs)) if errs else math.nan,
            "solved_pct": 100.0 * solved / len(records),
            "total_time_s": float(np.sum(times)),
        }
    for label, key, fmt in (
        ("position error mean [m]", "mean_error", "{:14.3e}"),
        ("position error median [m]", "median_error", "{:14.3e}"),
        ("solved [%]", "solved_pct", "{:14.2f}"),
        ("total time [s]", "total_time_s", "{:14.2f}"),
    ):
        print(f"{label:<26}" + "".join(fmt.format(summary[s][key]) for s in solvers))
    print(f"wall time: {total:.1f}s")
    return EXIT_OK


def _write_bench_csv(path, goals, records, solvers, goal_kind):
    # no timing columns: the file is byte-reproducible for a fixed seed
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "solver", "goal", "certificate",
                    "position_error", "objective", "solved", "polished"])
        for k, (goal, rec) in enumerate(zip(goals, records)):
            gtxt = ";".join(",".join(f"{v:.12g}" for v in pt) for pt in goal)
            for s in solvers:
                r = rec[s]
                w.writerow([
                    k, s, gtxt, r["certificate"],
                    "" if r["position_error"] is None else f"{r['position_error']:.12g}",
                    "" if r["objective"] is None else f"{r['objective']:.12g}",
                    int(r["solved"]), int(r["polished"]),
                ])


# ---------------------------------------------------------------------------

def _run_pool(fn, payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads, chunksize=8))


def _add_common(p):
    p.add_argument("--d", type=int, default=1,
                   help="multiplier degree of the relaxation (default 1)")
    p.add_argument("--rank-tol", type=float, default=1e-5,
                   help="eigenvalue ratio for the numeric rank test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--polish", action="store_true",
                   help="project extracted points onto the variety")
    p.add_argument("--polish-iters", type=int, default=3)
    p.add_argument("--jobs", type=int, default=max(os.cpu_count() or 1, 1),
                   help="worker processes for bench/heatmap")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sosik",
        description="Certified inverse kinematics for serial spherical-joint "
                    "chains via a sparse sum-of-squares relaxation.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one instance and print a JSON record")
    p.add_argument("spec", help="chain spec JSON file")
    p.add_argument("--goal", type=float, nargs="+", default=None,
                   help="override the goal position (d numbers)")
    p.add_argument("--reference", default="random",
                   help="'random' or 'file:PATH' with positions or xi")
    p.add_argument("--out", default=None, help="also write the record here")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("heatmap", help="rank-1 region scan over goal space (2D)")
    p.add_argument("spec")
    p.add_argument("--grid", type=int, nargs=2, default=(40, 40),
                   metavar=("NX", "NY"))
    p.add_argument("--refs", type=int, default=5,
                   help="number of random reference configurations")
    p.add_argument("--box", type=float, nargs=4, default=None,
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.add_argument("--out", default="heatmap", help="output file prefix")
    _add_common(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("bench", help="randomized benchmark against the local solver")
    p.add_argument("spec")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--solvers", default="sos,local")
    p.add_argument("--goal-kind", choices=("position", "pose"), default="pose")
    p.add_argument("--restarts", type=int, default=1,
                   help="extra seeds for the local solver")
    p.add_argument("--out", default=None, help="per-instance CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
