"""End-to-end solve: variety, partition, relaxation, SDP, certificate."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import bsos, extract, partition as partition_mod, qcqp
from .chain import ChainSpec, Configuration, sample_feasible
from .extract import IkOutcome
from .sdpsolve import solve as sdp_solve


@dataclass
class SolveOptions:
    multiplier_degree: int = 1
    rank_tol: float = extract.DEFAULT_RANK_TOL
    stitch_tol: float = extract.DEFAULT_STITCH_TOL
    sdp_tol: float = 1e-8
    sdp_max_iter: int = 200
    polish: bool = False
    polish_iters: int = 1
    reach_precheck: bool = True
    feas_tol: float = 1e-6


def solve_ik(spec: ChainSpec, reference=None, seed: int = 0,
             options: SolveOptions | None = None) -> IkOutcome:
    """Nearest-point IK solve with certification.

    The reference may be a Configuration, a raw variable vector, or None to
    sample a feasible configuration from `seed`.  Stage timings (assemble,
    solve, extract) are attached to the outcome.
    """
    opts = options or SolveOptions()
    t_total = time.perf_counter()

    if opts.reach_precheck and not extract.reach_feasible(spec):
        out = extract.certify(None, None, None, spec)
        out.wall_time = time.perf_counter() - t_total
        out.timings = {"assemble": 0.0, "solve": 0.0, "extract": 0.0}
        return out

    t0 = time.perf_counter()
    vp = qcqp.build_variety(spec)
    if reference is None:
        reference = sample_feasible(spec, seed)
    vp = qcqp.set_reference(vp, reference)
    part = partition_mod.build_partition(vp)
    ncs = bsos.normalize(vp)
    sdp = bsos.assemble(vp, part, ncs, d=opts.multiplier_degree, verify=True)
    t_assemble = time.perf_counter() - t0

    t0 = time.perf_counter()
    sol = sdp_solve(sdp, tol=opts.sdp_tol, max_iter=opts.sdp_max_iter)
    t_solve = time.perf_counter() - t0

    t0 = time.perf_counter()
    mb = extract.moment_blocks(sol, part)
    out = extract.certify(
        sol, mb, vp, spec,
        rank_tol=opts.rank_tol,
        stitch_tol=opts.stitch_tol,
        feas_tol=opts.feas_tol,
        polish=opts.polish,
        polish_iters=opts.polish_iters,
    )
    t_extract = time.perf_counter() - t0

    out.wall_time = time.perf_counter() - t_total
    out.timings = {"assemble": t_assemble, "solve": t_solve, "extract": t_extract}
    return out
