"""Certificates and solution extraction from a solved relaxation.

The dual slack of each Gram constraint is a moment matrix over the basis
[1, y_block]; numerically rank-1 blocks pin the variable values in their
first-moment row.  An optimal solve with all blocks rank-1, consistent
overlaps, and a kinematically feasible stitched point whose cost matches
the bound is a certificate of global optimality; an improving-ray solve is
a certificate of infeasibility; everything else stays indeterminate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import chain as chain_mod
from .chain import ChainSpec, Configuration, check_feasible
from .partition import Partition
from .qcqp import VarietyProblem, variety_point_to_configuration
from .sdpsolve import SdpSolution, SdpStatus

DEFAULT_RANK_TOL = 1e-5
DEFAULT_STITCH_TOL = 1e-4


class ExtractError(ValueError):
    pass


@dataclass(frozen=True)
class MomentBlocks:
    mats: tuple              # per block, (n_l+1) x (n_l+1) moment matrix
    block_vars: tuple        # per block, global variable indices (basis order)
    eigenvalues: tuple
    source_status: SdpStatus


@dataclass
class IkOutcome:
    certificate: str                     # GlobalOptimum | Infeasible | Indeterminate
    configuration: Configuration | None
    angles: np.ndarray | None
    t_star: float
    rank_profile: tuple
    stitching_discrepancy: float
    wall_time: float = 0.0
    position_error: float = math.nan
    polished: bool = False
    sdp_status: str = ""
    sdp_residual_primal: float = math.nan
    sdp_residual_dual: float = math.nan
    sdp_gap: float = math.nan
    sdp_iterations: int = 0
    infeasibility_certificate: dict | None = None
    notes: str = ""
    timings: dict = field(default_factory=dict)


def moment_blocks(solution: SdpSolution, part: Partition) -> MomentBlocks:
    """Read the per-block moment matrices off the solved relaxation.

    Gram blocks were assembled in partition order, so dual slack b pairs
    with variable set I_b.  Matrices are rescaled so the constant-monomial
    entry is one.
    """
    mats = []
    eigs = []
    for b in range(part.p):
        m = np.array(solution.slack_psd[b], dtype=float)
        scale = m[0, 0]
        if abs(scale - 1.0) > 1e-6 and scale > 1e-12:
            m = m / scale
        mats.append(m)
        eigs.append(tuple(np.linalg.eigvalsh((m + m.T) / 2.0)))
    return MomentBlocks(
        mats=tuple(mats),
        block_vars=tuple(tuple(part.I[b]) for b in range(part.p)),
        eigenvalues=tuple(eigs),
        source_status=solution.status,
    )


def rank_profile(mb: MomentBlocks, ratio_tol: float = DEFAULT_RANK_TOL) -> tuple:
    """Numeric rank per block: eigenvalues above ratio_tol times the largest."""
    if mb.source_status != SdpStatus.Optimal:
        raise ExtractError("rank profile requires moment blocks from an Optimal solve")
    return _rank_profile_any(mb, ratio_tol)


def _rank_profile_any(mb: MomentBlocks, ratio_tol: float) -> tuple:
    ranks = []
    for eigs in mb.eigenvalues:
        lead = max(max(eigs), 0.0)
        if lead <= 0.0:
            ranks.append(0)
        else:
            ranks.append(int(sum(1 for ev in eigs if ev / lead > ratio_tol)))
    return tuple(ranks)


def extract_solution(mb: MomentBlocks, part: Partition | None, vp: VarietyProblem):
    """Stitch the variable vector from first moments of the blocks.

    Overlapping entries are averaged; the returned discrepancy is the
    largest disagreement across blocks for any shared variable.
    """
    block_vars = tuple(tuple(b) for b in part.I) if part is not None else mb.block_vars
    if part is not None and block_vars != mb.block_vars:
        raise ExtractError("partition does not match the moment blocks")
    n = vp.n
    sums = np.zeros(n)
    counts = np.zeros(n)
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for mat, vars_ in zip(mb.mats, block_vars):
        row = mat[0, 1:]
        for pos, v in enumerate(vars_):
            val = row[pos]
            sums[v] += val
            counts[v] += 1
            lo[v] = min(lo[v], val)
            hi[v] = max(hi[v], val)
    if np.any(counts == 0):
        raise ExtractError("moment blocks do not cover every variable")
    y = sums / counts
    discrepancy = float(np.max(hi - lo))
    return y, discrepancy


def gauss_newton_polish(vp: VarietyProblem, y, iters: int = 1) -> np.ndarray:
    """Project a point toward the variety: least-squares Newton steps on the
    equality residuals."""
    y = np.asarray(y, dtype=float).copy()
    for _ in range(iters):
        resid = np.array([f.value(y) for f in vp.equalities])
        jac = np.array([f.gradient(y) for f in vp.equalities])
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        y += step
    return y


def _endpoint_error(spec: ChainSpec, cfg: Configuration) -> float:
    """Goal miss after re-synthesizing the chain through its joint angles,
    which folds any residual constraint violation into workspace units."""
    try:
        ang = chain_mod.angles_from_positions(spec, cfg)
        re_cfg = chain_mod.forward_kinematics(spec, ang)
    except chain_mod.ChainError:
        return math.nan
    return float(np.linalg.norm(re_cfg.end_point - np.asarray(spec.goal.x_n)))


def reach_feasible(spec: ChainSpec, margin: float = 1e-9) -> bool:
    """Cheap necessary condition: anchored points must lie within total reach."""
    base = np.asarray(spec.base, dtype=float)
    if spec.is_pose:
        r = sum(spec.link_lengths[:-1])
        dist = float(np.linalg.norm(np.asarray(spec.goal.x_nm1) - base))
    else:
        r = spec.reach
        dist = float(np.linalg.norm(np.asarray(spec.goal.x_n) - base))
    return dist <= r + margin


def certify(
    solution: SdpSolution | None,
    mb: MomentBlocks | None,
    vp: VarietyProblem,
    spec: ChainSpec,
    rank_tol: float = DEFAULT_RANK_TOL,
    stitch_tol: float = DEFAULT_STITCH_TOL,
    feas_tol: float = 1e-6,
    obj_rel_tol: float = 1e-5,
    polish: bool = False,
    polish_iters: int = 1,
) -> IkOutcome:
    """Total classification of a solve into an IK verdict.

    Infeasible-ray solves certify infeasibility.  Optimal solves certify a
    global optimum only when every moment block is rank-1, the overlap
    stitching agrees, the stitched configuration passes the kinematic check
    at feas_tol, and its cost matches the bound.  Anything else is
    indeterminate; with polish enabled a projected configuration is still
    attached when it checks out kinematically, flagged as polished.
    """
    if solution is None or solution.status in (
        SdpStatus.PrimalInfeasible, SdpStatus.DualInfeasible,
    ):
        cert = solution.certificate if solution is not None else None
        return IkOutcome(
            certificate="Infeasible",
            configuration=None,
            angles=None,
            t_star=math.inf,
            rank_profile=(),
            stitching_discrepancy=math.nan,
            sdp_status=solution.status.value if solution is not None else "precheck",
            infeasibility_certificate=cert or {"kind": "reach_precheck"},
            notes="" if solution is not None else "goal beyond total reach",
        )

    status = solution.status
    t_star = solution.primal_objective
    notes = []
    candidate = None
    discrepancy = math.nan
    ranks = ()
    if mb is not None:
        ranks = _rank_profile_any(mb, rank_tol)
        try:
            y_raw, discrepancy = extract_solution(mb, None, vp)
        except ExtractError as exc:
            notes.append(str(exc))
            y_raw = None
        candidate = y_raw

    certificate = "Indeterminate"
    cfg = None
    angles = None
    polished = False
    pos_err = math.nan

    if candidate is not None:
        y_final = candidate
        if polish:
            y_final = gauss_newton_polish(vp, candidate, iters=polish_iters)
            polished = not np.array_equal(y_final, candidate)
        cfg_try = variety_point_to_configuration(vp, y_final)
        rep = check_feasible(spec, cfg_try, feas_tol, feas_tol)
        obj_ok = abs(vp.objective.value(y_final) - t_star) <= obj_rel_tol * (1.0 + abs(t_star))
        gates = (
            status == SdpStatus.Optimal
            and all(r == 1 for r in ranks)
            and discrepancy <= stitch_tol
            and rep.feasible
            and obj_ok
        )
        if gates:
            certificate = "GlobalOptimum"
            cfg = cfg_try
        elif rep.feasible:
            # keep the usable configuration without certifying it
            cfg = cfg_try
            if status != SdpStatus.Optimal:
                notes.append(f"solver status {status.value}")
            if not all(r == 1 for r in ranks):
                notes.append(f"rank profile {ranks}")
            if discrepancy > stitch_tol:
                notes.append(f"stitching discrepancy {discrepancy:.2e}")
            if not obj_ok:
                notes.append("extracted cost does not match the bound")
        else:
            notes.append(f"extraction violates constraints by {rep.max_violation:.2e}")
        if cfg is not None:
            try:
                angles = chain_mod.angles_from_positions(spec, cfg)
            except chain_mod.ChainError as exc:
                angles = None
                notes.append(f"angle recovery failed: {exc}")
            pos_err = _endpoint_error(spec, cfg)

    return IkOutcome(
        certificate=certificate,
        configuration=cfg,
        angles=angles,
        t_star=t_star,
        rank_profile=ranks,
        stitching_discrepancy=discrepancy,
        position_error=pos_err,
        polished=polished,
        sdp_status=status.value,
        sdp_residual_primal=solution.residual_primal,
        sdp_residual_dual=solution.residual_dual,
        sdp_gap=solution.gap,
        sdp_iterations=solution.iterations,
        notes="; ".join(notes),
    )


def outcome_record(outcome: IkOutcome) -> dict:
    """JSON-ready result record."""
    return {
        "certificate": outcome.certificate,
        "objective": None if math.isinf(outcome.t_star) else outcome.t_star,
        "rank_profile": list(outcome.rank_profile),
        "stitching_discrepancy": _none_if_nan(outcome.stitching_discrepancy),
        "position_error": _none_if_nan(outcome.position_error),
        "positions": outcome.configuration.joints.tolist()
        if outcome.configuration is not None else None,
        "angles": outcome.angles.tolist() if outcome.angles is not None else None,
        "polished": outcome.polished,
        "sdp_status": outcome.sdp_status,
        "wall_time_s": outcome.wall_time,
        "timings_s": outcome.timings,
        "notes": outcome.notes,
    }


def write_outcome(outcome: IkOutcome, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(outcome_record(outcome), fh, indent=2)
        fh.write("\n")


def _none_if_nan(v: float):
    return None if (v is None or (isinstance(v, float) and math.isnan(v))) else v
