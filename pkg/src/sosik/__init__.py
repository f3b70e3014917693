"""Certified inverse kinematics for serial spherical-joint chains.

Feasible configurations are encoded as a quadratic variety over joint
positions; IK becomes the nearest-point problem to a reference, relaxed by
a sparse bounded-degree sum-of-squares program and solved with a built-in
interior-point SDP solver.  Solutions come back with a certificate of
global optimality, a certificate of infeasibility, or an indeterminate
verdict.
"""

from .baseline import LocalOptions, LocalResult, solve_local
from .chain import (
    ChainSpec,
    Configuration,
    FeasibilityReport,
    Goal,
    StrongDualityReport,
    angles_from_positions,
    check_feasible,
    chain_spec_from_dict,
    chain_spec_to_dict,
    forward_kinematics,
    load_chain_spec,
    load_fixture,
    sample_feasible,
    strong_duality_premise,
)
from .extract import IkOutcome, certify, moment_blocks, outcome_record, rank_profile
from .partition import Partition, build_partition, verify_rip
from .pipeline import SolveOptions, solve_ik
from .qcqp import (
    QuadraticForm,
    VarietyProblem,
    add_distance_bound,
    build_variety,
    evaluate,
    set_reference,
)
from .bsos import NormalizedConstraintSet, assemble, build_multipliers, normalize
from .sdpsolve import (
    LinExpr,
    SdpProblem,
    SdpSolution,
    SdpStatus,
    export_sdpa,
    import_sdpa_solution,
    solve,
)

__version__ = "0.1.0"
