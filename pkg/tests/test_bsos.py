import math

import numpy as np
import pytest

from sosik.bsos import (
    BsosError,
    CapacityError,
    NormalizedConstraintSet,
    NormalizedForm,
    assemble,
    build_multipliers,
    mono_key,
    normalize,
    poly_eval,
    poly_from_form,
)
from sosik.chain import ChainSpec, Configuration, Goal, sample_feasible
from sosik.partition import Partition, build_partition
from sosik.qcqp import build_variety, reference_vector, set_reference
from sosik.sdpsolve import SdpStatus, solve

from conftest import planar_chain, table1_chain


def two_link(alpha=math.pi / 2, goal=(1.0, 1.0)):
    return ChainSpec(dimension=2, link_lengths=(1.0, 1.0), angle_limits=(alpha,),
                     base=(0.0, 0.0), goal=Goal(kind="position", x_n=goal))


def test_link_bound_matches_documented_value():
    # reach 2, unit link: B = 4 R^2 + l^2 = 17
    vp = build_variety(two_link(goal=(0.5, 0.5)))
    ncs = normalize(vp)
    assert ncs.bounds[0] == pytest.approx(17.0)


def test_equalities_become_opposed_pairs():
    vp = build_variety(two_link())
    ncs = normalize(vp)
    assert len(ncs.entries) == 2 * len(vp.equalities)
    kinds = {e.kind for e in ncs.entries}
    assert kinds == {"eq_pos", "eq_neg"}
    # on a feasible point both halves vanish
    y = np.array([1.0, 0.0, 0.0])
    for e in ncs.entries:
        assert abs(poly_eval(e.poly_dict(), y)) <= 1e-9 / e.bound * max(e.bound, 1)


def test_violation_leaves_the_box():
    vp = build_variety(two_link())
    ncs = normalize(vp)
    y = np.array([1.0, 0.0, 0.0])
    y[0] = math.sqrt(1.5)  # stretch link 1 by +0.5 in squared length
    plus = next(e for e in ncs.entries if e.label == "link1+")
    minus = next(e for e in ncs.entries if e.label == "link1-")
    assert poly_eval(plus.poly_dict(), y) == pytest.approx(0.5 / plus.bound)
    assert poly_eval(minus.poly_dict(), y) < 0.0


def test_normalized_values_bounded_over_reach_box(rng):
    spec = table1_chain(6)
    vp = build_variety(spec)
    ncs = normalize(vp)
    r = spec.reach
    joints = dict(vp.joint_slots)
    slacks = dict(vp.slack_slots)
    for _ in range(10_000):
        y = np.empty(vp.n)
        for j, start in joints.items():
            direction = rng.normal(size=2)
            direction /= np.linalg.norm(direction)
            y[start: start + 2] = direction * r * math.sqrt(rng.uniform())
        for _, slot in slacks.items():
            y[slot] = rng.uniform(-2.0, 2.0)
        for e in ncs.entries:
            assert abs(poly_eval(e.poly_dict(), y)) <= 1.0 + 1e-12


def test_inequalities_normalize_to_single_entries():
    from sosik.qcqp import add_distance_bound
    vp = build_variety(two_link())
    vp = add_distance_bound(vp, 1, np.array([0.0, 0.0]), 0.5, 1.5)
    ncs = normalize(vp)
    ineq = [e for e in ncs.entries if e.kind == "ineq"]
    assert len(ineq) == 2  # upper and lower side, one entry each


def _toy_partition(n_entries):
    return Partition(p=1, I=((0,),), J=(tuple(range(n_entries)),), owner=(0,),
                     n_l=(1,), n_star=1, labels=("y",))


def test_multiplier_count_d1():
    vp = build_variety(table1_chain(4))
    part = build_partition(vp)
    ncs = normalize(vp)
    mults = build_multipliers(ncs, part, d=1)
    for l in range(part.p):
        n_norm = len(ncs.entries_for(part.J[l]))
        assert len(mults[l]) == 1 + 2 * n_norm


def test_multiplier_count_spec_examples():
    # three constraints at d=1 -> 7; two constraints at d=2 -> 15
    e = [NormalizedForm(poly=(((0,), 1.0),), source=i, kind="ineq", bound=1.0,
                        label=f"g{i}") for i in range(3)]
    ncs3 = NormalizedConstraintSet(n=1, entries=tuple(e), bounds=(1.0,) * 3)
    part3 = Partition(p=1, I=((0,),), J=((0, 1, 2),), owner=(0,), n_l=(1,),
                      n_star=1, labels=("y",))
    assert len(build_multipliers(ncs3, part3, d=1)[0]) == 7

    ncs2 = NormalizedConstraintSet(n=1, entries=tuple(e[:2]), bounds=(1.0,) * 2)
    part2 = Partition(p=1, I=((0,),), J=((0, 1),), owner=(0,), n_l=(1,),
                      n_star=1, labels=("y",))
    assert len(build_multipliers(ncs2, part2, d=2)[0]) == 15


def test_product_multiplier_vanishes_at_box_edges():
    e = NormalizedForm(poly=(((0,), 1.0),), source=0, kind="ineq", bound=1.0,
                       label="g")
    ncs = NormalizedConstraintSet(n=1, entries=(e,), bounds=(1.0,))
    part = _toy_partition(1)
    mults = build_multipliers(ncs, part, d=2)[0]
    prod = next(m for m in mults if m.label == "g*1-g")
    for v in (0.0, 1.0):
        assert poly_eval(prod.poly_dict(), np.array([v])) == pytest.approx(0.0)


def test_capacity_error_reports_count():
    vp = build_variety(table1_chain(6))
    part = build_partition(vp)
    ncs = normalize(vp)
    with pytest.raises(CapacityError) as err:
        build_multipliers(ncs, part, d=3, capacity=50)
    assert "capacity" in str(err.value)


def _box_problem():
    """min (y-1)^2 for 0 <= y <= 1, stated directly in normalized form."""
    from sosik.qcqp import QuadraticForm, VarietyProblem
    spec = two_link()  # carrier only
    bound_form = QuadraticForm(n=1, quad=(), lin=((0, -1.0),), const=0.0,
                               label="box", kind="generic")
    vp = VarietyProblem(spec=spec, n=1, joint_slots=(), slack_slots=(),
                        var_names=("y",), equalities=(),
                        inequalities=(bound_form,))
    vp = set_reference(vp, np.array([1.0]))
    entry = NormalizedForm(poly=(((0,), 1.0),), source=0, kind="ineq",
                           bound=1.0, label="0<=y<=1")
    ncs = NormalizedConstraintSet(n=1, entries=(entry,), bounds=(1.0,))
    part = _toy_partition(1)
    return vp, part, ncs


def test_assemble_box_problem_optimum_zero():
    vp, part, ncs = _box_problem()
    sdp = assemble(vp, part, ncs, d=1)
    sol = solve(sdp)
    assert sol.status == SdpStatus.Optimal
    assert sol.primal_objective == pytest.approx(0.0, abs=1e-7)


def test_assemble_requires_reference():
    vp = build_variety(two_link())
    part = build_partition(vp)
    ncs = normalize(vp)
    with pytest.raises(BsosError):
        assemble(vp, part, ncs, d=1)


def test_two_link_feasible_reference_t_zero():
    vp = build_variety(two_link())
    vp = set_reference(vp, Configuration(np.array([[1.0, 0.0], [1.0, 1.0]])))
    part = build_partition(vp)
    sdp = assemble(vp, part, normalize(vp), d=1)
    sol = solve(sdp)
    assert sol.status == SdpStatus.Optimal
    assert abs(sol.primal_objective) <= 1e-6


def test_two_link_limited_known_distance():
    # feasible set is the two elbow points; the reference sits nearer one of
    # them; frozen expected value 0.74 = 0.02 + 0.72 computed by hand from
    # the two candidates (positions (1,0)/(0,1), both with zero slack)
    spec = two_link(alpha=math.pi / 2)
    vp = build_variety(spec)
    vp = set_reference(vp, Configuration(np.array([[0.9, 0.1], [1.0, 1.0]])))
    part = build_partition(vp)
    sdp = assemble(vp, part, normalize(vp), d=1)
    sol = solve(sdp)
    assert sol.primal_objective == pytest.approx(0.74, abs=1e-4)


def test_lower_bound_property():
    spec = table1_chain(5)
    for seed in range(5):
        goal_cfg = sample_feasible(spec, 100 + seed)
        s = spec.with_goal(Goal(kind="position", x_n=tuple(goal_cfg.end_point)))
        vp = build_variety(s)
        ref = sample_feasible(s, 200 + seed)
        vp = set_reference(vp, ref)
        part = build_partition(vp)
        sdp = assemble(vp, part, normalize(vp), d=1)
        sol = solve(sdp)
        assert sol.status == SdpStatus.Optimal
        feas_y = reference_vector(vp, goal_cfg)
        assert sol.primal_objective <= vp.objective.value(feas_y) + 1e-6


def test_coefficient_matching_reconstructs_identity(rng):
    spec = table1_chain(4)
    cfg = sample_feasible(spec, 3)
    s = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    vp = set_reference(build_variety(s), sample_feasible(s, 5))
    part = build_partition(vp)
    ncs = normalize(vp)
    sdp = assemble(vp, part, ncs, d=1)
    sol = solve(sdp)
    assert sol.status == SdpStatus.Optimal

    mults = build_multipliers(ncs, part, d=1)
    flat = [m for block in mults for m in block]
    basis = [[None] + list(part.I[l]) for l in range(part.p)]
    t = sol.free[0]
    for _ in range(10):
        y = rng.normal(size=vp.n)
        val = vp.objective.value(y) - t
        for lam, mult in zip(sol.nonneg, flat):
            val -= lam * poly_eval(mult.poly_dict(), y)
        for l in range(part.p):
            vec = np.array([1.0] + [y[v] for v in part.I[l]])
            val -= float(vec @ sol.psd[l] @ vec)
        assert abs(val) <= 1e-8 * (1 + abs(vp.objective.value(y)))


def test_monotone_in_multiplier_degree():
    # limits inactive at both elbow solutions, so both levels solve cleanly
    spec = two_link(alpha=2.0)
    vp = set_reference(build_variety(spec),
                       Configuration(np.array([[0.7, 0.4], [1.0, 1.0]])))
    part = build_partition(vp)
    ncs = normalize(vp)
    s1 = solve(assemble(vp, part, ncs, d=1))
    s2 = solve(assemble(vp, part, ncs, d=2))
    assert s1.status == SdpStatus.Optimal
    assert s2.status == SdpStatus.Optimal
    assert s2.primal_objective >= s1.primal_objective - 1e-8


def test_row_ordering_is_graded_lex():
    vp = set_reference(build_variety(two_link()), np.zeros(3))
    sdp = assemble(vp, build_partition(vp), normalize(vp), d=1)
    keys = [mono_key(m) for m in sdp.row_labels]
    assert keys == sorted(keys)
    assert sdp.row_labels[0] == ()


def test_poly_from_form_round_trip(rng):
    vp = build_variety(table1_chain(4))
    for form in vp.equalities:
        p = poly_from_form(form)
        y = rng.normal(size=vp.n)
        assert poly_eval(p, y) == pytest.approx(form.value(y), rel=1e-12, abs=1e-12)
