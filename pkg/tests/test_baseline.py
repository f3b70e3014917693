import math

import numpy as np
import pytest

from sosik.baseline import LocalOptions, solve_local
from sosik.chain import Goal, angles_from_positions, check_feasible, \
    forward_kinematics, sample_feasible

from conftest import table1_chain


def test_zero_iterations_at_solution():
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 1)
    spec = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    seed = angles_from_positions(spec, cfg)
    res = solve_local(spec, seed)
    assert res.converged
    assert res.iterations == 0
    assert res.position_error == pytest.approx(0.0, abs=1e-12)


def test_out_of_reach_never_converges():
    spec = table1_chain(4, goal=Goal(kind="position", x_n=(100.0, 0.0)))
    seed = angles_from_positions(spec, sample_feasible(spec, 0))
    res = solve_local(spec, seed, LocalOptions(restarts=2, max_iter=40))
    assert not res.converged
    assert res.position_error > 1.0


def test_limits_respected_on_convergence():
    spec = table1_chain(6)
    goal_cfg = sample_feasible(spec, 3)
    spec = spec.with_goal(Goal(kind="position", x_n=tuple(goal_cfg.end_point)))
    seed = angles_from_positions(spec, sample_feasible(spec, 4))
    res = solve_local(spec, seed, LocalOptions(restarts=3), restart_seed=9)
    if res.converged:
        for i, a in enumerate(spec.angle_limits, start=1):
            assert abs(res.angles[i]) <= a + 1e-9
        cfg = forward_kinematics(spec, res.angles)
        rep = check_feasible(spec, cfg, 1e-6, 1e-6)
        assert max(abs(r) for r in rep.link_residuals) <= 1e-9


def test_pose_goal_requires_direction():
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 8)
    spec = spec.with_goal(Goal(kind="pose", x_n=tuple(cfg.joints[-1]),
                               x_nm1=tuple(cfg.joints[-2])))
    seed = angles_from_positions(spec, sample_feasible(spec, 12))
    res = solve_local(spec, seed, LocalOptions(restarts=3, max_iter=200),
                      restart_seed=2)
    if res.converged:
        out = forward_kinematics(spec, res.angles)
        z = (out.joints[-1] - out.joints[-2]) / spec.link_lengths[-1]
        zg = (np.asarray(spec.goal.x_n) - np.asarray(spec.goal.x_nm1))
        zg = zg / spec.link_lengths[-1]
        assert np.linalg.norm(z - zg) <= 1e-3 + 1e-9


def test_best_over_restarts_and_determinism():
    spec = table1_chain(8)
    goal_cfg = sample_feasible(spec, 21)
    spec = spec.with_goal(Goal(kind="position", x_n=tuple(goal_cfg.end_point)))
    seed = angles_from_positions(spec, sample_feasible(spec, 22))
    a = solve_local(spec, seed, LocalOptions(restarts=2, max_iter=30),
                    restart_seed=5)
    b = solve_local(spec, seed, LocalOptions(restarts=2, max_iter=30),
                    restart_seed=5)
    assert a.position_error == b.position_error
    assert np.array_equal(a.angles, b.angles)
    single = solve_local(spec, seed, LocalOptions(restarts=0, max_iter=30))
    assert a.position_error <= single.position_error + 1e-15
