import math

import numpy as np
import pytest

from sosik.chain import ChainSpec, Configuration, Goal, sample_feasible
from sosik.pipeline import SolveOptions, solve_ik

from conftest import table1_chain


def test_two_link_end_to_end():
    spec = ChainSpec(dimension=2, link_lengths=(1.0, 1.0),
                     angle_limits=(math.pi / 2,), base=(0.0, 0.0),
                     goal=Goal(kind="position", x_n=(1.0, 1.0)))
    out = solve_ik(spec, reference=Configuration(np.array([[0.9, 0.1], [1.0, 1.0]])))
    assert out.t_star == pytest.approx(0.74, abs=1e-4)
    assert set(out.timings) == {"assemble", "solve", "extract"}
    assert out.wall_time > 0


def test_pose_goal_certifies():
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 17)
    s = spec.with_goal(Goal(kind="pose", x_n=tuple(cfg.joints[-1]),
                            x_nm1=tuple(cfg.joints[-2])))
    out = solve_ik(s, reference=cfg)
    assert out.certificate == "GlobalOptimum"
    assert out.position_error < 1e-6
    np.testing.assert_allclose(out.configuration.joints[-1], cfg.joints[-1],
                               atol=1e-9)


def test_degree_two_option_runs():
    spec = ChainSpec(dimension=2, link_lengths=(1.0, 1.0),
                     angle_limits=(math.pi / 2,), base=(0.0, 0.0),
                     goal=Goal(kind="position", x_n=(1.0, 1.0)))
    out = solve_ik(spec, reference=np.array([0.9, 0.1, 0.8]),
                   options=SolveOptions(multiplier_degree=2))
    assert out.t_star == pytest.approx(0.74, abs=1e-3)


def test_polish_flagged_in_outcome():
    spec = table1_chain(6)
    cfg = sample_feasible(spec, 31)
    s = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    out = solve_ik(s, seed=77, options=SolveOptions(polish=True))
    assert out.polished
    out2 = solve_ik(s, seed=77)
    assert not out2.polished


def test_3d_chain_certifies():
    spec = ChainSpec(dimension=3, link_lengths=(1.0,) * 5,
                     angle_limits=(math.pi / 3,) * 4,
                     base=(0.0, 0.0, 0.0),
                     goal=Goal(kind="position", x_n=(3.0, 1.0, 0.5)))
    cfg = sample_feasible(spec, 5)
    s = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    out = solve_ik(s, seed=6, options=SolveOptions(polish=True))
    assert out.certificate in ("GlobalOptimum", "Indeterminate")
    if out.certificate == "GlobalOptimum":
        assert out.position_error < 1e-5


def test_outcome_reports_sdp_diagnostics():
    spec = table1_chain(5)
    cfg = sample_feasible(spec, 41)
    s = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    out = solve_ik(s, reference=cfg)
    assert out.sdp_status == "Optimal"
    assert out.sdp_residual_primal <= 1e-8
    assert out.sdp_residual_dual <= 1e-8
    assert out.sdp_gap <= 1e-8
    assert out.sdp_iterations > 0
