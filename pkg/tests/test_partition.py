import math
from dataclasses import replace

import numpy as np
import pytest

from sosik.chain import Goal, sample_feasible
from sosik.partition import PartitionError, build_partition, dump_partition, verify_rip
from sosik.qcqp import add_distance_bound, build_variety, set_reference

from conftest import planar_chain, spatial_chain, table1_chain


def test_link_only_chain_uses_pairs():
    spec = planar_chain(6, limits=(math.pi,) * 5)
    part = build_partition(build_variety(spec))
    assert part.n_star == 4  # 2d
    for block in part.I:
        assert len(block) <= 4


def test_table1_chain_block_size():
    part = build_partition(build_variety(table1_chain(10)))
    assert part.n_star == 7  # 3d + 1 for planar chains


def test_three_interior_joint_spatial_chain():
    # three movable joints (four links) with limits
    spec = spatial_chain(4)
    part = build_partition(build_variety(spec))
    assert part.n_star == 10  # 3d + 1


@pytest.mark.parametrize("m_joints", range(3, 13))
@pytest.mark.parametrize("dim", [2, 3])
def test_rip_and_block_sizes_across_sizes(m_joints, dim):
    mk = planar_chain if dim == 2 else spatial_chain
    spec = mk(m_joints + 1)
    vp = build_variety(spec)
    part = build_partition(vp)
    assert verify_rip(part, vp).passed
    assert part.n_star == 3 * dim + 1

    link_only = mk(m_joints + 1, limits=(math.pi,) * m_joints)
    vp2 = build_variety(link_only)
    part2 = build_partition(vp2)
    assert verify_rip(part2, vp2).passed
    assert part2.n_star == 2 * dim


def test_verify_rip_passes_with_reference(rng):
    spec = table1_chain(7)
    cfg = sample_feasible(spec, 1)
    s = spec.with_goal(Goal(kind="position", x_n=tuple(cfg.end_point)))
    vp = build_variety(s)
    vp = set_reference(vp, rng.normal(size=vp.n))
    part = build_partition(vp)
    rep = verify_rip(part, vp)
    assert rep.passed, rep


def test_objective_split_sums_exactly(rng):
    vp = build_variety(table1_chain(8))
    vp = set_reference(vp, rng.normal(size=vp.n))
    part = build_partition(vp)
    from sosik.partition import objective_pieces
    piece = objective_pieces(part, vp)
    for _ in range(100):
        y = rng.normal(size=vp.n)
        total = sum(piece(l, y) for l in range(part.p))
        assert abs(total - vp.objective.value(y)) <= 1e-12 * (1 + abs(total))


def test_deleting_a_block_breaks_coverage():
    vp = build_variety(table1_chain(6))
    part = build_partition(vp)
    broken = replace(part, p=part.p - 1, I=part.I[:-1], J=part.J[:-1],
                     n_l=part.n_l[:-1], labels=part.labels[:-1])
    rep = verify_rip(broken, vp)
    assert not rep.passed
    assert not (rep.variables_covered and rep.constraints_covered)


def test_reordering_blocks_breaks_chain_overlap():
    vp = build_variety(table1_chain(8))
    part = build_partition(vp)
    order = [3, 0, 5, 1, 6, 2, 4]
    shuffled = replace(
        part,
        I=tuple(part.I[i] for i in order),
        J=tuple(part.J[i] for i in order),
        n_l=tuple(part.n_l[i] for i in order),
        labels=tuple(part.labels[i] for i in order),
        owner=tuple({order.index(o) for o in [part.owner[v]]}.pop()
                    for v in range(vp.n)),
    )
    rep = verify_rip(shuffled, vp)
    assert not rep.chain_overlap_ok
    assert rep.first_offending_block is not None


def test_constraint_assignment_lowest_block():
    vp = build_variety(table1_chain(6))
    part = build_partition(vp)
    sets = [set(b) for b in part.I]
    for l, cons in enumerate(part.J):
        for ci in cons:
            vars_ = set(vp.constraints[ci].variables())
            eligible = [b for b in range(part.p) if vars_ <= sets[b]]
            assert min(eligible) == l


def test_long_range_bound_rejected():
    vp = build_variety(table1_chain(8))
    vp = add_distance_bound(vp, 1, 7, 0.5, 6.0)
    with pytest.raises(PartitionError):
        build_partition(vp)


def test_short_range_bound_accepted():
    vp = build_variety(table1_chain(8))
    vp = add_distance_bound(vp, 2, 4, 0.5, 6.0)
    part = build_partition(vp)
    assert verify_rip(part, vp).passed


def test_dump_partition_mentions_every_block():
    vp = build_variety(table1_chain(5))
    part = build_partition(vp)
    text = dump_partition(part, vp)
    assert len(text.strip().splitlines()) == part.p
