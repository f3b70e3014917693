"""Variable/constraint blocks over overlapping joint triplets.

Serial chains let the relaxation be split into small blocks: with angle
constraints, block l holds the coordinates of the free joints among
{x_{l-1}, x_l, x_{l+1}} plus the slack s_l; without them, overlapping joint
pairs suffice.  The blocks must satisfy the running intersection property
(RIP), which verify_rip checks bullet by bullet.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qcqp import VarietyProblem


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Partition:
    p: int
    I: tuple          # per block: sorted tuple of variable indices
    J: tuple          # per block: tuple of constraint indices
    owner: tuple      # per variable: block whose objective piece holds it
    n_l: tuple
    n_star: int
    labels: tuple


@dataclass(frozen=True)
class RipReport:
    objective_split_ok: bool
    constraints_within_blocks: bool
    variables_covered: bool
    constraints_covered: bool
    chain_overlap_ok: bool
    first_offending_block: int | None
    passed: bool


def _assign_constraints(vp: VarietyProblem, blocks) -> list:
    sets = [frozenset(b) for b in blocks]
    assigned = [[] for _ in blocks]
    for ci, form in enumerate(vp.constraints):
        vars_ = set(form.variables())
        for l, s in enumerate(sets):
            if vars_ <= s:
                assigned[l].append(ci)
                break
        else:
            raise PartitionError(
                f"constraint {form.label!r} fits no block; not a serial-chain pattern"
            )
    return assigned


def build_partition(vp: VarietyProblem) -> Partition:
    """Blocks over joint triplets (pairs when no angle constraint exists).

    Constraints go to the lowest-index block containing all their variables;
    each squared objective term belongs to the first block containing its
    variable, so overlapping variables are not double counted.
    """
    spec = vp.spec
    d = spec.dimension
    slots = vp.joint_slot_map
    slack = vp.slack_slot_map
    free = [j for j, _ in vp.joint_slots]

    blocks = []
    labels = []
    if slack:
        for l in range(1, spec.dof):
            idx = []
            names = []
            for j in (l - 1, l, l + 1):
                if j in slots:
                    idx.extend(range(slots[j], slots[j] + d))
                    names.append(f"x{j}")
            if l == 1 and 0 in slack:
                idx.append(slack[0])
                names.append("s0")
            if l in slack:
                idx.append(slack[l])
                names.append(f"s{l}")
            if idx:
                blocks.append(tuple(sorted(idx)))
                labels.append("+".join(names))
    else:
        if len(free) >= 2:
            for a, b in zip(free, free[1:]):
                idx = list(range(slots[a], slots[a] + d))
                idx += list(range(slots[b], slots[b] + d))
                blocks.append(tuple(sorted(idx)))
                labels.append(f"x{a}+x{b}")
        elif free:
            j = free[0]
            blocks.append(tuple(range(slots[j], slots[j] + d)))
            labels.append(f"x{j}")
    if not blocks:
        raise PartitionError("empty partition")

    assigned = _assign_constraints(vp, blocks)
    owner = [-1] * vp.n
    for l, b in enumerate(blocks):
        for v in b:
            if owner[v] < 0:
                owner[v] = l
    if any(o < 0 for o in owner):
        raise PartitionError("some variable is in no block")

    n_l = tuple(len(b) for b in blocks)
    return Partition(
        p=len(blocks),
        I=tuple(blocks),
        J=tuple(tuple(a) for a in assigned),
        owner=tuple(owner),
        n_l=n_l,
        n_star=max(n_l),
        labels=tuple(labels),
    )


def objective_pieces(part: Partition, vp: VarietyProblem):
    """Per-block objective value functions f^l with sum f^l = f."""
    if vp.reference is None:
        raise PartitionError("variety has no reference")
    xi = vp.reference

    def piece(l, y):
        vars_l = [v for v in range(vp.n) if part.owner[v] == l]
        yy = np.asarray(y, dtype=float)
        return float(np.sum((yy[vars_l] - xi[vars_l]) ** 2))

    return piece


def verify_rip(part: Partition, vp: VarietyProblem, rng_seed: int = 0) -> RipReport:
    """Independently re-check the five RIP requirements.

    The objective-split bullet is checked structurally (owner blocks contain
    their variables) and, when a reference is attached, numerically at
    random points.  The chain-overlap bullet allows any earlier block s <= l
    to absorb the overlap and reports the first l where none does.
    """
    nvars, ncons = vp.n, len(vp.constraints)
    sets = [set(b) for b in part.I]

    split_ok = all(
        0 <= part.owner[v] < part.p and v in sets[part.owner[v]]
        for v in range(nvars)
    )
    if split_ok and vp.reference is not None and vp.objective is not None:
        piece = objective_pieces(part, vp)
        rng = np.random.default_rng(rng_seed)
        for _ in range(25):
            y = rng.normal(size=nvars)
            total = sum(piece(l, y) for l in range(part.p))
            if abs(total - vp.objective.value(y)) > 1e-12 * (1.0 + abs(total)):
                split_ok = False
                break

    within = True
    for l, cons in enumerate(part.J):
        for ci in cons:
            if not set(vp.constraints[ci].variables()) <= sets[l]:
                within = False
    vars_cov = set().union(*sets) == set(range(nvars))
    cons_cov = set(c for cons in part.J for c in cons) == set(range(ncons))

    overlap_ok = True
    offending = None
    seen = set()
    for l in range(part.p - 1):
        seen |= sets[l]
        inter = sets[l + 1] & seen
        if not any(inter <= sets[s] for s in range(l + 1)):
            overlap_ok = False
            offending = l + 1
            break

    return RipReport(
        objective_split_ok=split_ok,
        constraints_within_blocks=within,
        variables_covered=vars_cov,
        constraints_covered=cons_cov,
        chain_overlap_ok=overlap_ok,
        first_offending_block=offending,
        passed=split_ok and within and vars_cov and cons_cov and overlap_ok,
    )


def dump_partition(part: Partition, vp: VarietyProblem) -> str:
    lines = []
    for l in range(part.p):
        names = [vp.var_names[v] for v in part.I[l]]
        cons = [vp.constraints[c].label for c in part.J[l]]
        lines.append(f"block {l} ({part.labels[l]}): vars={','.join(names)} "
                     f"cons={','.join(cons)}")
    return "\n".join(lines) + "\n"
