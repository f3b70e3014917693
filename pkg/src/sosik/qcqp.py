"""Quadratic variety of feasible configurations and the nearest-point cost.

Link equalities, slack-augmented angle equalities and optional two-sided
distance bounds are assembled as sparse quadratic forms over the free joint
coordinates plus one slack per imposed angle constraint.  Fixed anchors
(base, goal points) are substituted as constants, so the variable count is
d * (#free joints) + (#slacks).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .chain import ChainSpec, Configuration, slack_values


class VarietyError(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticForm:
    """value(y) = y'Qy + b'y + c, stored as polynomial coefficients.

    quad maps (i, j) with i <= j to the coefficient of y_i*y_j (so the
    symmetric matrix Q has Q_ij = coeff/2 off the diagonal).  Duplicate
    entries are summed when the form is finalized.
    """

    n: int
    quad: tuple
    lin: tuple
    const: float
    label: str = ""
    kind: str = "generic"
    joints: tuple = ()
    slack: int | None = None

    @cached_property
    def _dense(self):
        q = np.zeros((self.n, self.n))
        for (i, j), c in self.quad:
            if i == j:
                q[i, i] += c
            else:
                q[i, j] += c / 2.0
                q[j, i] += c / 2.0
        b = np.zeros(self.n)
        for i, c in self.lin:
            b[i] += c
        return q, b

    def matrix(self) -> np.ndarray:
        return self._dense[0].copy()

    def variables(self) -> tuple:
        used = {i for pair, _ in self.quad for i in pair}
        used.update(i for i, _ in self.lin)
        return tuple(sorted(used))

    def value(self, y) -> float:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise VarietyError(f"expected point of length {self.n}")
        q, b = self._dense
        return float(y @ q @ y + b @ y + self.const)

    def gradient(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        q, b = self._dense
        return 2.0 * (q @ y) + b


class _FormBuilder:
    def __init__(self, n: int):
        self.n = n
        self.quad = {}
        self.lin = {}
        self.const = 0.0

    def add_quad(self, i: int, j: int, c: float):
        key = (i, j) if i <= j else (j, i)
        self.quad[key] = self.quad.get(key, 0.0) + c

    def add_lin(self, i: int, c: float):
        self.lin[i] = self.lin.get(i, 0.0) + c

    def add_square_of_linear(self, terms, const: float, scale: float = 1.0):
        """Add scale * (sum c_k y_{s_k} + const)^2."""
        for a, (sa, ca) in enumerate(terms):
            self.add_quad(sa, sa, scale * ca * ca)
            for sb, cb in terms[a + 1:]:
                self.add_quad(sa, sb, 2.0 * scale * ca * cb)
            self.add_lin(sa, 2.0 * scale * ca * const)
        self.const += scale * const * const

    def build(self, label="", kind="generic", joints=(), slack=None) -> QuadraticForm:
        quad = tuple(sorted((k, v) for k, v in self.quad.items() if v != 0.0))
        lin = tuple(sorted((k, v) for k, v in self.lin.items() if v != 0.0))
        return QuadraticForm(
            n=self.n, quad=quad, lin=lin, const=self.const,
            label=label, kind=kind, joints=tuple(joints), slack=slack,
        )


@dataclass(frozen=True)
class VarietyProblem:
    """Sparse QCQP: equalities/inequalities over indexed variables plus the
    nearest-point objective ||y - xi||^2 once a reference is attached."""

    spec: ChainSpec
    n: int
    joint_slots: tuple          # ((joint index, first coordinate slot), ...)
    slack_slots: tuple          # ((angle index, slot), ...)
    var_names: tuple
    equalities: tuple
    inequalities: tuple
    objective: QuadraticForm | None = None
    reference: np.ndarray | None = None

    @property
    def constraints(self) -> tuple:
        return self.equalities + self.inequalities

    @property
    def joint_slot_map(self) -> dict:
        return dict(self.joint_slots)

    @property
    def slack_slot_map(self) -> dict:
        return dict(self.slack_slots)

    def joint_coords(self, joint: int) -> tuple:
        start = self.joint_slot_map[joint]
        return tuple(range(start, start + self.spec.dimension))


def _coord_terms(vp_slots, anchors, joint, coeff, d):
    """Per-coordinate (slot, coeff) or constant contribution of one joint."""
    if joint in vp_slots:
        start = vp_slots[joint]
        return [[(start + k, coeff)] for k in range(d)], np.zeros(d)
    return [[] for _ in range(d)], coeff * anchors[joint]


def _link_form(n, slots, anchors, d, i, length, label):
    fb = _FormBuilder(n)
    t_prev, c_prev = _coord_terms(slots, anchors, i - 1, -1.0, d)
    t_cur, c_cur = _coord_terms(slots, anchors, i, 1.0, d)
    for k in range(d):
        fb.add_square_of_linear(t_cur[k] + t_prev[k], float(c_cur[k] + c_prev[k]))
    fb.const -= length * length
    return fb.build(label=label, kind="link", joints=(i - 1, i))


def build_variety(spec: ChainSpec) -> VarietyProblem:
    """Assemble the variety of feasible configurations for a chain.

    One link equality per link with at least one free endpoint; one
    slack-augmented angle equality per limited joint (limits of pi impose
    nothing); anchors are substituted, never kept as constraints.  For pose
    goals the angle constraint at the last movable joint couples to the
    fixed final-link direction.
    """
    d, nlinks = spec.dimension, spec.dof
    free = spec.free_joints
    anchors = {j: spec.anchor(j) for j in range(nlinks + 1) if spec.anchor(j) is not None}

    limited = []
    if spec.mount_direction is not None and spec.mount_limit < math.pi:
        limited.append(0)
    limited.extend(i for i in range(1, nlinks) if spec.angle_limits[i - 1] < math.pi)

    slots = {}
    names = []
    pos = 0
    for j in free:
        slots[j] = pos
        names.extend(f"x{j}[{k}]" for k in range(d))
        pos += d
    slack_slots = {}
    for idx in limited:
        slack_slots[idx] = pos
        names.append(f"s{idx}")
        pos += 1
    n = pos
    if n == 0:
        raise VarietyError("chain has no free variables")

    lengths = spec.link_lengths
    equalities = []
    for i in range(1, nlinks + 1):
        if (i - 1) in anchors and i in anchors:
            continue  # both endpoints fixed; validated by the spec invariant
        equalities.append(
            _link_form(n, slots, anchors, d, i, lengths[i - 1], f"link{i}")
        )

    for idx in limited:
        fb = _FormBuilder(n)
        if idx == 0:
            alpha = spec.mount_limit
            pieces = [(1.0 / lengths[0], 1), (-1.0 / lengths[0], 0)]
            const_extra = -np.asarray(spec.mount_direction, dtype=float)
        else:
            alpha = spec.angle_limits[idx - 1]
            inv_a, inv_b = 1.0 / lengths[idx], 1.0 / lengths[idx - 1]
            pieces = [
                (inv_a, idx + 1),
                (-inv_a - inv_b, idx),
                (inv_b, idx - 1),
            ]
            const_extra = np.zeros(d)
        for k in range(d):
            terms = []
            c0 = float(const_extra[k])
            for coeff, j in pieces:
                if j in slots:
                    terms.append((slots[j] + k, coeff))
                else:
                    c0 += coeff * float(anchors[j][k])
            fb.add_square_of_linear(terms, c0)
        fb.add_quad(slack_slots[idx], slack_slots[idx], 1.0)
        fb.const -= 2.0 * (1.0 - math.cos(alpha))
        lo = max(idx - 1, 0)
        hi = min(idx + 1, nlinks)
        equalities.append(
            fb.build(label=f"angle{idx}", kind="angle",
                     joints=tuple(range(lo, hi + 1)), slack=idx)
        )

    return VarietyProblem(
        spec=spec,
        n=n,
        joint_slots=tuple(sorted(slots.items())),
        slack_slots=tuple(sorted(slack_slots.items())),
        var_names=tuple(names),
        equalities=tuple(equalities),
        inequalities=(),
    )


def reference_vector(vp: VarietyProblem, ref) -> np.ndarray:
    """Reference point as a full variable vector.

    A Configuration supplies free-joint positions; its slack references are
    the consistent values sqrt(max(0, 2(1-cos a) - ||dz||^2)).  A raw vector
    must already have length n.
    """
    if isinstance(ref, Configuration):
        xi = np.zeros(vp.n)
        for j, start in vp.joint_slots:
            xi[start: start + vp.spec.dimension] = ref.joints[j - 1]
        sv = slack_values(vp.spec, ref)
        for idx, slot in vp.slack_slots:
            xi[slot] = sv[idx]
        return xi
    xi = np.asarray(ref, dtype=float)
    if xi.shape != (vp.n,):
        raise VarietyError(f"reference must be a Configuration or length-{vp.n} vector")
    return xi.copy()


def set_reference(vp: VarietyProblem, ref) -> VarietyProblem:
    """Attach xi and the objective ||y - xi||^2."""
    xi = reference_vector(vp, ref)
    fb = _FormBuilder(vp.n)
    for k in range(vp.n):
        fb.add_quad(k, k, 1.0)
        fb.add_lin(k, -2.0 * xi[k])
    fb.const = float(xi @ xi)
    obj = fb.build(label="nearest_point", kind="objective")
    xi.setflags(write=False)
    return replace(vp, objective=obj, reference=xi)


def add_distance_bound(vp: VarietyProblem, i, j_or_anchor, d_min, d_max) -> VarietyProblem:
    """Constrain ||x_i - x_j||^2 (or distance to a fixed point) to a range.

    Equal bounds collapse to a single equality; a zero lower bound is
    vacuous and omitted.  Inequalities are stored in f <= 0 orientation.
    """
    if not (0 <= d_min <= d_max):
        raise VarietyError("need 0 <= d_min <= d_max")
    spec = vp.spec
    d = spec.dimension
    slots = vp.joint_slot_map
    anchors = {j: spec.anchor(j) for j in range(spec.dof + 1) if spec.anchor(j) is not None}

    if np.isscalar(j_or_anchor) and isinstance(j_or_anchor, (int, np.integer)):
        j = int(j_or_anchor)
        if j in slots or j in anchors:
            other = ("joint", j)
        else:
            raise VarietyError(f"unknown joint index {j}")
    else:
        pt = np.asarray(j_or_anchor, dtype=float)
        if pt.shape != (d,):
            raise VarietyError("anchor point dimension mismatch")
        other = ("point", pt)

    def dist_sq_builder():
        fb = _FormBuilder(vp.n)
        for k in range(d):
            terms = []
            c0 = 0.0
            if i in slots:
                terms.append((slots[i] + k, 1.0))
            else:
                c0 += float(anchors[i][k])
            if other[0] == "joint":
                jj = other[1]
                if jj in slots:
                    terms.append((slots[jj] + k, -1.0))
                else:
                    c0 -= float(anchors[jj][k])
            else:
                c0 -= float(other[1][k])
            fb.add_square_of_linear(terms, c0)
        return fb

    tag = f"x{i}-{other[1] if other[0] == 'joint' else 'pt'}"
    jts = (i,) if other[0] == "point" else (i, other[1])
    if d_min == d_max:
        fb = dist_sq_builder()
        fb.const -= d_max * d_max
        form = fb.build(label=f"dist_eq[{tag}]", kind="dist_eq", joints=jts)
        return replace(vp, equalities=vp.equalities + (form,))
    new_ineq = []
    fb = dist_sq_builder()
    fb.const -= d_max * d_max
    new_ineq.append(fb.build(label=f"dist_up[{tag}]", kind="dist_upper", joints=jts))
    if d_min > 0.0:
        fb = dist_sq_builder()
        for key in list(fb.quad):
            fb.quad[key] = -fb.quad[key]
        for key in list(fb.lin):
            fb.lin[key] = -fb.lin[key]
        fb.const = -fb.const + d_min * d_min
        new_ineq.append(fb.build(label=f"dist_lo[{tag}]", kind="dist_lower", joints=jts))
    return replace(vp, inequalities=vp.inequalities + tuple(new_ineq))


def evaluate(form: QuadraticForm, y) -> float:
    return form.value(y)


def variety_point_to_configuration(vp: VarietyProblem, y) -> Configuration:
    """Assemble full joint positions from a variable vector, filling anchors."""
    y = np.asarray(y, dtype=float)
    spec = vp.spec
    pts = np.empty((spec.dof, spec.dimension))
    for j in range(1, spec.dof + 1):
        a = spec.anchor(j)
        if a is not None:
            pts[j - 1] = a
        else:
            start = vp.joint_slot_map[j]
            pts[j - 1] = y[start: start + spec.dimension]
    return Configuration(pts)


def dump_forms(vp: VarietyProblem) -> str:
    """One line per form: label, kind, then index pairs and coefficients."""
    lines = []
    for tag, forms in (("eq", vp.equalities), ("ineq", vp.inequalities)):
        for f in forms:
            parts = [f"{tag} {f.label} [{f.kind}]"]
            parts.extend(f"({i},{j}):{c:.12g}" for (i, j), c in f.quad)
            parts.extend(f"({i},):{c:.12g}" for i, c in f.lin)
            parts.append(f"const:{f.const:.12g}")
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
