"""Bounded-degree SOS relaxation of the nearest-point problem, in sparse
block form.

The variety is first normalized into a box-constrained set K: every
constraint is scaled by an analytic bound valid over the reach box so its
value lies in [-1, 1] there, equalities contributing an opposed pair (both
halves in [0, 1] forces the value to zero) and inequalities a single entry.
Multiplier products of the normalized constraints and their complements,
up to total degree `d`, are then combined with one Gram (SOS) block per
partition block; matching coefficients monomial by monomial yields a block
SDP whose optimal value lower-bounds the squared distance to the variety.
The certificate identity is

    f(y) - t - sum lambda_ab * prod g_j^a (1-g_j)^b = sum_l [1, y_l] G_l [1, y_l]'

with lambda >= 0 and G_l PSD, maximized over t.  Monomial rows are ordered
graded-lexicographically over the global variable index for reproducibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .partition import Partition, verify_rip
from .qcqp import QuadraticForm, VarietyProblem
from .sdpsolve import LinExpr, SdpProblem


class BsosError(ValueError):
    pass


class CapacityError(BsosError):
    pass


# ---------------------------------------------------------------------------
# polynomials as {sorted index tuple: coefficient}

def poly_from_form(form: QuadraticForm) -> dict:
    p = {}
    for (i, j), c in form.quad:
        p[(i, j)] = p.get((i, j), 0.0) + c
    for i, c in form.lin:
        p[(i,)] = p.get((i,), 0.0) + c
    if form.const:
        p[()] = p.get((), 0.0) + form.const
    return p


def poly_scale(p: dict, s: float) -> dict:
    return {m: c * s for m, c in p.items()}

def poly_add(p: dict, q: dict) -> dict:
    out = dict(p)
    for m, c in q.items():
        out[m] = out.get(m, 0.0) + c
    return {m: c for m, c in out.items() if c != 0.0}


def poly_mul(p: dict, q: dict) -> dict:
    out = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            m = tuple(sorted(m1 + m2))
            out[m] = out.get(m, 0.0) + c1 * c2
    return {m: c for m, c in out.items() if c != 0.0}


def poly_eval(p: dict, y) -> float:
    y = np.asarray(y, dtype=float)
    return float(sum(c * np.prod(y[list(m)]) if m else c for m, c in p.items()))


def mono_key(m: tuple):
    return (len(m), m)


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormalizedForm:
    poly: tuple           # frozen items of the scaled polynomial
    source: int           # original constraint index in vp.constraints
    kind: str             # "eq_pos" | "eq_neg" | "ineq"
    bound: float
    label: str

    def poly_dict(self) -> dict:
        return dict(self.poly)


@dataclass(frozen=True)
class NormalizedConstraintSet:
    n: int
    entries: tuple
    bounds: tuple         # per original constraint index

    def entries_for(self, sources) -> list:
        ss = set(sources)
        return [(k, e) for k, e in enumerate(self.entries) if e.source in ss]


def _sup_piece_norm(spec, hi: int, lo: int) -> float:
    """Upper bound on ||x_hi - x_lo|| over the reach box (anchors exact)."""
    r = spec.reach
    x0 = np.asarray(spec.base, dtype=float)

    def radius(j):
        a = spec.anchor(j)
        if a is None:
            return r
        return float(np.linalg.norm(np.asarray(a) - x0))

    a_hi, a_lo = spec.anchor(hi), spec.anchor(lo)
    if a_hi is not None and a_lo is not None:
        return float(np.linalg.norm(np.asarray(a_hi) - np.asarray(a_lo)))
    return radius(hi) + radius(lo)


def _form_bound(vp: VarietyProblem, form: QuadraticForm) -> float:
    """Analytic bound on |form| over the box {||x_i - x_0|| <= reach,
    |s_i| <= 2}.  Links use the reach-diameter bound 4R^2 + l^2; angle forms
    bound each scaled-direction term through the same box."""
    spec = vp.spec
    r = spec.reach
    if form.kind == "link":
        i = form.joints[1]
        l_i = spec.link_lengths[i - 1]
        return 4.0 * r * r + l_i * l_i
    if form.kind == "angle":
        if form.slack == 0:
            z_prev = 1.0
            z_next = _sup_piece_norm(spec, 1, 0) / spec.link_lengths[0]
            alpha = spec.mount_limit
        else:
            i = form.slack
            z_prev = _sup_piece_norm(spec, i, i - 1) / spec.link_lengths[i - 1]
            z_next = _sup_piece_norm(spec, i + 1, i) / spec.link_lengths[i]
            alpha = spec.angle_limits[i - 1]
        return (z_prev + z_next) ** 2 + 4.0 + 2.0 * (1.0 - math.cos(alpha))
    if form.kind in ("dist_eq", "dist_upper", "dist_lower"):
        if len(form.joints) == 2:
            sup = _sup_piece_norm(spec, form.joints[0], form.joints[1])
        else:
            sup = _sup_piece_norm(spec, form.joints[0], 0) + r  # point within box scale
        return sup * sup + abs(form.const) + 1.0
    # generic quadratic: crude box bound from coefficients
    scale = max(r, 2.0)
    total = abs(form.const)
    for _, c in form.quad:
        total += abs(c) * scale * scale
    for _, c in form.lin:
        total += abs(c) * scale
    return total


def normalize(vp: VarietyProblem) -> NormalizedConstraintSet:
    """Scale every constraint into [-1, 1] over the reach box.

    Equalities emit the opposed pair +-g/B (membership of both in [0, 1]
    forces g = 0); inequalities in f <= 0 orientation emit -f/B.
    """
    entries = []
    bounds = []
    for ci, form in enumerate(vp.constraints):
        b = _form_bound(vp, form)
        if not (math.isfinite(b) and b > 0):
            raise BsosError(f"nonfinite normalization bound for {form.label!r}")
        bounds.append(b)
        p = poly_from_form(form)
        if ci < len(vp.equalities):
            pos = poly_scale(p, 1.0 / b)
            neg = poly_scale(p, -1.0 / b)
            entries.append(NormalizedForm(
                poly=tuple(sorted(pos.items())), source=ci, kind="eq_pos",
                bound=b, label=f"{form.label}+"))
            entries.append(NormalizedForm(
                poly=tuple(sorted(neg.items())), source=ci, kind="eq_neg",
                bound=b, label=f"{form.label}-"))
        else:
            entries.append(NormalizedForm(
                poly=tuple(sorted(poly_scale(p, -1.0 / b).items())), source=ci,
                kind="ineq", bound=b, label=form.label))
    return NormalizedConstraintSet(n=vp.n, entries=tuple(entries),
                                   bounds=tuple(bounds))


# ---------------------------------------------------------------------------
# multipliers

@dataclass(frozen=True)
class Multiplier:
    poly: tuple
    label: str
    block: int

    def poly_dict(self) -> dict:
        return dict(self.poly)


def _multi_indices(k: int, d: int):
    """All vectors in N^k with 1-norm at most d, lexicographic order."""
    if k == 0:
        yield ()
        return

    def rec(prefix, remaining, slots):
        if slots == 0:
            yield tuple(prefix)
            return
        for v in range(remaining + 1):
            yield from rec(prefix + [v], remaining - v, slots - 1)

    yield from rec([], d, k)


def build_multipliers(ncs: NormalizedConstraintSet, part: Partition, d: int,
                      capacity: int = 200_000) -> list:
    """Per block: the products g^a (1-g)^b over the block's normalized
    constraints with total degree |a|+|b| <= d, the empty product included.

    For d=1 this is {1} plus {g_j, 1-g_j} for each constraint of the block.
    """
    if d < 1:
        raise BsosError("multiplier degree must be >= 1")
    one = {(): 1.0}
    out = []
    total = 0
    for l in range(part.p):
        block_entries = ncs.entries_for(part.J[l])
        k = len(block_entries)
        count = math.comb(2 * k + d, d)
        total += count
        if count > capacity or total > capacity:
            raise CapacityError(
                f"degree {d} needs {count} multipliers in block {l} "
                f"({total} total); above the {capacity} capacity budget")
        mults = []
        if d == 1:
            mults.append(Multiplier(poly=tuple(one.items()), label="1", block=l))
            for _, e in block_entries:
                g = e.poly_dict()
                mults.append(Multiplier(poly=tuple(sorted(g.items())),
                                        label=e.label, block=l))
                omg = poly_add(one, poly_scale(g, -1.0))
                mults.append(Multiplier(poly=tuple(sorted(omg.items())),
                                        label=f"1-{e.label}", block=l))
        else:
            base = []
            for _, e in block_entries:
                g = e.poly_dict()
                base.append((e.label, g))
                base.append((f"1-{e.label}", poly_add(one, poly_scale(g, -1.0))))
            for exps in _multi_indices(2 * k, d):
                poly = dict(one)
                tags = []
                for pos, e in enumerate(exps):
                    for _ in range(e):
                        poly = poly_mul(poly, base[pos][1])
                    if e:
                        tags.append(f"{base[pos][0]}^{e}" if e > 1 else base[pos][0])
                mults.append(Multiplier(poly=tuple(sorted(poly.items())),
                                        label="*".join(tags) if tags else "1",
                                        block=l))
        out.append(mults)
    return out


# ---------------------------------------------------------------------------
# assembly

def assemble(vp: VarietyProblem, part: Partition, ncs: NormalizedConstraintSet,
             d: int = 1, verify: bool = True,
             max_rows: int = 500_000) -> SdpProblem:
    """Build the certificate-matching SDP.

    One equality row per monomial of the combined identity (constant, the
    variables, co-resident pairs, and any higher-degree multiplier monomials
    for d >= 2); variables are the scalar t (free), the nonnegative
    multiplier coefficients, and one Gram block of side n_l + 1 per
    partition block.  The objective maximizes t.
    """
    if vp.objective is None or vp.reference is None:
        raise BsosError("variety needs a reference before assembly")
    if verify:
        rep = verify_rip(part, vp)
        if not rep.passed:
            raise BsosError(f"running intersection check failed: {rep}")

    mults = build_multipliers(ncs, part, d)
    f_poly = poly_from_form(vp.objective)

    rows = {}  # mono -> {"free": {..}, "lam": {..}, "psd": {..}}

    def row(mono):
        r = rows.get(mono)
        if r is None:
            if len(rows) >= max_rows:
                raise CapacityError("monomial overflow: too many matching rows")
            r = {"free": {}, "lam": {}, "psd": {}}
            rows[mono] = r
        return r

    for m in f_poly:
        row(m)
    row(())["free"][0] = row(())["free"].get(0, 0.0) + 1.0

    block_basis = []
    for l in range(part.p):
        basis = [None] + list(part.I[l])  # slot 0 is the constant monomial
        block_basis.append(basis)
        for a in range(len(basis)):
            for b in range(a, len(basis)):
                if basis[a] is None and basis[b] is None:
                    mono = ()
                elif basis[a] is None:
                    mono = (basis[b],)
                else:
                    mono = tuple(sorted((basis[a], basis[b])))
                coef = 1.0 if a == b else 2.0
                ent = row(mono)["psd"]
                ent[(l, a, b)] = ent.get((l, a, b), 0.0) + coef

    lam_labels = []
    lam_idx = 0
    for l, block in enumerate(mults):
        for mult in block:
            for mono, c in mult.poly:
                ent = row(mono)["lam"]
                ent[lam_idx] = ent.get(lam_idx, 0.0) + c
            lam_labels.append(f"b{l}:{mult.label}")
            lam_idx += 1

    ordered = sorted(rows, key=mono_key)
    lin_rows = []
    rhs = []
    for mono in ordered:
        r = rows[mono]
        lin_rows.append(LinExpr(
            free=tuple(sorted(r["free"].items())),
            nonneg=tuple(sorted(r["lam"].items())),
            psd=tuple(sorted((b, i, j, c) for (b, i, j), c in r["psd"].items())),
        ))
        rhs.append(f_poly.get(mono, 0.0))

    return SdpProblem(
        psd_sides=tuple(len(part.I[l]) + 1 for l in range(part.p)),
        nonneg_dim=lam_idx,
        free_dim=1,
        rows=tuple(lin_rows),
        rhs=tuple(rhs),
        objective=LinExpr(free=((0, 1.0),)),
        maximize=True,
        row_labels=tuple(ordered),
        nonneg_labels=tuple(lam_labels),
        free_labels=("t",),
        # products of opposed pair members are mutually dependent at d >= 2
        merge_equality_pairs=(d == 1),
    )
