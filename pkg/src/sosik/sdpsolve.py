"""Block-diagonal semidefinite programming.

Problems are linear over three variable groups: free scalars, a nonnegative
vector, and a list of symmetric PSD matrix blocks, subject to linear
equality rows.  The solver runs a primal-dual interior-point method on the
homogeneous self-dual embedding with the HKM search direction and Mehrotra
predictor-corrector, so primal/dual infeasibility surfaces as an improving
ray certificate instead of an iteration failure.

A presolve pass makes the cone problem well posed first: exactly opposed
nonnegative column pairs (the two sides of an equality multiplier) are
merged into free columns, and all free columns are then removed by Gaussian
elimination against pivot rows.  Solutions are reported against the original
problem data, with eliminated duals recovered from stationarity.

Problems and solutions can be exchanged through the SDPA sparse file format
(.dat-s); see export_sdpa / import_sdpa_solution.
"""
from __future__ import annotations

import math
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import solve_triangular

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


class SdpError(ValueError):
    pass


class SdpStatus(Enum):
    Optimal = "Optimal"
    PrimalInfeasible = "PrimalInfeasible"
    DualInfeasible = "DualInfeasible"
    IterationLimit = "IterationLimit"
    NumericalError = "NumericalError"


@dataclass(frozen=True)
class LinExpr:
    """Sparse linear functional of (free, nonneg, psd) variables.

    psd entries (b, i, j, c) with i <= j give the coefficient of the matrix
    entry pair (i, j) ~ (j, i), counted once; as an inner product <A, X>
    this means A[i, j] = A[j, i] = c / 2 off the diagonal.
    """

    free: tuple = ()
    nonneg: tuple = ()
    psd: tuple = ()

    def value(self, free, nonneg, psd) -> float:
        v = 0.0
        for k, c in self.free:
            v += c * free[k]
        for k, c in self.nonneg:
            v += c * nonneg[k]
        for b, i, j, c in self.psd:
            v += c * psd[b][i, j]
        return float(v)


@dataclass(frozen=True)
class SdpProblem:
    psd_sides: tuple
    nonneg_dim: int
    free_dim: int
    rows: tuple
    rhs: tuple
    objective: LinExpr
    obj_offset: float = 0.0
    maximize: bool = False
    row_labels: tuple = ()
    nonneg_labels: tuple = ()
    free_labels: tuple = ()
    # presolve hint: merge exactly opposed nonneg column pairs (the two
    # sides of an equality multiplier) into free columns.  Safe and highly
    # effective when such pairs are mutually independent; producers of
    # higher-degree multiplier sets turn it off.
    merge_equality_pairs: bool = True

    def __post_init__(self):
        for expr in list(self.rows) + [self.objective]:
            for k, _ in expr.free:
                if not 0 <= k < self.free_dim:
                    raise SdpError("free index out of range")
            for k, _ in expr.nonneg:
                if not 0 <= k < self.nonneg_dim:
                    raise SdpError("nonneg index out of range")
            for b, i, j, _ in expr.psd:
                if not 0 <= b < len(self.psd_sides):
                    raise SdpError("psd block index out of range")
                if not 0 <= i <= j < self.psd_sides[b]:
                    raise SdpError("psd entry out of range")
        if len(self.rows) != len(self.rhs):
            raise SdpError("rows / rhs length mismatch")

    @property
    def m(self) -> int:
        return len(self.rows)


@dataclass
class SdpSolution:
    status: SdpStatus
    free: np.ndarray
    nonneg: np.ndarray
    psd: list
    y: np.ndarray
    slack_nonneg: np.ndarray
    slack_psd: list
    primal_objective: float
    dual_objective: float
    gap: float
    residual_primal: float
    residual_dual: float
    complementarity: float
    iterations: int
    certificate: dict | None = None
    trace: list = field(default_factory=list)
    notes: str = ""

    @property
    def value(self) -> float:
        return self.primal_objective


# ---------------------------------------------------------------------------
# presolve helpers (mutable dict representation)

_F, _L, _S = 0, 1, 2  # key group tags


def _expr_dict(expr: LinExpr) -> dict:
    d = {}
    for k, c in expr.free:
        d[(_F, k)] = d.get((_F, k), 0.0) + c
    for k, c in expr.nonneg:
        d[(_L, k)] = d.get((_L, k), 0.0) + c
    for b, i, j, c in expr.psd:
        d[(_S, b, i, j)] = d.get((_S, b, i, j), 0.0) + c
    return {k: v for k, v in d.items() if v != 0.0}


class _Presolved:
    """Reduced pure-cone problem plus everything needed to map back."""

    def __init__(self, problem: SdpProblem):
        self.problem = problem
        sign = -1.0 if problem.maximize else 1.0
        self.sign = sign
        self.rows = [_expr_dict(r) for r in problem.rows]
        self.rhs = [float(v) for v in problem.rhs]
        self.obj = {k: sign * v for k, v in _expr_dict(problem.objective).items()}
        self.obj_offset = sign * problem.obj_offset
        self.obj_offset_orig = sign * problem.obj_offset
        self.merged = []          # (k_plus, k_minus, free_key)
        self.pivots = []          # (free_key, row_index, row_dict_at_pivot, rhs)
        self.dropped_free = []    # free keys fixed to zero
        self.fixed_zero_nonneg = []
        self.active = list(range(len(self.rows)))
        self.infeasible_row = None
        self.unbounded_free = None
        self.unbounded_nonneg = None

        # original column magnitudes: elimination can cancel dependent
        # columns down to float dust, which must not be mistaken for data
        self.col_mag = {}
        for row in self.rows:
            for key, c in row.items():
                self.col_mag[key] = max(self.col_mag.get(key, 0.0), abs(c))
        self.obj_mag = max([abs(v) for v in self.obj.values()] + [1.0])

        self._run(merge=problem.merge_equality_pairs)
        if not self._merge_clean():
            # a merged column cancelled to dust during elimination: the pairs
            # were mutually dependent and the cascade is not exact, so start
            # over and leave them to the interior-point method
            self._reset()
            self._run(merge=False)

    def _reset(self):
        problem = self.problem
        self.rows = [_expr_dict(r) for r in problem.rows]
        self.rhs = [float(v) for v in problem.rhs]
        self.obj = {k: self.sign * v for k, v in _expr_dict(problem.objective).items()}
        self.obj_offset = self.sign * problem.obj_offset
        self.merged = []
        self.pivots = []
        self.dropped_free = []
        self.fixed_zero_nonneg = []
        self.active = list(range(len(self.rows)))
        self.infeasible_row = None
        self.unbounded_free = None
        self.unbounded_nonneg = None

    def _run(self, merge: bool):
        if merge:
            self._merge_opposed_pairs()
        self._eliminate_free()
        if self.infeasible_row is None and self.unbounded_free is None:
            self._drop_zero_columns()

    def _merge_clean(self) -> bool:
        """A merged pair whose column cancels to dust during elimination was
        linearly dependent on earlier pairs; pinning it would restrict the
        problem, so such runs are rejected."""
        if not self.merged:
            return True
        merged_keys = {fk for _, _, fk in self.merged}
        if self.unbounded_free in merged_keys:
            return False
        return not any(fk in merged_keys for fk in self.dropped_free)

    # -- opposed nonnegative columns -> free columns
    def _merge_opposed_pairs(self):
        cols = {}
        for ri in self.active:
            for key, c in self.rows[ri].items():
                if key[0] == _L:
                    cols.setdefault(key[1], {})[ri] = c
        sig = {}
        for k, col in cols.items():
            sig[k] = (frozenset(col.items()), self.obj.get((_L, k), 0.0))
        by_sig = {}
        for k, (s, oc) in sig.items():
            by_sig.setdefault((s, oc), []).append(k)
        used = set()
        next_free = self.problem.free_dim
        for k in sorted(cols):
            if k in used:
                continue
            col = cols[k]
            neg = (frozenset((r, -c) for r, c in col.items()),
                   -self.obj.get((_L, k), 0.0))
            for k2 in by_sig.get(neg, []):
                if k2 in used or k2 == k:
                    continue
                fk = (_F, next_free)
                next_free += 1
                self.merged.append((k, k2, fk))
                for ri, c in col.items():
                    row = self.rows[ri]
                    row.pop((_L, k), None)
                    row.pop((_L, k2), None)
                    row[fk] = c
                oc = self.obj.pop((_L, k), 0.0)
                self.obj.pop((_L, k2), None)
                if oc:
                    self.obj[fk] = oc
                used.add(k)
                used.add(k2)
                break

    def _eliminate_free(self):
        free_keys = [(_F, k) for k in range(self.problem.free_dim)]
        mag = dict(self.col_mag)
        for kp, _, fk in self.merged:
            mag[fk] = mag.get((_L, kp), 1.0)
        free_keys += [fk for _, _, fk in self.merged]
        for fk in free_keys:
            best, best_c = None, 0.0
            for ri in self.active:
                c = self.rows[ri].get(fk, 0.0)
                if abs(c) > abs(best_c):
                    best, best_c = ri, c
            if best is None or abs(best_c) <= 1e-10 * mag.get(fk, 1.0):
                # column cancelled to dust by earlier eliminations; its
                # reduced cost must be dust too unless truly unbounded
                oc = self.obj.pop(fk, 0.0)
                if abs(oc) > 1e-8 * self.obj_mag:
                    self.unbounded_free = fk
                    self.obj[fk] = oc
                    return
                for ri in self.active:
                    self.rows[ri].pop(fk, None)
                self.dropped_free.append(fk)
                continue
            prow = dict(self.rows[best])
            prhs = self.rhs[best]
            self.pivots.append((fk, best, prow, prhs))
            self.active.remove(best)
            for ri in self.active:
                c = self.rows[ri].pop(fk, None)
                if c:
                    lam = c / best_c
                    row = self.rows[ri]
                    for key, v in prow.items():
                        if key == fk:
                            continue
                        nv = row.get(key, 0.0) - lam * v
                        if nv == 0.0:
                            row.pop(key, None)
                        else:
                            row[key] = nv
                    self.rhs[ri] -= lam * prhs
            oc = self.obj.pop(fk, None)
            if oc:
                lam = oc / best_c
                for key, v in prow.items():
                    if key == fk:
                        continue
                    nv = self.obj.get(key, 0.0) - lam * v
                    if nv == 0.0:
                        self.obj.pop(key, None)
                    else:
                        self.obj[key] = nv
                self.obj_offset += lam * prhs
        # empty rows: inconsistent => infeasible, else drop
        scale = max([1.0] + [abs(v) for v in self.rhs])
        keep = []
        for ri in self.active:
            if self.rows[ri]:
                keep.append(ri)
            elif abs(self.rhs[ri]) > 1e-10 * scale:
                self.infeasible_row = ri
                return
        self.active = keep

    def _drop_zero_columns(self):
        """Nonnegative columns cancelled to numerical dust by elimination are
        fixed at zero (their reduced cost permitting); keeping them would
        wreck the column equilibration."""
        merged_ids = {k for kp, km, _ in self.merged for k in (kp, km)}
        norms = {}
        for ri in self.active:
            for key, c in self.rows[ri].items():
                if key[0] == _L:
                    norms[key[1]] = max(norms.get(key[1], 0.0), abs(c))
        for k in range(self.problem.nonneg_dim):
            if k in merged_ids:
                continue
            orig = self.col_mag.get((_L, k), 1.0)
            if norms.get(k, 0.0) > 1e-9 * max(orig, 1e-30):
                continue
            rc = self.obj.get((_L, k), 0.0)
            if rc < -1e-8 * self.obj_mag:
                self.unbounded_nonneg = k
                return
            self.fixed_zero_nonneg.append(k)
            self.obj.pop((_L, k), None)
            for ri in self.active:
                self.rows[ri].pop((_L, k), None)


# ---------------------------------------------------------------------------
# HKM / HSDE core on stacked arrays


class _ConeData:
    def __init__(self, pre: _Presolved):
        prob = pre.problem
        self.sides = list(prob.psd_sides)
        self.q = prob.nonneg_dim
        gone = {k for a, b, _ in pre.merged for k in (a, b)}
        gone.update(pre.fixed_zero_nonneg)
        self.lp_keep = [k for k in range(self.q) if k not in gone]
        self.lp_pos = {k: p for p, k in enumerate(self.lp_keep)}
        self.q_red = len(self.lp_keep)
        self.row_ids = list(pre.active)
        self.m = len(self.row_ids)

        m, sides, q = self.m, self.sides, self.q_red
        self.Al = np.zeros((m, q))
        dense = [np.zeros((m, s, s)) for s in sides]
        touched = [np.zeros(m, dtype=bool) for _ in sides]
        self.b = np.zeros(m)
        for out, ri in enumerate(self.row_ids):
            self.b[out] = pre.rhs[ri]
            for key, c in pre.rows[ri].items():
                if key[0] == _L:
                    self.Al[out, self.lp_pos[key[1]]] = c
                elif key[0] == _S:
                    _, bb, i, j = key
                    touched[bb][out] = True
                    if i == j:
                        dense[bb][out, i, i] += c
                    else:
                        dense[bb][out, i, j] += c / 2.0
                        dense[bb][out, j, i] += c / 2.0
                else:
                    raise SdpError("free key survived presolve")
        # compact per-block row stacks, flattened for BLAS-friendly products
        self.idx = [np.flatnonzero(t) for t in touched]
        self.Af = [dense[b][self.idx[b]].reshape(len(self.idx[b]), -1)
                   for b in range(len(sides))]
        self.cl = np.zeros(q)
        self.Cb = [np.zeros((s, s)) for s in sides]
        for key, c in pre.obj.items():
            if key[0] == _L:
                self.cl[self.lp_pos[key[1]]] = c
            elif key[0] == _S:
                _, bb, i, j = key
                if i == j:
                    self.Cb[bb][i, i] += c
                else:
                    self.Cb[bb][i, j] += c / 2.0
                    self.Cb[bb][j, i] += c / 2.0
            else:
                raise SdpError("free key survived presolve")
        self.col_scale = np.ones(q)
        self.row_scale = np.ones(m)
        self.obj_scale = 1.0

    def equilibrate(self):
        if self.q_red:
            norms = np.abs(self.Al).max(axis=0)
            scale = np.where(norms > 1e-12, 1.0 / np.clip(norms, 1e-6, 1e6), 1.0)
            self.col_scale = scale
            self.Al *= self.col_scale
            self.cl *= self.col_scale
        rown = np.abs(self.Al).max(axis=1, initial=0.0)
        for b in range(len(self.sides)):
            if len(self.idx[b]):
                np.maximum.at(rown, self.idx[b], np.abs(self.Af[b]).max(axis=1))
        self.row_scale = 1.0 / np.clip(np.maximum(rown, 1e-12), 1e-8, 1e8)
        self.Al *= self.row_scale[:, None]
        self.b *= self.row_scale
        for b in range(len(self.sides)):
            if len(self.idx[b]):
                self.Af[b] *= self.row_scale[self.idx[b]][:, None]
        cmax = max([abs(self.cl).max(initial=0.0)]
                   + [abs(C).max(initial=0.0) for C in self.Cb])
        self.obj_scale = 1.0 / max(1.0, cmax)
        self.cl *= self.obj_scale
        for C in self.Cb:
            C *= self.obj_scale

    @property
    def nu(self) -> float:
        return float(sum(self.sides) + self.q_red)


def _sym(a):
    return (a + a.T) / 2.0


def _chol(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def _max_step_psd(x, dx):
    l = _chol(x)
    if l is None:
        w = np.linalg.eigvalsh(_sym(x))
        l = _chol(_sym(x) + (abs(w.min()) + 1e-14) * np.eye(x.shape[0]))
        if l is None:
            return 0.0
    t = solve_triangular(l, dx, lower=True, check_finite=False)
    w = solve_triangular(l, t.T, lower=True, check_finite=False)
    lam = np.linalg.eigvalsh(_sym(w)).min()
    return math.inf if lam >= 0 else -1.0 / lam


def _max_step_vec(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-x[neg] / dx[neg]))


class _HsdeState:
    def __init__(self, cd: _ConeData):
        self.X = [np.eye(s) for s in cd.sides]
        self.S = [np.eye(s) for s in cd.sides]
        self.xl = np.ones(cd.q_red)
        self.sl = np.ones(cd.q_red)
        self.y = np.zeros(cd.m)
        self.tau = 1.0
        self.kappa = 1.0


def _apply_A(cd, X, xl):
    out = cd.Al @ xl if cd.q_red else np.zeros(cd.m)
    for b in range(len(cd.sides)):
        if len(cd.idx[b]):
            out[cd.idx[b]] += cd.Af[b] @ X[b].ravel()
    return out


def _apply_At(cd, y):
    mats = []
    for b, s in enumerate(cd.sides):
        if len(cd.idx[b]):
            mats.append((y[cd.idx[b]] @ cd.Af[b]).reshape(s, s))
        else:
            mats.append(np.zeros((s, s)))
    return mats, (cd.Al.T @ y if cd.q_red else np.zeros(0))


def _inner_blocks(A, B):
    return float(sum(np.sum(a * b) for a, b in zip(A, B)))


def _solve_hsde(cd: _ConeData, tol, max_iter):
    """Returns (status, state, trace, notes)."""
    st = _HsdeState(cd)
    trace = []
    nu = cd.nu + 1.0
    tiny_steps = 0
    best = None  # (state snapshot, merit)
    best_it = 0
    # factors mapping scaled residuals back to original-data magnitudes
    inv_row = 1.0 / cd.row_scale
    inv_obj = 1.0 / cd.obj_scale
    inv_col = (1.0 / cd.col_scale) * inv_obj if cd.q_red else np.zeros(0)

    def snapshot():
        s = _HsdeState(cd)
        s.X = [X.copy() for X in st.X]
        s.S = [S.copy() for S in st.S]
        s.xl, s.sl = st.xl.copy(), st.sl.copy()
        s.y = st.y.copy()
        s.tau, s.kappa = st.tau, st.kappa
        return s

    for it in range(max_iter):
        Sinv = []
        for Sb in st.S:
            l = _chol(_sym(Sb))
            if l is None:
                return SdpStatus.NumericalError, best[0] if best else st, trace, \
                    "dual block lost definiteness"
            li = np.linalg.inv(l)
            Sinv.append(li.T @ li)

        mu = (_inner_blocks(st.X, st.S)
              + (st.xl @ st.sl if cd.q_red else 0.0)
              + st.tau * st.kappa) / nu

        rp = cd.b * st.tau - _apply_A(cd, st.X, st.xl)
        AtyB, atyl = _apply_At(cd, st.y)
        Rd = [cd.Cb[b] * st.tau - AtyB[b] - st.S[b] for b in range(len(cd.sides))]
        rdl = cd.cl * st.tau - atyl - st.sl if cd.q_red else np.zeros(0)
        cx = _inner_blocks(cd.Cb, st.X) + (cd.cl @ st.xl if cd.q_red else 0.0)
        by = float(cd.b @ st.y)
        rg = st.kappa + cx - by

        # stopping metrics in original-data units
        pobj = cx / (st.tau * cd.obj_scale)
        dobj = by / (st.tau * cd.obj_scale)
        res_p = np.abs(rp * inv_row).max(initial=0.0) / st.tau
        res_d = max(
            [np.abs(r).max(initial=0.0) * inv_obj for r in Rd]
            + [np.abs(rdl * inv_col).max(initial=0.0)]
        ) / st.tau
        comp = (_inner_blocks(st.X, st.S) + (st.xl @ st.sl if cd.q_red else 0.0)) \
            * inv_obj / (st.tau * st.tau)
        gap_rel = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        trace.append(dict(it=it, mu=mu, pobj=pobj, dobj=dobj, res_p=res_p,
                          res_d=res_d, gap=gap_rel, tau=st.tau, kappa=st.kappa,
                          alpha=0.0, sigma=0.0))

        merit = max(res_p, res_d, gap_rel)
        if best is None or merit < 0.9 * best[1]:
            best = (snapshot(), merit)
            best_it = it
        elif merit < best[1]:
            best = (snapshot(), merit)

        # the dual gate is kept below 1e-9 so reconstructed slack blocks are
        # PSD to -1e-9 even after the eliminated duals are restored
        if (res_p <= tol and res_d <= min(tol, 5e-10) and gap_rel <= tol
                and comp <= tol * (1.0 + abs(pobj))):
            return SdpStatus.Optimal, st, trace, ""

        if it - best_it >= 12 and mu < 1e-12:
            return (SdpStatus.NumericalError, best[0], trace,
                    "progress stalled near the cone boundary")

        # infeasibility certificates (Farkas rays)
        norm_y = np.abs(st.y).max(initial=0.0)
        if by > tol * max(1.0, norm_y):
            resid = max([np.abs(AtyB[b] + st.S[b]).max(initial=0.0)
                         for b in range(len(cd.sides))]
                        + [np.abs(atyl + st.sl).max(initial=0.0) if cd.q_red else 0.0])
            if resid <= tol * by:
                return SdpStatus.PrimalInfeasible, st, trace, ""
        norm_x = max([np.abs(X).max(initial=0.0) for X in st.X]
                     + [np.abs(st.xl).max(initial=0.0) if cd.q_red else 0.0])
        if cx < -tol * max(1.0, norm_x):
            resid = np.abs(_apply_A(cd, st.X, st.xl)).max(initial=0.0)
            if resid <= -tol * cx:
                return SdpStatus.DualInfeasible, st, trace, ""

        if st.tau < 1e-12 * max(1.0, st.kappa) or mu < 1e-18:
            return (SdpStatus.NumericalError, best[0] if best else st, trace,
                    "embedding collapsed without a clean certificate")

        # Schur complement M = A H A^T (HKM scaling); per block
        # tr(A_i X A_j S^-1) = vec(A_i) (S^-1 ox X) vec(A_j) on the rows
        # touching the block
        M = np.zeros((cd.m, cd.m))
        for b in range(len(cd.sides)):
            ix = cd.idx[b]
            if not len(ix):
                continue
            kr = np.kron(Sinv[b], st.X[b])
            Wf = cd.Af[b] @ kr
            M[np.ix_(ix, ix)] += Wf @ cd.Af[b].T
        if cd.q_red:
            dxs = st.xl / st.sl
            M += (cd.Al * dxs) @ cd.Al.T
        M = _sym(M)

        jitter = 0.0
        L = None
        base = max(np.trace(M) / max(cd.m, 1), 1e-10)
        for k in range(6):
            L = _chol(M + jitter * np.eye(cd.m))
            if L is not None:
                break
            jitter = base * (10.0 ** (k - 12))
        if L is None:
            return SdpStatus.NumericalError, best[0] if best else st, trace, \
                "Schur factorization failed"

        M_hi = M.astype(np.longdouble)

        def tri_solve(v):
            return solve_triangular(
                L, solve_triangular(L, v, lower=True, check_finite=False),
                lower=True, trans="T", check_finite=False)

        def msolve(v):
            # mixed-precision iterative refinement: extended-precision
            # residuals let the Newton directions stay accurate even when
            # the Schur complement is nearly singular at the endgame
            x = tri_solve(v)
            v_hi = v.astype(np.longdouble)
            vnorm = float(np.abs(v).max(initial=0.0)) or 1.0
            for _ in range(6):
                r_hi = v_hi - M_hi @ x.astype(np.longdouble)
                r = r_hi.astype(np.float64)
                if np.abs(r).max(initial=0.0) <= 1e-14 * vnorm:
                    break
                x = x + tri_solve(r)
            return x

        def hop(b, U):
            return _sym(st.X[b] @ U @ Sinv[b])

        HC = [hop(b, cd.Cb[b]) for b in range(len(cd.sides))]
        hcl = (st.xl / st.sl) * cd.cl if cd.q_red else np.zeros(0)
        u = _apply_A(cd, HC, hcl)
        rho = _inner_blocks(cd.Cb, HC) + (cd.cl @ hcl if cd.q_red else 0.0)

        def direction(sigma, corr):
            dXa, dSa, dxa, dsa, dta, dka = corr if corr else (None,) * 6
            Psi = []
            for b in range(len(cd.sides)):
                t = sigma * mu * Sinv[b] - st.X[b] - hop(b, Rd[b])
                if dXa is not None:
                    t -= _sym(dXa[b] @ dSa[b] @ Sinv[b])
                Psi.append(t)
            if cd.q_red:
                psil = sigma * mu / st.sl - st.xl - (st.xl / st.sl) * rdl
                if dxa is not None:
                    psil -= dxa * dsa / st.sl
            else:
                psil = np.zeros(0)
            w = _apply_A(cd, Psi, psil)
            rhs1 = rp - w
            p = msolve(rhs1)
            q2 = msolve(u + cd.b)
            cpsi = _inner_blocks(cd.Cb, Psi) + (cd.cl @ psil if cd.q_red else 0.0)
            second = dta * dka if dta is not None else 0.0
            r2 = rg + (sigma * mu - st.tau * st.kappa - second) / st.tau + cpsi
            denom = (cd.b - u) @ q2 + rho + st.kappa / st.tau
            dtau = (r2 - (cd.b - u) @ p) / denom
            dy = p + q2 * dtau
            dAtB, datl = _apply_At(cd, dy)
            dS = [Rd[b] + cd.Cb[b] * dtau - dAtB[b] for b in range(len(cd.sides))]
            dsl = rdl + cd.cl * dtau - datl if cd.q_red else np.zeros(0)
            dX = [_sym(Psi[b] - hop(b, dS[b] - Rd[b])) for b in range(len(cd.sides))]
            dxl = (psil - (st.xl / st.sl) * (dsl - rdl)) if cd.q_red else np.zeros(0)
            dkap = (sigma * mu - st.tau * st.kappa - second - st.kappa * dtau) / st.tau
            return dX, dS, dxl, dsl, dy, dtau, dkap

        def max_step(dX, dS, dxl, dsl, dtau, dkap):
            a = math.inf
            for b in range(len(cd.sides)):
                a = min(a, _max_step_psd(st.X[b], dX[b]))
                a = min(a, _max_step_psd(st.S[b], dS[b]))
            if cd.q_red:
                a = min(a, _max_step_vec(st.xl, dxl))
                a = min(a, _max_step_vec(st.sl, dsl))
            if dtau < 0:
                a = min(a, -st.tau / dtau)
            if dkap < 0:
                a = min(a, -st.kappa / dkap)
            return a

        dXa, dSa, dxa, dsa, dya, dta, dka = direction(0.0, None)
        a_aff = min(1.0, max_step(dXa, dSa, dxa, dsa, dta, dka))
        mu_aff = (_inner_blocks([st.X[b] + a_aff * dXa[b] for b in range(len(cd.sides))],
                                [st.S[b] + a_aff * dSa[b] for b in range(len(cd.sides))])
                  + ((st.xl + a_aff * dxa) @ (st.sl + a_aff * dsa) if cd.q_red else 0.0)
                  + (st.tau + a_aff * dta) * (st.kappa + a_aff * dka)) / nu
        sigma = min(max((max(mu_aff, 0.0) / mu) ** 3, 1e-8), 0.9999)

        dX, dS, dxl, dsl, dy, dtau, dkap = direction(
            sigma, (dXa, dSa, dxa, dsa, dta, dka))
        alpha = min(1.0, 0.98 * max_step(dX, dS, dxl, dsl, dtau, dkap))
        trace[-1]["alpha"] = alpha
        trace[-1]["sigma"] = sigma
        if alpha < 1e-10:
            tiny_steps += 1
            if tiny_steps >= 5:
                return SdpStatus.NumericalError, best[0] if best else st, trace, \
                    "step length collapsed"
        else:
            tiny_steps = 0

        for b in range(len(cd.sides)):
            st.X[b] = _sym(st.X[b] + alpha * dX[b])
            st.S[b] = _sym(st.S[b] + alpha * dS[b])
        if cd.q_red:
            st.xl = st.xl + alpha * dxl
            st.sl = st.sl + alpha * dsl
        st.y = st.y + alpha * dy
        st.tau += alpha * dtau
        st.kappa += alpha * dkap

    return SdpStatus.IterationLimit, best[0] if best else st, trace, ""


# ---------------------------------------------------------------------------
# reconstruction against the original problem


def _recover_pivot_duals(pre: _Presolved, y_full, homogeneous: bool):
    """Duals of eliminated rows from free-variable stationarity.

    A merged opposed pair acts as a free variable whose column in the
    original data is its positive member's nonneg column (reduced cost zero
    at optimality, since both pair slacks vanish)."""
    if not pre.pivots:
        return y_full
    prob = pre.problem
    orig_rows = [_expr_dict(r) for r in prob.rows]
    col_key = {(_F, k): (_F, k) for k in range(prob.free_dim)}
    for kp, _, fk in pre.merged:
        col_key[fk] = (_L, kp)
    free_keys = [fk for fk, _, _, _ in pre.pivots]
    piv_rows = [ri for _, ri, _, _ in pre.pivots]
    F = len(free_keys)
    P = np.zeros((F, F))
    rhs = np.zeros(F)
    for a, fk in enumerate(free_keys):
        ck = col_key[fk]
        target = 0.0 if homogeneous else pre.obj_orig.get(ck, 0.0)
        acc = 0.0
        for ri, row in enumerate(orig_rows):
            c = row.get(ck, 0.0)
            if c == 0.0:
                continue
            if ri in piv_rows:
                P[a, piv_rows.index(ri)] = c
            else:
                acc += y_full[ri] * c
        rhs[a] = target - acc
    try:
        sol = np.linalg.solve(P, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(P, rhs, rcond=None)
    for p, ri in enumerate(piv_rows):
        y_full[ri] = sol[p]
    return y_full


def _reconstruct(pre: _Presolved, cd: _ConeData, st: _HsdeState, rays: bool,
                 ray_kind: str = "") -> SdpSolution:
    prob = pre.problem
    tau = st.tau if not rays else 1.0
    if not rays and tau <= 0:
        tau = 1.0

    psd = [np.array(X) / tau for X in st.X]
    xl_red = (st.xl / tau) if cd.q_red else np.zeros(0)
    y_red = st.y / tau

    # undo scaling; psd variables are untouched by row/col/obj scaling
    xl_red = xl_red * cd.col_scale if cd.q_red else xl_red
    y_full = np.zeros(prob.m)
    for out, ri in enumerate(cd.row_ids):
        y_full[ri] = y_red[out] * cd.row_scale[out]
    y_full /= cd.obj_scale

    nonneg = np.zeros(prob.nonneg_dim)
    for k, pos in cd.lp_pos.items():
        nonneg[k] = xl_red[pos]

    # free values: merged pairs then eliminated pivots, in reverse order
    free_vals = {}
    if rays:
        rhs_of = {ri: 0.0 for _, ri, _, _ in pre.pivots}
    else:
        rhs_of = {ri: rhs for _, ri, _, rhs in pre.pivots}

    def key_value(key):
        if key[0] == _L:
            return nonneg[key[1]]
        if key[0] == _S:
            _, b, i, j = key
            return psd[b][i, j]
        return free_vals.get(key, None)

    for fk, ri, row, rrhs in reversed(pre.pivots):
        c_piv = row[fk]
        acc = rhs_of[ri]
        ok = True
        for key, c in row.items():
            if key == fk:
                continue
            v = key_value(key)
            if v is None:
                ok = False
                break
            acc -= c * v
        free_vals[fk] = (acc / c_piv) if ok else 0.0
    for fk in pre.dropped_free:
        free_vals[fk] = 0.0

    free = np.zeros(prob.free_dim)
    for k in range(prob.free_dim):
        free[k] = free_vals.get((_F, k), 0.0)
    for kp, km, fk in pre.merged:
        v = free_vals.get(fk, 0.0)
        nonneg[kp] = max(v, 0.0)
        nonneg[km] = max(-v, 0.0)

    pre.obj_orig = {k: pre.sign * v for k, v in _expr_dict(prob.objective).items()}
    y_full = _recover_pivot_duals(pre, y_full, homogeneous=rays)

    # dual slacks against original data (min form)
    orig_rows = [_expr_dict(r) for r in prob.rows]
    slack_psd = []
    for b, s in enumerate(prob.psd_sides):
        C = np.zeros((s, s))
        slack_psd.append(C)
    slack_nonneg = np.zeros(prob.nonneg_dim)
    for key, c in pre.obj_orig.items():
        if key[0] == _S:
            _, b, i, j = key
            if i == j:
                slack_psd[b][i, i] += c
            else:
                slack_psd[b][i, j] += c / 2.0
                slack_psd[b][j, i] += c / 2.0
        elif key[0] == _L:
            slack_nonneg[key[1]] += c
    if rays:
        for b in range(len(slack_psd)):
            slack_psd[b][:] = 0.0
        slack_nonneg[:] = 0.0
    for ri, row in enumerate(orig_rows):
        yv = y_full[ri]
        if yv == 0.0:
            continue
        for key, c in row.items():
            if key[0] == _S:
                _, b, i, j = key
                if i == j:
                    slack_psd[b][i, i] -= yv * c
                else:
                    slack_psd[b][i, j] -= yv * c / 2.0
                    slack_psd[b][j, i] -= yv * c / 2.0
            elif key[0] == _L:
                slack_nonneg[key[1]] -= yv * c

    # residuals / objectives in min form on original data
    res_p = 0.0
    for ri, row in enumerate(orig_rows):
        v = 0.0
        for key, c in row.items():
            if key[0] == _F:
                v += c * free[key[1]]
            elif key[0] == _L:
                v += c * nonneg[key[1]]
            else:
                _, b, i, j = key
                v += c * psd[b][i, j]
        target = 0.0 if rays else float(prob.rhs[ri])
        res_p = max(res_p, abs(v - target))

    pobj_min = pre.obj_offset_orig if not rays else 0.0
    for key, c in pre.obj_orig.items():
        if key[0] == _F:
            pobj_min += c * free[key[1]]
        elif key[0] == _L:
            pobj_min += c * nonneg[key[1]]
        else:
            _, b, i, j = key
            pobj_min += c * psd[b][i, j]
    dobj_min = float(np.dot(y_full, np.asarray(prob.rhs, dtype=float)))
    if not rays:
        dobj_min += pre.obj_offset_orig

    # dual residual: free parts of c - A^T y must vanish exactly; the cone
    # parts are absorbed into the slacks, whose negative part is the miss
    res_d = 0.0
    for k in range(prob.free_dim):
        v = pre.obj_orig.get((_F, k), 0.0)
        for ri, row in enumerate(orig_rows):
            v -= y_full[ri] * row.get((_F, k), 0.0)
        res_d = max(res_d, abs(v))
    if not rays:
        for Sb in slack_psd:
            if Sb.size:
                res_d = max(res_d, -float(np.linalg.eigvalsh(_sym(Sb)).min()), 0.0)
        if slack_nonneg.size:
            res_d = max(res_d, -float(slack_nonneg.min()), 0.0)

    comp = _inner_blocks(slack_psd, psd) + float(slack_nonneg @ nonneg)

    sign = pre.sign
    return SdpSolution(
        status=SdpStatus.Optimal,  # caller overwrites
        free=free,
        nonneg=nonneg,
        psd=psd,
        y=y_full,
        slack_nonneg=slack_nonneg,
        slack_psd=slack_psd,
        primal_objective=sign * pobj_min,
        dual_objective=sign * dobj_min,
        gap=abs(pobj_min - dobj_min) / (1.0 + abs(pobj_min) + abs(dobj_min)),
        residual_primal=res_p,
        residual_dual=res_d,
        complementarity=comp,
        iterations=0,
    )


def solve(problem: SdpProblem, tol: float = 1e-8, max_iter: int = 200,
          verbose: bool = False) -> SdpSolution:
    """Solve the block SDP; deterministic for identical inputs and options.

    Status Optimal guarantees relative gap and unscaled primal/dual residuals
    at most tol and PSD blocks positive semidefinite to -1e-9.  Infeasible
    statuses carry an improving-ray certificate.  Numerical trouble is
    reported in the status, never raised.
    """
    if threadpool_limits is not None:
        # blocks are tiny; multithreaded BLAS only adds sync overhead
        with threadpool_limits(limits=1):
            return _solve_entry(problem, tol, max_iter, verbose)
    return _solve_entry(problem, tol, max_iter, verbose)


def _solve_entry(problem: SdpProblem, tol: float, max_iter: int,
                 verbose: bool) -> SdpSolution:
    if problem.m < 1:
        raise SdpError("problem needs at least one equality row")
    pre = _Presolved(problem)
    pre.obj_orig = {k: pre.sign * v for k, v in _expr_dict(problem.objective).items()}

    if pre.unbounded_free is not None:
        sol = _empty_solution(problem, SdpStatus.DualInfeasible)
        sol.notes = "free variable with cost appears in no row"
        fk = pre.unbounded_free
        ray = np.zeros(problem.free_dim)
        if fk[1] < problem.free_dim:
            ray[fk[1]] = -math.copysign(1.0, pre.obj.get(fk, pre.obj_orig.get(fk, 1.0)))
        sol.certificate = {"kind": "primal_ray", "free": ray}
        return sol
    if pre.unbounded_nonneg is not None:
        sol = _empty_solution(problem, SdpStatus.DualInfeasible)
        ray = np.zeros(problem.nonneg_dim)
        ray[pre.unbounded_nonneg] = 1.0
        sol.certificate = {"kind": "primal_ray", "nonneg": ray}
        sol.notes = "nonnegative column with negative cost appears in no row"
        return sol
    if pre.infeasible_row is not None:
        sol = _empty_solution(problem, SdpStatus.PrimalInfeasible)
        y = np.zeros(problem.m)
        # combination proving 0 = nonzero: the emptied row plus its pivots
        y[pre.infeasible_row] = math.copysign(1.0, pre.rhs[pre.infeasible_row])
        y = _recover_pivot_duals(pre, y, homogeneous=True)
        sol.certificate = {"kind": "dual_ray", "y": y,
                           "dual_objective": float(y @ np.asarray(problem.rhs))}
        sol.notes = "contradictory rows found in presolve"
        return sol

    cd = _ConeData(pre)
    if cd.m == 0:
        return _solve_trivial(problem, pre, cd)
    cd.equilibrate()

    status, st, trace, notes = _solve_hsde(cd, tol, max_iter)

    if status in (SdpStatus.PrimalInfeasible, SdpStatus.DualInfeasible):
        sol = _reconstruct(pre, cd, st, rays=True)
        sol.status = status
        sol.iterations = len(trace)
        sol.trace = trace
        sol.notes = notes
        if status == SdpStatus.PrimalInfeasible:
            scale = float(sol.y @ np.asarray(problem.rhs, dtype=float))
            yv = sol.y / scale if scale != 0 else sol.y
            sol.certificate = {"kind": "dual_ray", "y": yv,
                               "dual_objective": pre.sign * float(
                                   yv @ np.asarray(problem.rhs, dtype=float))}
        else:
            sol.certificate = {
                "kind": "primal_ray",
                "nonneg": sol.nonneg.copy(),
                "psd": [p.copy() for p in sol.psd],
                "free": sol.free.copy(),
                "objective": sol.primal_objective,
            }
        return sol

    sol = _reconstruct(pre, cd, st, rays=False)
    sol.status = status
    sol.iterations = len(trace)
    sol.trace = trace
    sol.notes = notes
    if verbose:
        for t in trace:
            print(t)
    return sol


def _empty_solution(problem: SdpProblem, status: SdpStatus) -> SdpSolution:
    return SdpSolution(
        status=status,
        free=np.zeros(problem.free_dim),
        nonneg=np.zeros(problem.nonneg_dim),
        psd=[np.zeros((s, s)) for s in problem.psd_sides],
        y=np.zeros(problem.m),
        slack_nonneg=np.zeros(problem.nonneg_dim),
        slack_psd=[np.zeros((s, s)) for s in problem.psd_sides],
        primal_objective=math.nan,
        dual_objective=math.nan,
        gap=math.nan,
        residual_primal=math.nan,
        residual_dual=math.nan,
        complementarity=math.nan,
        iterations=0,
    )


def _solve_trivial(problem, pre, cd):
    """All rows were removed by presolve: optimum is at the cone origin
    unless the reduced cost points outward."""
    lp_bad = cd.q_red and np.any(cd.cl < -1e-12)
    psd_bad = any(np.linalg.eigvalsh(_sym(C)).min() < -1e-12 for C in cd.Cb)
    st = _HsdeState(cd)
    for b in range(len(st.X)):
        st.X[b] *= 0.0
    st.xl *= 0.0
    st.y *= 0.0
    st.tau = 1.0
    if lp_bad or psd_bad:
        sol = _reconstruct(pre, cd, st, rays=False)
        sol.status = SdpStatus.DualInfeasible
        sol.notes = "unconstrained direction of decreasing cost"
        return sol
    sol = _reconstruct(pre, cd, st, rays=False)
    sol.status = SdpStatus.Optimal
    return sol


# ---------------------------------------------------------------------------
# SDPA sparse format

_FMT = "{:.17g}"


def _sdpa_layout(problem: SdpProblem):
    """Block layout used on export: PSD blocks, then a diagonal block for the
    nonnegative variables, then a diagonal block of paired columns (t+, t-)
    for each free scalar."""
    blocks = [int(s) for s in problem.psd_sides]
    if problem.nonneg_dim:
        blocks.append(-int(problem.nonneg_dim))
    if problem.free_dim:
        blocks.append(-2 * int(problem.free_dim))
    return blocks


def _sdpa_entries(problem: SdpProblem, expr: LinExpr):
    """(block, i, j, value) entries, 1-based, upper triangle."""
    nb = len(problem.psd_sides)
    lp_block = nb + 1
    free_block = nb + (2 if problem.nonneg_dim else 1)
    out = []
    for b, i, j, c in expr.psd:
        v = c if i == j else c / 2.0
        out.append((b + 1, i + 1, j + 1, v))
    for k, c in expr.nonneg:
        out.append((lp_block, k + 1, k + 1, c))
    for k, c in expr.free:
        out.append((free_block, 2 * k + 1, 2 * k + 1, c))
        out.append((free_block, 2 * k + 2, 2 * k + 2, -c))
    return out


def export_sdpa(problem: SdpProblem, path) -> None:
    """Write the problem in SDPA sparse format (.dat-s).

    The file encodes the dual orientation max tr(F0 Y) s.t. tr(Fi Y) = c_i,
    Y >= 0, which matches the problem's own variable layout; the objective
    is negated for minimization problems so external optima compare
    directly.  Values carry 17 significant digits for an exact round trip.
    """
    if problem.m < 1:
        raise SdpError("SDPA export requires at least one constraint row")
    blocks = _sdpa_layout(problem)
    sign = 1.0 if problem.maximize else -1.0
    lines = [f"{problem.m}", f"{len(blocks)}",
             " ".join(str(b) for b in blocks),
             " ".join(_FMT.format(v) for v in problem.rhs)]
    for b, i, j, v in _sdpa_entries(problem, problem.objective):
        lines.append(f"0 {b} {i} {j} " + _FMT.format(sign * v))
    for ri, expr in enumerate(problem.rows, start=1):
        for b, i, j, v in _sdpa_entries(problem, expr):
            lines.append(f"{ri} {b} {i} {j} " + _FMT.format(v))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sdpa(path) -> dict:
    """Parse a .dat-s file into raw data: m, block structure, c, entries."""
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith(('"', "*")):
                continue
            line = line.replace(",", " ").replace("{", " ").replace("}", " ")
            line = line.replace("(", " ").replace(")", " ")
            tokens.append(line.split())
    flat = [t for row in tokens for t in row]
    m = int(flat[0])
    nblocks = int(flat[1])
    blocks = [int(v) for v in flat[2: 2 + nblocks]]
    c = [float(v) for v in flat[2 + nblocks: 2 + nblocks + m]]
    rest = flat[2 + nblocks + m:]
    if len(rest) % 5:
        raise SdpError("malformed SDPA entry section")
    entries = []
    for k in range(0, len(rest), 5):
        entries.append((int(rest[k]), int(rest[k + 1]), int(rest[k + 2]),
                        int(rest[k + 3]), float(rest[k + 4])))
    return {"m": m, "blocks": blocks, "c": c, "entries": entries}


@dataclass
class SdpaSolutionFragment:
    xvec: np.ndarray | None
    xmat: list
    ymat: list
    objective_primal: float | None
    objective_dual: float | None


def import_sdpa_solution(path) -> SdpaSolutionFragment:
    """Parse the sections of an SDPA output file (xVec / xMat / yMat and the
    reported objective values).  Tolerant of formatting variations."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()

    def grab_obj(tag):
        for line in text.splitlines():
            if tag in line and "=" in line:
                try:
                    return float(line.split("=")[1].strip().rstrip(";"))
                except ValueError:
                    return None
        return None

    def grab_block(tag):
        idx = text.find(tag)
        if idx < 0:
            return None
        start = text.find("{", idx)
        if start < 0:
            return None
        depth = 0
        for pos in range(start, len(text)):
            if text[pos] == "{":
                depth += 1
            elif text[pos] == "}":
                depth -= 1
                if depth == 0:
                    return text[start: pos + 1]
        return None

    def parse_nested(blob):
        blob = blob.strip()
        assert blob[0] == "{" and blob[-1] == "}"
        inner = blob[1:-1].strip()
        if "{" not in inner:
            vals = [float(v) for v in inner.replace(",", " ").split() if v]
            return np.asarray(vals)
        mats = []
        depth = 0
        start = None
        for pos, ch in enumerate(inner):
            if ch == "{":
                if depth == 0:
                    start = pos
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    mats.append(parse_nested(inner[start: pos + 1]))
        return mats

    def to_matrices(parsed):
        if parsed is None:
            return []
        if isinstance(parsed, np.ndarray):
            return [parsed]
        out = []
        for p in parsed:
            if isinstance(p, list):
                out.append(np.vstack(p))
            else:
                out.append(p)
        return out

    xvec_blob = grab_block("xVec")
    xvec = parse_nested(xvec_blob) if xvec_blob else None
    if isinstance(xvec, list):
        xvec = np.concatenate([np.atleast_1d(v) for v in xvec])
    return SdpaSolutionFragment(
        xvec=xvec,
        xmat=to_matrices(parse_nested(grab_block("xMat")) if grab_block("xMat") else None),
        ymat=to_matrices(parse_nested(grab_block("yMat")) if grab_block("yMat") else None),
        objective_primal=grab_obj("objValPrimal"),
        objective_dual=grab_obj("objValDual"),
    )


def external_solver_objective(problem: SdpProblem, binary: str | None = None,
                              timeout: float = 120.0) -> float:
    """Run an SDPA-format solver on the problem and return its primal
    objective in this problem's sense.  The binary defaults to the
    SOSIK_EXTERNAL_SDP environment variable."""
    binary = binary or os.environ.get("SOSIK_EXTERNAL_SDP")
    if not binary:
        raise SdpError("no external SDPA solver configured")
    with tempfile.TemporaryDirectory() as tmp:
        dat = os.path.join(tmp, "problem.dat-s")
        out = os.path.join(tmp, "problem.result")
        export_sdpa(problem, dat)
        subprocess.run([binary, dat, out], check=True, timeout=timeout,
                       stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        frag = import_sdpa_solution(out)
    if frag.objective_primal is None:
        raise SdpError("external solver produced no objective value")
    sign = 1.0 if problem.maximize else -1.0
    return sign * frag.objective_primal
