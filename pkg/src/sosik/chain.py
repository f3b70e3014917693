"""Serial spherical-joint chains: geometry, feasibility checks, sampling.

A chain is described by its link lengths, symmetric inter-link angle limits,
a base anchor and a goal (either the end point alone, or the last two points
for a full end-link pose).  Configurations are stored as joint positions;
joint angles are a derived view and can be recovered geometrically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

DEFAULT_TOL_EQ = 1e-6
DEFAULT_TOL_INEQ = 1e-6
COLLINEAR_RATIO = 1e-8
_POSE_LINK_TOL = 1e-9


class ChainError(ValueError):
    """Invalid chain description or configuration input."""


class DegenerateDirectionError(ChainError):
    """Two consecutive joints coincide; link direction is undefined."""


class InfeasibleConfigurationError(ChainError):
    """Operation requires a kinematically feasible configuration."""


@dataclass(frozen=True)
class Goal:
    """Workspace goal: end point only, or end point plus the previous joint."""

    kind: str  # "position" | "pose"
    x_n: tuple
    x_nm1: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("position", "pose"):
            raise ChainError(f"unknown goal kind {self.kind!r}")
        if self.kind == "pose" and self.x_nm1 is None:
            raise ChainError("pose goal requires x_nm1")


@dataclass(frozen=True)
class ChainSpec:
    """Geometry of one problem instance.

    link_lengths has one entry per link (N links).  angle_limits has one
    entry per inter-link angle (N-1 entries); a limit of pi means the joint
    is unconstrained.  An optional mount constraint limits the first link
    direction against a fixed axis.
    """

    dimension: int
    link_lengths: tuple
    angle_limits: tuple
    base: tuple
    goal: Goal
    mount_direction: tuple | None = None
    mount_limit: float | None = None

    def __post_init__(self):
        d = self.dimension
        if d not in (2, 3):
            raise ChainError("dimension must be 2 or 3")
        ll = tuple(float(v) for v in self.link_lengths)
        al = tuple(float(v) for v in self.angle_limits)
        object.__setattr__(self, "link_lengths", ll)
        object.__setattr__(self, "angle_limits", al)
        object.__setattr__(self, "base", tuple(float(v) for v in self.base))
        n = len(ll)
        if n < 2:
            raise ChainError("need at least two links")
        if len(al) != n - 1:
            raise ChainError(f"expected {n - 1} angle limits, got {len(al)}")
        if any(not (v > 0) or not math.isfinite(v) for v in ll):
            raise ChainError("link lengths must be positive and finite")
        if any(not (0 < a <= math.pi) for a in al):
            raise ChainError("angle limits must lie in (0, pi]")
        if len(self.base) != d:
            raise ChainError("base dimension mismatch")
        if len(self.goal.x_n) != d:
            raise ChainError("goal dimension mismatch")
        if self.goal.kind == "pose":
            if len(self.goal.x_nm1) != d:
                raise ChainError("goal x_nm1 dimension mismatch")
            gap = np.linalg.norm(np.subtract(self.goal.x_n, self.goal.x_nm1))
            if abs(gap - ll[-1]) > _POSE_LINK_TOL:
                raise ChainError(
                    f"pose goal separation {gap!r} does not match last link {ll[-1]!r}"
                )
        if (self.mount_direction is None) != (self.mount_limit is None):
            raise ChainError("mount direction and limit must be given together")
        if self.mount_direction is not None:
            md = np.asarray(self.mount_direction, dtype=float)
            if md.shape != (d,) or abs(np.linalg.norm(md) - 1.0) > 1e-9:
                raise ChainError("mount direction must be a unit d-vector")
            object.__setattr__(self, "mount_direction", tuple(md))
            if not (0 < self.mount_limit <= math.pi):
                raise ChainError("mount limit must lie in (0, pi]")

    @property
    def dof(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    @property
    def is_pose(self) -> bool:
        return self.goal.kind == "pose"

    @property
    def free_joints(self) -> tuple:
        """Indices of joints whose position is not pinned by an anchor."""
        n = self.dof
        last = n - 2 if self.is_pose else n - 1
        return tuple(range(1, last + 1))

    def anchor(self, joint: int) -> np.ndarray | None:
        """Fixed position of joint `joint`, or None if it is free."""
        n = self.dof
        if joint == 0:
            return np.asarray(self.base, dtype=float)
        if joint == n:
            return np.asarray(self.goal.x_n, dtype=float)
        if self.is_pose and joint == n - 1:
            return np.asarray(self.goal.x_nm1, dtype=float)
        return None

    def with_goal(self, goal: Goal) -> "ChainSpec":
        return replace(self, goal=goal)


@dataclass(frozen=True)
class Configuration:
    """Joint positions x_1..x_N (base excluded), one row per joint."""

    joints: np.ndarray

    def __post_init__(self):
        j = np.array(self.joints, dtype=float)
        j.setflags(write=False)
        object.__setattr__(self, "joints", j)
        if j.ndim != 2:
            raise ChainError("joints must be a (N, d) array")
        if not np.all(np.isfinite(j)):
            raise ChainError("non-finite joint position")

    @property
    def end_point(self) -> np.ndarray:
        return self.joints[-1]


@dataclass(frozen=True)
class FeasibilityReport:
    link_residuals: tuple
    angle_residuals: tuple
    anchor_residuals: tuple
    mount_residual: float | None
    max_violation: float
    feasible: bool


@dataclass(frozen=True)
class StrongDualityReport:
    """Premises under which the convex relaxation is provably tight near
    a feasible reference: not fully extended, and no angle limit active."""

    collinear: bool
    active_limits: tuple
    premise_holds: bool
    jacobian_rank: int | None = None


def _initial_frame(d: int) -> tuple:
    # Reference direction for the first link is the +x axis.
    z = np.zeros(d)
    z[0] = 1.0
    n = np.zeros(d)
    n[1] = 1.0
    if d == 2:
        return z, n, None
    b = np.zeros(3)
    b[2] = 1.0
    return z, n, b


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    k = axis
    kmat = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kmat + (1 - math.cos(angle)) * (kmat @ kmat)


def _angles_array(spec: ChainSpec, angles) -> np.ndarray:
    a = np.asarray(angles, dtype=float)
    n = spec.dof
    want = (n,) if spec.dimension == 2 else (n, 2)
    if a.shape != want:
        raise ChainError(f"expected angle array of shape {want}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ChainError("non-finite joint angle")
    return a


def forward_kinematics(spec: ChainSpec, angles) -> Configuration:
    """Accumulate joint positions from joint angles.

    For d=2 the input is N scalars: the first is the absolute direction of
    link 1 (from the +x axis), the rest are signed bends relative to the
    previous link.  For d=3 the input is N (azimuth, bend) pairs relative to
    a parallel-transported link frame, the first pair being taken against
    the fixed base frame.
    """
    a = _angles_array(spec, angles)
    d, n = spec.dimension, spec.dof
    pts = np.empty((n, d))
    pos = np.asarray(spec.base, dtype=float)
    if d == 2:
        heading = 0.0
        for i in range(n):
            heading = a[i] if i == 0 else heading + a[i]
            pos = pos + spec.link_lengths[i] * np.array(
                [math.cos(heading), math.sin(heading)]
            )
            pts[i] = pos
    else:
        z, nvec, bvec = _initial_frame(3)
        for i in range(n):
            az, bend = a[i]
            u = math.cos(az) * nvec + math.sin(az) * bvec
            axis = np.cross(z, u)
            rot = _rodrigues(axis, bend)
            z, nvec, bvec = rot @ z, rot @ nvec, rot @ bvec
            pos = pos + spec.link_lengths[i] * z
            pts[i] = pos
    return Configuration(pts)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def angles_from_positions(spec: ChainSpec, cfg: Configuration) -> np.ndarray:
    """Recover the joint-angle description of a configuration.

    Round-trip contract: forward_kinematics on the result reproduces the
    joint positions to 1e-9 per joint, provided consecutive joints do not
    coincide.
    """
    d, n = spec.dimension, spec.dof
    pts = np.vstack([np.asarray(spec.base, dtype=float), cfg.joints])
    if pts.shape != (n + 1, d):
        raise ChainError("configuration does not match spec")
    diffs = np.diff(pts, axis=0)
    norms = np.linalg.norm(diffs, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateDirectionError("coincident consecutive joints")
    dirs = diffs / norms[:, None]
    if d == 2:
        abs_angles = np.arctan2(dirs[:, 1], dirs[:, 0])
        out = np.empty(n)
        out[0] = abs_angles[0]
        for i in range(1, n):
            out[i] = _wrap(abs_angles[i] - abs_angles[i - 1])
        return out
    z, nvec, bvec = _initial_frame(3)
    out = np.empty((n, 2))
    for i in range(n):
        zi = dirs[i]
        c = float(np.clip(z @ zi, -1.0, 1.0))
        w = zi - c * z
        wn = np.linalg.norm(w)
        if wn > 1e-12:
            u = w / wn
            bend = math.atan2(wn, c)
            az = math.atan2(u @ bvec, u @ nvec)
        else:
            # Parallel or anti-parallel: azimuth is arbitrary.
            u = nvec
            bend = 0.0 if c > 0 else math.pi
            az = 0.0
        out[i] = (az, bend)
        rot = _rodrigues(np.cross(z, u), bend)
        z, nvec, bvec = rot @ z, rot @ nvec, rot @ bvec
    return out


def _unit_dirs_nominal(spec: ChainSpec, pts: np.ndarray) -> np.ndarray:
    # Directions scaled by the nominal link lengths; exactly unit on a
    # feasible configuration and polynomial in the positions.
    diffs = np.diff(pts, axis=0)
    return diffs / np.asarray(spec.link_lengths, dtype=float)[:, None]


def check_feasible(
    spec: ChainSpec,
    cfg: Configuration,
    tol_eq: float = DEFAULT_TOL_EQ,
    tol_ineq: float = DEFAULT_TOL_INEQ,
) -> FeasibilityReport:
    """Evaluate link, angle, and goal-anchor residuals of a configuration.

    Link residual i is ||x_i - x_{i-1}||^2 - l_i^2; angle residual i is
    ||z_{i+1} - z_i||^2 - 2(1 - cos alpha_i) with z the nominally scaled
    link directions.  Anchor residuals (squared distance of the constrained
    joints from their goal points) count as equalities.
    """
    d, n = spec.dimension, spec.dof
    pts = np.vstack([np.asarray(spec.base, dtype=float), cfg.joints])
    if pts.shape != (n + 1, d):
        raise ChainError("configuration does not match spec")
    sq = np.sum(np.diff(pts, axis=0) ** 2, axis=1)
    link_res = sq - np.asarray(spec.link_lengths) ** 2
    zdir = _unit_dirs_nominal(spec, pts)
    ang_res = np.empty(n - 1)
    for i in range(1, n):
        ang_res[i - 1] = np.sum((zdir[i] - zdir[i - 1]) ** 2) - 2.0 * (
            1.0 - math.cos(spec.angle_limits[i - 1])
        )
    anchors = [np.sum((cfg.joints[-1] - np.asarray(spec.goal.x_n)) ** 2)]
    if spec.is_pose:
        anchors.append(np.sum((cfg.joints[-2] - np.asarray(spec.goal.x_nm1)) ** 2))
    mount_res = None
    if spec.mount_direction is not None:
        mres = np.sum((zdir[0] - np.asarray(spec.mount_direction)) ** 2) - 2.0 * (
            1.0 - math.cos(spec.mount_limit)
        )
        mount_res = float(mres)
    viol = [np.max(np.abs(link_res)), max(ang_res.max(initial=-np.inf), 0.0)]
    viol.extend(abs(a) for a in anchors)
    if mount_res is not None:
        viol.append(max(mount_res, 0.0))
    max_violation = float(max(viol))
    feasible = (
        np.max(np.abs(link_res)) <= tol_eq
        and np.max(ang_res, initial=0.0) <= tol_ineq
        and all(a <= tol_eq for a in anchors)
        and (mount_res is None or mount_res <= tol_ineq)
    )
    return FeasibilityReport(
        link_residuals=tuple(float(v) for v in link_res),
        angle_residuals=tuple(float(v) for v in ang_res),
        anchor_residuals=tuple(float(v) for v in anchors),
        mount_residual=mount_res,
        max_violation=max_violation,
        feasible=bool(feasible),
    )


def sample_feasible(spec: ChainSpec, rng_seed) -> Configuration:
    """Draw a feasible configuration: each relative bend uniform within its
    limit (uniform azimuth for d=3), the first link direction uniform."""
    rng = np.random.default_rng(rng_seed)
    n = spec.dof
    if spec.dimension == 2:
        angles = np.empty(n)
        if spec.mount_direction is not None:
            base_heading = math.atan2(spec.mount_direction[1], spec.mount_direction[0])
            angles[0] = base_heading + rng.uniform(-spec.mount_limit, spec.mount_limit)
        else:
            angles[0] = rng.uniform(-math.pi, math.pi)
        for i in range(1, n):
            lim = spec.angle_limits[i - 1]
            angles[i] = rng.uniform(-lim, lim)
    else:
        angles = np.empty((n, 2))
        if spec.mount_direction is not None:
            # Draw a direction in the cone around the mount axis, then express
            # it as (azimuth, bend) against the base frame.
            m = np.asarray(spec.mount_direction, dtype=float)
            u1 = np.cross(m, [1.0, 0.0, 0.0])
            if np.linalg.norm(u1) < 1e-9:
                u1 = np.cross(m, [0.0, 1.0, 0.0])
            u1 /= np.linalg.norm(u1)
            u2 = np.cross(m, u1)
            t = rng.uniform(-spec.mount_limit, spec.mount_limit)
            p = rng.uniform(-math.pi, math.pi)
            w = math.cos(t) * m + math.sin(t) * (math.cos(p) * u1 + math.sin(p) * u2)
            lateral = math.hypot(w[1], w[2])
            angles[0] = (math.atan2(w[2], w[1]) if lateral > 1e-12 else 0.0,
                         math.atan2(lateral, w[0]))
        else:
            angles[0] = (rng.uniform(-math.pi, math.pi),
                         math.acos(rng.uniform(-1.0, 1.0)))
        for i in range(1, n):
            lim = spec.angle_limits[i - 1]
            angles[i] = (rng.uniform(-math.pi, math.pi), rng.uniform(-lim, lim))
    return forward_kinematics(spec, angles)


def slack_values(spec: ChainSpec, cfg: Configuration) -> dict:
    """Consistent nonnegative slack value per limited angle index.

    Index i >= 1 is the inter-link angle at joint i; index 0 is the mount
    constraint when present.  s_i = sqrt(max(0, 2(1-cos a_i) - ||dz||^2)).
    """
    pts = np.vstack([np.asarray(spec.base, dtype=float), cfg.joints])
    zdir = _unit_dirs_nominal(spec, pts)
    out = {}
    if spec.mount_direction is not None:
        r = 2.0 * (1.0 - math.cos(spec.mount_limit)) - np.sum(
            (zdir[0] - np.asarray(spec.mount_direction)) ** 2
        )
        out[0] = math.sqrt(max(0.0, float(r)))
    for i in range(1, spec.dof):
        if spec.angle_limits[i - 1] < math.pi:
            r = 2.0 * (1.0 - math.cos(spec.angle_limits[i - 1])) - np.sum(
                (zdir[i] - zdir[i - 1]) ** 2
            )
            out[i] = math.sqrt(max(0.0, float(r)))
    return out


def _constraint_jacobian(spec: ChainSpec, cfg: Configuration) -> np.ndarray:
    """Gradients of the variety equalities at the slack-augmented point.

    Variable order: free joint coordinates (ascending joint), then slacks
    (ascending angle index, mount first).  Rows: link equalities involving a
    free joint, then slack-augmented angle equalities.
    """
    d, n = spec.dimension, spec.dof
    pts = np.vstack([np.asarray(spec.base, dtype=float), cfg.joints])
    free = spec.free_joints
    slot = {j: d * k for k, j in enumerate(free)}
    slacks = slack_values(spec, cfg)
    slack_slot = {idx: d * len(free) + k for k, idx in enumerate(sorted(slacks))}
    nvars = d * len(free) + len(slacks)
    lengths = np.asarray(spec.link_lengths, dtype=float)
    zdir = _unit_dirs_nominal(spec, pts)

    rows = []
    for i in range(1, n + 1):
        if i - 1 not in slot and i not in slot:
            continue
        g = np.zeros(nvars)
        diff = 2.0 * (pts[i] - pts[i - 1])
        if i in slot:
            g[slot[i]: slot[i] + d] += diff
        if i - 1 in slot:
            g[slot[i - 1]: slot[i - 1] + d] -= diff
        rows.append(g)
    mount_dir = (
        np.asarray(spec.mount_direction, dtype=float)
        if spec.mount_direction is not None
        else None
    )
    for idx in sorted(slacks):
        g = np.zeros(nvars)
        if idx == 0:
            u = zdir[0] - mount_dir
            du = {1: 1.0 / lengths[0]}
        else:
            u = zdir[idx] - zdir[idx - 1]
            du = {
                idx + 1: 1.0 / lengths[idx],
                idx: -1.0 / lengths[idx] - 1.0 / lengths[idx - 1],
                idx - 1: 1.0 / lengths[idx - 1],
            }
        for j, c in du.items():
            if j in slot:
                g[slot[j]: slot[j] + d] += 2.0 * c * u
        g[slack_slot[idx]] = 2.0 * slacks[idx]
        rows.append(g)
    return np.array(rows) if rows else np.zeros((0, nvars))


def strong_duality_premise(
    spec: ChainSpec,
    cfg: Configuration,
    tol_active: float = 1e-6,
    feas_tol: float = DEFAULT_TOL_EQ,
) -> StrongDualityReport:
    """Check tightness premises at a feasible configuration.

    Reports whether the joint positions (base included) are collinear, which
    joints sit at their angle limit, and the numeric rank of the constraint
    Jacobian at the slack-augmented point.
    """
    rep = check_feasible(spec, cfg, feas_tol, feas_tol)
    if not rep.feasible:
        raise InfeasibleConfigurationError(
            f"configuration violates constraints by {rep.max_violation:g}"
        )
    pts = np.vstack([np.asarray(spec.base, dtype=float), cfg.joints])
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    collinear = bool(svals[0] <= 0.0 or svals[1] / svals[0] <= COLLINEAR_RATIO)
    active = tuple(
        i + 1 for i, r in enumerate(rep.angle_residuals) if r >= -tol_active
    )
    jac = _constraint_jacobian(spec, cfg)
    if jac.size:
        js = np.linalg.svd(jac, compute_uv=False)
        rank = int(np.sum(js > 1e-8 * js[0])) if js[0] > 0 else 0
    else:
        rank = 0
    mount_active = (
        rep.mount_residual is not None and rep.mount_residual >= -tol_active
    )
    return StrongDualityReport(
        collinear=collinear,
        active_limits=active,
        premise_holds=not collinear and not active and not mount_active,
        jacobian_rank=rank,
    )


def chain_spec_from_dict(data: dict) -> ChainSpec:
    """Build a ChainSpec from the JSON schema.

    Accepts `angle_limits` of length N-1 (inter-link) or N, in which case
    the final entry is dropped: a chain of N links has N-1 inter-link
    angles.  An optional `mount` object adds a first-link axis constraint.
    """
    links = [float(v) for v in data["links"]]
    limits = [float(v) for v in data["angle_limits"]]
    if len(limits) == len(links):
        limits = limits[:-1]
    goal = data["goal"]
    kind = goal["kind"]
    g = Goal(
        kind=kind,
        x_n=tuple(float(v) for v in goal["xN"]),
        x_nm1=tuple(float(v) for v in goal["xNm1"]) if kind == "pose" else None,
    )
    mount = data.get("mount")
    return ChainSpec(
        dimension=int(data["dimension"]),
        link_lengths=tuple(links),
        angle_limits=tuple(limits),
        base=tuple(float(v) for v in data["base"]),
        goal=g,
        mount_direction=tuple(mount["direction"]) if mount else None,
        mount_limit=float(mount["limit"]) if mount else None,
    )


def chain_spec_to_dict(spec: ChainSpec) -> dict:
    out = {
        "dimension": spec.dimension,
        "links": list(spec.link_lengths),
        "angle_limits": list(spec.angle_limits),
        "base": list(spec.base),
        "goal": {"kind": spec.goal.kind, "xN": list(spec.goal.x_n)},
    }
    if spec.goal.kind == "pose":
        out["goal"]["xNm1"] = list(spec.goal.x_nm1)
    if spec.mount_direction is not None:
        out["mount"] = {"direction": list(spec.mount_direction),
                        "limit": spec.mount_limit}
    return out


def load_chain_spec(path) -> ChainSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return chain_spec_from_dict(json.load(fh))


def fixture_path(name: str = "supp_table1") -> str:
    return str(resources.files("sosik").joinpath(f"fixtures/{name}.json"))


def load_fixture(name: str = "supp_table1") -> ChainSpec:
    """Bundled 10-link planar chain used throughout the benchmarks."""
    return load_chain_spec(fixture_path(name))
