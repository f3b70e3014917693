"""Local joint-angle IK: damped least squares with limit clamping and
random restarts.  Serves as the comparison solver in benchmarks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import chain as chain_mod
from .chain import ChainSpec


@dataclass
class LocalResult:
    converged: bool
    angles: np.ndarray
    position_error: float
    iterations: int
    restarts_used: int
    wall_time: float


@dataclass
class LocalOptions:
    max_iter: int = 100
    restarts: int = 0
    damping: float = 1e-3
    pos_tol: float = 1e-3
    dir_tol: float = 1e-3
    fd_step: float = 1e-6


def _angle_bounds(spec: ChainSpec):
    n = spec.dof
    if spec.dimension == 2:
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        for i in range(1, n):
            lo[i], hi[i] = -spec.angle_limits[i - 1], spec.angle_limits[i - 1]
        if spec.mount_direction is not None:
            head = math.atan2(spec.mount_direction[1], spec.mount_direction[0])
            lo[0], hi[0] = head - spec.mount_limit, head + spec.mount_limit
        return lo, hi
    lo = np.full((n, 2), -np.inf)
    hi = np.full((n, 2), np.inf)
    for i in range(1, n):
        lo[i, 1], hi[i, 1] = -spec.angle_limits[i - 1], spec.angle_limits[i - 1]
    return lo, hi


def _residual(spec: ChainSpec, theta: np.ndarray) -> np.ndarray:
    cfg = chain_mod.forward_kinematics(spec, theta)
    parts = [cfg.end_point - np.asarray(spec.goal.x_n, dtype=float)]
    if spec.is_pose:
        # final-link direction error
        z = (cfg.joints[-1] - cfg.joints[-2]) / spec.link_lengths[-1]
        zg = (np.asarray(spec.goal.x_n) - np.asarray(spec.goal.x_nm1)) / spec.link_lengths[-1]
        parts.append(z - zg)
    return np.concatenate(parts)


def _jacobian(spec: ChainSpec, theta: np.ndarray, h: float) -> np.ndarray:
    flat = theta.ravel()
    base = _residual(spec, theta)
    jac = np.empty((base.size, flat.size))
    for k in range(flat.size):
        tp = flat.copy()
        tm = flat.copy()
        tp[k] += h
        tm[k] -= h
        rp = _residual(spec, tp.reshape(theta.shape))
        rm = _residual(spec, tm.reshape(theta.shape))
        jac[:, k] = (rp - rm) / (2.0 * h)
    return jac


def _attempt(spec: ChainSpec, seed_angles: np.ndarray, opts: LocalOptions):
    lo, hi = _angle_bounds(spec)
    theta = np.clip(np.asarray(seed_angles, dtype=float), lo, hi)
    mu = opts.damping
    r = _residual(spec, theta)
    cost = float(r @ r)
    best_theta, best_err = theta.copy(), _pos_error(spec, r)
    it = 0
    if _done(spec, r, opts):
        return True, theta, best_err, 0
    for it in range(1, opts.max_iter + 1):
        jac = _jacobian(spec, theta, opts.fd_step)
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + mu * np.eye(jtj.shape[0]), jac.T @ r)
        cand = np.clip((theta.ravel() - step).reshape(theta.shape), lo, hi)
        rc = _residual(spec, cand)
        cost_c = float(rc @ rc)
        if cost_c < cost:
            theta, r, cost = cand, rc, cost_c
            mu = max(mu / 10.0, 1e-12)
            err = _pos_error(spec, r)
            if err < best_err:
                best_theta, best_err = theta.copy(), err
            if _done(spec, r, opts):
                return True, theta, err, it
        else:
            mu *= 10.0
            if mu > 1e12:
                break
    return False, best_theta, best_err, it


def _pos_error(spec: ChainSpec, r: np.ndarray) -> float:
    return float(np.linalg.norm(r[: spec.dimension]))


def _done(spec: ChainSpec, r: np.ndarray, opts: LocalOptions) -> bool:
    if _pos_error(spec, r) > opts.pos_tol:
        return False
    if spec.is_pose and float(np.linalg.norm(r[spec.dimension:])) > opts.dir_tol:
        return False
    return True


def solve_local(spec: ChainSpec, seed_angles, opts: LocalOptions | None = None,
                restart_seed: int = 0) -> LocalResult:
    """Damped least squares on the endpoint residual (plus final-link
    direction for pose goals), joint limits handled by clamping.

    Restarts draw fresh seeds from the feasible sampler; the reported error
    is the best over all attempts, ties resolved by the earliest attempt.
    """
    opts = opts or LocalOptions()
    t0 = time.perf_counter()
    seeds = [np.asarray(seed_angles, dtype=float)]
    ss = np.random.SeedSequence(restart_seed)
    for child in ss.spawn(opts.restarts):
        cfg = chain_mod.sample_feasible(spec, child)
        seeds.append(chain_mod.angles_from_positions(spec, cfg))

    best = None
    total_it = 0
    for k, seed in enumerate(seeds):
        ok, theta, err, it = _attempt(spec, seed, opts)
        total_it += it
        if best is None or err < best[2]:
            best = (ok, theta, err, k)
        if ok:
            break
    ok, theta, err, used = best
    return LocalResult(
        converged=ok,
        angles=theta,
        position_error=err,
        iterations=total_it,
        restarts_used=used,
        wall_time=time.perf_counter() - t0,
    )
