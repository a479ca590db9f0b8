"""Billiard flow in the exterior of convex bodies inside a bounding circle.

Traces simply reflecting rays from the bounding circle back to it, exposes the
cross-section (exit) map, finite-difference regularity checks, and two-point
continuation of (entry, exit) geodesic branches. Rays that graze a body below
the tangency threshold are flagged and excluded from datasets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .geometry import Disc, Ellipse, ImplicitBody, Scene, outward_normal, pack_scene

__all__ = [
    "EXITED", "BUDGET_TRAPPED", "TANGENCY", "FAILED", "STATUS_NAMES",
    "TraceLimits", "PhasePoint", "Reflection", "Trajectory", "Hit", "ExitS0",
    "NumericalFailure", "TangentIncidence", "TrappedRay", "NoConvergence",
    "CombinatoricsChanged",
    "reflect", "first_intersection", "trace", "trace_from", "cross_section_map",
    "exit_map", "regularity_jacobian", "two_point_continuation", "tangent_frame",
    "wrap_angle",
]

EXITED = 0
BUDGET_TRAPPED = 1
TANGENCY = 2
FAILED = 3
STATUS_NAMES = {0: "Exited", 1: "BudgetTrapped", 2: "TangencyDetected", 3: "NumericalFailure"}

GUARD = 1e-12  # self-intersection guard on ray parameters

FNV_OFFSET = np.uint64(1469598103934665603)
FNV_PRIME = np.uint64(1099511628211)


class NumericalFailure(RuntimeError):
    pass


class TangentIncidence(RuntimeError):
    pass


class TrappedRay(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    pass


class CombinatoricsChanged(RuntimeError):
    pass


@dataclass
class TraceLimits:
    max_reflections: int = 200
    max_time: float | None = None  # defaults to 100 * S0 radius
    tangency_threshold: float = 1e-7

    def resolved_max_time(self, scene: Scene) -> float:
        return self.max_time if self.max_time is not None else 100.0 * scene.s0.radius


@dataclass(frozen=True)
class PhasePoint:
    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))


@dataclass(frozen=True)
class Reflection:
    body_id: int
    point: np.ndarray
    incoming: np.ndarray
    outgoing: np.ndarray
    normal: np.ndarray


@dataclass
class Trajectory:
    entry: PhasePoint
    reflections: list
    exit: PhasePoint | None
    segment_lengths: list
    total_time: float
    status: int

    @property
    def exited(self) -> bool:
        return self.status == EXITED

    @property
    def n_reflections(self) -> int:
        return len(self.reflections)

    def points(self) -> np.ndarray:
        pts = [self.entry.point] + [r.point for r in self.reflections]
        if self.exit is not None:
            pts.append(self.exit.point)
        return np.asarray(pts)

    def body_sequence(self) -> tuple:
        return tuple(r.body_id for r in self.reflections)

    def comb_hash(self) -> np.uint64:
        h = FNV_OFFSET
        for r in self.reflections:
            h = np.uint64((int(h) ^ r.body_id) * int(FNV_PRIME) % (1 << 64))
        return h


@dataclass(frozen=True)
class Hit:
    body_id: int
    point: np.ndarray
    length: float


@dataclass(frozen=True)
class ExitS0:
    point: np.ndarray
    length: float


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -((-np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi)


def reflect(incoming, normal, tangency_threshold: float = 1e-7) -> np.ndarray:
    """Specular reflection; raises TangentIncidence below the threshold."""
    d = np.asarray(incoming, dtype=float)
    n = np.asarray(normal, dtype=float)
    c = float(d @ n)
    if abs(c) < tangency_threshold:
        raise TangentIncidence(f"incidence {c:.2e} below tangency threshold")
    out = d - 2.0 * c * n
    return out / np.linalg.norm(out)


# -- single-ray intersection ---------------------------------------------------

def _quadric_first_root(body, origin, direction, guard=GUARD):
    """Smallest positive root against a disc/ellipse, or None."""
    if isinstance(body, Disc):
        rot = np.eye(2)
        axes = np.array([body.radius, body.radius])
    else:
        rot = body._rot
        axes = body.semi_axes
    q = (rot.T @ (origin - body.center)) / axes
    e = (rot.T @ direction) / axes
    A = float(e @ e)
    B = float(q @ e)
    C = float(q @ q - 1.0)
    disc = B * B - A * C
    if disc <= 0.0 or A == 0.0:
        return None
    r = math.sqrt(disc)
    qq = -(B + r) if B >= 0.0 else -(B - r)
    cands = []
    if qq != 0.0:
        cands = [qq / A, C / qq]
    else:
        cands = [r / A]
    best = None
    for t in cands:
        if t > guard and (best is None or t < best):
            best = t
    return best


def _implicit_first_root(scene, body, origin, direction, t_max, guard=GUARD):
    """March/bisect the first sign change of a generic implicit body."""
    step = 1e-3 * scene.s0.radius
    t_prev = guard
    v_prev = body.value(origin + t_prev * direction)
    if v_prev <= 0.0:
        # starting on/inside the boundary: skip out of the surface band first
        while v_prev <= 0.0 and t_prev < t_max:
            t_prev += step
            v_prev = body.value(origin + t_prev * direction)
        if t_prev >= t_max:
            return None
    t = t_prev
    while t < t_max:
        t_next = min(t + step, t_max)
        v_next = body.value(origin + t_next * direction)
        if v_next <= 0.0:
            lo, hi = t, t_next
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if body.value(origin + mid * direction) <= 0.0:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-12 * scene.s0.radius:
                    break
            root = 0.5 * (lo + hi)
            # one derivative polishing step
            p = origin + root * direction
            g = body.gradient(p)
            dg = float(g @ direction)
            if dg != 0.0:
                root -= body.value(p) / dg
            return root if root > guard else None
        t = t_next
    return None


def _s0_exit_root(scene, origin, direction):
    r = origin - scene.s0.center
    B = float(r @ direction)
    C = float(r @ r - scene.s0.radius**2)
    disc = B * B - C
    if disc <= 0.0:
        return None
    return -B + math.sqrt(disc)


def first_intersection(scene: Scene, origin, direction):
    """Nearest forward body hit, else the forward exit through S0, else None."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    ts0 = _s0_exit_root(scene, origin, direction)
    t_cap = ts0 if ts0 is not None else 2.0 * scene.s0.radius
    best, hit_body = None, None
    for b in scene.bodies:
        if isinstance(b, (Disc, Ellipse)):
            t = _quadric_first_root(b, origin, direction)
        else:
            t = _implicit_first_root(scene, b, origin, direction, t_cap + GUARD)
        if t is not None and (best is None or t < best):
            best, hit_body = t, b
    if best is not None and (ts0 is None or best < ts0):
        return Hit(hit_body.id, origin + best * direction, best)
    if ts0 is not None and ts0 > GUARD:
        return ExitS0(origin + ts0 * direction, ts0)
    return None


# -- full trajectory tracing ---------------------------------------------------

def trace_from(scene: Scene, origin, direction, limits: TraceLimits | None = None) -> Trajectory:
    """Trace from an arbitrary interior point (records every reflection)."""
    limits = limits or TraceLimits()
    max_time = limits.resolved_max_time(scene)
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    entry = PhasePoint(o.copy(), d.copy())
    reflections = []
    seglens = []
    t_cum = 0.0
    for _ in range(limits.max_reflections + 1):
        res = first_intersection(scene, o, d)
        if res is None:
            return Trajectory(entry, reflections, None, seglens, t_cum, FAILED)
        if isinstance(res, ExitS0):
            seglens.append(res.length)
            t_cum += res.length
            return Trajectory(entry, reflections, PhasePoint(res.point, d.copy()), seglens, t_cum, EXITED)
        body = scene.body(res.body_id)
        n = outward_normal(body, res.point, tol_len=1e-6 * scene.s0.radius)
        seglens.append(res.length)
        t_cum += res.length
        try:
            out = reflect(d, n, limits.tangency_threshold)
        except TangentIncidence:
            return Trajectory(entry, reflections, None, seglens, t_cum, TANGENCY)
        reflections.append(Reflection(res.body_id, res.point, d.copy(), out.copy(), n))
        o, d = res.point, out
        if t_cum > max_time:
            return Trajectory(entry, reflections, None, seglens, t_cum, BUDGET_TRAPPED)
    return Trajectory(entry, reflections, None, seglens, t_cum, BUDGET_TRAPPED)


def trace(scene: Scene, entry: PhasePoint, limits: TraceLimits | None = None) -> Trajectory:
    """Trace a ray entering through S0 (entry must point into the ball)."""
    x = entry.point
    if abs(np.linalg.norm(x - scene.s0.center) - scene.s0.radius) > 1e-6 * scene.s0.radius:
        raise ValueError("entry point is not on the bounding sphere")
    if float((x - scene.s0.center) @ entry.direction) >= 0.0:
        raise ValueError("entry direction must point inward")
    return trace_from(scene, x, entry.direction, limits)


def cross_section_map(scene: Scene, entry: PhasePoint, limits: TraceLimits | None = None):
    """Exit phase point of the trajectory; only defined for exiting rays."""
    traj = trace(scene, entry, limits)
    if traj.status == TANGENCY:
        raise TangentIncidence("trajectory grazes an obstacle")
    if traj.status != EXITED:
        raise TrappedRay(STATUS_NAMES[traj.status])
    return traj.exit, traj


# -- batch exit map (kernel-backed) -------------------------------------------

def exit_map(scene: Scene, origins, dirs, limits: TraceLimits | None = None):
    """Vectorized trace of many rays.

    Returns (status int8[n], times f8[n], nrefl i4[n], exit_pts f8[n,2],
    exit_dirs f8[n,2], comb uint64[n]). Uses the active kernel backend for
    disc/ellipse scenes, falling back to the reference tracer otherwise.
    """
    limits = limits or TraceLimits()
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    if scene.kernel_compatible():
        kinds, params, cx, cy, rad = pack_scene(scene)
        mod = backend.kernels()
        return mod.trace_batch(kinds, params, cx, cy, rad, origins, dirs,
                               limits.max_reflections, limits.resolved_max_time(scene),
                               limits.tangency_threshold, GUARD)
    n = origins.shape[0]
    status = np.empty(n, dtype=np.int8)
    times = np.empty(n, dtype=np.float64)
    nrefl = np.empty(n, dtype=np.int32)
    exit_pts = np.empty((n, 2), dtype=np.float64)
    exit_dirs = np.empty((n, 2), dtype=np.float64)
    comb = np.empty(n, dtype=np.uint64)
    for i in range(n):
        tr = trace_from(scene, origins[i], dirs[i], limits)
        status[i] = tr.status
        times[i] = tr.total_time
        nrefl[i] = tr.n_reflections
        end = tr.exit if tr.exit is not None else PhasePoint(origins[i], dirs[i])
        exit_pts[i] = end.point
        exit_dirs[i] = end.direction
        comb[i] = tr.comb_hash()
    return status, times, nrefl, exit_pts, exit_dirs, comb


# -- regularity and branch continuation ----------------------------------------

def tangent_frame(u: np.ndarray) -> np.ndarray:
    """Orthonormal tangent chart at a unit vector.

    Axes with the smallest |component| are orthonormalized against u (and each
    other) in a fixed order, so charts are reproducible.
    """
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    n = u.shape[0]
    order = np.argsort(np.abs(u), kind="stable")
    frame = []
    for k in order[: n - 1]:
        e = np.zeros(n)
        e[k] = 1.0
        v = e - (e @ u) * u
        for t in frame:
            v = v - (v @ t) * t
        v = v / np.linalg.norm(v)
        frame.append(v)
    return np.asarray(frame)


def _exit_state(scene, origin, direction, limits):
    st, t, k, ep, ed, cb = exit_map(scene, origin[None, :], direction[None, :], limits)
    return int(st[0]), float(t[0]), int(k[0]), ep[0], ed[0], np.uint64(cb[0])


def regularity_jacobian(scene: Scene, x0, omega0, h: float = 1e-6,
                        limits: TraceLimits | None = None) -> np.ndarray:
    """Finite-difference Jacobian of direction -> exit point in sphere charts.

    The ray is regular when |det| exceeds 1e-6.
    """
    limits = limits or TraceLimits()
    x0 = np.asarray(x0, dtype=float)
    w0 = np.asarray(omega0, dtype=float)
    w0 = w0 / np.linalg.norm(w0)
    st, _, _, ep0, _, _ = _exit_state(scene, x0, w0, limits)
    if st != EXITED:
        raise TrappedRay("base ray does not exit")
    dir_frame = tangent_frame(w0)
    yhat = (ep0 - scene.s0.center) / scene.s0.radius
    exit_frame = tangent_frame(yhat)
    nm1 = dir_frame.shape[0]
    J = np.empty((nm1, nm1))
    for j in range(nm1):
        wp = w0 + h * dir_frame[j]
        wm = w0 - h * dir_frame[j]
        wp /= np.linalg.norm(wp)
        wm /= np.linalg.norm(wm)
        stp, _, _, yp, _, _ = _exit_state(scene, x0, wp, limits)
        stm, _, _, ym, _, _ = _exit_state(scene, x0, wm, limits)
        if stp != EXITED or stm != EXITED:
            raise NumericalFailure("perturbed ray failed to exit")
        J[:, j] = exit_frame @ (yp - ym) / (2.0 * h)
    return J


def two_point_continuation(scene: Scene, seed: Trajectory, target,
                           limits: TraceLimits | None = None,
                           tol_angle: float = 1e-12, max_iter: int = 40,
                           max_step: float = 5e-3) -> Trajectory:
    """Continue an exiting branch to nearby (entry, exit) targets on S0.

    ``target`` is (x_angle, y_angle). Solves for the entry direction by damped
    Newton on the exit-angle mismatch; the reflection combinatorics must match
    the seed's. Far targets are reached through intermediate substeps.
    """
    if scene.dim != 2:
        raise NotImplementedError("continuation implemented for planar scenes")
    limits = limits or TraceLimits()
    if not seed.exited:
        raise ValueError("seed trajectory must exit")
    s0 = scene.s0
    phx0 = s0.angle_of(seed.entry.point)
    phy0 = s0.angle_of(seed.exit.point)
    th0 = math.atan2(seed.entry.direction[1], seed.entry.direction[0])
    seed_comb = None  # filled on first converged solve

    phx1, phy1 = float(target[0]), float(target[1])
    dx_tot = float(wrap_angle(phx1 - phx0))
    dy_tot = float(wrap_angle(phy1 - phy0))
    n_sub = max(1, int(math.ceil(max(abs(dx_tot), abs(dy_tot)) / max_step)))

    theta = th0
    result = seed
    for step in range(1, n_sub + 1):
        phx = phx0 + dx_tot * step / n_sub
        phy = phy0 + dy_tot * step / n_sub
        x = s0.point_at(phx)
        # rigid-rotation initial guess for the first substep move
        theta = theta + dx_tot / n_sub

        def offset(th):
            d = np.array([math.cos(th), math.sin(th)])
            if float((x - s0.center) @ d) >= 0.0:
                return None, None
            st, t, k, ep, ed, cb = _exit_state(scene, x, d, limits)
            if st != EXITED:
                return None, None
            return float(wrap_angle(s0.angle_of(ep) - phy)), (t, k, cb)

        f, info = offset(theta)
        if f is None:
            raise NoConvergence("initial guess left the branch neighbourhood")
        converged = False
        for _ in range(max_iter):
            if abs(f) <= tol_angle:
                converged = True
                break
            dfd = 1e-7
            fp, _ = offset(theta + dfd)
            fm, _ = offset(theta - dfd)
            if fp is None or fm is None or fp == fm:
                raise NoConvergence("branch lost during Newton step")
            slope = (fp - fm) / (2.0 * dfd)
            dth = -f / slope
            lam = 1.0
            while lam > 1e-4:
                f_new, info_new = offset(theta + lam * dth)
                if f_new is not None and abs(f_new) < abs(f):
                    theta += lam * dth
                    f, info = f_new, info_new
                    break
                lam *= 0.5
            else:
                raise NoConvergence("damped Newton stalled")
        if not converged:
            raise NoConvergence(f"no convergence after {max_iter} iterations")
        if seed_comb is None:
            seed_comb = seed.comb_hash()
        if np.uint64(info[2]) != seed_comb:
            raise CombinatoricsChanged("reflection combinatorics changed along continuation")
    d = np.array([math.cos(theta), math.sin(theta)])
    result = trace(scene, PhasePoint(s0.point_at(phx1), d), limits)
    if not result.exited:
        raise NoConvergence("converged direction no longer exits")
    return result
