"""Scene-side ground truth for validating reconstructions.

Everything here consumes the analytic scene and is used only by tests, audits
and the verification report; reconstruction itself never sees it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Scene, outward_normal
from .tracing import EXITED, TraceLimits, first_intersection, Hit, ExitS0, reflect

__all__ = [
    "boundary_distance", "true_nearest_pair", "normal_ray_level",
    "cloud_deviation", "coverage_fraction", "audit_backtraces", "AuditReport",
]


def boundary_distance(body, pts) -> np.ndarray:
    """Unsigned distance from points to a body boundary (Newton projection)."""
    pts = np.atleast_2d(np.asarray(pts, float))
    out = np.empty(pts.shape[0])
    for i, p in enumerate(pts):
        q = p.copy()
        for _ in range(60):
            v = body.value(q)
            g = body.gradient(q)
            gn2 = float(g @ g)
            if gn2 < 1e-30:
                break
            step = v / gn2 * g
            q = q - step
            if np.linalg.norm(step) < 1e-14:
                break
        out[i] = np.linalg.norm(p - q)
    return out


def true_nearest_pair(scene: Scene, n_coarse: int = 2048, iters: int = 150):
    """Closest boundary points of the two bodies (coarse grid + refinement)."""
    b1, b2 = scene.bodies
    p1 = b1.boundary_points(n_coarse)
    p2 = b2.boundary_points(n_coarse)
    tree = cKDTree(p2)
    dd, ii = tree.query(p1)
    i = int(np.argmin(dd))
    q1, q2 = p1[i], p2[int(ii[i])]
    for _ in range(iters):  # alternating projections converge for convex bodies
        q1 = _project(b1, q2)
        q2 = _project(b2, q1)
    return q1, q2


def _project(body, p):
    q = np.asarray(p, float).copy()
    for _ in range(80):
        v = body.value(q)
        g = body.gradient(q)
        gn2 = float(g @ g)
        if gn2 < 1e-30:
            break
        q = q - v / gn2 * g
        if abs(v) < 1e-15:
            break
    return q


def normal_ray_level(scene: Scene, z, max_level: int = 64) -> int:
    """Depth of a boundary point: 1 if its outward normal ray escapes directly,
    else one more than the level of the first boundary point it hits."""
    z = np.asarray(z, float)
    level = 0
    p = z
    for _ in range(max_level):
        body = min(scene.bodies, key=lambda b: abs(b.value(p)))
        n = outward_normal(body, p, tol_len=1e-3 * scene.s0.radius)
        res = first_intersection(scene, p, n)
        level += 1
        if res is None or isinstance(res, ExitS0):
            return level
        p = res.point
    return max_level


def cloud_deviation(scene: Scene, pts, body_index: int | None = None) -> float:
    """Max distance from reconstructed points to the true boundary."""
    pts = np.atleast_2d(pts)
    if pts.size == 0:
        return math.nan
    if body_index is not None:
        return float(np.max(boundary_distance(scene.bodies[body_index - 1], pts)))
    d = np.stack([boundary_distance(b, pts) for b in scene.bodies])
    return float(np.max(np.min(d, axis=0)))


def coverage_fraction(scene: Scene, body_index: int, cloud: np.ndarray,
                      z_inf_true, exclude_radius: float = 0.05,
                      tol: float = 5e-3, n_samples: int = 4096) -> float:
    """Fraction of true boundary arc length within tol of the cloud,
    excluding neighbourhoods of the mutual nearest points."""
    body = scene.bodies[body_index - 1]
    pts = body.boundary_points(n_samples)
    zi = np.asarray(z_inf_true[body_index - 1], float)
    keep = np.linalg.norm(pts - zi, axis=1) > exclude_radius
    pts = pts[keep]
    if pts.size == 0 or cloud.size == 0:
        return 0.0
    tree = cKDTree(cloud)
    dd, _ = tree.query(pts)
    return float(np.mean(dd <= tol))


@dataclass
class AuditReport:
    n_points: int
    n_reflections: int
    max_foot_deviation: float
    max_point_deviation: float
    level_violations: int
    decreasing_violations: int

    @property
    def violations(self) -> int:
        return self.level_violations + self.decreasing_violations


def audit_backtraces(scene: Scene, state, foot_tol: float = 2e-2) -> AuditReport:
    """Check every backtrace against the true scene.

    Each reflection foot must lie on the true boundary of its body, and along
    each backward trace the true normal-ray levels of the feet (in forward
    order, ending at the reconstructed point) must be strictly increasing,
    i.e. every reflection of the outgoing normal ray happens on strictly
    shallower boundary than its start.
    """
    max_foot = 0.0
    max_pt = 0.0
    lvl_bad = 0
    dec_bad = 0
    nref = 0
    for (body, side, level, z, feet) in state.backtrace_log:
        zp = _project(scene.bodies[body - 1], z)
        max_pt = max(max_pt, float(np.linalg.norm(zp - z)))
        lv_z = normal_ray_level(scene, zp)
        prev = lv_z
        for (fb, foot) in feet:  # feet are in backward order: z_p, ..., z_1
            nref += 1
            fp = _project(scene.bodies[fb - 1], foot)
            max_foot = max(max_foot, float(np.linalg.norm(fp - foot)))
            lv = normal_ray_level(scene, fp)
            if lv >= lv_z:
                lvl_bad += 1
        if feet:
            levels = [normal_ray_level(scene, _project(scene.bodies[fb - 1], f))
                      for (fb, f) in feet]
            # stored backward order [z_p, ..., z_1]; levels must rise toward z
            seq = levels + [lv_z]
            if any(seq[i + 1] <= seq[i] for i in range(len(seq) - 1)):
                dec_bad += 1
    return AuditReport(len(state.backtrace_log), nref, max_foot, max_pt, lvl_bad, dec_bad)
