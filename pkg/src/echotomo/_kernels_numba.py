"""Numba-compiled ray tracing kernels for packed disc/ellipse scenes.

Semantics must stay in lockstep with ``_kernels_numpy``: same status codes,
same root selection, same tangency rule, same combinatorics hash.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

STATUS_EXITED = 0
STATUS_BUDGET_TRAPPED = 1
STATUS_TANGENCY = 2
STATUS_FAILED = 3

FNV_OFFSET = np.uint64(1469598103934665603)
FNV_PRIME = np.uint64(1099511628211)


@njit(cache=True)
def _first_body_root(ox, oy, dx, dy, cx, cy, ct, st, sa, sb, guard):
    """Smallest ray parameter > guard hitting the ellipse, or -1."""
    rx = ox - cx
    ry = oy - cy
    qx = (ct * rx + st * ry) / sa
    qy = (-st * rx + ct * ry) / sb
    ex = (ct * dx + st * dy) / sa
    ey = (-st * dx + ct * dy) / sb
    A = ex * ex + ey * ey
    B = qx * ex + qy * ey
    C = qx * qx + qy * qy - 1.0
    disc = B * B - A * C
    if disc <= 0.0 or A == 0.0:
        return -1.0
    r = np.sqrt(disc)
    q = -(B + r) if B >= 0.0 else -(B - r)
    best = -1.0
    if q != 0.0:
        t1 = q / A
        t2 = C / q
        if t1 > guard:
            best = t1
        if t2 > guard and (best < 0.0 or t2 < best):
            best = t2
    else:
        t1 = r / A
        if t1 > guard:
            best = t1
    return best


@njit(cache=True)
def _s0_exit_root(ox, oy, dx, dy, cx, cy, rad):
    """Largest ray parameter on the bounding circle (forward exit)."""
    rx = ox - cx
    ry = oy - cy
    B = rx * dx + ry * dy
    C = rx * rx + ry * ry - rad * rad
    disc = B * B - C
    if disc <= 0.0:
        return -1.0
    return -B + np.sqrt(disc)


@njit(cache=True)
def _trace_one(kinds, params, s0cx, s0cy, s0r, ox, oy, dx, dy,
               max_refl, max_time, tang_eps, guard):
    t_cum = 0.0
    nref = 0
    comb = FNV_OFFSET
    m = params.shape[0]
    for _ in range(max_refl + 1):
        tb = 1e300
        hit = -1
        for b in range(m):
            t = _first_body_root(ox, oy, dx, dy, params[b, 0], params[b, 1],
                                 params[b, 2], params[b, 3], params[b, 4], params[b, 5], guard)
            if t > 0.0 and t < tb:
                tb = t
                hit = b
        ts0 = _s0_exit_root(ox, oy, dx, dy, s0cx, s0cy, s0r)
        if hit >= 0 and tb < ts0:
            px = ox + tb * dx
            py = oy + tb * dy
            # outward normal of the implicit quadric at the hit point
            cx, cy, ct, st, sa, sb = params[hit, 0], params[hit, 1], params[hit, 2], params[hit, 3], params[hit, 4], params[hit, 5]
            qx = (ct * (px - cx) + st * (py - cy)) / sa
            qy = (-st * (px - cx) + ct * (py - cy)) / sb
            gx = ct * (qx / sa) - st * (qy / sb)
            gy = st * (qx / sa) + ct * (qy / sb)
            gn = np.sqrt(gx * gx + gy * gy)
            nx = gx / gn
            ny = gy / gn
            c = dx * nx + dy * ny
            if -c < tang_eps:
                t_cum += tb
                return STATUS_TANGENCY, t_cum, nref, px, py, dx, dy, comb
            t_cum += tb
            if t_cum > max_time:
                return STATUS_BUDGET_TRAPPED, t_cum, nref, px, py, dx, dy, comb
            dx = dx - 2.0 * c * nx
            dy = dy - 2.0 * c * ny
            dn = np.sqrt(dx * dx + dy * dy)
            dx /= dn
            dy /= dn
            ox = px
            oy = py
            nref += 1
            comb = (comb ^ np.uint64(hit + 1)) * FNV_PRIME
        else:
            if ts0 <= guard:
                return STATUS_FAILED, t_cum, nref, ox, oy, dx, dy, comb
            t_cum += ts0
            ex = ox + ts0 * dx
            ey = oy + ts0 * dy
            return STATUS_EXITED, t_cum, nref, ex, ey, dx, dy, comb
    return STATUS_BUDGET_TRAPPED, t_cum, nref, ox, oy, dx, dy, comb


@njit(cache=True, parallel=True)
def trace_batch(kinds, params, s0cx, s0cy, s0r, origins, dirs,
                max_refl, max_time, tang_eps, guard):
    """Trace many rays; per-row outputs, deterministic across thread counts."""
    n = origins.shape[0]
    status = np.empty(n, dtype=np.int8)
    times = np.empty(n, dtype=np.float64)
    nrefl = np.empty(n, dtype=np.int32)
    exit_pts = np.empty((n, 2), dtype=np.float64)
    exit_dirs = np.empty((n, 2), dtype=np.float64)
    comb = np.empty(n, dtype=np.uint64)
    for i in prange(n):
        s, t, k, ex, ey, vx, vy, h = _trace_one(
            kinds, params, s0cx, s0cy, s0r,
            origins[i, 0], origins[i, 1], dirs[i, 0], dirs[i, 1],
            max_refl, max_time, tang_eps, guard)
        status[i] = s
        times[i] = t
        nrefl[i] = k
        exit_pts[i, 0] = ex
        exit_pts[i, 1] = ey
        exit_dirs[i, 0] = vx
        exit_dirs[i, 1] = vy
        comb[i] = h
    return status, times, nrefl, exit_pts, exit_dirs, comb


@njit(cache=True)
def segments_first_hit(ox, oy, dx, dy, P, edge_ok, tmin):
    """First ray hit among polyline edges P[i] -> P[i+1] with edge_ok[i].

    Returns (t, edge_index); t = -1.0 when nothing is hit.
    """
    best = 1e300
    bi = -1
    for i in range(P.shape[0] - 1):
        if not edge_ok[i]:
            continue
        ex = P[i + 1, 0] - P[i, 0]
        ey = P[i + 1, 1] - P[i, 1]
        den = dx * ey - dy * ex
        if den == 0.0:
            continue
        rx = P[i, 0] - ox
        ry = P[i, 1] - oy
        t = (rx * ey - ry * ex) / den
        if t <= tmin or t >= best:
            continue
        s = (rx * dy - ry * dx) / den
        if 0.0 <= s <= 1.0:
            best = t
            bi = i
    if bi < 0:
        return -1.0, -1
    return best, bi
