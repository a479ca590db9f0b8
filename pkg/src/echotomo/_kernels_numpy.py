"""Pure-numpy fallback for the ray tracing kernels.

All rays advance in lockstep, one reflection per outer iteration, with
vectorized quadric solves per body. Semantics match ``_kernels_numba``.
"""
from __future__ import annotations

import numpy as np

STATUS_EXITED = 0
STATUS_BUDGET_TRAPPED = 1
STATUS_TANGENCY = 2
STATUS_FAILED = 3

FNV_OFFSET = np.uint64(1469598103934665603)
FNV_PRIME = np.uint64(1099511628211)


def _body_roots(params_row, o, d, guard):
    """Smallest root > guard for one body against many rays (-1 if none)."""
    cx, cy, ct, st, sa, sb = params_row
    rx = o[:, 0] - cx
    ry = o[:, 1] - cy
    qx = (ct * rx + st * ry) / sa
    qy = (-st * rx + ct * ry) / sb
    ex = (ct * d[:, 0] + st * d[:, 1]) / sa
    ey = (-st * d[:, 0] + ct * d[:, 1]) / sb
    A = ex * ex + ey * ey
    B = qx * ex + qy * ey
    C = qx * qx + qy * qy - 1.0
    disc = B * B - A * C
    ok = (disc > 0.0) & (A != 0.0)
    out = np.full(o.shape[0], -1.0)
    if not np.any(ok):
        return out
    r = np.sqrt(np.where(ok, disc, 0.0))
    q = np.where(B >= 0.0, -(B + r), -(B - r))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(q != 0.0, q / A, r / A)
        t2 = np.where(q != 0.0, C / q, np.inf)
    t1 = np.where(ok & (t1 > guard), t1, np.inf)
    t2 = np.where(ok & (t2 > guard), t2, np.inf)
    best = np.minimum(t1, t2)
    out = np.where(np.isfinite(best), best, -1.0)
    return out


def _s0_exit(s0cx, s0cy, s0r, o, d):
    rx = o[:, 0] - s0cx
    ry = o[:, 1] - s0cy
    B = rx * d[:, 0] + ry * d[:, 1]
    C = rx * rx + ry * ry - s0r * s0r
    disc = B * B - C
    out = np.full(o.shape[0], -1.0)
    ok = disc > 0.0
    out[ok] = -B[ok] + np.sqrt(disc[ok])
    return out


def trace_batch(kinds, params, s0cx, s0cy, s0r, origins, dirs,
                max_refl, max_time, tang_eps, guard):
    n = origins.shape[0]
    status = np.full(n, -1, dtype=np.int8)
    times = np.zeros(n, dtype=np.float64)
    nrefl = np.zeros(n, dtype=np.int32)
    exit_pts = np.array(origins, dtype=np.float64, copy=True)
    exit_dirs = np.array(dirs, dtype=np.float64, copy=True)
    comb = np.full(n, FNV_OFFSET, dtype=np.uint64)

    o = np.array(origins, dtype=np.float64, copy=True)
    d = np.array(dirs, dtype=np.float64, copy=True)
    live = np.ones(n, dtype=bool)
    m = params.shape[0]

    for _ in range(max_refl + 1):
        if not np.any(live):
            break
        idx = np.nonzero(live)[0]
        ol = o[idx]
        dl = d[idx]
        tb = np.full(idx.size, np.inf)
        hit = np.full(idx.size, -1, dtype=np.int64)
        for b in range(m):
            t = _body_roots(params[b], ol, dl, guard)
            better = (t > 0.0) & (t < tb)
            tb[better] = t[better]
            hit[better] = b
        ts0 = _s0_exit(s0cx, s0cy, s0r, ol, dl)

        reflects = (hit >= 0) & (tb < ts0)
        exits = ~reflects

        # rays leaving through the bounding circle
        ex_rows = idx[exits]
        if ex_rows.size:
            bad = ts0[exits] <= guard
            tgood = ts0[exits]
            times[ex_rows] += np.where(bad, 0.0, tgood)
            pe = ol[exits] + tgood[:, None] * dl[exits]
            exit_pts[ex_rows] = np.where(bad[:, None], ol[exits], pe)
            exit_dirs[ex_rows] = dl[exits]
            status[ex_rows] = np.where(bad, STATUS_FAILED, STATUS_EXITED).astype(np.int8)
            live[ex_rows] = False

        rf_rows = idx[reflects]
        if not rf_rows.size:
            continue
        trf = tb[reflects]
        orf = ol[reflects]
        drf = dl[reflects]
        brf = hit[reflects]
        p = orf + trf[:, None] * drf
        # outward normals from the quadric gradient
        pr = params[brf]
        cx, cy, ct, st, sa, sb = (pr[:, 0], pr[:, 1], pr[:, 2], pr[:, 3], pr[:, 4], pr[:, 5])
        qx = (ct * (p[:, 0] - cx) + st * (p[:, 1] - cy)) / sa
        qy = (-st * (p[:, 0] - cx) + ct * (p[:, 1] - cy)) / sb
        gx = ct * (qx / sa) - st * (qy / sb)
        gy = st * (qx / sa) + ct * (qy / sb)
        gn = np.sqrt(gx * gx + gy * gy)
        nx = gx / gn
        ny = gy / gn
        c = drf[:, 0] * nx + drf[:, 1] * ny

        tangent = (-c) < tang_eps
        tg_rows = rf_rows[tangent]
        if tg_rows.size:
            times[tg_rows] += trf[tangent]
            exit_pts[tg_rows] = p[tangent]
            exit_dirs[tg_rows] = drf[tangent]
            status[tg_rows] = STATUS_TANGENCY
            live[tg_rows] = False

        good = ~tangent
        gd_rows = rf_rows[good]
        if not gd_rows.size:
            continue
        times[gd_rows] += trf[good]
        over = times[gd_rows] > max_time
        if np.any(over):
            rows = gd_rows[over]
            exit_pts[rows] = p[good][over]
            exit_dirs[rows] = drf[good][over]
            status[rows] = STATUS_BUDGET_TRAPPED
            live[rows] = False
            keep = ~over
            gd_rows = gd_rows[keep]
            if not gd_rows.size:
                continue
            sel = good.copy()
            sel[np.nonzero(good)[0][over]] = False
            good = sel
        dn = drf[good] - 2.0 * c[good][:, None] * np.stack([nx[good], ny[good]], axis=1)
        dn /= np.linalg.norm(dn, axis=1)[:, None]
        o[gd_rows] = p[good]
        d[gd_rows] = dn
        nrefl[gd_rows] += 1
        comb[gd_rows] = (comb[gd_rows] ^ (brf[good].astype(np.uint64) + np.uint64(1))) * FNV_PRIME

    still = status < 0
    if np.any(still):
        status[still] = STATUS_BUDGET_TRAPPED
        exit_pts[still] = o[still]
        exit_dirs[still] = d[still]
    return status, times, nrefl, exit_pts, exit_dirs, comb


def segments_first_hit(ox, oy, dx, dy, P, edge_ok, tmin):
    """First ray hit among polyline edges P[i] -> P[i+1] with edge_ok[i]."""
    E = P[1:] - P[:-1]
    den = dx * E[:, 1] - dy * E[:, 0]
    R = P[:-1] - np.array([ox, oy])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (R[:, 0] * E[:, 1] - R[:, 1] * E[:, 0]) / den
        s = (R[:, 0] * dy - R[:, 1] * dx) / den
    ok = edge_ok & (den != 0.0) & (t > tmin) & (s >= 0.0) & (s <= 1.0)
    if not np.any(ok):
        return -1.0, -1
    idx = np.nonzero(ok)[0]
    j = idx[np.argmin(t[idx])]
    return float(t[j]), int(j)
