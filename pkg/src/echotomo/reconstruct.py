"""Two-body planar boundary reconstruction from diagonal travelling times.

Pipeline: seed both bodies from restricted diagonal minima, segment the
echograph into smooth arcs, chain the arcs outward from the seed arcs by
cusp adjacency, and recover boundary points by tracing each echo return
backwards from the circle, reflecting off the already-determined boundary.

A chain's n-th arc needs exactly n backward reflections (one reflection is
born at each echograph cusp), and deep points of an arc may reflect off parts
of the *other* body determined in the same sweep, so points are processed in
rounds until a fixpoint: a point whose expected reflections are not yet
available is skipped and retried once more boundary exists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import backend
from .directions import NearNormalAmbiguity
from .spectrum import DiagonalSpectrum

__all__ = [
    "EchoArc", "Seeds", "BoundaryArc", "ReconstructionState", "LocalCurveFit",
    "NonUniqueMinimum", "NoSeparatingLine", "AmbiguousAdjacency", "BranchLost",
    "InsufficientSupport",
    "segment_echograph", "seed_first_body", "seed_second_body",
    "assign_arc_chains", "fit_local_curve", "reconstruct_all",
]

TWO_PI = 2.0 * math.pi


class NonUniqueMinimum(RuntimeError):
    """Two separated diagonal minima agree within tolerance (non-generic scene)."""


class NoSeparatingLine(RuntimeError):
    pass


class AmbiguousAdjacency(RuntimeError):
    pass


class BranchLost(RuntimeError):
    pass


class InsufficientSupport(ValueError):
    pass


# -- echograph segmentation -------------------------------------------------------

@dataclass
class EchoArc:
    """Maximal smooth echograph branch: one return time per grid column."""

    arc_id: int
    cols: np.ndarray        # grid columns, strictly increasing (virtual, may exceed n_x after seam merge)
    phis: np.ndarray        # unwrapped angles matching cols
    times: np.ndarray
    roots: np.ndarray       # indices into the diagonal spectrum
    closed: bool = False
    body: int = 0           # 1 | 2, 0 until labeled
    side: str = ""          # "L" | "R"; seed arcs carry "LR"
    chain_pos: int = -1     # 0 = seed arc, 1, 2, ... outward; also the backtrace count
    attach_end: int = 0     # index end adjacent to the previous chain arc (0 or -1)

    def __len__(self):
        return self.times.shape[0]

    def endpoints(self):
        return ((self.cols[0], self.times[0]), (self.cols[-1], self.times[-1]))


def _arc_slopes(times, phis):
    """Derivative dS/dphi per point: 3-point non-uniform stencils, one-sided at ends."""
    n = times.shape[0]
    d = np.empty(n)
    if n < 3:
        d[:] = np.nan
        return d
    for m in range(n):
        if m == 0:
            h1 = phis[1] - phis[0]
            h2 = phis[2] - phis[1]
            d[m] = (-(2 * h1 + h2) / (h1 * (h1 + h2)) * times[0]
                    + (h1 + h2) / (h1 * h2) * times[1]
                    - h1 / (h2 * (h1 + h2)) * times[2])
        elif m == n - 1:
            h1 = phis[-2] - phis[-3]
            h2 = phis[-1] - phis[-2]
            d[m] = ((2 * h2 + h1) / (h2 * (h1 + h2)) * times[-1]
                    - (h1 + h2) / (h1 * h2) * times[-2]
                    + h2 / (h1 * (h1 + h2)) * times[-3])
        else:
            h1 = phis[m] - phis[m - 1]
            h2 = phis[m + 1] - phis[m]
            d[m] = (h1 * h1 * times[m + 1] + (h2 * h2 - h1 * h1) * times[m]
                    - h2 * h2 * times[m - 1]) / (h1 * h2 * (h1 + h2))
    return d


def segment_echograph(diag: DiagonalSpectrum, gap_cols: int = 3) -> list:
    """Cluster diagonal returns into smooth arcs by column continuation.

    Branch times never cross (distinct branches have distinct times away from
    a measure-zero set), so per-column matching is order-preserving; the match
    tolerance is the Lipschitz bound |dS| <= 2 * arclength per column with
    slack. Arcs spanning the angular seam are merged afterwards.
    """
    n = diag.n_x
    dphi = TWO_PI / n
    lip = 3.0 * diag.a * dphi  # |dS/ds| <= 2, x 1.5 slack

    cols = [diag.column_indices(j) for j in range(n)]
    open_arcs = []   # dicts: cols[], times[], roots[], last_col
    done = []

    for j in range(n):
        idx = cols[j]
        ts = diag.times[idx]
        cands = [arc for arc in open_arcs if j - arc["cols"][-1] <= gap_cols]
        preds = []
        for arc in cands:
            if len(arc["times"]) >= 2:
                slope = (arc["times"][-1] - arc["times"][-2]) / (arc["cols"][-1] - arc["cols"][-2])
            else:
                slope = 0.0
            preds.append(arc["times"][-1] + slope * (j - arc["cols"][-1]))
        order = np.argsort(preds, kind="stable") if preds else []
        ti = 0
        matched = set()
        for oi in order:
            arc = cands[oi]
            g = j - arc["cols"][-1]
            tol = lip * g
            while ti < ts.size and ts[ti] < preds[oi] - tol:
                ti += 1  # unmatched time below every remaining prediction: birth
            if ti < ts.size and abs(ts[ti] - preds[oi]) <= tol:
                arc["cols"].append(j)
                arc["times"].append(float(ts[ti]))
                arc["roots"].append(int(idx[ti]))
                matched.add(ti)
                ti += 1
        for m in range(ts.size):
            if m not in matched:
                open_arcs.append({"cols": [j], "times": [float(ts[m])], "roots": [int(idx[m])]})
        still = []
        for arc in open_arcs:
            if j - arc["cols"][-1] > gap_cols:
                done.append(arc)
            else:
                still.append(arc)
        open_arcs = still
    done.extend(open_arcs)

    # merge across the 0 / 2pi seam
    heads = [a for a in done if a["cols"][0] <= gap_cols]
    tails = [a for a in done if a["cols"][-1] >= n - 1 - gap_cols]
    merged = set()
    for tail in tails:
        if id(tail) in merged:
            continue
        best = None
        for head in heads:
            if head is tail or id(head) in merged:
                continue
            g = head["cols"][0] + n - tail["cols"][-1]
            if g <= 0 or g > gap_cols:
                continue
            if len(tail["times"]) >= 2:
                slope = (tail["times"][-1] - tail["times"][-2]) / (tail["cols"][-1] - tail["cols"][-2])
            else:
                slope = 0.0
            pred = tail["times"][-1] + slope * g
            if abs(head["times"][0] - pred) <= lip * g:
                if best is None or abs(head["times"][0] - pred) < best[0]:
                    best = (abs(head["times"][0] - pred), head)
        if best is not None:
            head = best[1]
            tail["cols"].extend(c + n for c in head["cols"])
            tail["times"].extend(head["times"])
            tail["roots"].extend(head["roots"])
            merged.add(id(head))
    done = [a for a in done if id(a) not in merged]

    arcs = []
    for a in done:
        c = np.asarray(a["cols"], dtype=np.int64)
        closed = bool(c.size >= n and (c[-1] - c[0]) >= n - 1)
        arcs.append(EchoArc(
            arc_id=len(arcs), cols=c, phis=c * dphi,
            times=np.asarray(a["times"]), roots=np.asarray(a["roots"], dtype=np.int64),
            closed=closed))
    arcs.sort(key=lambda A: (A.cols[0], A.times[0]))
    for i, A in enumerate(arcs):
        A.arc_id = i
    return arcs


# -- seeds -------------------------------------------------------------------------

@dataclass
class Seeds:
    t_first: float
    x_first_angle: float
    z_first: np.ndarray
    t_second: float | None = None
    x_second_angle: float | None = None
    z_second: np.ndarray | None = None
    separator_point: np.ndarray | None = None
    separator_normal: np.ndarray | None = None

    def x_point(self, s0_center, a, which=1):
        ang = self.x_first_angle if which == 1 else self.x_second_angle
        return np.asarray(s0_center) + a * np.array([math.cos(ang), math.sin(ang)])


def _parabolic_refine(ph, ts):
    """Vertex of the parabola through three (angle, time) points."""
    x0, x1, x2 = ph
    y0, y1, y2 = ts
    d0 = (y1 - y0) / (x1 - x0)
    d1 = (y2 - y1) / (x2 - x1)
    c2 = (d1 - d0) / (x2 - x0)
    if c2 <= 0:
        return x1, y1
    xv = 0.5 * (x0 + x1 - d0 / c2)
    yv = y0 + d0 * (xv - x0) + c2 * (xv - x0) * (xv - x1)
    return xv, yv


def _refined_column_min(diag, f, j):
    n = diag.n_x
    jm, jp = (j - 1) % n, (j + 1) % n
    dphi = TWO_PI / n
    if np.isfinite(f[jm]) and np.isfinite(f[jp]):
        lip = 3.0 * diag.a * dphi
        if abs(f[jm] - f[j]) <= lip and abs(f[jp] - f[j]) <= lip:
            return _parabolic_refine((-dphi, 0.0, dphi), (f[jm], f[j], f[jp]))
    return 0.0, float(f[j])


def _diag_seed(diag: DiagonalSpectrum, allowed_cols, tie_tol: float = 1e-9):
    f = diag.min_times_per_column()
    mask = np.zeros(diag.n_x, dtype=bool)
    mask[allowed_cols] = True
    f = np.where(mask, f, np.nan)
    if np.all(np.isnan(f)):
        raise BranchLost("no diagonal returns among the allowed columns")
    j = int(np.nanargmin(f))
    dph, t_ref = _refined_column_min(diag, f, j)
    # second local minimum separated from the first: non-generic tie check
    n = diag.n_x
    best_other = None
    for k in range(n):
        if not np.isfinite(f[k]):
            continue
        km, kp = (k - 1) % n, (k + 1) % n
        sep = min((k - j) % n, (j - k) % n)
        if sep <= 2:
            continue
        fm = f[km] if np.isfinite(f[km]) else np.inf
        fp = f[kp] if np.isfinite(f[kp]) else np.inf
        if f[k] <= fm and f[k] <= fp:
            _, t_k = _refined_column_min(diag, f, k)
            if best_other is None or t_k < best_other:
                best_other = t_k
    if best_other is not None and abs(best_other - t_ref) < tie_tol:
        raise NonUniqueMinimum(
            f"two separated diagonal minima agree within {tie_tol:g}: "
            f"{t_ref!r} vs {best_other!r}")
    ang = diag.x_angle(j) + dph
    return t_ref, ang, j


def seed_first_body(diag: DiagonalSpectrum) -> Seeds:
    """Global diagonal minimum: nearest boundary point of the nearer body."""
    t1, ang, _ = _diag_seed(diag, np.arange(diag.n_x))
    x = diag.s0_center + diag.a * np.array([math.cos(ang), math.sin(ang)])
    nu_in = (diag.s0_center - x) / diag.a
    return Seeds(t_first=t1, x_first_angle=ang, z_first=x + 0.5 * t1 * nu_in)


def seed_second_body(diag: DiagonalSpectrum, separator, seeds: Seeds) -> Seeds:
    """Diagonal minimum restricted beyond the separating line."""
    if separator is None:
        raise NoSeparatingLine("no separating vacuous line available")
    p_h, n_h = separator
    n_h = np.asarray(n_h, float)
    if float((seeds.z_first - p_h) @ n_h) > 0:
        n_h = -n_h
    cols = []
    for j in range(diag.n_x):
        x = diag.s0_center + diag.a * np.array([math.cos(diag.x_angle(j)), math.sin(diag.x_angle(j))])
        if float((x - p_h) @ n_h) > 0:
            cols.append(j)
    if not cols:
        raise NoSeparatingLine("separating line leaves no circle points beyond it")
    t2, ang, _ = _diag_seed(diag, np.asarray(cols))
    x = diag.s0_center + diag.a * np.array([math.cos(ang), math.sin(ang)])
    nu_in = (diag.s0_center - x) / diag.a
    z2 = x + 0.5 * t2 * nu_in
    if float((z2 - p_h) @ n_h) <= 0:
        raise NoSeparatingLine("restricted minimum landed on the wrong side of the separator")
    return Seeds(t_first=seeds.t_first, x_first_angle=seeds.x_first_angle,
                 z_first=seeds.z_first, t_second=t2, x_second_angle=ang, z_second=z2,
                 separator_point=np.asarray(p_h, float), separator_normal=n_h)


# -- arc chain labeling ------------------------------------------------------------

def _arc_containing(arcs, diag, col, t, tol):
    n = diag.n_x
    hits = []
    for A in arcs:
        cc = A.cols % n
        m = np.nonzero(np.abs(((cc - col) + n // 2) % n - n // 2) <= 1)[0]
        if m.size and np.min(np.abs(A.times[m] - t)) <= tol:
            hits.append(A)
    return hits


def assign_arc_chains(arcs, diag: DiagonalSpectrum, seeds: Seeds, k_max: int = 6,
                      gap_cols: int | None = None, refl_min: float = 0.9):
    """Label arcs with (body, side, chain position) by cusp adjacency.

    The seed arcs (containing the two restricted diagonal minima) are chain
    position 0; each of their ends spawns a side chain labeled by the sign of
    the cross product against the seed axis. Exactly one unconsumed arc may
    continue a chain end; two candidates abort rather than guess.

    Only predominantly reflexive arcs participate: reflexivity (the echo
    returning along the emission direction) is measurable from travelling
    times, and it excludes the non-reflexive loop branches that also
    accumulate at echograph cusps.
    """
    n = diag.n_x
    dphi = TWO_PI / n
    lip = 3.0 * diag.a * dphi
    tol_seed = 4.0 * lip
    if gap_cols is None:
        # cusp dead zones (where both adjoining branch windows collapse) span
        # a fixed angular size, so the column allowance grows with resolution
        gap_cols = max(3, n // 170)

    def refl_frac(A):
        return float(np.mean(diag.reflexive[A.roots])) if len(A) else 0.0

    axis = seeds.z_second - seeds.z_first
    base = []
    for which, (t, ang) in enumerate(
            ((seeds.t_first, seeds.x_first_angle), (seeds.t_second, seeds.x_second_angle)), start=1):
        col = int(round(ang / dphi)) % n
        hits = [A for A in _arc_containing(arcs, diag, col, t, tol_seed)
                if refl_frac(A) >= refl_min]
        if not hits:
            raise BranchLost(f"no echograph arc contains the body-{which} seed")
        A = min(hits, key=lambda B: np.min(np.abs(B.times - t)))
        A.body = which
        A.side = "LR"
        A.chain_pos = 0
        base.append(A)
    if base[0] is base[1]:
        raise BranchLost("both seeds landed on one echograph arc")

    def w_of(A, end):
        j = A.cols[end] % n
        ph = j * dphi
        x = diag.s0_center + diag.a * np.array([math.cos(ph), math.sin(ph)])
        return x + 0.5 * A.times[end] * (diag.s0_center - x) / diag.a

    def side_of(w):
        r = w - seeds.z_first
        return "L" if axis[0] * r[1] - axis[1] * r[0] > 0 else "R"

    frontier = []
    for A in base:
        if A.closed:
            continue
        for end in (0, -1):
            frontier.append((A, end, side_of(w_of(A, end))))

    consumed = {A.arc_id for A in base}
    while frontier:
        A, end, side = frontier.pop(0)
        if A.chain_pos + 1 >= k_max:
            continue
        med_dt = float(np.median(np.abs(np.diff(A.times)))) if len(A) > 1 else lip
        tol_t = max(5.0 * med_dt, 2.0 * lip)
        c_end = A.cols[end] % n
        t_end = A.times[end]
        cands = []
        for B in arcs:
            if B.arc_id in consumed or B.closed or refl_frac(B) < refl_min:
                continue
            for bend in (0, -1):
                dc = abs(((B.cols[bend] % n) - c_end + n // 2) % n - n // 2)
                if dc <= gap_cols and abs(B.times[bend] - t_end) <= tol_t + lip * dc:
                    cands.append((B, bend))
                    break
        if not cands:
            continue
        if len(cands) > 1:
            raise AmbiguousAdjacency(
                f"{len(cands)} arcs adjoin chain end (body {A.body}, side {side}, "
                f"pos {A.chain_pos}) at column {c_end}")
        B, bend = cands[0]
        B.body = A.body
        B.side = side
        B.chain_pos = A.chain_pos + 1
        B.attach_end = bend
        consumed.add(B.arc_id)
        frontier.append((B, -1 if bend == 0 else 0, side))
    return [A for A in arcs if A.chain_pos >= 0]


# -- local curve fits ---------------------------------------------------------------

@dataclass
class LocalCurveFit:
    foot: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    curvature: float
    nonconvex: bool
    n_support: int


def _weighted_quadratic(pts, normals, weights):
    wsum = weights.sum()
    center = (weights[:, None] * pts).sum(axis=0) / wsum
    d = pts - center
    cov = (weights[:, None, None] * d[:, :, None] * d[:, None, :]).sum(axis=0) / wsum
    evals, evecs = np.linalg.eigh(cov)
    tau = evecs[:, 1]
    nu = np.array([-tau[1], tau[0]])
    nmean = (weights[:, None] * normals).sum(axis=0)
    if float(nmean @ nu) < 0:
        nu = -nu
        tau = -tau  # keep (tau, nu) right-handed
    xi = d @ tau
    eta = d @ nu
    X = np.stack([np.ones_like(xi), xi, xi * xi], axis=1)
    Xw = X * weights[:, None]
    coef = np.linalg.solve(X.T @ Xw + 1e-14 * np.eye(3), Xw.T @ eta)
    return center, tau, nu, coef


def _fit_eval(center, tau, nu, coef, xi):
    eta = coef[0] + coef[1] * xi + coef[2] * xi * xi
    p = center + xi * tau + eta * nu
    deta = coef[1] + 2.0 * coef[2] * xi
    t = tau + deta * nu
    t /= np.linalg.norm(t)
    nrm = -deta * tau + nu
    nrm /= np.linalg.norm(nrm)
    kappa = -2.0 * coef[2] / (1.0 + deta * deta) ** 1.5
    return p, t, nrm, kappa


def fit_local_curve(points, normals, query, radius: float | None = None,
                    min_support: int = 5) -> LocalCurveFit:
    """Moving-least-squares quadratic fit of an arc cloud near a query point.

    Weights taper cubically to zero at ``radius`` (default 10x the median
    point spacing). The returned normal is oriented to agree with the stored
    per-point normals; reconstructed boundaries must be strictly convex, so a
    non-positive fitted curvature raises the nonconvex flag.
    """
    points = np.asarray(points, float)
    normals = np.asarray(normals, float)
    query = np.asarray(query, float)
    if radius is None:
        d = np.linalg.norm(np.diff(points, axis=0), axis=1)
        radius = 10.0 * float(np.median(d)) if d.size else 1.0
    r = np.linalg.norm(points - query, axis=1)
    sel = r < radius
    if int(sel.sum()) < min_support:
        raise InsufficientSupport(f"{int(sel.sum())} points within fitting radius {radius:g}")
    w = (1.0 - (r[sel] / radius) ** 3) ** 2
    center, tau, nu, coef = _weighted_quadratic(points[sel], normals[sel], w)
    xi = float((query - center) @ tau)
    for _ in range(12):  # Newton on the foot parameter
        eta = coef[0] + coef[1] * xi + coef[2] * xi * xi
        de = coef[1] + 2.0 * coef[2] * xi
        p = center + xi * tau + eta * nu
        g = float((p - query) @ (tau + de * nu))
        h = 1.0 + de * de + float((p - query) @ nu) * 2.0 * coef[2]
        if h <= 0:
            break
        step = g / h
        xi -= step
        if abs(step) < 1e-14:
            break
    foot, t, nrm, kappa = _fit_eval(center, tau, nu, coef, xi)
    return LocalCurveFit(foot, t, nrm, float(kappa), bool(kappa <= 1e-6), int(sel.sum()))


# -- determined-boundary store -----------------------------------------------------

def _running_median(x, w):
    if x.size == 0:
        return x.copy()
    h = w // 2
    pad = np.concatenate([x[:1].repeat(h), x, x[-1:].repeat(h)])
    win = np.lib.stride_tricks.sliding_window_view(pad, w)
    return np.median(win, axis=1)


class BodyCloud:
    """Ordered point cloud of one body's determined boundary."""

    def __init__(self, scale: float):
        self.scale = scale
        self.pts = np.empty((0, 2))
        self.normals = np.empty((0, 2))
        self.levels = np.empty(0, dtype=np.int32)
        self._P = None        # ordered, with closing edge appended
        self._N = None
        self._edges = None
        self._order = None
        self.median_spacing = np.nan

    def __len__(self):
        return self.pts.shape[0]

    def add(self, pts, normals, levels):
        self.pts = np.vstack([self.pts, pts])
        self.normals = np.vstack([self.normals, normals])
        self.levels = np.concatenate([self.levels, levels])
        self._P = None

    def rebuild(self):
        if len(self) < 2:
            return
        centroid = self.pts.mean(axis=0)
        ang = np.arctan2(self.pts[:, 1] - centroid[1], self.pts[:, 0] - centroid[0])
        order = np.argsort(ang, kind="stable")
        P = self.pts[order]
        N = self.normals[order]
        P = np.vstack([P, P[:1]])
        N = np.vstack([N, N[:1]])
        seg = np.linalg.norm(np.diff(P, axis=0), axis=1)
        self.median_spacing = float(np.median(seg[seg > 0])) if np.any(seg > 0) else np.nan
        # point density varies strongly along the boundary (deep arcs bunch up
        # near the channel), so the gap cut must compare to the local spacing
        loc = _running_median(seg, 11)
        local = np.maximum(np.roll(loc, 1), np.maximum(loc, np.roll(loc, -1)))
        self._edges = seg <= 6.0 * np.maximum(local, 1e-9)
        self._P = P
        self._N = N
        self._order = order

    def first_hit(self, o, d, tmin=1e-9):
        if self._P is None:
            self.rebuild()
        if self._P is None or len(self) < 5:
            return -1.0, -1
        mod = backend.kernels()
        return mod.segments_first_hit(o[0], o[1], d[0], d[1], self._P, self._edges, tmin)

    def hit_is_interior(self, edge_idx, w: int = 4) -> bool:
        """True when no gap edge lies within w edges of the hit.

        Reflections near the determined frontier (or across a coverage gap)
        would be computed from one-sided, worst-quality fits; they count as
        hits on unknown boundary instead.
        """
        ne = self._edges.shape[0]
        for i in range(edge_idx - w, edge_idx + w + 1):
            if not self._edges[i % ne]:
                return False
        return True

    def refine_hit(self, o, d, t0, edge_idx, half_window=14):
        """Polish a polyline hit against the local quadratic fit."""
        if not self.hit_is_interior(edge_idx):
            return None
        P, N = self._P, self._N
        n = len(self)
        t = t0
        idx = edge_idx
        for _ in range(2):
            lo = max(0, idx - half_window)
            hi = min(n, idx + half_window + 2)
            pts = P[lo:hi]
            nms = N[lo:hi]
            q = o + t * d
            r = np.linalg.norm(pts - q, axis=1)
            local = float(np.median(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
            radius = max(10.0 * local, 4.0 * float(np.min(r)) + 1e-12)
            sel = r < radius
            if int(sel.sum()) < 5:
                return None
            w = (1.0 - (r[sel] / radius) ** 3) ** 2
            center, tau, nu, coef = _weighted_quadratic(pts[sel], nms[sel], w)
            xio = float((o - center) @ tau)
            xid = float(d @ tau)
            eto = float((o - center) @ nu)
            etd = float(d @ nu)
            a2 = coef[2] * xid * xid
            a1 = 2.0 * coef[2] * xio * xid + coef[1] * xid - etd
            a0 = coef[2] * xio * xio + coef[1] * xio + coef[0] - eto
            roots = []
            if abs(a2) < 1e-14:
                if abs(a1) > 1e-14:
                    roots = [-a0 / a1]
            else:
                disc = a1 * a1 - 4.0 * a2 * a0
                if disc >= 0.0:
                    sq = math.sqrt(disc)
                    roots = [(-a1 - sq) / (2 * a2), (-a1 + sq) / (2 * a2)]
            if not roots:
                return None
            t_new = min(roots, key=lambda rr: abs(rr - t))
            if abs(t_new - t) > 20.0 * self.median_spacing + 0.05 * self.scale:
                return None
            t = t_new
            # recenter the window on the nearest stored point
            q = o + t * d
            rloc = np.linalg.norm(P[lo:hi] - q, axis=1)
            idx = lo + int(np.argmin(rloc))
        xi = float((o + t * d - center) @ tau)
        foot, tang, nrm, kappa = _fit_eval(center, tau, nu, coef, xi)
        return t, foot, nrm

    def nearest_level(self, p):
        d = np.linalg.norm(self.pts - p, axis=1)
        i = int(np.argmin(d))
        return float(d[i]), int(self.levels[i])


# -- boundary arcs and state ---------------------------------------------------------

@dataclass
class BoundaryArc:
    body: int
    side: str
    level: int
    points: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    source_cols: np.ndarray
    endpoints: tuple | None = None


@dataclass
class ReconstructionState:
    seeds: Seeds
    echo_arcs: list
    boundary_arcs: list = field(default_factory=list)
    clouds: dict = field(default_factory=dict)
    z_inf: tuple | None = None
    k_max: int = 0
    skipped: dict = field(default_factory=dict)
    audit: list = field(default_factory=list)
    backtrace_log: list = field(default_factory=list)

    def body_points(self, body: int) -> np.ndarray:
        return self.clouds[body].pts

    def body_normals(self, body: int) -> np.ndarray:
        return self.clouds[body].normals


def _other(body):
    return 2 if body == 1 else 1


def _kink_mask(slopes, factor: float = 12.0):
    """Flag points where the time-derivative jumps anomalously.

    Echograph branches have square-root kinks where a grazing reflection is
    born; finite differences there are meaningless, and the offending points
    sit exactly at the jump of consecutive slopes.
    """
    n = slopes.shape[0]
    bad = np.zeros(n, dtype=bool)
    if n < 5:
        return bad
    ds = np.abs(np.diff(slopes))
    med = float(np.median(ds))
    thr = factor * max(med, 1e-300)
    q = np.zeros(n)
    q[0] = ds[0]
    q[-1] = ds[-1]
    q[1:-1] = np.maximum(ds[:-1], ds[1:])
    bad = q > thr
    return bad


def _end_drops(slopes, base: int, factor: float = 4.0, cap: int = 10):
    """How many points to trim per open end: the square-root kink at an
    echograph cusp inflates the slope jumps of the last few samples."""
    n = slopes.shape[0]
    if n < 2 * base + 5:
        return base, base
    ds = np.abs(np.diff(slopes))
    thr = factor * max(float(np.median(ds)), 1e-300)
    head = base
    while head < min(cap, n // 3) and ds[head - 1] > thr:
        head += 1
    tail = base
    while tail < min(cap, n // 3) and ds[-tail] > thr:
        tail += 1
    return head, tail


def _prune_jumpers(pts, factor: float = 10.0, passes: int = 2):
    """Indices of points consistent with their neighbours along the arc order."""
    keep = np.arange(len(pts))
    for _ in range(passes):
        if keep.size < 3:
            break
        p = pts[keep]
        gaps = np.linalg.norm(np.diff(p, axis=0), axis=1)
        thr = factor * max(float(np.median(gaps)), 1e-12)
        bad = np.zeros(keep.size, dtype=bool)
        bad[0] = gaps[0] > thr
        bad[-1] = gaps[-1] > thr
        bad[1:-1] = (gaps[:-1] > thr) & (gaps[1:] > thr)
        if not bad.any():
            break
        keep = keep[~bad]
    return keep


def _backtrace_point(clouds, body, count, x, nu_in, tau, S, dS_dphi, a, margin,
                     incidence_min=0.1):
    """One echo return traced backwards; returns (z, normal, feet) or a skip reason."""
    v_t = 0.5 * dS_dphi / a
    if abs(v_t) > 1.0 - 1e-8:
        return None, "NearNormalAmbiguity", None
    v = v_t * tau - math.sqrt(1.0 - v_t * v_t) * nu_in
    d = -v
    o = np.asarray(x, float)
    budget = 0.5 * S
    feet = []
    dep_guard = 0.05 * a  # fitted-surface self-clips are artifacts; real
    # inter-body segments are far longer than this guard
    for q in range(count):
        j = count - q  # backward pass hits the j-th forward reflection
        target = _other(body) if j % 2 == 1 else body
        cloud = clouds[target]
        t, idx = cloud.first_hit(o, d, tmin=dep_guard if q else 1e-9)
        if t < 0 or t > budget - margin:
            return None, "BacktraceHitUnknownRegion", None
        ref = cloud.refine_hit(o, d, t, idx)
        if ref is None:
            return None, "BacktraceHitUnknownRegion", None
        t, foot, nrm = ref
        if t <= 0 or t > budget - margin:
            return None, "BacktraceHitUnknownRegion", None
        c = float(d @ nrm)
        if c >= incidence_min:
            # struck the far wall from inside: the ray slipped through a
            # not-yet-determined stretch of boundary
            return None, "BacktraceHitUnknownRegion", None
        # grazing reflections amplify fitted-cloud noise without bound
        if abs(c) < incidence_min:
            return None, "GrazingBacktrace", None
        d = d - 2.0 * c * nrm
        d /= np.linalg.norm(d)
        o = foot
        budget -= t
        feet.append((target, foot))
    if budget <= 0:
        return None, "NegativeResidualLength", None
    for b_id, cl in clouds.items():
        guard = dep_guard if (count and b_id == feet[-1][0]) else 1e-9
        t, _ = cl.first_hit(o, d, tmin=guard)
        if 0 < t < budget - margin:
            return None, "UnexpectedExtraHit", None
    z = o + budget * d
    nrm = -d
    return (z, nrm, feet), None, None


def _forward_consistency(clouds, body, count, z, nrm, S, x, s0_center, a, margin, tol):
    """Re-simulate the outgoing normal ray off the fitted boundary.

    A correctly placed point reproduces its measured source: the ray from z
    along the recovered normal must reflect ``count`` times off the determined
    clouds and exit the circle at x with round-trip time S.
    """
    o = np.asarray(z, float)
    d = np.asarray(nrm, float)
    L = 0.0
    dep_guard = 0.05 * a
    last_body = body
    for q in range(count):
        target = _other(body) if (q + 1) % 2 == 1 else body
        cloud = clouds[target]
        t, idx = cloud.first_hit(o, d, tmin=dep_guard if q else margin)
        if t < 0:
            return False
        ref = cloud.refine_hit(o, d, t, idx)
        if ref is None:
            return False
        t, foot, n2 = ref
        c = float(d @ n2)
        if c >= 0.0 or abs(c) < 1e-7:
            return False
        d = d - 2.0 * c * n2
        d /= np.linalg.norm(d)
        o = foot
        L += t
        last_body = target
    r = o - s0_center
    B = float(r @ d)
    C = float(r @ r - a * a)
    disc = B * B - C
    if disc <= 0:
        return False
    ts0 = -B + math.sqrt(disc)
    for b_id, cl in clouds.items():
        guard = dep_guard if b_id == last_body else margin
        t, _ = cl.first_hit(o, d, tmin=guard)
        if 0 < t < ts0 - margin:
            return False
    L += ts0
    xe = o + ts0 * d
    return abs(2.0 * L - S) <= tol and float(np.linalg.norm(xe - np.asarray(x))) <= tol


def reconstruct_all(diag: DiagonalSpectrum, separator, k_max: int = 6,
                    drop_arc_ends: int = 2, max_rounds: int | None = None,
                    device=None, subgrid_level: int = 3,
                    consistency_tol: float | None = None) -> ReconstructionState:
    """Full two-body reconstruction from measured diagonal data.

    ``separator`` is a (point, normal) separating vacuous line, e.g. from
    ``separating_line_from_dataset`` or hull recovery. ``k_max`` caps the
    chain depth (a chain's n-th arc needs n backward reflections). When a
    re-measurement ``device`` is supplied, arcs at level >= ``subgrid_level``
    get their time derivatives from sub-grid stencils instead of neighbouring
    grid columns (deep branches curve too sharply for the grid step), and
    every placed point must pass a forward re-simulation of its echo off the
    fitted boundary.
    """
    a = diag.a
    n = diag.n_x
    dphi = TWO_PI / n
    consistency_tol = consistency_tol if consistency_tol is not None else 1e-3 * a

    seeds = seed_first_body(diag)
    seeds = seed_second_body(diag, separator, seeds)
    arcs = segment_echograph(diag)
    labeled = assign_arc_chains(arcs, diag, seeds, k_max=k_max)

    state = ReconstructionState(seeds=seeds, echo_arcs=labeled, k_max=k_max)
    clouds = {1: BodyCloud(a), 2: BodyCloud(a)}
    state.clouds = clouds

    margin = 1e-3 * a
    pending = {}
    slopes = {}
    for A in labeled:
        s = _arc_slopes(A.times, A.phis)
        if A.closed and len(A) >= 3:
            # wrap-aware central differences for closed arcs
            tt = A.times
            ph = A.phis
            s[0] = (tt[1] - tt[-1]) / (ph[1] - (ph[-1] - TWO_PI))
            s[-1] = (tt[0] - tt[-2]) / ((ph[0] + TWO_PI) - ph[-2])
        kinky = _kink_mask(s)
        head, tail = _end_drops(s, drop_arc_ends)
        if device is not None and A.chain_pos + 1 >= subgrid_level:
            delta = dphi / 16.0
            tm, tp = device.stencil_times(A.roots, delta)
            s_sub = (tp - tm) / (2.0 * delta)
            s = np.where(np.isfinite(s_sub), s_sub, s)
        slopes[A.arc_id] = s
        idx = list(range(len(A)))
        if not A.closed and len(A) > head + tail:
            idx = idx[head: len(A) - tail]
        if A.attach_end == -1:
            idx = idx[::-1]
        refl = diag.reflexive[A.roots]
        pending[A.arc_id] = [m for m in idx if refl[m] and not kinky[m]]

    accepted = {A.arc_id: [] for A in labeled}
    arc_by_id = {A.arc_id: A for A in labeled}
    chains = {}
    for A in labeled:
        if A.chain_pos > 0:
            for B in labeled:
                if (B.body, B.side if B.chain_pos else A.side) == (A.body, A.side) \
                        and B.chain_pos == A.chain_pos - 1:
                    chains[A.arc_id] = B.arc_id
                    break
    tol_cont = 0.015 * a

    order = sorted(labeled, key=lambda A: (A.chain_pos, A.body, A.side))
    max_rounds = max_rounds if max_rounds is not None else 4 * k_max + 4
    for rnd in range(max_rounds):
        progress = False
        for A in order:
            todo = pending[A.arc_id]
            if not todo:
                continue
            # continuity anchors: the chain frontier plus this arc's own points
            anchors = [g[1] for g in accepted[A.arc_id]]
            prev_id = chains.get(A.arc_id)
            if prev_id is not None and accepted[prev_id]:
                prev_arc = arc_by_id[prev_id]
                attach_col = int(A.cols[A.attach_end] % n)
                frontier = min(
                    accepted[prev_id],
                    key=lambda g: min((int(prev_arc.cols[g[0]] % n) - attach_col) % n,
                                      (attach_col - int(prev_arc.cols[g[0]] % n)) % n))
                anchors.append(frontier[1])
            anchor_arr = np.asarray(anchors) if anchors else None
            got = []
            still = []
            for m in todo:
                ph = float(A.phis[m] % TWO_PI)
                x = diag.s0_center + a * np.array([math.cos(ph), math.sin(ph)])
                nu_in = (diag.s0_center - x) / a
                tau = np.array([-math.sin(ph), math.cos(ph)])
                res, reason, _ = _backtrace_point(
                    clouds, A.body, A.chain_pos, x, nu_in, tau,
                    float(A.times[m]), float(slopes[A.arc_id][m]), a, margin)
                if res is None:
                    if reason in ("NearNormalAmbiguity", "TangentIncidence",
                                  "NegativeResidualLength", "GrazingBacktrace"):
                        state.skipped[reason] = state.skipped.get(reason, 0) + 1
                    else:
                        still.append(m)
                    continue
                z, nrm, feet = res
                if A.chain_pos > 0 and anchor_arr is not None:
                    # boundary arcs join at fold points: stay continuous with
                    # the chain frontier and with already-placed points
                    if float(np.min(np.linalg.norm(anchor_arr - z, axis=1))) > tol_cont:
                        still.append(m)
                        continue
                if device is not None and A.chain_pos > 0 and not _forward_consistency(
                        clouds, A.body, A.chain_pos, z, nrm, float(A.times[m]), x,
                        diag.s0_center, a, margin, consistency_tol):
                    still.append(m)
                    continue
                got.append((m, z, nrm, feet))
                anchor_arr = np.vstack([anchor_arr, z[None, :]]) if anchor_arr is not None \
                    else z[None, :]
                progress = True
            pending[A.arc_id] = still
            if got:
                got.sort(key=lambda g: g[0])
                pts = np.asarray([g[1] for g in got])
                keep = _prune_jumpers(pts)
                dropped = len(got) - keep.size
                if dropped:
                    state.skipped["jumper"] = state.skipped.get("jumper", 0) + dropped
                got = [got[i] for i in keep]
                if got:
                    cl = clouds[A.body]
                    cl.add(np.asarray([g[1] for g in got]), np.asarray([g[2] for g in got]),
                           np.full(len(got), A.chain_pos + 1, dtype=np.int32))
                    cl.rebuild()
                    accepted[A.arc_id].extend(got)
        if not progress:
            break
    for A in labeled:
        for m in pending[A.arc_id]:
            state.skipped["unresolved"] = state.skipped.get("unresolved", 0) + 1

    for A in labeled:
        if not accepted[A.arc_id]:
            continue
        rows = sorted(accepted[A.arc_id], key=lambda g: g[0])
        pts = np.asarray([g[1] for g in rows])
        keep = _prune_jumpers(pts)
        if keep.size < len(rows):
            state.skipped["jumper"] = state.skipped.get("jumper", 0) + len(rows) - keep.size
        rows = [rows[i] for i in keep]
        if not rows:
            continue
        pts = np.asarray([g[1] for g in rows])
        nrm = np.asarray([g[2] for g in rows])
        src = np.asarray([int(A.cols[g[0]] % n) for g in rows], dtype=np.int64)
        tangents = np.stack([-nrm[:, 1], nrm[:, 0]], axis=1)
        state.boundary_arcs.append(BoundaryArc(
            body=A.body, side=A.side, level=A.chain_pos + 1,
            points=pts, normals=nrm, tangents=tangents, source_cols=src,
            endpoints=(pts[0].copy(), pts[-1].copy())))
        for g in rows:
            state.backtrace_log.append((A.body, A.side, A.chain_pos + 1, g[1], g[3]))

    # final clouds reflect the pruned arcs exactly
    clouds = {1: BodyCloud(a), 2: BodyCloud(a)}
    for B in state.boundary_arcs:
        clouds[B.body].add(B.points, B.normals,
                           np.full(len(B.points), B.level, dtype=np.int32))
    for cl in clouds.values():
        cl.rebuild()
    state.clouds = clouds

    if len(clouds[1]) and len(clouds[2]):
        tree = cKDTree(clouds[2].pts)
        dd, ii = tree.query(clouds[1].pts)
        i1 = int(np.argmin(dd))
        state.z_inf = (clouds[1].pts[i1].copy(), clouds[2].pts[int(ii[i1])].copy())
    return state
