"""Recovering ray directions from travelling-time derivatives.

The travelling time of a fixed geodesic branch, differentiated along the
bounding circle, gives the tangential components of the travel directions at
the endpoints; the normal components follow from unit length and the fixed
entry/exit sign conventions. This module also carries the two reconstructions
that need only these identities: the single-convex-body boundary and the
convex hull recovered from vacuous (straight-time) chords.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectrum import ChordSampler, DiagonalSpectrum, SpectrumDataset
from .tracing import TraceLimits, Trajectory, two_point_continuation, wrap_angle

__all__ = [
    "BranchPatch", "ReflexivePatch", "HullResult", "VacuousComponents",
    "NearNormalAmbiguity", "BranchBroken", "MissingCell", "EmptyDiagonal",
    "branch_patch_from_continuation", "recover_directions",
    "recover_reflexive_direction", "single_convex_reconstruct",
    "vacuous_line_test", "convex_hull_recover", "vacuous_component_map",
    "separating_line_from_dataset",
]

TWO_PI = 2.0 * math.pi


class NearNormalAmbiguity(ValueError):
    """Tangential derivative so close to +-1 that the normal sign is unreliable."""


class BranchBroken(RuntimeError):
    pass


class MissingCell(KeyError):
    pass


class EmptyDiagonal(ValueError):
    pass


def _circle_frames(s0_center, a, angle):
    x = np.asarray(s0_center) + a * np.array([math.cos(angle), math.sin(angle)])
    nu_in = -np.array([math.cos(angle), math.sin(angle)])
    tau = np.array([-math.sin(angle), math.cos(angle)])
    return x, nu_in, tau


@dataclass(frozen=True)
class BranchPatch:
    """Branch travelling times on a 5-point angular stencil around (x0, y0)."""

    s0_center: np.ndarray
    a: float
    x_angle: float
    y_angle: float
    h: float
    t_center: float
    t_x_plus: float
    t_x_minus: float
    t_y_plus: float
    t_y_minus: float


@dataclass(frozen=True)
class ReflexivePatch:
    """Diagonal branch times S(x) on a 3-point stencil around x0."""

    s0_center: np.ndarray
    a: float
    x_angle: float
    h: float
    s_center: float
    s_plus: float
    s_minus: float


def branch_patch_from_continuation(scene, seed: Trajectory, h: float = 1e-4,
                                   limits: TraceLimits | None = None) -> BranchPatch:
    """Measure the stencil by continuing the seed branch to perturbed endpoints."""
    s0 = scene.s0
    phx = s0.angle_of(seed.entry.point)
    phy = s0.angle_of(seed.exit.point)
    times = {}
    for key, tgt in (("xp", (phx + h, phy)), ("xm", (phx - h, phy)),
                     ("yp", (phx, phy + h)), ("ym", (phx, phy - h))):
        try:
            times[key] = two_point_continuation(scene, seed, tgt, limits).total_time
        except Exception as e:
            raise BranchBroken(f"stencil point {key} lost the branch: {e}") from e
    return BranchPatch(np.asarray(s0.center, float), s0.radius, phx, phy, h,
                       seed.total_time, times["xp"], times["xm"], times["yp"], times["ym"])


def _complete_unit(t_comp: float, tau, nu_in, normal_sign: float):
    if abs(t_comp) > 1.0 - 1e-8:
        raise NearNormalAmbiguity(f"tangential component {t_comp!r} too close to unit")
    n_comp = normal_sign * math.sqrt(1.0 - t_comp * t_comp)
    v = t_comp * tau + n_comp * nu_in
    return v / np.linalg.norm(v)


def recover_directions(patch: BranchPatch):
    """Travel directions (u at entry, v at exit) from the stencil times.

    u points into the ball at x0 and v out of it at y0; their tangential parts
    are read off central differences of the branch time along the circle.
    """
    ds = patch.a * patch.h
    u_t = -(patch.t_x_plus - patch.t_x_minus) / (2.0 * ds)
    v_t = (patch.t_y_plus - patch.t_y_minus) / (2.0 * ds)
    _, nu_x, tau_x = _circle_frames(patch.s0_center, patch.a, patch.x_angle)
    _, nu_y, tau_y = _circle_frames(patch.s0_center, patch.a, patch.y_angle)
    u = _complete_unit(u_t, tau_x, nu_x, +1.0)
    v = _complete_unit(v_t, tau_y, nu_y, -1.0)
    return u, v


def recover_reflexive_direction(patch: ReflexivePatch) -> np.ndarray:
    """Arrival direction (unit vector from the first reflection toward x0)."""
    ds = patch.a * patch.h
    v_t = 0.5 * (patch.s_plus - patch.s_minus) / (2.0 * ds)
    _, nu_x, tau_x = _circle_frames(patch.s0_center, patch.a, patch.x_angle)
    return _complete_unit(v_t, tau_x, nu_x, -1.0)


# -- single convex body ----------------------------------------------------------

def single_convex_reconstruct(diag: DiagonalSpectrum, lipschitz_factor: float = 5.0):
    """Boundary points of a single convex body from minimum diagonal times.

    For each grid point x the nearest-boundary-point bounce realizes the
    minimum of T(x, x); its arrival direction comes from the finite-difference
    derivative of that minimum along the circle. Columns whose neighbours jump
    by more than the branch-continuity bound are skipped.
    """
    f = diag.min_times_per_column()
    if np.all(np.isnan(f)):
        raise EmptyDiagonal("no diagonal returns in the dataset")
    n = diag.n_x
    dphi = TWO_PI / n
    ds = diag.a * dphi
    max_jump = lipschitz_factor * ds  # |S'| <= 2 along arc length, with slack
    pts = []
    for j in range(n):
        jm, jp = (j - 1) % n, (j + 1) % n
        if not (np.isfinite(f[j]) and np.isfinite(f[jm]) and np.isfinite(f[jp])):
            continue
        if abs(f[jp] - f[j]) > max_jump or abs(f[j] - f[jm]) > max_jump:
            continue
        patch = ReflexivePatch(diag.s0_center, diag.a, diag.x_angle(j), dphi,
                               float(f[j]), float(f[jp]), float(f[jm]))
        try:
            u = recover_reflexive_direction(patch)
        except NearNormalAmbiguity:
            continue
        x = diag.x_point(j)
        pts.append(x - 0.5 * f[j] * u)
    return np.asarray(pts)


# -- vacuous lines and the convex hull --------------------------------------------

def vacuous_line_test(dataset: SpectrumDataset, chord, tol: float | None = None) -> bool:
    """True when the dataset realizes the straight travelling time on the chord.

    ``chord`` is an (x_angle, y_angle) pair; the nearest stored (x, y) cell is
    used (angular snap at the grid step). Raises MissingCell when no sample is
    close enough.
    """
    tol = tol if tol is not None else 1e-6 * dataset.a
    x_angle, y_angle = chord
    idx = dataset.lookup_cell(x_angle, y_angle)
    if not idx:
        raise MissingCell(f"no samples near cell ({x_angle:.4f}, {y_angle:.4f})")
    for i in idx:
        straight = dataset.chord(dataset.x_angles[i], dataset.y_angles[i])
        if abs(dataset.times[i] - straight) <= tol:
            return True
    return False


def _chord_angles(c0, a, e, c):
    """Endpoint angles of the chord cut by the line <p-c0, e> = c."""
    s = math.sqrt(max(a * a - c * c, 0.0))
    perp = np.array([-e[1], e[0]])
    p1 = c * e + s * perp
    p2 = c * e - s * perp
    return math.atan2(p1[1], p1[0]) % TWO_PI, math.atan2(p2[1], p2[0]) % TWO_PI


@dataclass
class VacuousComponents:
    """Connected components of the vacuous-line set in (normal angle, offset)."""

    n_alpha: int
    n_c: int
    labels: np.ndarray          # (n_alpha, n_c) int, 0 = not vacuous
    component_sizes: list
    separating: list            # component ids not touching the outer rows
    separating_line: tuple | None  # (point, normal) or None


def vacuous_component_map(sampler: ChordSampler, n_alpha: int = 180, n_c: int = 256,
                          tol: float | None = None) -> VacuousComponents:
    """Probe the full (direction, offset) line grid and label vacuous components.

    Lines are parametrized by normal angle alpha in [0, pi) and offset c in
    (-a, a); (alpha + pi, -c) is the same line, which the component search
    glues across the alpha seam.
    """
    scene = sampler.scene
    a = scene.s0.radius
    c0 = np.asarray(scene.s0.center, float)
    tol = tol if tol is not None else 1e-6 * a
    alphas = math.pi * (np.arange(n_alpha) + 0.5) / n_alpha
    cs = a * (2.0 * (np.arange(n_c) + 0.5) / n_c - 1.0)
    vac = np.zeros((n_alpha, n_c), dtype=bool)
    for i, al in enumerate(alphas):
        e = np.array([math.cos(al), math.sin(al)])
        xs, ys = [], []
        for c in cs:
            xa, ya = _chord_angles(c0, a, e, c)
            xs.append(xa)
            ys.append(ya)
        vac[i] = _straight_many(sampler, np.asarray(xs), np.asarray(ys), tol)
    labels = _label_components(vac)
    sizes = [int(np.sum(labels == k)) for k in range(1, labels.max() + 1)]
    separating = []
    for k in range(1, labels.max() + 1):
        rows = np.nonzero(labels == k)[1]
        if rows.size and rows.min() > 0 and rows.max() < n_c - 1:
            separating.append(k)
    line = None
    if separating:
        k = separating[0]
        best = None
        for i in range(n_alpha):
            run = labels[i] == k
            if not run.any():
                continue
            # longest contiguous run of offsets in this direction column
            idx = np.nonzero(run)[0]
            breaks = np.nonzero(np.diff(idx) > 1)[0]
            segs = np.split(idx, breaks + 1)
            for seg in segs:
                if best is None or seg.size > best[0]:
                    best = (seg.size, i, seg[seg.size // 2])
        _, i, jc = best
        e = np.array([math.cos(alphas[i]), math.sin(alphas[i])])
        line = (c0 + cs[jc] * e, e)
    return VacuousComponents(n_alpha, n_c, labels, sizes, separating, line)


def _straight_many(sampler: ChordSampler, x_angles, y_angles, tol):
    """Vectorized ChordSampler.straight over many chords."""
    from .tracing import EXITED, exit_map
    scene = sampler.scene
    s0 = scene.s0
    x = s0.center + s0.radius * np.stack([np.cos(x_angles), np.sin(x_angles)], axis=1)
    y = s0.center + s0.radius * np.stack([np.cos(y_angles), np.sin(y_angles)], axis=1)
    d = y - x
    nd = np.linalg.norm(d, axis=1)
    ok = nd > 1e-12
    d[ok] /= nd[ok, None]
    d[~ok] = (1.0, 0.0)
    st, t, k, ep, ed, cb = exit_map(scene, x, d, sampler.limits)
    ya = np.arctan2(ep[:, 1] - s0.center[1], ep[:, 0] - s0.center[0]) % TWO_PI
    hit_target = np.abs(wrap_angle(ya - y_angles)) <= 1e-7
    return ok & (st == EXITED) & hit_target & (np.abs(t - nd) <= tol)


def _label_components(vac: np.ndarray) -> np.ndarray:
    """4-connected labeling with the (alpha + pi, -c) seam glue."""
    n_alpha, n_c = vac.shape
    labels = np.zeros(vac.shape, dtype=np.int32)
    nxt = 0
    for i0 in range(n_alpha):
        for j0 in range(n_c):
            if not vac[i0, j0] or labels[i0, j0]:
                continue
            nxt += 1
            stack = [(i0, j0)]
            labels[i0, j0] = nxt
            while stack:
                i, j = stack.pop()
                neigh = [(i, j - 1), (i, j + 1)]
                if i > 0:
                    neigh.append((i - 1, j))
                else:
                    neigh.append((n_alpha - 1, n_c - 1 - j))  # seam glue
                if i < n_alpha - 1:
                    neigh.append((i + 1, j))
                else:
                    neigh.append((0, n_c - 1 - j))
                for (ii, jj) in neigh:
                    if 0 <= jj < n_c and vac[ii, jj] and not labels[ii, jj]:
                        labels[ii, jj] = nxt
                        stack.append((ii, jj))
    return labels


@dataclass
class HullResult:
    directions: np.ndarray      # (n,) angles of outward normals
    support: np.ndarray         # (n,) support values (max <p - c0, e>)
    polyline: np.ndarray        # (m, 2) hull boundary vertices
    components: VacuousComponents | None


def convex_hull_recover(sampler: ChordSampler, n_dirs: int = 360,
                        offset_steps: int = 2048, refine_iters: int = 24,
                        with_components: bool = True, tol: float | None = None) -> HullResult:
    """Support lines of the obstacle hull from vacuous-chord transitions.

    For each outward direction the offset of the deepest all-vacuous chord
    family is swept coarsely and refined by bisection; the resulting supporting
    lines are intersected into a hull polyline.
    """
    scene = sampler.scene
    a = scene.s0.radius
    c0 = np.asarray(scene.s0.center, float)
    tol = tol if tol is not None else 1e-6 * a
    thetas = TWO_PI * np.arange(n_dirs) / n_dirs
    support = np.empty(n_dirs)
    for i, th in enumerate(thetas):
        e = np.array([math.cos(th), math.sin(th)])
        cs = a * (1.0 - (np.arange(1, offset_steps) / offset_steps) * 2.0)
        xs = np.empty(cs.size)
        ys = np.empty(cs.size)
        for j, c in enumerate(cs):
            xs[j], ys[j] = _chord_angles(c0, a, e, c)
        ok = _straight_many(sampler, xs, ys, tol)
        bad = np.nonzero(~ok)[0]
        if bad.size == 0:
            support[i] = -a
            continue
        jb = bad[0]
        lo = cs[jb]                     # non-vacuous (touches the obstacle)
        hi = cs[jb - 1] if jb > 0 else a  # vacuous
        for _ in range(refine_iters):
            mid = 0.5 * (lo + hi)
            xa, ya = _chord_angles(c0, a, e, mid)
            if _straight_many(sampler, np.array([xa]), np.array([ya]), tol)[0]:
                hi = mid
            else:
                lo = mid
        support[i] = 0.5 * (lo + hi)

    # hull polyline: intersections of consecutive supporting lines, pruned
    verts = []
    for i in range(n_dirs):
        j = (i + 1) % n_dirs
        e1 = np.array([math.cos(thetas[i]), math.sin(thetas[i])])
        e2 = np.array([math.cos(thetas[j]), math.sin(thetas[j])])
        A = np.stack([e1, e2])
        det = np.linalg.det(A)
        if abs(det) < 1e-12:
            continue
        p = np.linalg.solve(A, np.array([support[i], support[j]]))
        verts.append(p)
    verts = np.asarray(verts)
    es = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    keep = np.all(verts @ es.T <= support[None, :] + 1e-9 * a, axis=1)
    polyline = verts[keep] + c0

    comps = vacuous_component_map(sampler, tol=tol) if with_components else None
    return HullResult(thetas, support, polyline, comps)


def separating_line_from_dataset(dataset: SpectrumDataset, n_alpha: int = 180,
                                 n_c: int = 256, tol: float | None = None):
    """Separating vacuous line from gridded spectrum samples alone.

    Every sample's chord is a line; bins of the (normal angle, offset) grid are
    marked vacuous when some sample in them realizes the straight time. Seeding
    the second body only needs a line somewhere inside the separating band, so
    grid accuracy is sufficient. Returns (point, normal) or None.
    """
    a = dataset.a
    tol = tol if tol is not None else 1e-6 * a
    c0 = dataset.s0_center
    xs = dataset.x_angles
    ys = dataset.y_angles
    px = c0[0] + a * np.cos(xs)
    py = c0[1] + a * np.sin(xs)
    qx = c0[0] + a * np.cos(ys)
    qy = c0[1] + a * np.sin(ys)
    dx = qx - px
    dy = qy - py
    L = np.hypot(dx, dy)
    good = L > 1e-9
    vac_flag = np.abs(dataset.times - L) <= tol
    alpha = (np.arctan2(dx, -dy)) % math.pi  # normal angle of the chord line
    cval = (px - c0[0]) * np.cos(alpha) + (py - c0[1]) * np.sin(alpha)
    ia = np.minimum((alpha / math.pi * n_alpha).astype(int), n_alpha - 1)
    ic = ((cval / a + 1.0) * 0.5 * n_c).astype(int)
    inside = good & (ic >= 0) & (ic < n_c)
    vac = np.zeros((n_alpha, n_c), dtype=bool)
    nonvac = np.zeros((n_alpha, n_c), dtype=bool)
    np.logical_or.at(vac, (ia[inside & vac_flag], ic[inside & vac_flag]), True)
    np.logical_or.at(nonvac, (ia[inside & ~vac_flag], ic[inside & ~vac_flag]), True)
    labels = _label_components(vac)
    for k in range(1, labels.max() + 1):
        rows = np.nonzero(labels == k)[1]
        if not (rows.size and rows.min() > 0 and rows.max() < n_c - 1):
            continue
        best = None
        cols = np.nonzero(labels == k)[0]
        for i in np.unique(cols):
            idx = np.nonzero(labels[i] == k)[0]
            breaks = np.nonzero(np.diff(idx) > 1)[0]
            for seg in np.split(idx, breaks + 1):
                # a separating run must have measured obstacle hits on both sides
                if not (nonvac[i, :seg[0]].any() and nonvac[i, seg[-1] + 1:].any()):
                    continue
                if best is None or seg.size > best[0]:
                    best = (seg.size, i, seg[seg.size // 2])
        if best is None:
            continue
        _, i, jc = best
        al = math.pi * (i + 0.5) / n_alpha
        e = np.array([math.cos(al), math.sin(al)])
        cmid = a * (2.0 * (jc + 0.5) / n_c - 1.0)
        return c0 + cmid * e, e
    return None
