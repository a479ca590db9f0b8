"""Travelling-time spectrum sampling: product grids, diagonal returns, echograph.

The diagonal sampler sweeps inward directions at each grid point of the
bounding circle, brackets sign changes of the exit-point offset, refines the
brackets by lockstep bisection, and tracks roots across neighbouring columns
so that narrow deep branches (born near echograph cusps) are not lost at the
coarse sweep resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Scene
from .tracing import (BUDGET_TRAPPED, EXITED, TANGENCY, TraceLimits, exit_map,
                      wrap_angle)

__all__ = [
    "SpectrumSample", "SpectrumDataset", "EchoPoint", "DiagonalSpectrum",
    "ChordSampler", "sample_spectrum", "diag_spectrum", "echograph",
    "distinct_times_check", "dataset_to_csv", "dataset_from_csv",
    "echograph_to_csv", "echograph_from_csv",
]

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SpectrumSample:
    x_angle: float
    y_angle: float
    t: float
    k: int
    branch_id: int


@dataclass
class SpectrumDataset:
    """Sampled (x, y, t) triples of the travelling-time spectrum.

    ``mode='oracle'`` keeps entry/exit directions for test assertions; they are
    withheld (None) in measured mode so reconstruction consumers only ever see
    the triples.
    """

    scene_hash: str
    s0_center: np.ndarray
    a: float
    grid: dict
    mode: str
    x_angles: np.ndarray
    y_angles: np.ndarray
    times: np.ndarray
    nrefl: np.ndarray
    branch_ids: np.ndarray
    entry_dirs: np.ndarray | None = None
    exit_dirs: np.ndarray | None = None
    n_failed: int = 0
    _cells: dict = field(default=None, repr=False)

    def __len__(self):
        return self.times.shape[0]

    def sample(self, i) -> SpectrumSample:
        return SpectrumSample(float(self.x_angles[i]), float(self.y_angles[i]),
                              float(self.times[i]), int(self.nrefl[i]), int(self.branch_ids[i]))

    def point_at(self, angle):
        return self.s0_center + self.a * np.array([math.cos(angle), math.sin(angle)])

    def chord(self, x_angle, y_angle) -> float:
        return float(np.linalg.norm(self.point_at(x_angle) - self.point_at(y_angle)))

    @property
    def cell_step(self) -> float:
        return TWO_PI / self.grid["x"]

    def _cell_key(self, x_angle, y_angle):
        n = self.grid["x"]
        return (int(round(x_angle / self.cell_step)) % n,
                int(round(y_angle / self.cell_step)) % n)

    def cells(self) -> dict:
        """Sample indices grouped by (x, y) angular cell."""
        if self._cells is None:
            cells = {}
            for i in range(len(self)):
                key = self._cell_key(self.x_angles[i], self.y_angles[i])
                cells.setdefault(key, []).append(i)
            self._cells = cells
        return self._cells

    def lookup_cell(self, x_angle, y_angle):
        """Indices stored in the cell nearest the requested pair, or None."""
        key = self._cell_key(x_angle, y_angle)
        return self.cells().get(key)


def _assign_branch_ids(comb: np.ndarray) -> np.ndarray:
    ids = {}
    out = np.empty(comb.shape[0], dtype=np.int32)
    for i, h in enumerate(comb):
        out[i] = ids.setdefault(int(h), len(ids))
    return out


def sample_spectrum(scene: Scene, n_x: int, n_dir: int,
                    limits: TraceLimits | None = None, mode: str = "measured",
                    block: int = 64) -> SpectrumDataset:
    """Trace the full (entry point) x (inward direction) grid.

    One sample per exiting, non-tangent ray; failed rays are only counted.
    Deterministic for fixed arguments, independent of thread count.
    """
    limits = limits or TraceLimits()
    a = scene.s0.radius
    c0 = scene.s0.center
    phis = TWO_PI * np.arange(n_x) / n_x
    betas = -0.5 * math.pi + math.pi * (np.arange(n_dir) + 0.5) / n_dir

    xs, ys, ts, ks, combs = [], [], [], [], []
    eds, vds = [], []
    n_failed = 0
    for j0 in range(0, n_x, block):
        cols = phis[j0:j0 + block]
        ph = np.repeat(cols, n_dir)
        bt = np.tile(betas, cols.size)
        origins = c0 + a * np.stack([np.cos(ph), np.sin(ph)], axis=1)
        ang = ph + math.pi + bt
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        st, t, k, ep, ed, cb = exit_map(scene, origins, dirs, limits)
        ok = st == EXITED
        n_failed += int(np.sum(~ok))
        ya = np.arctan2(ep[ok, 1] - c0[1], ep[ok, 0] - c0[0]) % TWO_PI
        xs.append(ph[ok])
        ys.append(ya)
        ts.append(t[ok])
        ks.append(k[ok])
        combs.append(cb[ok])
        if mode == "oracle":
            eds.append(dirs[ok])
            vds.append(ed[ok])
    comb = np.concatenate(combs) if combs else np.empty(0, dtype=np.uint64)
    ds = SpectrumDataset(
        scene_hash=scene.content_hash(), s0_center=np.asarray(c0, float), a=a,
        grid={"x": n_x, "dir": n_dir}, mode=mode,
        x_angles=np.concatenate(xs) if xs else np.empty(0),
        y_angles=np.concatenate(ys) if ys else np.empty(0),
        times=np.concatenate(ts) if ts else np.empty(0),
        nrefl=np.concatenate(ks).astype(np.int32) if ks else np.empty(0, np.int32),
        branch_ids=_assign_branch_ids(comb),
        entry_dirs=np.concatenate(eds) if eds else None,
        exit_dirs=np.concatenate(vds) if vds else None,
        n_failed=n_failed,
    )
    return ds


# -- diagonal spectrum ----------------------------------------------------------

@dataclass
class DiagonalSpectrum:
    """Round-trip (x, x, t) returns found by the direction sweep.

    Roots are stored flat, sorted by (column, time). ``betas`` and ``nrefl``
    are oracle-mode extras; the ``reflexive`` flag is metadata computed by the
    measuring device from the return-direction coincidence, while ``order`` is
    only resolved in oracle mode (-1 otherwise).
    """

    scene_hash: str
    s0_center: np.ndarray
    a: float
    n_x: int
    sweep: int
    mode: str
    col: np.ndarray
    times: np.ndarray
    reflexive: np.ndarray
    order: np.ndarray
    betas: np.ndarray | None = None
    nrefl: np.ndarray | None = None

    def __len__(self):
        return self.times.shape[0]

    def x_angle(self, j) -> float:
        return TWO_PI * float(j) / self.n_x

    def x_point(self, j) -> np.ndarray:
        ph = self.x_angle(j)
        return self.s0_center + self.a * np.array([math.cos(ph), math.sin(ph)])

    def column_indices(self, j) -> np.ndarray:
        return np.nonzero(self.col == j)[0]

    def min_times_per_column(self) -> np.ndarray:
        """Minimum round-trip time per column (NaN where no return exists)."""
        out = np.full(self.n_x, np.inf)
        np.minimum.at(out, self.col, self.times)
        out[~np.isfinite(out)] = np.nan
        return out


@dataclass(frozen=True)
class EchoPoint:
    x_angle: float
    x: np.ndarray
    t: float
    w: np.ndarray
    reflexive: bool
    order: int


def echograph(diag: DiagonalSpectrum) -> list:
    """Echo points w = x + (t/2) * inward_normal(x) for every diagonal return.

    Non-reflexive returns are kept; they are part of the echograph even though
    reconstruction never consumes them.
    """
    pts = []
    for i in range(len(diag)):
        j = int(diag.col[i])
        x = diag.x_point(j)
        nu_in = (diag.s0_center - x) / diag.a
        t = float(diag.times[i])
        w = x + 0.5 * t * nu_in
        pts.append(EchoPoint(diag.x_angle(j), x, t, w, bool(diag.reflexive[i]), int(diag.order[i])))
    return pts


def _eval_offsets(scene, phis_of_rays, betas, limits):
    """Trace column rays; returns (offset, class, valid) per ray.

    ``class`` encodes the reflection combinatorics for exited rays and the
    failure status otherwise, so equal class means "same smooth branch piece".
    """
    c0 = scene.s0.center
    a = scene.s0.radius
    origins = c0 + a * np.stack([np.cos(phis_of_rays), np.sin(phis_of_rays)], axis=1)
    ang = phis_of_rays + math.pi + betas
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    st, t, k, ep, ed, cb = exit_map(scene, origins, dirs, limits)
    offs = wrap_angle(np.arctan2(ep[:, 1] - c0[1], ep[:, 0] - c0[0]) - phis_of_rays)
    cls = np.where(st == EXITED, cb, np.uint64(st))
    valid = (st == EXITED) & (k >= 1)
    return offs, cls, valid


def _drill(scene, phis, limits, state, min_step, emit_width):
    """Recursive midpoint subdivision of (column, interval) work items.

    Intervals whose ends differ in combinatorics class are split down to
    ``min_step`` (branch windows narrower than the sampling step all live in
    thin channel corridors bounded by class changes); same-class sign changes
    are narrowed to ``emit_width`` and emitted as brackets (lo, hi, off_lo,
    off_hi, class).
    """
    em = {k: [] for k in ("j", "lo", "hi", "olo", "ohi", "cls")}
    jc, lo, hi, olo, ohi, clo, chi, vlo, vhi = state
    boundary = clo != chi
    crossing = vlo & vhi & (np.sign(olo) * np.sign(ohi) <= 0.0)
    keep = boundary | crossing
    state = tuple(arr[keep] for arr in state)
    while state[0].size:
        jc, lo, hi, olo, ohi, clo, chi, vlo, vhi = state
        mid = 0.5 * (lo + hi)
        om, cm, vm = _eval_offsets(scene, phis[jc], mid, limits)
        JC = np.concatenate([jc, jc])
        L = np.concatenate([lo, mid])
        H = np.concatenate([mid, hi])
        OL = np.concatenate([olo, om])
        OH = np.concatenate([om, ohi])
        CL = np.concatenate([clo, cm])
        CH = np.concatenate([cm, chi])
        VL = np.concatenate([vlo, vm])
        VH = np.concatenate([vm, vhi])
        W = H - L
        boundary = CL != CH
        crossing = VL & VH & (np.sign(OL) * np.sign(OH) <= 0.0)
        subdiv = (boundary & (W > min_step)) | (crossing & ~boundary & (W > emit_width))
        emit = crossing & ~boundary & (W <= emit_width)
        if np.any(emit):
            em["j"].append(JC[emit])
            em["lo"].append(L[emit])
            em["hi"].append(H[emit])
            em["olo"].append(OL[emit])
            em["ohi"].append(OH[emit])
            em["cls"].append(CL[emit])
        state = tuple(arr[subdiv] for arr in (JC, L, H, OL, OH, CL, CH, VL, VH))
    if not em["j"]:
        return None
    return {k: np.concatenate(v) for k, v in em.items()}


def _intervals_from_grid(col_ids, grid_betas, offs, cls, valid, per_col):
    """Adjacent-sample interval arrays from per-column beta grids."""
    ncols = col_ids.size
    O = offs.reshape(ncols, per_col)
    C = cls.reshape(ncols, per_col)
    V = valid.reshape(ncols, per_col)
    B = grid_betas.reshape(ncols, per_col)
    jc = np.repeat(col_ids, per_col - 1)
    return (jc, B[:, :-1].ravel(), B[:, 1:].ravel(),
            O[:, :-1].ravel(), O[:, 1:].ravel(),
            C[:, :-1].ravel(), C[:, 1:].ravel(),
            V[:, :-1].ravel(), V[:, 1:].ravel())


def _adaptive_brackets(scene, phis, col_block, limits, n_coarse, min_step, emit_width):
    """Sign-change brackets for a block of columns (coarse sweep + drilling)."""
    coarse = -0.5 * math.pi + math.pi * (np.arange(n_coarse) + 0.5) / n_coarse
    ncols = col_block.size
    ph = np.repeat(phis[col_block], n_coarse)
    bt = np.tile(coarse, ncols)
    offs, cls, valid = _eval_offsets(scene, ph, bt, limits)
    state = _intervals_from_grid(col_block, bt, offs, cls, valid, n_coarse)
    em = _drill(scene, phis, limits, state, min_step, emit_width)
    out = {int(j): [] for j in col_block}
    if em is not None:
        order = np.lexsort((em["lo"], em["j"]))
        for i in order:
            out[int(em["j"][i])].append((em["lo"][i], em["hi"][i], em["olo"][i],
                                         em["ohi"][i], em["cls"][i]))
    return out


def _add_bracket(brs, lo, hi, olo, ohi, c):
    """Append a bracket unless a same-class bracket already overlaps it."""
    for i, b in enumerate(brs):
        if b[4] == c and lo <= b[1] and b[0] <= hi:
            if hi - lo < b[1] - b[0]:
                brs[i] = (lo, hi, olo, ohi, c)
            return False
    brs.append((lo, hi, olo, ohi, c))
    return True


def _track_missing_branches(scene, phis, brackets, limits, min_step,
                            emit_width, w_track=2e-3, passes=(1, -1, 1)):
    """Continue branches across columns where the blind sweep lost them.

    A branch is identified by its reflection combinatorics class. For every
    bracket in the neighbouring column whose class is absent near the
    (slope-extrapolated) predicted direction, a two-sided dyadic ladder around
    the prediction is sampled and drilled, which recovers windows far narrower
    than any fixed sweep resolution.
    """
    n_x = phis.size
    n_oct = int(math.ceil(math.log2(w_track / 1e-10)))
    steps = 1e-10 * 2.0 ** (np.arange(3 * n_oct) / 3.0)
    ladder = np.concatenate([[0.0], steps, -steps])
    ladder = np.sort(ladder[np.abs(ladder) <= w_track])

    def col_mids(j):
        brs = brackets.get(j, [])
        if not brs:
            return np.empty(0), np.empty(0, np.uint64)
        return (np.array([0.5 * (b[0] + b[1]) for b in brs]),
                np.array([b[4] for b in brs], dtype=np.uint64))

    def nearest_same(mids, cls, c, ref):
        same = np.nonzero(cls == c)[0]
        if not same.size:
            return None
        q = mids[same[np.argmin(np.abs(mids[same] - ref))]]
        return q if abs(q - ref) < 8.0 * w_track else None

    for dirn in passes:
        order = range(n_x) if dirn > 0 else range(n_x - 1, -1, -1)
        for j in order:
            jp = (j - dirn) % n_x
            jpp = (j - 2 * dirn) % n_x
            jppp = (j - 3 * dirn) % n_x
            mids_p, cls_p = col_mids(jp)
            if mids_p.size == 0:
                continue
            mids_j, cls_j = col_mids(j)
            mids_pp, cls_pp = col_mids(jpp)
            mids_ppp, cls_ppp = col_mids(jppp)
            preds = []
            for p, c in zip(mids_p, cls_p):
                # quadratic extrapolation through up to three previous columns
                pred = p
                q2 = nearest_same(mids_pp, cls_pp, c, p) if mids_pp.size else None
                if q2 is not None:
                    pred = 2.0 * p - q2
                    q3 = nearest_same(mids_ppp, cls_ppp, c, q2) if mids_ppp.size else None
                    if q3 is not None:
                        pred = 3.0 * p - 3.0 * q2 + q3
                if mids_j.size:
                    same = np.nonzero(cls_j == c)[0]
                    if same.size and np.min(np.abs(mids_j[same] - pred)) < w_track:
                        continue
                preds.append(pred)
            if not preds:
                continue
            grids = []
            for pred in preds:
                g = np.clip(pred + ladder, -0.5 * math.pi + 1e-9, 0.5 * math.pi - 1e-9)
                grids.append(np.unique(g))
            sizes = [g.size for g in grids]
            betas = np.concatenate(grids)
            ph = np.full(betas.size, phis[j])
            offs, cls, valid = _eval_offsets(scene, ph, betas, limits)
            pos = 0
            states = []
            for sz in sizes:
                sl = slice(pos, pos + sz)
                states.append(_intervals_from_grid(np.array([j], dtype=np.int64),
                                                   betas[sl], offs[sl], cls[sl],
                                                   valid[sl], sz))
                pos += sz
            state = tuple(np.concatenate([s[i] for s in states]) for i in range(9))
            em = _drill(scene, phis, limits, state, min_step, emit_width)
            if em is None:
                continue
            brs = brackets.setdefault(j, [])
            for i in range(em["j"].size):
                _add_bracket(brs, em["lo"][i], em["hi"][i], em["olo"][i],
                             em["ohi"][i], em["cls"][i])
    return brackets


def _bisect_roots(scene, phis, brackets, limits, iters=48):
    cols, los, his, flos = [], [], [], []
    for j in sorted(brackets):
        for (lo, hi, flo, fhi, _cls) in brackets[j]:
            cols.append(j)
            los.append(lo)
            his.append(hi)
            flos.append(flo)
    if not cols:
        return np.empty(0, np.int64), np.empty(0)
    cols = np.asarray(cols, dtype=np.int64)
    lo = np.asarray(los)
    hi = np.asarray(his)
    flo = np.asarray(flos)
    alive = np.ones(cols.size, dtype=bool)
    a = scene.s0.radius
    c0 = scene.s0.center
    x = c0 + a * np.stack([np.cos(phis[cols]), np.sin(phis[cols])], axis=1)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ang = phis[cols] + math.pi + mid
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        st, t, k, ep, ed, cb = exit_map(scene, x, dirs, limits)
        off = wrap_angle(np.arctan2(ep[:, 1] - c0[1], ep[:, 0] - c0[0]) - phis[cols])
        ok = (st == EXITED) & (k >= 1)
        alive &= ok
        same = np.sign(off) == np.sign(flo)
        lo = np.where(alive & same, mid, lo)
        flo = np.where(alive & same, off, flo)
        hi = np.where(alive & same, hi, np.where(alive, mid, hi))
    return cols[alive], 0.5 * (lo + hi)[alive]


class DiagonalDevice:
    """Re-measurement handle for diagonal branches.

    Holds the sweep's private root directions so callers can request branch
    travelling times at sub-grid stencil offsets around an already-measured
    return; only times ever leave the device, mirroring a physical echo
    sounder that can be repositioned along a branch it has locked onto.
    """

    def __init__(self, scene, limits, cols, betas, classes, n_x, accept_offset=1e-6):
        self.scene = scene
        self.limits = limits
        self._cols = cols
        self._betas = betas
        self._classes = classes
        self.n_x = n_x
        self.accept_offset = accept_offset

    def stencil_times(self, root_indices, delta: float):
        """Branch times at column angle +- delta for the given roots.

        Returns (t_minus, t_plus) arrays with NaN where the branch could not
        be re-acquired (e.g. beyond its fold).
        """
        out = []
        for sgn in (-1.0, +1.0):
            out.append(self._times_at(root_indices, sgn * delta))
        return out[0], out[1]

    def _neighbor_beta(self, i, dcol):
        """Private-table root of the same class one column over, or None."""
        j = int(self._cols[i]) + dcol
        sel = np.nonzero((self._cols == j % self.n_x) & (self._classes == self._classes[i]))[0]
        if sel.size == 0:
            return None
        b = self._betas[sel[np.argmin(np.abs(self._betas[sel] - self._betas[i]))]]
        return b if abs(b - self._betas[i]) < 0.016 else None

    def _times_at(self, root_indices, dphi_off):
        scene = self.scene
        limits = self.limits
        n = len(root_indices)
        phis0 = TWO_PI * self._cols[root_indices] / self.n_x
        phis = phis0 + dphi_off
        dphi = TWO_PI / self.n_x
        b0 = self._betas[root_indices].copy()
        # drift-corrected prediction: deep branch windows are far narrower
        # than the per-column drift of the root direction
        s = dphi_off / dphi
        for m, i in enumerate(root_indices):
            bp = self._neighbor_beta(i, +1)
            bm = self._neighbor_beta(i, -1)
            b = self._betas[i]
            if bp is not None and bm is not None:
                d1 = 0.5 * (bp - bm)
                d2 = bp - 2.0 * b + bm
                b0[m] = b + d1 * s + 0.5 * d2 * s * s
            elif bp is not None:
                b0[m] = b + (bp - b) * s
            elif bm is not None:
                b0[m] = b + (b - bm) * s
        want = self._classes[root_indices]

        steps = 1e-10 * 2.0 ** (np.arange(3 * 21) / 3.0)
        ladder = np.concatenate([[0.0], steps, -steps])
        ladder = np.sort(ladder[np.abs(ladder) <= 2e-4])
        L = ladder.size
        ph = np.repeat(phis, L)
        bt = (b0[:, None] + ladder[None, :]).ravel()
        offs, cls, valid = _eval_offsets(scene, ph, bt, limits)

        lo = np.full(n, np.nan)
        hi = np.full(n, np.nan)
        flo = np.full(n, np.nan)
        for i in range(n):
            sl = slice(i * L, (i + 1) * L)
            o, c, v = offs[sl], cls[sl], valid[sl]
            ok = v & (c == want[i])
            cand = np.nonzero(ok[:-1] & ok[1:] &
                              (np.sign(o[:-1]) * np.sign(o[1:]) <= 0.0))[0]
            if cand.size == 0:
                continue
            mid0 = np.abs(bt[sl][cand] - b0[i])
            j = cand[np.argmin(mid0)]
            lo[i], hi[i], flo[i] = bt[sl][j], bt[sl][j + 1], o[j]
        alive = np.isfinite(lo)
        times = np.full(n, np.nan)
        if not np.any(alive):
            return times
        ia = np.nonzero(alive)[0]
        llo, lhi, lflo = lo[ia], hi[ia], flo[ia]
        for _ in range(48):
            mid = 0.5 * (llo + lhi)
            om, cm, vm = _eval_offsets(scene, phis[ia], mid, limits)
            same = np.sign(om) == np.sign(lflo)
            llo = np.where(same, mid, llo)
            lflo = np.where(same, om, lflo)
            lhi = np.where(same, lhi, mid)
        mid = 0.5 * (llo + lhi)
        c0 = scene.s0.center
        a = scene.s0.radius
        x = c0 + a * np.stack([np.cos(phis[ia]), np.sin(phis[ia])], axis=1)
        ang = phis[ia] + math.pi + mid
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        st, t, k, ep, ed, cb = exit_map(scene, x, dirs, limits)
        off = wrap_angle(np.arctan2(ep[:, 1] - c0[1], ep[:, 0] - c0[0]) - phis[ia])
        good = (st == EXITED) & (cb == want[ia]) & (np.abs(off) <= self.accept_offset)
        times[ia[good]] = t[good]
        return times


def diag_spectrum(scene: Scene, n_x: int, limits: TraceLimits | None = None,
                  sweep: int = 4096, mode: str = "measured",
                  accept_offset: float = 1e-6, block: int = 32,
                  min_step: float = 1e-12, return_device: bool = False):
    """Find all (x, x)-geodesic returns on an angular grid of entry points.

    Sweeps ``sweep/2`` inward directions per column and adaptively subdivides
    every combinatorics boundary, so deep branches whose direction windows are
    far narrower than the coarse step (they accumulate in thin channel
    corridors near echograph cusps) are still bracketed, down to ``min_step``.
    """
    if scene.dim != 2:
        raise NotImplementedError("diagonal sweep is planar")
    limits = limits or TraceLimits()
    phis = TWO_PI * np.arange(n_x) / n_x
    n_half = max(8, sweep // 2)
    emit_width = (math.pi / n_half) / 16.0

    brackets = {}
    for j0 in range(0, n_x, block):
        jj = np.arange(j0, min(j0 + block, n_x), dtype=np.int64)
        brackets.update(_adaptive_brackets(scene, phis, jj, limits, n_half,
                                           min_step, emit_width))
    _track_missing_branches(scene, phis, brackets, limits, min_step, emit_width)

    cols, betas = _bisect_roots(scene, phis, brackets, limits)

    # classification at the refined roots
    c0 = scene.s0.center
    if cols.size:
        a = scene.s0.radius
        x = c0 + a * np.stack([np.cos(phis[cols]), np.sin(phis[cols])], axis=1)
        ang = phis[cols] + math.pi + betas
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        st, t, k, ep, ed, cb = exit_map(scene, x, dirs, limits)
        off = wrap_angle(np.arctan2(ep[:, 1] - c0[1], ep[:, 0] - c0[0]) - phis[cols])
        keep = (st == EXITED) & (k >= 1) & (np.abs(off) <= accept_offset)
        cols, betas, cb = cols[keep], betas[keep], cb[keep]
        t, k, ed, dirs = t[keep], k[keep], ed[keep], dirs[keep]
        vu = np.linalg.norm(ed + dirs, axis=1)
        reflexive = vu < 1e-6
        order = np.where(reflexive & (k % 2 == 1), (k + 1) // 2, -1).astype(np.int32)
    else:
        t = np.empty(0)
        k = np.empty(0, np.int32)
        cb = np.empty(0, np.uint64)
        reflexive = np.empty(0, bool)
        order = np.empty(0, np.int32)

    # dedupe per column, then sort by (column, time)
    key = np.lexsort((betas, cols)) if cols.size else np.empty(0, np.int64)
    cols, betas, t, k, cb, reflexive, order = (
        arr[key] for arr in (cols, betas, t, k, cb, reflexive, order))
    uniq = np.ones(cols.size, dtype=bool)
    for i in range(1, cols.size):
        if cols[i] == cols[i - 1] and abs(betas[i] - betas[i - 1]) < 1e-8:
            uniq[i] = False
    cols, betas, t, k, cb, reflexive, order = (
        arr[uniq] for arr in (cols, betas, t, k, cb, reflexive, order))
    key = np.lexsort((t, cols))
    cols, betas, t, k, cb, reflexive, order = (
        arr[key] for arr in (cols, betas, t, k, cb, reflexive, order))

    oracle = mode == "oracle"
    diag = DiagonalSpectrum(
        scene_hash=scene.content_hash(), s0_center=np.asarray(c0, float),
        a=scene.s0.radius, n_x=n_x, sweep=sweep, mode=mode,
        col=cols.astype(np.int32), times=t,
        reflexive=reflexive, order=order if oracle else np.full(cols.size, -1, np.int32),
        betas=betas if oracle else None,
        nrefl=k.astype(np.int32) if oracle else None,
    )
    if return_device:
        device = DiagonalDevice(scene, limits, cols.astype(np.int64), betas, cb,
                                n_x, accept_offset)
        return diag, device
    return diag


# -- chord measurements ----------------------------------------------------------

class ChordSampler:
    """Black-box travelling-time measurement along requested chords.

    Aims a ray from x straight at y and records the resulting (x, y', t)
    triple; directions never leave the device. Used for vacuous-line tests
    and hull recovery, where adaptive chord placement outruns any fixed grid.
    """

    def __init__(self, scene: Scene, limits: TraceLimits | None = None):
        self.scene = scene
        self.limits = limits or TraceLimits()
        self._rows = []

    def measure(self, x_angle: float, y_angle: float):
        """Returns (actual_y_angle, t) of the chord-aimed ray, or None."""
        s0 = self.scene.s0
        x = s0.point_at(x_angle)
        y = s0.point_at(y_angle)
        d = y - x
        nd = np.linalg.norm(d)
        if nd < 1e-12:
            return None
        st, t, k, ep, ed, cb = exit_map(self.scene, x[None, :], (d / nd)[None, :], self.limits)
        if int(st[0]) != EXITED:
            return None
        ya = float(np.arctan2(ep[0, 1] - s0.center[1], ep[0, 0] - s0.center[0]) % TWO_PI)
        row = (float(x_angle % TWO_PI), ya, float(t[0]), int(k[0]))
        self._rows.append(row)
        return ya, float(t[0])

    def straight(self, x_angle: float, y_angle: float, tol: float | None = None) -> bool:
        """True when the chord's straight travelling time is realized."""
        tol = tol if tol is not None else 1e-6 * self.scene.s0.radius
        got = self.measure(x_angle, y_angle)
        if got is None:
            return False
        ya, t = got
        s0 = self.scene.s0
        chord = float(np.linalg.norm(s0.point_at(x_angle) - s0.point_at(y_angle)))
        return abs(float(wrap_angle(ya - y_angle))) <= 1e-7 and abs(t - chord) <= tol

    def recorded_dataset(self, cell_grid: int = 4096) -> SpectrumDataset:
        """All measurements taken so far as a measured-mode dataset."""
        rows = self._rows
        xs = np.array([r[0] for r in rows])
        ys = np.array([r[1] for r in rows])
        ts = np.array([r[2] for r in rows])
        ks = np.array([r[3] for r in rows], dtype=np.int32)
        return SpectrumDataset(
            scene_hash=self.scene.content_hash(), s0_center=np.asarray(self.scene.s0.center, float),
            a=self.scene.s0.radius, grid={"x": cell_grid, "dir": 0}, mode="measured",
            x_angles=xs, y_angles=ys, times=ts, nrefl=ks,
            branch_ids=np.zeros(len(rows), dtype=np.int32),
        )


# -- distinctness of branch times -------------------------------------------------

@dataclass
class DistinctTimesReport:
    cells_checked: int
    multi_branch_cells: int
    coincident_cells: int
    coincidence_tol: float

    @property
    def fraction(self) -> float:
        return self.coincident_cells / self.cells_checked if self.cells_checked else 0.0


def distinct_times_check(dataset: SpectrumDataset, coincidence_tol: float = 1e-9) -> DistinctTimesReport:
    """Count (x, y) cells where two different branches share a travelling time.

    Requires an oracle-mode dataset (branch combinatorics must be trusted).
    """
    if dataset.mode != "oracle":
        raise ValueError("distinct-times check needs an oracle-mode dataset")
    cells = dataset.cells()
    multi = 0
    bad = 0
    for key in cells:
        idx = cells[key]
        if len(idx) < 2:
            continue
        bids = dataset.branch_ids[idx]
        if np.unique(bids).size < 2:
            continue
        multi += 1
        ts = dataset.times[idx]
        order = np.argsort(ts, kind="stable")
        ts = ts[order]
        bs = bids[order]
        hit = np.any((np.diff(ts) < coincidence_tol) & (bs[1:] != bs[:-1]))
        if hit:
            bad += 1
    return DistinctTimesReport(len(cells), multi, bad, coincidence_tol)


# -- CSV persistence --------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def dataset_to_csv(dataset: SpectrumDataset) -> str:
    lines = ["x_angle_rad,y_angle_rad,t,k,branch_id,mode"]
    for i in range(len(dataset)):
        lines.append(
            f"{_fmt(dataset.x_angles[i])},{_fmt(dataset.y_angles[i])},{_fmt(dataset.times[i])},"
            f"{int(dataset.nrefl[i])},{int(dataset.branch_ids[i])},{dataset.mode}")
    return "\n".join(lines) + "\n"


def dataset_from_csv(text: str, s0_center, a, grid_x: int) -> SpectrumDataset:
    rows = text.strip().splitlines()[1:]
    xs, ys, ts, ks, bs = [], [], [], [], []
    mode = "measured"
    for r in rows:
        px, py, pt, pk, pb, mode = r.split(",")
        xs.append(float(px)); ys.append(float(py)); ts.append(float(pt))
        ks.append(int(pk)); bs.append(int(pb))
    return SpectrumDataset(
        scene_hash="", s0_center=np.asarray(s0_center, float), a=float(a),
        grid={"x": grid_x, "dir": 0}, mode=mode,
        x_angles=np.asarray(xs), y_angles=np.asarray(ys), times=np.asarray(ts),
        nrefl=np.asarray(ks, np.int32), branch_ids=np.asarray(bs, np.int32))


def echograph_to_csv(diag: DiagonalSpectrum) -> str:
    lines = ["x_angle_rad,t,w1,w2,reflexive,order"]
    for p in echograph(diag):
        lines.append(f"{_fmt(p.x_angle)},{_fmt(p.t)},{_fmt(p.w[0])},{_fmt(p.w[1])},"
                     f"{int(p.reflexive)},{int(p.order)}")
    return "\n".join(lines) + "\n"


def echograph_from_csv(text: str, s0_center, a, n_x: int, mode: str = "measured") -> DiagonalSpectrum:
    """Rebuild a diagonal spectrum from an echograph CSV (column = nearest grid angle)."""
    rows = text.strip().splitlines()[1:]
    cols, ts, refl, orders = [], [], [], []
    for r in rows:
        px, pt, _, _, pr, po = r.split(",")
        cols.append(int(round(float(px) / (TWO_PI / n_x))) % n_x)
        ts.append(float(pt)); refl.append(bool(int(pr))); orders.append(int(po))
    cols = np.asarray(cols, np.int32)
    ts = np.asarray(ts)
    key = np.lexsort((ts, cols))
    return DiagonalSpectrum(
        scene_hash="", s0_center=np.asarray(s0_center, float), a=float(a),
        n_x=n_x, sweep=0, mode=mode, col=cols[key], times=ts[key],
        reflexive=np.asarray(refl, bool)[key], order=np.asarray(orders, np.int32)[key])
