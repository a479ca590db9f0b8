"""Scene geometry: bounding circle/sphere plus strictly convex obstacle bodies.

Bodies are smooth implicit regions ``F < 0`` with analytic gradient and Hessian
for the built-in kinds (disc, ellipse/ellipsoid); a generic implicit kind
accepts user-supplied evaluators. Everything here is immutable after
construction and all queries are pure.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BoundingSphere",
    "ConvexBody",
    "Disc",
    "Ellipse",
    "ImplicitBody",
    "Scene",
    "DegenerateGradient",
    "NonConvexPoint",
    "implicit_eval",
    "outward_normal",
    "boundary_curvature",
    "validate_scene",
    "scene_from_json",
    "scene_to_json",
    "load_scene",
    "pack_scene",
]


class DegenerateGradient(ValueError):
    """Implicit gradient vanished where a boundary normal was requested."""


class NonConvexPoint(ValueError):
    """Sampled boundary curvature was not strictly positive."""


@dataclass(frozen=True)
class BoundingSphere:
    """Reference circle (n=2) or sphere (n=3) enclosing the obstacle."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("bounding sphere radius must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def point_at(self, angle: float) -> np.ndarray:
        """Boundary point at a counterclockwise angle (n=2 only)."""
        return self.center + self.radius * np.array([math.cos(angle), math.sin(angle)])

    def angle_of(self, p) -> float:
        q = np.asarray(p, dtype=float) - self.center
        return math.atan2(q[1], q[0]) % (2.0 * math.pi)

    def inward_normal(self, p) -> np.ndarray:
        q = np.asarray(p, dtype=float) - self.center
        return -q / np.linalg.norm(q)

    def tangent(self, p) -> np.ndarray:
        """Counterclockwise unit tangent at a boundary point (n=2 only)."""
        q = np.asarray(p, dtype=float) - self.center
        q = q / np.linalg.norm(q)
        return np.array([-q[1], q[0]])


class ConvexBody:
    """Strictly convex smooth body given by an implicit function.

    Subclasses provide ``value``, ``gradient`` and ``hessian``; the boundary is
    the zero set, with negative values strictly inside.
    """

    id: int = 0  # assigned by Scene, 1-based

    def value(self, p: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def boundary_points(self, n: int) -> np.ndarray:
        """n points on the boundary, counterclockwise for planar bodies."""
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Disc(ConvexBody):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError("disc radius must be positive")

    def value(self, p):
        q = (np.asarray(p, dtype=float) - self.center) / self.radius
        return float(q @ q - 1.0)

    def gradient(self, p):
        return 2.0 * (np.asarray(p, dtype=float) - self.center) / self.radius**2

    def hessian(self, p):
        n = self.center.shape[0]
        return 2.0 * np.eye(n) / self.radius**2

    def boundary_points(self, n):
        th = 2.0 * np.pi * np.arange(n) / n
        return self.center + self.radius * np.stack([np.cos(th), np.sin(th)], axis=1)

    def interior_point(self):
        return self.center.copy()


def _rotation(deg: float) -> np.ndarray:
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class Ellipse(ConvexBody):
    """Planar ellipse; ``rotation_deg`` rotates the semi-axis frame CCW."""

    center: np.ndarray
    semi_axes: np.ndarray
    rotation_deg: float = 0.0
    _rot: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "semi_axes", np.asarray(self.semi_axes, dtype=float))
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")
        object.__setattr__(self, "_rot", _rotation(self.rotation_deg))

    def _local(self, p):
        return self._rot.T @ (np.asarray(p, dtype=float) - self.center)

    def value(self, p):
        q = self._local(p) / self.semi_axes
        return float(q @ q - 1.0)

    def gradient(self, p):
        q = self._local(p) / self.semi_axes**2
        return 2.0 * (self._rot @ q)

    def hessian(self, p):
        return 2.0 * self._rot @ np.diag(1.0 / self.semi_axes**2) @ self._rot.T

    def boundary_points(self, n):
        th = 2.0 * np.pi * np.arange(n) / n
        local = np.stack([self.semi_axes[0] * np.cos(th), self.semi_axes[1] * np.sin(th)], axis=1)
        return self.center + local @ self._rot.T

    def boundary_at(self, theta):
        """Boundary point at parametric angle theta (scalar or array)."""
        th = np.asarray(theta, dtype=float)
        local = np.stack([self.semi_axes[0] * np.cos(th), self.semi_axes[1] * np.sin(th)], axis=-1)
        return self.center + local @ self._rot.T

    def interior_point(self):
        return self.center.copy()


@dataclass(frozen=True, eq=False)
class ImplicitBody(ConvexBody):
    """Generic smooth strictly convex body from user evaluators.

    ``value_fn(p) -> float`` must be negative inside; ``grad_fn`` returns the
    gradient and ``hess_fn`` the Hessian (finite differences of the gradient
    are used when ``hess_fn`` is omitted). ``inside_point`` anchors boundary
    sampling.
    """

    value_fn: object
    grad_fn: object
    inside_point: np.ndarray
    hess_fn: object = None

    def __post_init__(self):
        object.__setattr__(self, "inside_point", np.asarray(self.inside_point, dtype=float))

    def value(self, p):
        return float(self.value_fn(np.asarray(p, dtype=float)))

    def gradient(self, p):
        return np.asarray(self.grad_fn(np.asarray(p, dtype=float)), dtype=float)

    def hessian(self, p):
        p = np.asarray(p, dtype=float)
        if self.hess_fn is not None:
            return np.asarray(self.hess_fn(p), dtype=float)
        n = p.shape[0]
        h = 1e-6 * max(1.0, float(np.linalg.norm(p)))
        H = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            H[:, i] = (self.gradient(p + e) - self.gradient(p - e)) / (2.0 * h)
        return 0.5 * (H + H.T)

    def boundary_points(self, n):
        th = 2.0 * np.pi * np.arange(n) / n
        pts = np.empty((n, 2))
        for i, t in enumerate(th):
            d = np.array([math.cos(t), math.sin(t)])
            pts[i] = self._surface_along(d)
        return pts

    def _surface_along(self, d):
        # march outward from the interior anchor, then bisect the sign change
        lo, hi = 0.0, 1e-3
        while self.value(self.inside_point + hi * d) < 0.0:
            lo, hi = hi, hi * 2.0
            if hi > 1e9:
                raise ValueError("implicit body appears unbounded")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.value(self.inside_point + mid * d) < 0.0:
                lo = mid
            else:
                hi = mid
        return self.inside_point + 0.5 * (lo + hi) * d

    def interior_point(self):
        return self.inside_point.copy()


@dataclass(frozen=True)
class Scene:
    """Bounding sphere plus disjoint strictly convex bodies."""

    s0: BoundingSphere
    bodies: tuple

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        for k, b in enumerate(self.bodies):
            object.__setattr__(b, "id", k + 1)

    @property
    def dim(self) -> int:
        return self.s0.dim

    @property
    def scale(self) -> float:
        return self.s0.radius

    def body(self, body_id: int) -> ConvexBody:
        return self.bodies[body_id - 1]

    def kernel_compatible(self) -> bool:
        """True when every body has an analytic quadric form (disc/ellipse)."""
        return self.dim == 2 and all(isinstance(b, (Disc, Ellipse)) for b in self.bodies)

    def canonical_dict(self) -> dict:
        return scene_to_json(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- module-level query operations -------------------------------------------

def implicit_eval(body: ConvexBody, p) -> tuple[float, np.ndarray]:
    """Implicit value (negative inside) and gradient at a point."""
    p = np.asarray(p, dtype=float)
    return body.value(p), body.gradient(p)


def _boundary_check(body, p, tol_len):
    v = body.value(p)
    g = body.gradient(p)
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        raise DegenerateGradient(f"gradient ~ 0 at {p} (body {body.id})")
    if abs(v) / gn > tol_len:
        raise ValueError(f"point {p} is {abs(v) / gn:.3e} away from the boundary of body {body.id}")
    return g, gn


def outward_normal(body: ConvexBody, p, tol_len: float = 1e-6) -> np.ndarray:
    """Unit outward normal at a boundary point (normalized implicit gradient)."""
    p = np.asarray(p, dtype=float)
    g, gn = _boundary_check(body, p, tol_len)
    return g / gn


def boundary_curvature(body: ConvexBody, p, tol_len: float = 1e-6) -> float:
    """Boundary curvature w.r.t. the outward normal; must be positive.

    Planar formula kappa = (Fyy Fx^2 - 2 Fxy Fx Fy + Fxx Fy^2)/|grad F|^3; in
    3D the minimum principal curvature of the level set is returned.
    """
    p = np.asarray(p, dtype=float)
    g, gn = _boundary_check(body, p, tol_len)
    H = body.hessian(p)
    if p.shape[0] == 2:
        fx, fy = g
        k = (H[1, 1] * fx * fx - 2.0 * H[0, 1] * fx * fy + H[0, 0] * fy * fy) / gn**3
    else:
        n = g / gn
        P = np.eye(3) - np.outer(n, n)
        S = P @ H @ P / gn
        w = np.linalg.eigvalsh(S)
        k = float(np.sort(w)[1])  # drop the spurious zero along the normal
    if k <= 0:
        raise NonConvexPoint(f"curvature {k:.3e} <= 0 at {p} (body {body.id})")
    return float(k)


def validate_scene(scene: Scene, clearance_rel: float = 1e-6, n_samples: int = 512) -> list[str]:
    """Check disjointness, containment in S0 and strict convexity.

    Returns a list of human-readable violations; an empty list means valid.
    """
    out = []
    a = scene.s0.radius
    clearance = clearance_rel * a
    samples = []
    for b in scene.bodies:
        try:
            pts = b.boundary_points(n_samples)
        except Exception as e:  # pragma: no cover - defensive
            out.append(f"body {b.id}: boundary sampling failed ({e})")
            continue
        samples.append((b, pts))
        rad = np.linalg.norm(pts - scene.s0.center, axis=1)
        if np.max(rad) >= a - clearance:
            out.append(f"body {b.id}: not strictly inside the bounding sphere")
        for p in pts[:: max(1, n_samples // 64)]:
            try:
                boundary_curvature(b, p, tol_len=1e-6 * a)
            except NonConvexPoint:
                out.append(f"body {b.id}: non-convex boundary point at {p}")
                break
            except DegenerateGradient:
                out.append(f"body {b.id}: degenerate gradient at {p}")
                break
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            bi, pi = samples[i]
            bj, pj = samples[j]
            d2 = np.sum((pi[:, None, :] - pj[None, :, :]) ** 2, axis=2)
            dmin = math.sqrt(float(np.min(d2)))
            # sampled surface distance overestimates slightly; also reject overlap
            inside = np.min([bj.value(p) for p in pi])
            if inside <= 0 or dmin <= clearance:
                out.append(f"bodies {bi.id} and {bj.id}: overlap or clearance below tolerance")
    return out


# -- scene (de)serialization --------------------------------------------------

def scene_to_json(scene: Scene) -> dict:
    bodies = []
    for b in scene.bodies:
        if isinstance(b, Disc):
            bodies.append({"type": "disc", "center": list(map(float, b.center)), "radius": float(b.radius)})
        elif isinstance(b, Ellipse):
            bodies.append(
                {
                    "type": "ellipse",
                    "center": list(map(float, b.center)),
                    "semi_axes": list(map(float, b.semi_axes)),
                    "rotation_deg": float(b.rotation_deg),
                }
            )
        else:
            raise ValueError("generic implicit bodies have no JSON form")
    return {
        "s0": {"center": list(map(float, scene.s0.center)), "radius": float(scene.s0.radius)},
        "bodies": bodies,
    }


def scene_from_json(doc: dict) -> Scene:
    s0 = BoundingSphere(np.asarray(doc["s0"]["center"], dtype=float), float(doc["s0"]["radius"]))
    bodies = []
    for spec in doc.get("bodies", []):
        kind = spec["type"]
        if kind == "disc":
            bodies.append(Disc(np.asarray(spec["center"], float), float(spec["radius"])))
        elif kind == "ellipse":
            bodies.append(
                Ellipse(
                    np.asarray(spec["center"], float),
                    np.asarray(spec["semi_axes"], float),
                    float(spec.get("rotation_deg", 0.0)),
                )
            )
        else:
            raise ValueError(f"unknown body type {kind!r}")
    return Scene(s0, tuple(bodies))


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_json(json.load(fh))


def pack_scene(scene: Scene):
    """Flatten disc/ellipse bodies into kernel arrays.

    Returns (kinds int32[m], params float64[m,6], s0cx, s0cy, s0r) where
    params rows are (cx, cy, cos_rot, sin_rot, semi_a, semi_b).
    """
    if not scene.kernel_compatible():
        raise ValueError("scene contains bodies without an analytic quadric form")
    m = len(scene.bodies)
    kinds = np.zeros(m, dtype=np.int32)
    params = np.zeros((m, 6), dtype=np.float64)
    for i, b in enumerate(scene.bodies):
        if isinstance(b, Disc):
            params[i] = (b.center[0], b.center[1], 1.0, 0.0, b.radius, b.radius)
        else:
            r = math.radians(b.rotation_deg)
            params[i] = (b.center[0], b.center[1], math.cos(r), math.sin(r), b.semi_axes[0], b.semi_axes[1])
            kinds[i] = 1
    return kinds, params, float(scene.s0.center[0]), float(scene.s0.center[1]), float(scene.s0.radius)
