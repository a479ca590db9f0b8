"""Billiard travelling-time simulation and convex obstacle reconstruction."""

from .backend import get_backend, set_backend
from .geometry import (BoundingSphere, ConvexBody, Disc, Ellipse, ImplicitBody,
                       Scene, load_scene, scene_from_json, scene_to_json,
                       validate_scene)
from .tracing import (PhasePoint, TraceLimits, Trajectory, cross_section_map,
                      first_intersection, reflect, trace, trace_from)

__version__ = "0.1.0"
