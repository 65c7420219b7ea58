"""CU motion paths in (theta, phi) degree coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..physics import Direction


@dataclass(frozen=True)
class MotionPath:
    waypoints: tuple  # of Direction
    cumulative_angle: np.ndarray

    def __post_init__(self):
        if len(self.waypoints) != len(self.cumulative_angle):
            raise ValueError("one cumulative angle per waypoint")
        if self.cumulative_angle[0] != 0 or np.any(np.diff(self.cumulative_angle) < 0):
            raise ValueError("cumulative angle must start at 0 and be non-decreasing")

    def __len__(self):
        return len(self.waypoints)

    @property
    def total_angle(self) -> float:
        return float(self.cumulative_angle[-1])


def cumulative_angle(points: np.ndarray) -> np.ndarray:
    """Running sum of sqrt(dtheta^2 + dphi^2) along an (n, 2) point array."""
    steps = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def gen_motion_path(start: Direction, end: Direction, n_waypoints: int = 30, curvature: float = 5.0,
                    n_dense: int = 4097) -> MotionPath:
    """Quadratic Bezier from ``start`` to ``end`` resampled to equal arc-length steps.

    The control point sits at the chord midpoint, pushed ``curvature`` degrees
    along the chord's left normal. ``curvature=0`` gives the straight segment.
    """
    if n_waypoints < 2:
        raise ValueError("n_waypoints must be >= 2")
    p0 = np.array([start.theta, start.phi], dtype=float)
    p2 = np.array([end.theta, end.phi], dtype=float)
    chord = p2 - p0
    length = np.hypot(*chord)
    normal = np.array([-chord[1], chord[0]]) / length if length > 0 else np.zeros(2)
    p1 = 0.5 * (p0 + p2) + curvature * normal

    # dense polyline, then invert its arc-length table
    dense = _bezier(p0, p1, p2, np.linspace(0.0, 1.0, n_dense))
    s = cumulative_angle(dense)
    targets = np.linspace(0.0, s[-1], n_waypoints)
    pts = np.column_stack([np.interp(targets, s, dense[:, 0]), np.interp(targets, s, dense[:, 1])])
    pts[0], pts[-1] = p0, p2
    wps = tuple(Direction(float(np.clip(a, -90, 90)), float(np.clip(b, -90, 90))) for a, b in pts)
    return MotionPath(wps, cumulative_angle(pts))
