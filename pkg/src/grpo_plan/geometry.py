"""Oriented-rectangle geometry for footprint collision checks."""

from __future__ import annotations

import math

import numpy as np


def waypoint_headings(waypoints: np.ndarray, min_step: float = 1e-6) -> np.ndarray:
    """Heading at each waypoint from the step that reached it.

    The step into the first waypoint starts at the ego origin.  A step too
    short to define a direction (ego stopped) keeps the previous heading,
    starting from 0.
    """
    pts = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=np.float64)])
    out = np.empty(len(pts) - 1)
    prev = 0.0
    for k in range(1, len(pts)):
        dx, dy = pts[k] - pts[k - 1]
        if math.hypot(dx, dy) > min_step:
            prev = math.atan2(dy, dx)
        out[k - 1] = prev
    return out


def rectangle_corners(center, heading: float, length: float, width: float) -> np.ndarray:
    """Corners (4, 2) in counter-clockwise order."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=np.float64)


def rectangles_overlap(
    center_a, heading_a: float, length_a: float, width_a: float,
    center_b, heading_b: float, length_b: float, width_b: float,
) -> bool:
    """Separating-axis test for two oriented rectangles.

    Touching boundaries count as overlap.
    """
    ca = np.asarray(center_a, dtype=np.float64)
    cb = np.asarray(center_b, dtype=np.float64)
    d = cb - ca
    # quick reject on circumscribed circles
    ra = 0.5 * math.hypot(length_a, width_a)
    rb = 0.5 * math.hypot(length_b, width_b)
    if d @ d > (ra + rb) ** 2:
        return False
    axes_a = (
        np.array([math.cos(heading_a), math.sin(heading_a)]),
        np.array([-math.sin(heading_a), math.cos(heading_a)]),
    )
    axes_b = (
        np.array([math.cos(heading_b), math.sin(heading_b)]),
        np.array([-math.sin(heading_b), math.cos(heading_b)]),
    )
    half_a = (0.5 * length_a, 0.5 * width_a)
    half_b = (0.5 * length_b, 0.5 * width_b)
    for axis in axes_a + axes_b:
        proj_a = half_a[0] * abs(axes_a[0] @ axis) + half_a[1] * abs(axes_a[1] @ axis)
        proj_b = half_b[0] * abs(axes_b[0] @ axis) + half_b[1] * abs(axes_b[1] @ axis)
        if abs(d @ axis) > proj_a + proj_b:
            return False
    return True
