"""
Planar geometry helpers shared by the scene generator, scorer and planner
"""
from typing import List

import numpy as np
from shapely.geometry import Polygon

from ..errors import DegenerateInputError

EGO_LENGTH = 4.5
EGO_WIDTH = 2.0


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, dx: float, dy: float, dpsi: float) -> np.ndarray:
    """Express points given in frame A in frame B, where B's pose in A is (dx, dy, dpsi)"""
    pts = np.asarray(points, dtype=np.float64)
    return (pts - np.array([dx, dy])) @ rotation(-dpsi).T


def from_frame(points: np.ndarray, dx: float, dy: float, dpsi: float) -> np.ndarray:
    """Inverse of :func:`to_frame`"""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ rotation(dpsi).T + np.array([dx, dy])


def footprint_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    half = np.array([[length / 2, width / 2], [-length / 2, width / 2], [-length / 2, -width / 2], [length / 2, -width / 2]])
    return half @ rotation(heading).T + np.array([x, y])


def footprint_polygon(x: float, y: float, heading: float, length: float, width: float) -> Polygon:
    return Polygon(footprint_corners(x, y, heading, length, width))


def path_headings(points: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """
    Heading of each point of a polyline from its incoming segment.

    The first point takes ``initial``; zero-length segments keep the previous heading.
    """
    pts = np.asarray(points, dtype=np.float64)
    headings = np.empty(len(pts))
    headings[0] = initial
    for i in range(1, len(pts)):
        d = pts[i] - pts[i - 1]
        headings[i] = np.arctan2(d[1], d[0]) if np.hypot(*d) > 1e-9 else headings[i - 1]
    return headings


def trajectory_footprints(waypoints: np.ndarray, length: float = EGO_LENGTH, width: float = EGO_WIDTH) -> List[Polygon]:
    """Ego footprints at t = 0 (origin, heading 0) and at each waypoint"""
    path = np.vstack([np.zeros((1, 2)), np.asarray(waypoints, dtype=np.float64)])
    headings = path_headings(path)
    return [footprint_polygon(p[0], p[1], h, length, width) for p, h in zip(path, headings)]


def cumulative_arc_length(points: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(np.asarray(points, dtype=np.float64), axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def interpolate_along(points: np.ndarray, s: np.ndarray) -> np.ndarray:
    """
    Points at arc lengths ``s`` along a polyline.

    Arc lengths past the end extrapolate along the last non-degenerate
    segment; a knot's own arc length returns the knot exactly.
    """
    pts = np.asarray(points, dtype=np.float64)
    cum = cumulative_arc_length(pts)
    total = cum[-1]
    if total <= 0:
        raise DegenerateInputError("polyline has zero length")
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    out = np.empty((len(s), 2))
    nz = np.nonzero(np.diff(cum) > 0)[0]
    last = nz[-1]
    tail_dir = (pts[last + 1] - pts[last]) / (cum[last + 1] - cum[last])
    for n, target in enumerate(s):
        if target >= total:
            out[n] = pts[-1] + (target - total) * tail_dir
            continue
        target = max(target, 0.0)
        j = int(np.searchsorted(cum, target, side="right")) - 1
        seg_len = cum[j + 1] - cum[j]
        if target == cum[j] or seg_len <= 0:
            out[n] = pts[j]
        else:
            t = (target - cum[j]) / seg_len
            out[n] = pts[j] + t * (pts[j + 1] - pts[j])
    return out
