"""Sparse semantic HD map: lane-border polylines and traffic-light points.

Map file format (UTF-8 text, whitespace separated, '#' comments, block order
free):

    lane_border <id>
    pt <x> <y> <z>
    pt <x> <y> <z>
    traffic_light <id> <x> <y> <z>
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import CameraIntrinsics, Pose6D

DEFAULT_MAX_DISTANCE = 50.0   # perception range for map elements, meters
DEFAULT_LANE_SPACING = 0.5    # lane border resampling interval, meters


class ParseError(Exception):
    """Malformed map file; message carries line number and field context."""


class InvariantViolation(Exception):
    """Structurally valid file describing an invalid map element."""


@dataclass(frozen=True)
class TrafficLight:
    id: int
    position: np.ndarray  # (3,) world, meters


class SemanticMap:
    """Immutable container of lane borders and traffic lights."""

    def __init__(self, lane_borders, traffic_lights):
        borders = []
        for i, poly in enumerate(lane_borders):
            pts = np.asarray(poly, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
                raise InvariantViolation(f"lane border {i}: need >= 2 3D points")
            steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            if np.any(steps <= 1e-6):
                raise InvariantViolation(f"lane border {i}: consecutive points coincide")
            pts.setflags(write=False)
            borders.append(pts)
        lights = []
        seen = set()
        for tl in traffic_lights:
            if isinstance(tl, TrafficLight):
                tid, pos = tl.id, tl.position
            else:
                tid, pos = tl
            if tid in seen:
                raise InvariantViolation(f"duplicate traffic light id {tid}")
            seen.add(tid)
            pos = np.asarray(pos, dtype=float).reshape(3).copy()
            pos.setflags(write=False)
            lights.append(TrafficLight(int(tid), pos))
        self.lane_borders = tuple(borders)
        self.traffic_lights = tuple(lights)


@dataclass(frozen=True)
class VisibleMapSubset:
    """Map content in the current frustum: resampled lane points + lights."""

    lane_points: np.ndarray          # (n, 3) world
    lights: tuple                    # TrafficLight


def load_map(path) -> SemanticMap:
    borders = []
    lights = []
    current = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            kind = tokens[0]
            try:
                if kind == "lane_border":
                    if len(tokens) != 2:
                        raise ValueError("expected: lane_border <id>")
                    int(tokens[1])
                    current = []
                    borders.append(current)
                elif kind == "pt":
                    if current is None:
                        raise ValueError("pt outside a lane_border block")
                    if len(tokens) != 4:
                        raise ValueError("expected: pt <x> <y> <z>")
                    current.append([float(t) for t in tokens[1:]])
                elif kind == "traffic_light":
                    if len(tokens) != 5:
                        raise ValueError("expected: traffic_light <id> <x> <y> <z>")
                    lights.append((int(tokens[1]), [float(t) for t in tokens[2:]]))
                else:
                    raise ValueError(f"unknown record '{kind}'")
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return SemanticMap(borders, lights)


def save_map(path, semantic_map: SemanticMap) -> None:
    """Write a SemanticMap in the documented text format."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, poly in enumerate(semantic_map.lane_borders):
            fh.write(f"lane_border {i}\n")
            for p in poly:
                fh.write(f"pt {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for tl in semantic_map.traffic_lights:
            p = tl.position
            fh.write(f"traffic_light {tl.id} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def resample_polyline(poly: np.ndarray, spacing: float) -> np.ndarray:
    """Points every `spacing` meters of arc length, endpoints included."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = np.asarray(poly, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.arange(0.0, total, spacing)
    if total - targets[-1] > 1e-12:
        targets = np.append(targets, total)
    else:
        targets[-1] = total
    out = np.empty((len(targets), 3))
    for axis in range(3):
        out[:, axis] = np.interp(targets, cum, pts[:, axis])
    return out


def visible_subset(semantic_map: SemanticMap, pose: Pose6D, cam: CameraIntrinsics,
                   d_max: float = DEFAULT_MAX_DISTANCE,
                   spacing: float = DEFAULT_LANE_SPACING) -> VisibleMapSubset:
    """Lane points and lights with depth in (Z_MIN, d_max] projecting in-image."""
    lane_points = np.zeros((0, 3))
    chunks = [resample_polyline(poly, spacing) for poly in semantic_map.lane_borders]
    if chunks:
        pts = np.vstack(chunks)
        lane_points = pts[_in_frustum(pose, cam, pts, d_max)]
    lights = tuple(tl for tl in semantic_map.traffic_lights
                   if _in_frustum(pose, cam, tl.position.reshape(1, 3), d_max)[0])
    return VisibleMapSubset(lane_points, lights)


def _in_frustum(pose, cam, points_world, d_max):
    pc = geometry.world_points_to_camera(pose, points_world)
    uv, valid = geometry.project_points(cam, pc)
    valid &= pc[:, 2] <= d_max
    valid &= (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
    valid &= (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    return valid
