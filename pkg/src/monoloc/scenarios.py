"""Synthetic scene presets: maps, trajectories and ready-to-run configs.

A scene is a flat road along a centerline with lane borders at fixed lateral
offsets, an optional traffic light, optional false-border clutter, and a
trajectory driving the ego lane center. Trajectory files are text lines
``t x y z qw qx qy qz``.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import geometry, map_model
from .geometry import Pose6D

CAMERA_HEIGHT = 1.5
# road cross-section: shoulder edge, ego lane borders, neighbor lane border;
# unequal spacings break the lane-shift aliasing of single-image relocalization
BORDER_OFFSETS = (-5.0, -1.75, 1.75, 4.75)

PRESETS = ("straight", "straight-clutter", "urban")


def save_trajectory(path, times, poses) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, p in zip(times, poses):
            q = p.rotation
            tr = p.translation
            fh.write(" ".join(f"{v:.17g}" for v in
                              (t, tr[0], tr[1], tr[2], q[0], q[1], q[2], q[3])) + "\n")


def load_trajectory(path):
    times, poses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ValueError(f"{path}:{lineno}: expected 't x y z qw qx qy qz'")
            times.append(vals[0])
            poses.append(Pose6D(np.array(vals[1:4]), np.array(vals[4:8])))
    return np.array(times), poses


def _yaw_pose(x, y, yaw, z=CAMERA_HEIGHT) -> Pose6D:
    return Pose6D(np.array([x, y, z]),
                  np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]))


def _offset_polyline(centerline, headings, offset):
    normals = np.stack([-np.sin(headings), np.cos(headings)], axis=1)
    pts = np.zeros((len(centerline), 3))
    pts[:, :2] = centerline + offset * normals
    return pts


def _straight_centerline(length, step=1.0):
    xs = np.arange(-20.0, length + 20.0 + step, step)
    center = np.stack([xs, np.zeros_like(xs)], axis=1)
    return center, np.zeros_like(xs)


def _curved_centerline(straight1, arc_len, radius, total, step=1.0):
    """Straight, then a left arc, then straight again; arc-length sampled."""
    s = np.arange(-20.0, total + 20.0 + step, step)
    pts = np.zeros((len(s), 2))
    heading = np.zeros(len(s))
    for i, si in enumerate(s):
        if si <= straight1:
            pts[i] = (si, 0.0)
            heading[i] = 0.0
        elif si <= straight1 + arc_len:
            a = (si - straight1) / radius
            pts[i] = (straight1 + radius * math.sin(a), radius * (1 - math.cos(a)))
            heading[i] = a
        else:
            a = arc_len / radius
            base = np.array([straight1 + radius * math.sin(a), radius * (1 - math.cos(a))])
            d = si - straight1 - arc_len
            pts[i] = base + d * np.array([math.cos(a), math.sin(a)])
            heading[i] = a
    return s, pts, heading


def _road_map(centerline, headings, lights):
    borders = [_offset_polyline(centerline, headings, off)
               for off in BORDER_OFFSETS]
    return map_model.SemanticMap(borders, lights)


def build_straight_scene(length=100.0, speed=8.0, rate_hz=10.0, light=None):
    """(map, times, poses) for a straight two-lane road."""
    center, headings = _straight_centerline(length)
    lights = [light] if light is not None else []
    smap = _road_map(center, headings, lights)
    n = int(length * 0.9 / speed * rate_hz)
    times = np.arange(n) / rate_hz
    poses = [_yaw_pose(5.0 + speed * t, 0.0, 0.0) for t in times]
    return smap, times, poses


def build_urban_scene(rate_hz=10.0, speed=8.0, n_frames=200,
                      light_s=170.0, light_lateral=-4.0):
    """(map, times, poses, light position): straight, gentle left curve, then a
    final straight with a roadside traffic light near its end."""
    total = 5.0 + speed / rate_hz * n_frames + 40.0
    s, center, headings = _curved_centerline(40.0, 60.0, 300.0, total)
    i = int(np.searchsorted(s, light_s))
    normal = np.array([-math.sin(headings[i]), math.cos(headings[i])])
    light_xy = center[i] + light_lateral * normal
    light_pos = (float(light_xy[0]), float(light_xy[1]), 4.0)
    smap = _road_map(center, headings, [(1, light_pos)])
    times = np.arange(n_frames) / rate_hz
    poses = []
    for t in times:
        sk = 5.0 + speed * t
        j = int(np.clip(np.searchsorted(s, sk), 1, len(s) - 1))
        frac = (sk - s[j - 1]) / (s[j] - s[j - 1])
        xy = center[j - 1] + frac * (center[j] - center[j - 1])
        heading = headings[j - 1] + frac * (headings[j] - headings[j - 1])
        poses.append(_yaw_pose(xy[0], xy[1], heading))
    return smap, times, poses, light_pos


CLUTTER_OFFSETS = (0.9, 2.5, -2.5)   # in-lane seam plus two border look-alikes


def clutter_lines_for(length=100.0, laterals=CLUTTER_OFFSETS):
    """False longitudinal features: a tar-seam look-alike inside the ego lane
    and two shadow lines hugging the true borders."""
    return tuple(np.array([[-20.0, lat, 0.0], [length + 20.0, lat, 0.0]])
                 for lat in laterals)


CONFIG_TEMPLATE = """\
# generated scenario config
mode = {mode}
map = {map_name}
trajectory = {traj_name}

fx = 300.0
fy = 300.0
cx = 160.0
cy = 100.0
width = 320
height = 200

border_alpha_peak = 37.0
border_width_px = 3.0
class_noise_sd = {class_noise_sd}
bbox_center_sd_px = {bbox_center_sd_px}
bbox_var_scale = 1.0
detect_dropout_prob = {dropout}
{clutter_lines}
odom_sd_v = {odom_sd_v}
odom_sd_w = {odom_sd_w}
odom_bias_v = {odom_bias_v}
occlude_lights_until = {occlude_until}

delta_t = {delta_t}
delta_r = {delta_r}
frames = {frames}
perturbations = {perturbations}

gate_px = 30.0
prob_weight = 1.0
blur_radius = 3
d_max = 50.0
lane_spacing = 0.5

window = 10
max_iterations = 50

seed = {seed}
"""


def write_preset(preset: str, out_dir) -> Path:
    """Write map/trajectory/config files for a named preset; returns the
    config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}', choose from {PRESETS}")

    if preset in ("straight", "straight-clutter"):
        smap, times, poses = build_straight_scene()
        clutter = ""
        if preset == "straight-clutter":
            clutter = "\n".join(
                "clutter_line = " + " ".join(f"{v:.17g}" for v in line.ravel())
                for line in clutter_lines_for())
        fields = dict(mode="single-frame", class_noise_sd=0.0, bbox_center_sd_px=0.0,
                      dropout=0.0, clutter_lines=clutter,
                      odom_sd_v="0 0 0", odom_sd_w="0 0 0", odom_bias_v="0 0 0",
                      occlude_until=0, delta_t=0.5, delta_r=2.5, frames=25,
                      perturbations=1, seed=1)
    else:
        smap, times, poses, _ = build_urban_scene()
        fields = dict(mode="sequence", class_noise_sd=0.3, bbox_center_sd_px=1.5,
                      dropout=0.15, clutter_lines="",
                      odom_sd_v="0.04 0.01 0.005", odom_sd_w="0.002 0.002 0.004",
                      odom_bias_v="0.05 0 0", occlude_until=180,
                      delta_t=0.0, delta_r=0.0, frames=len(times),
                      perturbations=1, seed=1)

    map_name, traj_name = f"{preset}.map", f"{preset}.traj"
    map_model.save_map(out / map_name, smap)
    save_trajectory(out / traj_name, times, poses)
    config = CONFIG_TEMPLATE.format(map_name=map_name, traj_name=traj_name, **fields)
    cfg_path = out / f"{preset}.cfg"
    cfg_path.write_text(config, encoding="utf-8")
    return cfg_path
