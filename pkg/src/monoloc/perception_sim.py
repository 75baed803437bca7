"""Synthetic uncertainty-aware perception.

Renders per-pixel Dirichlet rasters (direct drivable / alternative drivable /
non-lane) and NIG-parameterized traffic-light detections from a ground-truth
pose, with seeded noise, occlusion rectangles, detection dropout and false
border injection. Replaces a trained network so the downstream pipeline can
be exercised and calibrated at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .costmap import distance_transform
from .evidential import DirichletRaster, NigParams, nig_uncertainties
from .geometry import CameraIntrinsics, Pose6D, Z_MIN

CLASS_DIRECT = 0
CLASS_ALTERNATIVE = 1
CLASS_NON_LANE = 2
NUM_CLASSES = 3

LIGHT_HALF_EXTENT_M = 0.4   # traffic light housing half-size for box synthesis
MIN_DECLARED_VAR = 1e-2     # px^2 floor so noiseless boxes stay valid NIG
OCCLUSION_TILT = 0.01       # tiny non-lane evidence inside occlusions


class InsufficientSamples(Exception):
    """Not enough pixels/boxes aggregated for a stable calibration estimate."""


@dataclass(frozen=True)
class NoiseProfile:
    """Controls of the synthetic perception, all deterministic under rng_seed.

    clutter_lines are world-frame polylines rendered as confident non-lane
    bands: they fool class-boundary border extraction while the uncertainty
    pipeline masks them out.
    """

    border_alpha_peak: float = 37.0
    border_width_px: float = 3.0
    class_noise_sd: float = 0.0
    bbox_center_sd_px: float = 0.0
    bbox_var_scale: float = 1.0
    detect_dropout_prob: float = 0.0
    occlusion_rects: tuple = ()            # (x0, y0, x1, y1) pixel rects
    rng_seed: int = 0
    clutter_lines: tuple = ()              # world polylines of false borders
    clutter_evidence: float = 37.0
    region_evidence: float = 200.0

    def __post_init__(self):
        if not 0.0 <= self.detect_dropout_prob <= 1.0:
            raise ValueError("detect_dropout_prob must be in [0, 1]")
        if self.class_noise_sd < 0 or self.bbox_center_sd_px < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        if self.border_alpha_peak < 1.0:
            raise ValueError("border_alpha_peak must be >= 1")


@dataclass(frozen=True)
class NigDetection:
    """One detected traffic light: four NIG edges (x_min, y_min, x_max, y_max)."""

    edges: tuple
    object_class: str = "traffic-light"

    def __post_init__(self):
        if len(self.edges) != 4 or not all(isinstance(e, NigParams) for e in self.edges):
            raise ValueError("edges must be four NigParams")
        g = [e.gamma for e in self.edges]
        if not (g[0] < g[2] and g[1] < g[3]):
            raise ValueError("box means must satisfy x_min < x_max, y_min < y_max")


@dataclass(frozen=True)
class GroundTruth:
    """What the renderer actually drew, for calibration checks."""

    classes: np.ndarray          # (h, w) geometric class before noise/occlusion
    box_edges: tuple             # true (x_min, y_min, x_max, y_max) per detection
    light_ids: tuple             # map light id per detection


@dataclass(frozen=True)
class SceneRender:
    dirichlet: DirichletRaster
    detections: tuple
    truth_pose: Pose6D
    truth: GroundTruth


# ---------------------------------------------------------------------------
# geometry helpers (camera-frame clipping, projection, rasterization)

def _clip_polygon_near(pts_cam, near):
    """Sutherland-Hodgman clip of a closed polygon against z >= near."""
    out = []
    n = len(pts_cam)
    for i in range(n):
        a, b = pts_cam[i], pts_cam[(i + 1) % n]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if len(out) >= 3 else np.zeros((0, 3))


def _project_poly(cam, pts_cam):
    uv = np.empty((len(pts_cam), 2))
    uv[:, 0] = cam.fx * pts_cam[:, 0] / pts_cam[:, 2] + cam.cx
    uv[:, 1] = cam.fy * pts_cam[:, 1] / pts_cam[:, 2] + cam.cy
    return uv


def fill_polygon(height, width, poly_uv):
    """Even-odd scanline fill with pixel-center containment."""
    mask = np.zeros((height, width), dtype=bool)
    if len(poly_uv) < 3:
        return mask
    x1, y1 = poly_uv[:, 0], poly_uv[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    rows = np.arange(height)[None, :]
    cross = ((y1[:, None] <= rows) & (rows < y2[:, None])) | \
            ((y2[:, None] <= rows) & (rows < y1[:, None]))
    denom = np.where(y2 == y1, 1.0, y2 - y1)[:, None]
    xs = x1[:, None] + (rows - y1[:, None]) / denom * (x2 - x1)[:, None]
    for r in range(height):
        hit = np.sort(xs[cross[:, r], r])
        for a, b in zip(hit[0::2], hit[1::2]):
            c0 = max(0, int(np.ceil(a)))
            c1 = min(width - 1, int(np.floor(b)))
            if c1 >= c0:
                mask[r, c0:c1 + 1] = True
    return mask


def _polyline_pixels(cam, pose, poly_world, mark, step_px=0.5):
    """Mark raster pixels crossed by the projected polyline."""
    pts_cam = geometry.world_points_to_camera(pose, poly_world)
    h, w = mark.shape
    near = Z_MIN + 1e-6
    for a, b in zip(pts_cam[:-1], pts_cam[1:]):
        if a[2] < near and b[2] < near:
            continue
        if a[2] < near:
            a = a + (near - a[2]) / (b[2] - a[2]) * (b - a)
        elif b[2] < near:
            b = a + (near - a[2]) / (b[2] - a[2]) * (b - a)
        ua = _project_poly(cam, a[None, :])[0]
        ub = _project_poly(cam, b[None, :])[0]
        n = int(np.linalg.norm(ub - ua) / step_px) + 2
        # sample in 3D so the perspective-correct image curve is traced
        ts = np.linspace(0.0, 1.0, n)
        seg = a[None, :] + ts[:, None] * (b - a)[None, :]
        uv = _project_poly(cam, seg)
        cc = np.rint(uv[:, 0]).astype(int)
        rr = np.rint(uv[:, 1]).astype(int)
        ok = (cc >= 0) & (cc < w) & (rr >= 0) & (rr < h)
        mark[rr[ok], cc[ok]] = True


def _point_in_polygon_xy(point, poly):
    x, y = point[0], point[1]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    cross = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
    denom = np.where(y2 == y1, 1.0, y2 - y1)
    xs = x1 + (y - y1) / denom * (x2 - x1)
    return int(np.sum(cross & (xs > x))) % 2 == 1


def _strip_polygons(semantic_map):
    """Ground polygons between consecutive lane borders (map order)."""
    strips = []
    borders = semantic_map.lane_borders
    for a, b in zip(borders[:-1], borders[1:]):
        strips.append(np.vstack([a, b[::-1]]))
    return strips


def _band_profile(cam, pose, poly_world, width_px, shape):
    """Band mask and normalized distance from the border centerline in [0, 1]."""
    mark = np.zeros(shape, dtype=bool)
    _polyline_pixels(cam, pose, poly_world, mark)
    if not mark.any():
        return mark, np.zeros(shape)
    dist = distance_transform(mark)
    band = dist <= width_px / 2.0
    return band, np.clip(2.0 * dist / width_px, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering

def render_scene(semantic_map, truth: Pose6D, cam: CameraIntrinsics,
                 noise: NoiseProfile) -> SceneRender:
    """Render one frame of synthetic perception at the ground-truth pose."""
    rng = np.random.default_rng(noise.rng_seed)
    h, w = cam.height, cam.width

    classes = np.full((h, w), CLASS_NON_LANE, dtype=np.int64)
    evidence = np.full((h, w), noise.region_evidence)

    strips = _strip_polygons(semantic_map)
    ego_idx = None
    for i, strip in enumerate(strips):
        if _point_in_polygon_xy(truth.translation, strip):
            ego_idx = i
    strip_masks = []
    for strip in strips:
        pts_cam = geometry.world_points_to_camera(truth, strip)
        clipped = _clip_polygon_near(pts_cam, Z_MIN + 1e-6)
        if len(clipped) == 0:
            strip_masks.append(np.zeros((h, w), dtype=bool))
            continue
        strip_masks.append(fill_polygon(h, w, _project_poly(cam, clipped)))
    for i, m in enumerate(strip_masks):
        if i != ego_idx:
            classes[m] = CLASS_ALTERNATIVE
    if ego_idx is not None:
        classes[strip_masks[ego_idx]] = CLASS_DIRECT

    # lane borders: evidence dips to the peak value at the band centerline and
    # recovers quadratically toward the region level at the band edge, so the
    # uncertainty profile peaks on the border itself
    for poly in semantic_map.lane_borders:
        band, frac = _band_profile(cam, truth, poly, noise.border_width_px, (h, w))
        if not band.any():
            continue
        cls = _border_class(poly, strips, ego_idx, truth)
        classes[band] = cls
        ramp = noise.border_alpha_peak + \
            (noise.region_evidence - noise.border_alpha_peak) * frac ** 2
        evidence[band] = ramp[band]

    truth_classes = classes.copy()

    # false borders: non-lane bands (class-boundary extractors bite)
    for poly in noise.clutter_lines:
        band, frac = _band_profile(cam, truth, np.asarray(poly, dtype=float),
                                   noise.border_width_px, (h, w))
        classes[band] = CLASS_NON_LANE
        ramp = noise.clutter_evidence + \
            (noise.region_evidence - noise.clutter_evidence) * frac ** 2
        evidence[band] = ramp[band]

    if noise.class_noise_sd > 0:
        scores = np.eye(NUM_CLASSES)[classes] + rng.normal(
            0.0, noise.class_noise_sd, size=(h, w, NUM_CLASSES))
        classes = np.argmax(scores, axis=-1)

    alpha = np.ones((h, w, NUM_CLASSES))
    np.put_along_axis(alpha, classes[..., None], 1.0 + evidence[..., None], axis=-1)

    for x0, y0, x1, y1 in noise.occlusion_rects:
        alpha[int(y0):int(y1), int(x0):int(x1), :] = 1.0
        alpha[int(y0):int(y1), int(x0):int(x1), CLASS_NON_LANE] = 1.0 + OCCLUSION_TILT

    detections, box_edges, light_ids = _render_lights(
        semantic_map, truth, cam, noise, rng)

    return SceneRender(
        dirichlet=DirichletRaster(alpha),
        detections=tuple(detections),
        truth_pose=truth,
        truth=GroundTruth(truth_classes, tuple(box_edges), tuple(light_ids)),
    )


def _border_class(poly, strips, ego_idx, truth):
    """Lane class adjacent to a border: the ego lane's class if it bounds it."""
    mid = np.asarray(poly[len(poly) // 2], dtype=float)
    a, b = poly[max(0, len(poly) // 2 - 1)], poly[min(len(poly) - 1, len(poly) // 2 + 1)]
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    n = np.linalg.norm(d[:2])
    if n < 1e-9:
        return CLASS_ALTERNATIVE
    perp = np.array([-d[1] / n, d[0] / n, 0.0])
    sides = [mid + 0.5 * perp, mid - 0.5 * perp]
    for i, strip in enumerate(strips):
        for s in sides:
            if _point_in_polygon_xy(s, strip):
                return CLASS_DIRECT if i == ego_idx else CLASS_ALTERNATIVE
    return CLASS_ALTERNATIVE


def _render_lights(semantic_map, truth, cam, noise, rng):
    detections, box_edges, light_ids = [], [], []
    declared_var = max((noise.bbox_var_scale * noise.bbox_center_sd_px) ** 2,
                       MIN_DECLARED_VAR)
    nig_alpha = 3.0
    nig_upsilon = 1.0
    nig_beta = declared_var * (nig_alpha - 1.0)
    for tl in sorted(semantic_map.traffic_lights, key=lambda t: t.id):
        pc = geometry.world_points_to_camera(truth, tl.position.reshape(1, 3))[0]
        if pc[2] <= Z_MIN:
            continue
        u = cam.fx * pc[0] / pc[2] + cam.cx
        v = cam.fy * pc[1] / pc[2] + cam.cy
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            continue
        su = cam.fx * LIGHT_HALF_EXTENT_M / pc[2]
        sv = cam.fy * LIGHT_HALF_EXTENT_M / pc[2]
        target = np.array([u - su, v - sv, u + su, v + sv])
        if any(x0 <= u < x1 and y0 <= v < y1
               for x0, y0, x1, y1 in noise.occlusion_rects):
            continue
        if rng.random() < noise.detect_dropout_prob:
            continue
        gammas = target + rng.normal(0.0, noise.bbox_center_sd_px, size=4) \
            if noise.bbox_center_sd_px > 0 else target.copy()
        if gammas[0] >= gammas[2]:
            gammas[0], gammas[2] = gammas[2], gammas[0]
        if gammas[1] >= gammas[3]:
            gammas[1], gammas[3] = gammas[3], gammas[1]
        edges = tuple(NigParams(float(g), nig_upsilon, nig_alpha, nig_beta)
                      for g in gammas)
        detections.append(NigDetection(edges))
        box_edges.append(tuple(target))
        light_ids.append(tl.id)
    return detections, box_edges, light_ids


# ---------------------------------------------------------------------------
# self-calibration check

def calibration_fidelity(renders, truths, bins: int = 10):
    """(ECE, ENCE) of the synthetic perception against its own ground truth."""
    from .metrics import ece as ece_fn, ence as ence_fn

    confs, correct, variances, sq_errors = [], [], [], []
    for render, truth in zip(renders, truths):
        p = render.dirichlet.expected_prob()
        pred = render.dirichlet.argmax_class()
        confs.append(np.take_along_axis(p, pred[..., None], axis=-1).ravel())
        correct.append((pred == truth.classes).ravel())
        for det, target in zip(render.detections, truth.box_edges):
            for edge, t in zip(det.edges, target):
                ua, _ = nig_uncertainties(edge)
                variances.append(float(ua))
                sq_errors.append(float((edge.gamma - t) ** 2))
    n_px = sum(len(c) for c in confs)
    if n_px < 1000:
        raise InsufficientSamples(f"{n_px} pixels aggregated, need >= 1000")
    if len(variances) < 4 * 50:
        raise InsufficientSamples(f"{len(variances) // 4} boxes aggregated, need >= 50")
    ece_val = ece_fn(np.concatenate(confs), np.concatenate(correct), bins)
    ence_val = ence_fn(np.array(variances), np.array(sq_errors), bins)
    return ece_val, ence_val


# ---------------------------------------------------------------------------
# debug raster dump

def dump_pgm16(path, values01: np.ndarray) -> None:
    """16-bit big-endian binary PGM of a [0, 1] raster."""
    arr = np.clip(np.asarray(values01, dtype=float), 0.0, 1.0)
    data = np.round(arr * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
