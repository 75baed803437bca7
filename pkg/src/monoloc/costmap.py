"""Differentiable lane-border cost maps.

Pipeline: Otsu threshold on the per-pixel uncertainty, border mask extraction
gated by the drivable classes, exact Euclidean distance transform, probability
weighting, and Catmull-Rom bicubic sub-pixel sampling with analytic gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

from .evidential import DirichletRaster

DRIVABLE_CLASSES = (0, 1)       # direct drivable, alternative drivable
DEFAULT_PROB_WEIGHT = 1.0
DEFAULT_BLUR_RADIUS = 3


class DegenerateInput(Exception):
    """All raster values identical; the frame carries no separable structure."""


class EmptyMask(Exception):
    """No border pixels; the frame contributes no lane-border constraints."""


class OutOfBounds(Exception):
    """Sample location outside the interpolable interior of the cost map."""


# ---------------------------------------------------------------------------
# Otsu threshold

def otsu_threshold(values: np.ndarray) -> float:
    """Histogram threshold maximizing between-class variance.

    256 uniform bins over [min, max]; returns the bin boundary of the best of
    the 255 candidate cuts, ties resolved toward the lower threshold.
    """
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        raise DegenerateInput("empty raster")
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        raise DegenerateInput("all values identical")
    hist, edges = np.histogram(vals, bins=256, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = hist / hist.sum()
    mu = w * centers
    w0 = np.cumsum(w)[:-1]          # mass below cut k, k = 1..255
    w1 = 1.0 - w0
    m0 = np.cumsum(mu)[:-1]
    m1 = mu.sum() - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        var_between = np.where((w0 > 0) & (w1 > 0),
                               w0 * w1 * (m0 / w0 - m1 / w1) ** 2, 0.0)
    return float(edges[1 + int(np.argmax(var_between))])


def extract_borders(raster: DirichletRaster, threshold: float,
                    lane_classes=DRIVABLE_CLASSES):
    """Border mask and border probability raster from an uncertainty raster.

    A pixel is border iff its uncertainty exceeds the threshold and its argmax
    class is a lane class; the probability raster is 1 - uncertainty on border
    pixels and 0 elsewhere.
    """
    u = raster.uncertainty()
    mask = (u > threshold) & np.isin(raster.argmax_class(), lane_classes)
    prob = np.where(mask, 1.0 - u, 0.0)
    return mask, prob


def class_boundary_borders(raster: DirichletRaster, lane_classes=DRIVABLE_CLASSES):
    """Uncertainty-free border extraction: class-change pixels touching a lane.

    A pixel is border iff its argmax class differs from a 4-neighbor and at
    least one side of the change is a lane class. Probability is uniformly 1
    on border pixels (no confidence information is used).
    """
    cls = raster.argmax_class()
    lane = np.isin(cls, lane_classes)
    mask = np.zeros(cls.shape, dtype=bool)
    diff_v = cls[1:, :] != cls[:-1, :]
    edge_v = diff_v & (lane[1:, :] | lane[:-1, :])
    mask[1:, :] |= edge_v
    mask[:-1, :] |= edge_v
    diff_h = cls[:, 1:] != cls[:, :-1]
    edge_h = diff_h & (lane[:, 1:] | lane[:, :-1])
    mask[:, 1:] |= edge_h
    mask[:, :-1] |= edge_h
    return mask, np.where(mask, 1.0, 0.0)


# ---------------------------------------------------------------------------
# exact Euclidean distance transform

@njit(cache=True)
def _edt_pass1(mask):
    """Per column: squared distance to nearest mask pixel in the same column
    plus the row index of that pixel (-1 where the column is empty)."""
    h, w = mask.shape
    d2 = np.empty((h, w), np.float64)
    row_idx = np.empty((h, w), np.int64)
    for c in range(w):
        nearest = -1
        for r in range(h):
            if mask[r, c]:
                nearest = r
            row_idx[r, c] = nearest
        nearest = -1
        for r in range(h - 1, -1, -1):
            if mask[r, c]:
                nearest = r
            up = row_idx[r, c]
            if nearest >= 0 and (up < 0 or nearest - r < r - up):
                row_idx[r, c] = nearest
        for r in range(h):
            n = row_idx[r, c]
            d2[r, c] = 1e18 if n < 0 else float((r - n) * (r - n))
    return d2, row_idx


@njit(cache=True)
def _edt_pass2(d2in):
    """Per row: lower envelope of parabolas over columns (exact squared EDT)."""
    h, w = d2in.shape
    d2 = np.empty((h, w), np.float64)
    col_idx = np.empty((h, w), np.int64)
    v = np.empty(w, np.int64)       # parabola apex columns
    z = np.empty(w + 1, np.float64)  # envelope breakpoints
    for r in range(h):
        f = d2in[r]
        k = -1
        for q in range(w):
            if f[q] >= 1e18:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -1e30
                z[1] = 1e30
                continue
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            while s <= z[k]:
                k -= 1
                s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = 1e30
        if k < 0:
            for q in range(w):
                d2[r, q] = 1e18
                col_idx[r, q] = -1
            continue
        j = 0
        for q in range(w):
            while z[j + 1] < q:
                j += 1
            d2[r, q] = (q - v[j]) * (q - v[j]) + f[v[j]]
            col_idx[r, q] = v[j]
    return d2, col_idx


def distance_transform(mask: np.ndarray, return_indices: bool = False):
    """Exact Euclidean distance (pixels) to the nearest True pixel center.

    Two separable passes: per-column nearest scan, then a per-row lower
    envelope of parabolas over the squared column distances. Optionally also
    returns the (row, col) index arrays of the nearest border pixel.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("mask has no border pixels")
    d2c, row_idx = _edt_pass1(m)
    d2, col_idx = _edt_pass2(d2c)
    dist = np.sqrt(d2)
    if not return_indices:
        return dist
    rows = np.arange(m.shape[0])[:, None] * np.ones(m.shape[1], dtype=int)
    nearest_row = row_idx[rows, col_idx]
    return dist, (nearest_row, col_idx)


# ---------------------------------------------------------------------------
# cost map assembly

def box_blur(raster: np.ndarray, radius: int) -> np.ndarray:
    """Normalized box blur; edge windows renormalize by their in-image area."""
    if radius <= 0:
        return np.asarray(raster, dtype=float).copy()
    ones = np.ones_like(raster, dtype=float)
    return _box_sum(raster, radius) / _box_sum(ones, radius)


def _box_sum(raster, radius):
    a = np.asarray(raster, dtype=float)
    for axis in (0, 1):
        pad = np.zeros((1, a.shape[1]) if axis == 0 else (a.shape[0], 1))
        cs = np.concatenate([pad, np.cumsum(a, axis=axis)], axis=axis)
        n = a.shape[axis]
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        a = np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)
    return a


@dataclass(frozen=True)
class CostMap:
    """Probability-weighted distance cost with sub-pixel lookup.

    ``cost`` is the weighted distance, ``prob`` the raw border probability
    raster, and ``border_info`` a per-pixel measurement weight taken from the
    border band nearest each pixel (used as the lane-channel information).
    """

    cost: np.ndarray
    prob: np.ndarray
    border_info: np.ndarray

    @property
    def width(self) -> int:
        return self.cost.shape[1]

    @property
    def height(self) -> int:
        return self.cost.shape[0]

    def sample(self, uv):
        """Bicubic value and gradient at a sub-pixel location, see sample()."""
        return sample(self, uv)

    def sample_many(self, uv: np.ndarray):
        """Vectorized sample: (values, gradients, valid) with no exceptions."""
        vals, grads, valid = _bicubic_batch(self.cost, np.asarray(uv, dtype=float))
        return vals, grads, valid

    def info_at(self, uv: np.ndarray) -> np.ndarray:
        """Nearest-pixel lookup of border_info for an (n, 2) pixel array."""
        uv = np.asarray(uv, dtype=float)
        c = np.clip(np.rint(uv[:, 0]).astype(int), 0, self.width - 1)
        r = np.clip(np.rint(uv[:, 1]).astype(int), 0, self.height - 1)
        return self.border_info[r, c]


def build_cost_map(edt: np.ndarray, prob: np.ndarray,
                   w_p: float = DEFAULT_PROB_WEIGHT,
                   blur_radius: int = DEFAULT_BLUR_RADIUS,
                   nearest_indices=None, mask=None) -> CostMap:
    """Overlay the distance transform with the diffused probability map.

    cost = edt * (1 + w_p * (1 - blur(prob))): the zero set is preserved and
    cost rises faster away from low-confidence borders. When the EDT's
    nearest-pixel indices and the border mask are supplied, the per-pixel
    information weight is the squared band-mean probability at the nearest
    border pixel; otherwise it is 1 everywhere.
    """
    edt = np.asarray(edt, dtype=float)
    prob = np.asarray(prob, dtype=float)
    if edt.shape != prob.shape:
        raise ValueError("edt and prob rasters must share a shape")
    if w_p < 0:
        raise ValueError("w_p must be nonnegative")
    p_tilde = box_blur(prob, blur_radius)
    cost = edt * (1.0 + w_p * (1.0 - p_tilde))
    if nearest_indices is not None and mask is not None:
        band_sum = _box_sum(prob, blur_radius)
        band_count = _box_sum(np.asarray(mask, dtype=float), blur_radius)
        with np.errstate(invalid="ignore"):
            band_mean = np.where(band_count > 0, band_sum / np.maximum(band_count, 1e-300), 0.0)
        info = band_mean[nearest_indices] ** 2
    else:
        info = np.ones_like(cost)
    return CostMap(cost, prob, info)


def cost_map_from_raster(raster: DirichletRaster,
                         w_p: float = DEFAULT_PROB_WEIGHT,
                         blur_radius: int = DEFAULT_BLUR_RADIUS,
                         use_uncertainty: bool = True) -> CostMap:
    """Full per-frame pipeline from a Dirichlet raster to a sampled cost map.

    With use_uncertainty (the default) borders come from the Otsu-thresholded
    uncertainty channel and carry probability weights; without it they come
    from class boundaries with uniform weights and no overlay.
    """
    if use_uncertainty:
        # threshold over lane-class pixels only: non-lane regions (occlusions,
        # artifacts) are masked out downstream and would skew the histogram
        u = raster.uncertainty()
        lane = np.isin(raster.argmax_class(), DRIVABLE_CLASSES)
        if not lane.any():
            raise EmptyMask("no lane-class pixels in the frame")
        thr = otsu_threshold(u[lane])
        mask, prob = extract_borders(raster, thr)
    else:
        mask, prob = class_boundary_borders(raster)
    if not mask.any():
        raise EmptyMask("no border pixels extracted")
    edt, idx = distance_transform(mask, return_indices=True)
    return build_cost_map(edt, prob, w_p=w_p if use_uncertainty else 0.0,
                          blur_radius=blur_radius, nearest_indices=idx, mask=mask)


# ---------------------------------------------------------------------------
# Catmull-Rom bicubic sampling (kernel parameter a = -0.5)

def _cr_weights(t):
    t2 = t * t
    t3 = t2 * t
    w0 = -0.5 * t3 + t2 - 0.5 * t
    w1 = 1.5 * t3 - 2.5 * t2 + 1.0
    w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w3 = 0.5 * t3 - 0.5 * t2
    return np.stack([w0, w1, w2, w3], axis=-1)


def _cr_weights_d(t):
    t2 = t * t
    w0 = -1.5 * t2 + 2.0 * t - 0.5
    w1 = 4.5 * t2 - 5.0 * t
    w2 = -4.5 * t2 + 4.0 * t + 0.5
    w3 = 1.5 * t2 - t
    return np.stack([w0, w1, w2, w3], axis=-1)


def _bicubic_batch(grid, uv):
    h, w = grid.shape
    uv = uv.reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 1.0) & (u <= w - 2.0) & (v >= 1.0) & (v <= h - 2.0)
    iu = np.clip(np.floor(u).astype(int), 1, w - 3)
    iv = np.clip(np.floor(v).astype(int), 1, h - 3)
    tu = np.where(valid, u - iu, 0.0)
    tv = np.where(valid, v - iv, 0.0)
    cols = iu[:, None] + np.arange(-1, 3)
    rows = iv[:, None] + np.arange(-1, 3)
    patch = grid[rows[:, :, None], cols[:, None, :]]   # (n, 4 rows, 4 cols)
    wx, wy = _cr_weights(tu), _cr_weights(tv)
    dwx, dwy = _cr_weights_d(tu), _cr_weights_d(tv)
    vals = np.einsum("nr,nrc,nc->n", wy, patch, wx)
    grads = np.stack([np.einsum("nr,nrc,nc->n", wy, patch, dwx),
                      np.einsum("nr,nrc,nc->n", dwy, patch, wx)], axis=-1)
    return vals, grads, valid


def sample(cm: CostMap, uv):
    """Catmull-Rom bicubic cost and analytic gradient at sub-pixel (u, v).

    Reproduces grid values exactly at integer coordinates and is C1 across
    cell boundaries. Valid for uv in [1, width-2] x [1, height-2]; outside
    that interior OutOfBounds is raised and the caller applies its configured
    out-of-image penalty.
    """
    uv = np.asarray(uv, dtype=float).reshape(2)
    vals, grads, valid = _bicubic_batch(cm.cost, uv[None, :])
    if not valid[0]:
        raise OutOfBounds(f"uv {tuple(uv)} outside interior "
                          f"[1, {cm.width - 2}] x [1, {cm.height - 2}]")
    return float(vals[0]), grads[0]


def dump_cost_raster(path, cm: CostMap) -> None:
    """Debug dump: u32le width, u32le height, then float32le cost rows."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", cm.width, cm.height))
        fh.write(cm.cost.astype("<f4").tobytes())


def load_cost_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(h, w).astype(float)
