"""Landmark-aligned feature extraction: bilinear sampling, soft-argmax, grids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bbox import CROP_SIZE
from .errors import ShapeMismatch

GRID_SIDE = 18
N_GRID_POINTS = GRID_SIDE * GRID_SIDE
REDUCED_DIM = 5


def feature_map_size(stage: int) -> int:
    """Spatial side of the stage-t map (t = 1, 2, 3 -> 12, 24, 48)."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    return CROP_SIZE // 2 ** (5 - stage)


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (C, H, W)
    stage: int

    def __post_init__(self):
        side = feature_map_size(self.stage)
        if self.values.ndim != 3 or self.values.shape[1:] != (side, side):
            raise ShapeMismatch(
                f"stage {self.stage} map must be Cx{side}x{side}, got {self.values.shape}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def image_to_feature(points: np.ndarray, width: int) -> np.ndarray:
    """Convert 192-scale crop pixels to feature-map units of a map with the given width."""
    return np.asarray(points, dtype=np.float64) * (width / CROP_SIZE)


def feature_to_image(points: np.ndarray, width: int) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * (CROP_SIZE / width)


def sample_points(values: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Bilinear sampling with zero padding.

    values: (..., C, H, W); P: (..., 2, N) as (x, y) texel coordinates.
    Returns (..., N, C).
    """
    values = np.asarray(values, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    C, H, W = values.shape[-3:]
    lead = values.shape[:-3]
    x, y = P[..., 0, :], P[..., 1, :]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat = values.reshape(lead + (C, H * W))
    out = np.zeros(P.shape[:-2] + (P.shape[-1], C))
    for dx, dy, w in (
        (0, 0, (1 - wx1) * (1 - wy1)),
        (1, 0, wx1 * (1 - wy1)),
        (0, 1, (1 - wx1) * wy1),
        (1, 1, wx1 * wy1),
    ):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(inside, yi * W + xi, 0)
        # gather (..., C, N) then move channels last
        g = np.take_along_axis(flat, idx[..., None, :], axis=-1)
        g = np.swapaxes(g, -1, -2)
        out += g * (w * inside)[..., None]
    return out


def sample_points_backward(values: np.ndarray, P: np.ndarray, dF: np.ndarray) -> np.ndarray:
    """Gradient wrt sampling positions: maps dL/dF (..., N, C) to dL/dP (..., 2, N).

    Exact inside each texel cell; positions on integer coordinates are kinks.
    """
    values = np.asarray(values, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    C, H, W = values.shape[-3:]
    lead = values.shape[:-3]
    x, y = P[..., 0, :], P[..., 1, :]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = values.reshape(lead + (C, H * W))

    def corner(dx, dy):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(inside, yi * W + xi, 0)
        g = np.swapaxes(np.take_along_axis(flat, idx[..., None, :], axis=-1), -1, -2)
        return g * inside[..., None]

    v00, v10, v01, v11 = corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1)
    ddx = (1 - wy)[..., None] * (v10 - v00) + wy[..., None] * (v11 - v01)
    ddy = (1 - wx)[..., None] * (v01 - v00) + wx[..., None] * (v11 - v10)
    return np.stack([(dF * ddx).sum(axis=-1), (dF * ddy).sum(axis=-1)], axis=-2)


def bilinear_sample(fmap: FeatureMap, p) -> np.ndarray:
    """C-vector at continuous location p = (x, y); zero outside the map."""
    P = np.asarray(p, dtype=np.float64).reshape(2, 1)
    return sample_points(fmap.values, P)[0]


def soft_argmax(h: np.ndarray) -> np.ndarray:
    """Spatial softmax expectation of texel coordinates.

    h: (..., N, H, W) logits. Returns (..., 2, N) with rows (x, y).
    """
    h = np.asarray(h, dtype=np.float64)
    H, W = h.shape[-2:]
    flat = h.reshape(h.shape[:-2] + (H * W,))
    p = np.exp(flat - flat.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    ys, xs = np.divmod(np.arange(H * W), W)
    return np.stack([p @ xs.astype(np.float64), p @ ys.astype(np.float64)], axis=-2)


def soft_argmax_backward(h: np.ndarray, dL: np.ndarray) -> np.ndarray:
    """dL/dh given dL/d(coords) with coords shaped (..., 2, N)."""
    h = np.asarray(h, dtype=np.float64)
    H, W = h.shape[-2:]
    flat = h.reshape(h.shape[:-2] + (H * W,))
    p = np.exp(flat - flat.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    ys, xs = np.divmod(np.arange(H * W), W)
    mx = p @ xs.astype(np.float64)
    my = p @ ys.astype(np.float64)
    g = dL[..., 0, :, None] * (xs - mx[..., None]) + dL[..., 1, :, None] * (ys - my[..., None])
    return (p * g).reshape(h.shape)


def grid_points(width: float, height: float) -> np.ndarray:
    """18x18 cell centers over [0, width) x [0, height), row-major, shape (2, 324)."""
    if not (width > 0 and height > 0):
        raise ValueError("grid extent must be positive")
    xs = (np.arange(GRID_SIDE) + 0.5) * (width / GRID_SIDE)
    ys = (np.arange(GRID_SIDE) + 0.5) * (height / GRID_SIDE)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()])


def build_aligned_feature(
    fmap: FeatureMap, P: np.ndarray, reduce: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Concatenate reduce(sample(p_n)) over all points into a flat 5N vector.

    `reduce` receives the (N, C) matrix of sampled features and acts row-wise,
    returning (N, 5).
    """
    feats = sample_points(fmap.values, P)
    try:
        red = np.asarray(reduce(feats))
    except Exception:
        for n in range(feats.shape[0]):
            try:
                reduce(feats[n : n + 1])
            except Exception as exc:
                raise RuntimeError(f"feature reducer failed at point {n}") from exc
        raise
    if red.shape != (feats.shape[0], REDUCED_DIM):
        raise ShapeMismatch(f"reducer must map C -> {REDUCED_DIM}, got output {red.shape}")
    return red.reshape(-1)
