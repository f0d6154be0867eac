"""Conversion between head translation and bounding-box correction parameters.

A real head is modeled as sitting inside a physical square box of side
FACE_BOX_M meters. Given a detected square box (center offset from the
principal point and side length b, in pixels) and the focal length f, the
translation follows from the correction parameters c = (s, tx~, ty~):

    Tz = 0.2 s f / b
    Tx = (0.2 s / b) * tau_x + 0.2 s * tx~
    Ty = (0.2 s / b) * tau_y + 0.2 s * ty~

The inverse is closed form; both directions are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, DegenerateCloud, NonPositiveDepth
from .geometry import CameraIntrinsics

FACE_BOX_M = 0.2
CROP_SIZE = 192
OFFSET_BOUND = 10.0


@dataclass(frozen=True)
class BBoxInfo:
    tau_x: float
    tau_y: float
    b: float
    f: float

    def __post_init__(self):
        if not self.b > 0:
            raise DegenerateBox(f"bbox size must be positive, got {self.b}")
        if not self.f > 0:
            raise DegenerateBox(f"focal length must be positive, got {self.f}")

    def normalized(self) -> np.ndarray:
        """The focal-normalized triple (tau_x/f, tau_y/f, b/f)."""
        return np.array([self.tau_x / self.f, self.tau_y / self.f, self.b / self.f])

    def to_dict(self) -> dict:
        return {"tau_x": self.tau_x, "tau_y": self.tau_y, "b": self.b, "f": self.f}

    @classmethod
    def from_dict(cls, d: dict) -> "BBoxInfo":
        return cls(float(d["tau_x"]), float(d["tau_y"]), float(d["b"]), float(d["f"]))


@dataclass(frozen=True)
class CorrectionParams:
    s: float
    tau_tilde_x: float
    tau_tilde_y: float

    def __post_init__(self):
        if not self.s > 0:
            raise DegenerateBox(f"scale factor must be positive, got {self.s}")
        if abs(self.tau_tilde_x) >= OFFSET_BOUND or abs(self.tau_tilde_y) >= OFFSET_BOUND:
            # almost always pixels passed where normalized offsets were expected
            raise ValueError(
                f"normalized offsets ({self.tau_tilde_x}, {self.tau_tilde_y}) exceed sanity bound {OFFSET_BOUND}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.tau_tilde_x, self.tau_tilde_y])

    @classmethod
    def from_array(cls, a) -> "CorrectionParams":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def to_dict(self) -> dict:
        return {"s": self.s, "tx": self.tau_tilde_x, "ty": self.tau_tilde_y}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionParams":
        return cls(float(d["s"]), float(d["tx"]), float(d["ty"]))


def translation_from_correction_array(c, tau, b, f) -> np.ndarray:
    """Array form of the correction -> translation map.

    c: (..., 3) as (s, tx~, ty~); tau: (..., 2); b, f: (...). Returns (..., 3).
    """
    c = np.asarray(c, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any(b <= 0):
        raise DegenerateBox("bbox size must be positive")
    s = c[..., 0]
    if np.any(s <= 0):
        raise DegenerateBox("scale factor must be positive")
    k = FACE_BOX_M * s / b
    tx = k * tau[..., 0] + FACE_BOX_M * s * c[..., 1]
    ty = k * tau[..., 1] + FACE_BOX_M * s * c[..., 2]
    tz = k * f
    return np.stack([tx, ty, tz], axis=-1)


def translation_from_correction_backward(c, tau, b, f, dT) -> np.ndarray:
    """dL/dc given dL/dT, for the map above."""
    c = np.asarray(c, dtype=np.float64)
    s = c[..., 0]
    g = FACE_BOX_M
    ds = (
        dT[..., 0] * g * (tau[..., 0] / b + c[..., 1])
        + dT[..., 1] * g * (tau[..., 1] / b + c[..., 2])
        + dT[..., 2] * g * f / b
    )
    return np.stack([ds, dT[..., 0] * g * s, dT[..., 1] * g * s], axis=-1)


def correction_from_translation_array(T, tau, b, f) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if np.any(T[..., 2] <= 0):
        raise NonPositiveDepth("translation depth must be positive")
    if np.any(b <= 0):
        raise DegenerateBox("bbox size must be positive")
    s = b * T[..., 2] / (FACE_BOX_M * f)
    k = FACE_BOX_M * s / b
    tx = (T[..., 0] - k * tau[..., 0]) / (FACE_BOX_M * s)
    ty = (T[..., 1] - k * tau[..., 1]) / (FACE_BOX_M * s)
    return np.stack([s, tx, ty], axis=-1)


def translation_from_correction(c: CorrectionParams, bbox: BBoxInfo) -> np.ndarray:
    return translation_from_correction_array(
        c.as_array(), (bbox.tau_x, bbox.tau_y), bbox.b, bbox.f
    )


def correction_from_translation(T, bbox: BBoxInfo) -> CorrectionParams:
    c = correction_from_translation_array(T, (bbox.tau_x, bbox.tau_y), bbox.b, bbox.f)
    return CorrectionParams.from_array(c)


def translation_parts(c: CorrectionParams, bbox: BBoxInfo) -> dict:
    """Intermediate quantities of the derivation, exposed for consistency checks.

    bbox_xy is the lateral translation of the box center at depth Tz, face_xy the
    extra offset of the head center inside the box; their sum is (Tx, Ty).
    """
    tz = FACE_BOX_M * c.s * bbox.f / bbox.b
    tau = np.array([bbox.tau_x, bbox.tau_y])
    bbox_xy = tau * tz / bbox.f
    tau_face = bbox.b * np.array([c.tau_tilde_x, c.tau_tilde_y])
    face_xy = FACE_BOX_M * c.s / bbox.b * tau_face
    return {"tz": tz, "bbox_xy": bbox_xy, "face_xy": face_xy, "tau_face": tau_face}


def bbox_from_projected_landmarks(pts: np.ndarray, K: CameraIntrinsics, margin: float = 0.25) -> BBoxInfo:
    """Square box around 2D points: max side of the tight bounds, padded by margin."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] != 2 or pts.shape[1] < 2:
        raise ValueError(f"expected 2xN points with N >= 2, got shape {pts.shape}")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    side = float(np.max(hi - lo))
    if side <= 0:
        raise DegenerateCloud("all points coincide")
    center = (lo + hi) / 2.0
    return BBoxInfo(
        float(center[0] - K.cx), float(center[1] - K.cy), side * (1.0 + margin), K.f
    )


def analytic_bbox(T, sigma: float, K: CameraIntrinsics) -> BBoxInfo:
    """Exact projection of the physical face box (side 0.2*sigma m) centered on the head."""
    T = np.asarray(T, dtype=np.float64)
    if T[2] <= 0:
        raise NonPositiveDepth("translation depth must be positive")
    b = FACE_BOX_M * sigma * K.f / T[2]
    return BBoxInfo(float(K.f * T[0] / T[2]), float(K.f * T[1] / T[2]), float(b), K.f)


def crop_origin(tau, b, cx, cy):
    """Top-left corner (uncropped pixels) of the square crop the box defines."""
    tau = np.asarray(tau, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.stack([cx + tau[..., 0] - b / 2.0, cy + tau[..., 1] - b / 2.0], axis=-1)


def to_crop_pixels(pts, tau, b, cx, cy, size: int = CROP_SIZE) -> np.ndarray:
    """Map uncropped pixels (..., 2, N) into the box crop resized to size x size."""
    origin = crop_origin(tau, b, cx, cy)
    scale = size / np.asarray(b, dtype=np.float64)
    return (np.asarray(pts) - origin[..., :, None]) * np.asarray(scale)[..., None, None]


def bbox_crop_pixels(pts, bbox: BBoxInfo, K: CameraIntrinsics, size: int = CROP_SIZE) -> np.ndarray:
    return to_crop_pixels(pts, (bbox.tau_x, bbox.tau_y), bbox.b, K.cx, K.cy, size)
