"""Rotation representations, camera intrinsics and pinhole projection.

Camera frame: x right, y down, z forward (OpenCV). Pixel centers sit on
integer coordinates.

Euler convention used everywhere in this package: intrinsic yaw about y,
then pitch about x, then roll about z, i.e.

    R = Ry(yaw) @ Rx(pitch) @ Rz(roll)

Angles are reported in degrees in (-180, 180].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateInput

DEGENERACY_EPS = 1e-12
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy, "w": self.width, "h": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["f"]), float(d["cx"]), float(d["cy"]), int(d["w"]), int(d["h"]))


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt map from 6D (two stacked 3-vectors) to a rotation matrix.

    The two input vectors become the first two columns after
    orthonormalization; the third column is their cross product. Works on
    arrays of shape (..., 6) and returns (..., 3, 3).
    """
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERACY_EPS) or np.any(n2 <= DEGENERACY_EPS):
        raise DegenerateInput("6D rotation has a (near-)zero column")
    b1 = a1 / n1
    cos = np.sum(b1 * a2, axis=-1, keepdims=True) / n2
    if np.any(1.0 - np.abs(cos) <= DEGENERACY_EPS):
        raise DegenerateInput("6D rotation columns are (near-)parallel")
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_matrix_backward(r: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of rot6d_to_matrix: maps dL/dR to dL/dr."""
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    nu = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / nu

    g1, g2, g3 = dR[..., :, 0], dR[..., :, 1], dR[..., :, 2]
    # b3 = b1 x b2
    db1 = g1 + np.cross(b2, g3)
    db2 = g2 + np.cross(g3, b1)
    du2 = (db2 - b2 * np.sum(b2 * db2, axis=-1, keepdims=True)) / nu
    da2 = du2 - b1 * np.sum(b1 * du2, axis=-1, keepdims=True)
    db1 = db1 - proj * du2 - np.sum(b1 * du2, axis=-1, keepdims=True) * a2
    da1 = (db1 - b1 * np.sum(b1 * db1, axis=-1, keepdims=True)) / n1
    return np.concatenate([da1, da2], axis=-1)


def matrix_to_rot6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    """Rotation-group distance in radians, in [0, pi]."""
    cos = (np.trace(R1 @ np.swapaxes(R2, -1, -2), axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def euler_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Degrees in, rotation matrix out (yaw-pitch-roll about y, x, z)."""
    return rot_y(np.radians(yaw)) @ rot_x(np.radians(pitch)) @ rot_z(np.radians(roll))


def _wrap_deg(a: float) -> float:
    # map into (-180, 180]
    a = float(a)
    if a <= -180.0:
        a += 360.0
    return a


def euler_angles_from_matrix(R: np.ndarray) -> tuple[float, float, float]:
    """Return (yaw, pitch, roll) in degrees.

    At gimbal lock (|pitch| = 90) the yaw/roll split is canonicalized to
    roll = 0.
    """
    R = np.asarray(R, dtype=np.float64)
    sp = -R[1, 2]
    cp = np.hypot(R[1, 0], R[1, 1])
    pitch = np.arctan2(sp, cp)
    if cp > 1e-9:
        yaw = np.arctan2(R[0, 2], R[2, 2])
        roll = np.arctan2(R[1, 0], R[1, 1])
    else:
        roll = 0.0
        yaw = np.arctan2(-R[2, 0], R[0, 0])
    return (
        _wrap_deg(np.degrees(yaw)),
        _wrap_deg(np.degrees(pitch)),
        _wrap_deg(np.degrees(roll)),
    )


def transform_points(V: np.ndarray, R: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Head space (..., 3, N) to camera space."""
    return R @ V + np.asarray(T)[..., :, None]


def project_camera_points(X: np.ndarray, f, cx, cy) -> np.ndarray:
    """Pinhole projection of camera-space points (..., 3, N) to pixels (..., 2, N).

    f, cx, cy may be scalars or arrays broadcastable over the leading dims.
    """
    Z = X[..., 2, :]
    bad = Z <= MIN_DEPTH
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise BehindCamera(int(idx[-1]), float(Z[tuple(idx)]))
    f = np.asarray(f, dtype=np.float64)[..., None]
    u = f * X[..., 0, :] / Z + np.asarray(cx, dtype=np.float64)[..., None]
    v = f * X[..., 1, :] / Z + np.asarray(cy, dtype=np.float64)[..., None]
    return np.stack([u, v], axis=-2)


def project_points(V: np.ndarray, R: np.ndarray, T: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project head-space points (3, N) with pose (R, T) through intrinsics K."""
    return project_camera_points(transform_points(V, R, T), K.f, K.cx, K.cy)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
