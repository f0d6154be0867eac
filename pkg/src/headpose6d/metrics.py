"""Pose and geometry error metrics, dataset aggregation and report files.

Units: degrees for rotations, millimetres for distances and translations,
square millimetres for face size. Medians of even-length samples use the
lower-middle element so the statistic is always an attained value.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, IoFailure, ShapeMismatch
from .geometry import euler_angles_from_matrix, geodesic_angle

REPORT_SCHEMA_VERSION = 1


def _wrapped_abs_diff(a: float, b: float) -> float:
    d = (a - b) % 360.0
    return float(min(d, 360.0 - d))


def rotation_errors(R_pred, R_gt) -> tuple[float, float, float, float]:
    """(yaw, pitch, roll, GE) errors in degrees."""
    ep = euler_angles_from_matrix(np.asarray(R_pred, dtype=np.float64))
    eg = euler_angles_from_matrix(np.asarray(R_gt, dtype=np.float64))
    yaw, pitch, roll = (_wrapped_abs_diff(a, b) for a, b in zip(ep, eg))
    return yaw, pitch, roll, float(np.degrees(geodesic_angle(R_pred, R_gt)))


def translation_errors(T_pred, T_gt) -> tuple[float, float, float, float]:
    """Per-axis absolute translation errors and their mean, in mm."""
    d = np.abs(np.asarray(T_pred, dtype=np.float64) - np.asarray(T_gt, dtype=np.float64)) * 1000.0
    return float(d[0]), float(d[1]), float(d[2]), float(d.mean())


def _check_cloud(V, name="V"):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != 3:
        raise ShapeMismatch(f"{name} must be 3xN, got {V.shape}")
    return V


def add_metric(V_star, R_pred, T_pred, R_gt, T_gt) -> float:
    """Mean distance (mm) between two rigid placements of the ground-truth vertices."""
    V = _check_cloud(V_star, "V*")
    for name, R in (("R_pred", R_pred), ("R_gt", R_gt)):
        if np.shape(R) != (3, 3):
            raise ShapeMismatch(f"{name} must be 3x3, got {np.shape(R)}")
    for name, T in (("T_pred", T_pred), ("T_gt", T_gt)):
        if np.shape(T) != (3,):
            raise ShapeMismatch(f"{name} must have 3 entries, got {np.shape(T)}")
    # (R_p - R_g) v + dT keeps pure-translation errors exact
    d = (np.asarray(R_pred) - np.asarray(R_gt)) @ V + (np.asarray(T_pred) - np.asarray(T_gt))[:, None]
    return _shifted_mean(np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])) * 1000.0


def _shifted_mean(x: np.ndarray) -> float:
    # exact when all entries are equal
    m = x.min()
    return float(m + (x - m).mean())


def total_area(V, triangles) -> float:
    V = _check_cloud(V)
    tri = np.asarray(triangles)
    if tri.size and (tri.min() < 0 or tri.max() >= V.shape[1]):
        raise IndexOutOfRange("triangle index outside vertex range")
    a, b, c = V[:, tri[:, 0]], V[:, tri[:, 1]], V[:, tri[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(b - a, c - a, axis=0), axis=0).sum())


def face_size_error(V_pred, V_gt, triangles) -> float:
    """Absolute difference of total triangle area, in mm^2."""
    return abs(total_area(V_pred, triangles) - total_area(V_gt, triangles)) * 1e6


def lower_median(x) -> float:
    s = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("median of an empty sample")
    return float(s[(s.size - 1) // 2])


def landmark_distance_stats(V_pred, V_gt) -> tuple[float, float]:
    """(median, mean) per-vertex Euclidean distance in mm."""
    Vp, Vg = _check_cloud(V_pred, "V_pred"), _check_cloud(V_gt, "V_gt")
    if Vp.shape != Vg.shape:
        raise ShapeMismatch(f"V_pred {Vp.shape} vs V_gt {Vg.shape}")
    d = np.linalg.norm(Vp - Vg, axis=0) * 1000.0
    return lower_median(d), float(d.mean())


@dataclass(frozen=True)
class PoseErrorReport:
    yaw: float
    pitch: float
    roll: float
    mae_r: float
    ge: float
    tx: float
    ty: float
    tz: float
    mae_t: float
    add: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be non-negative, got {getattr(self, f.name)}")

    @classmethod
    def of(cls, V_star, R_pred, T_pred, R_gt, T_gt) -> "PoseErrorReport":
        y, p, r, ge = rotation_errors(R_pred, R_gt)
        tx, ty, tz, mt = translation_errors(T_pred, T_gt)
        return cls(y, p, r, (y + p + r) / 3.0, ge, tx, ty, tz, mt, add_metric(V_star, R_pred, T_pred, R_gt, T_gt))


@dataclass(frozen=True)
class GeometryErrorReport:
    median: float
    mean: float
    face_size: float

    @classmethod
    def of(cls, V_pred, V_gt, triangles) -> "GeometryErrorReport":
        med, mean = landmark_distance_stats(V_pred, V_gt)
        return cls(med, mean, face_size_error(V_pred, V_gt, triangles))


def aggregate(per_sample: dict[int, dict]) -> dict:
    """Mean and lower median of every metric over samples keyed by sample id.

    Accumulation runs over sorted ids so the result does not depend on the
    order in which samples were evaluated.
    """
    ids = sorted(per_sample)
    if not ids:
        return {"count": 0}
    keys = sorted(per_sample[ids[0]])
    out = {"count": len(ids)}
    for k in keys:
        v = np.array([per_sample[i][k] for i in ids], dtype=np.float64)
        out[f"{k}_mean"] = float(np.add.reduce(v) / v.size)
        out[f"{k}_median"] = lower_median(v)
    return out


def evaluate_sample(V_star, R_pred, T_pred, V_pred, R_gt, T_gt, triangles) -> dict:
    pose = PoseErrorReport.of(V_star, R_pred, T_pred, R_gt, T_gt)
    geo = GeometryErrorReport.of(V_pred, V_star, triangles)
    return {**asdict(pose), **{f"lmk_{k}" if k != "face_size" else k: v for k, v in asdict(geo).items()}}


def write_reports(out_dir, name: str, rows: list[dict], payload: dict) -> tuple[Path, Path]:
    """Write ``name``.csv (one row per method/scenario) and ``name``.json (full payload)."""
    out = Path(out_dir)
    cols = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in cols})
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **payload}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.csv").write_text(buf.getvalue())
        (out / f"{name}.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return out / f"{name}.csv", out / f"{name}.json"


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
