"""Iterative refinement: residual regression of (rotation, correction, landmarks).

Each step samples the stage feature map at the current sampling points,
asks a regressor for residuals, adds them, recomputes the translation from
the correction parameters and the bounding box, projects the landmarks and
subsamples them into the next sampling points.

Sampling points are kept in 192-scale crop pixels (``state.P``) and are
converted to feature-map units only when a map is sampled.

Regressor input layout (fixed order)::

    [aligned feature (5 N_P) | rot6d (6) | c (3) or T (3) |
     V_sub point-major x INPUT_V_SCALE (915) | bbox triple (3)]

Regressor output layout: [d_rot6d (6) | d_c or d_T (3) | d_V point-major (3660)],
each block multiplied by its entry in OUTPUT_SCALES.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .bbox import BBoxInfo, correction_from_translation_array, to_crop_pixels, translation_from_correction_array
from .errors import BehindCamera, HeadPoseError, ShapeMismatch
from .geometry import CameraIntrinsics, matrix_to_rot6d, project_camera_points, rot6d_to_matrix
from .losses import CropContext
from .nn import DenseNet
from .sampling import FeatureMap, build_aligned_feature, feature_map_size, grid_points, image_to_feature, feature_to_image
from .scenes import N_VERTICES

N_SUB = 305
SUB_IDX = np.arange(0, N_VERTICES, 4)[:N_SUB]
INPUT_V_SCALE = 10.0
OUTPUT_SCALES = {"rot6d": 0.1, "trans": 0.1, "V": 0.01}
INIT_CORRECTION = np.array([1.0, 0.0, 0.0])


def subsample_landmarks(V: np.ndarray) -> np.ndarray:
    """Fixed 305-vertex subset (every 4th vertex)."""
    if V.shape[-1] != N_VERTICES:
        raise ShapeMismatch(f"expected {N_VERTICES} vertices, got {V.shape[-1]}")
    return V[..., SUB_IDX]


@dataclass(frozen=True)
class RegressorState:
    t: int
    rot6d: np.ndarray
    c: np.ndarray  # correction params (s, tx~, ty~)
    T: np.ndarray
    V: np.ndarray  # (3, 1220)
    P: np.ndarray  # (2, N_P) sampling points, crop pixels

    @property
    def R(self) -> np.ndarray:
        return rot6d_to_matrix(self.rot6d)

    @property
    def V_sub(self) -> np.ndarray:
        return subsample_landmarks(self.V)

    def theta(self) -> np.ndarray:
        """Flat parameter vector (rot6d, c, V) used for parameter-space errors."""
        return np.concatenate([self.rot6d, self.c, self.V.ravel()])


@dataclass(frozen=True)
class InitialState:
    rot6d: np.ndarray
    V: np.ndarray
    c: np.ndarray = INIT_CORRECTION
    T: np.ndarray | None = None  # used by the direct-translation variant

    @classmethod
    def from_pose(cls, R: np.ndarray, V: np.ndarray, T=None) -> "InitialState":
        return cls(matrix_to_rot6d(R), np.array(V, dtype=np.float64), INIT_CORRECTION.copy(),
                   None if T is None else np.array(T, dtype=np.float64))


@dataclass
class Residual:
    rot6d: np.ndarray
    trans: np.ndarray  # d_c, or d_T for direct-translation regressors
    V: np.ndarray


def crop_context(bbox: BBoxInfo, K: CameraIntrinsics) -> CropContext:
    return CropContext.of(K, bbox)


def project_to_crop(V, R, T, ctx: CropContext) -> np.ndarray:
    X = R @ V + np.asarray(T)[..., :, None]
    uv = project_camera_points(X, ctx.f, ctx.cx, ctx.cy)
    return to_crop_pixels(uv, ctx.tau, ctx.b, ctx.cx, ctx.cy)


def regressor_input(feature, rot6d, trans, V_sub, bbox_triple) -> np.ndarray:
    """Assemble the regressor input vector(s); leading batch dims allowed."""
    vs = np.swapaxes(V_sub, -1, -2).reshape(V_sub.shape[:-2] + (-1,)) * INPUT_V_SCALE
    return np.concatenate([feature, rot6d, trans, vs, bbox_triple], axis=-1)


def split_output(y: np.ndarray) -> Residual:
    d6 = y[..., :6] * OUTPUT_SCALES["rot6d"]
    d3 = y[..., 6:9] * OUTPUT_SCALES["trans"]
    dV = y[..., 9:].reshape(y.shape[:-1] + (N_VERTICES, 3))
    dV = np.swapaxes(dV, -1, -2) * OUTPUT_SCALES["V"]
    return Residual(d6, d3, dV)


def regressor_dims(n_points: int) -> tuple[int, int]:
    return 5 * n_points + 6 + 3 + 3 * N_SUB + 3, 6 + 3 + 3 * N_VERTICES


class Regressor:
    """Residual predictor interface for one refinement run."""

    direct = False

    def reducer(self, stage: int):
        # identity-like default: keep the first five channels
        return lambda feats: feats[:, :5]

    def __call__(self, stage: int, feature: np.ndarray, state: RegressorState, bbox: BBoxInfo) -> Residual:
        raise NotImplementedError


class ZeroRegressor(Regressor):
    def __call__(self, stage, feature, state, bbox):
        return Residual(np.zeros(6), np.zeros(3), np.zeros_like(state.V))


class OracleRegressor(Regressor):
    """Emits alpha * (target - current) in parameter space."""

    def __init__(self, rot6d_star, c_star, V_star, alpha: float = 1.0):
        self.rot6d_star = np.asarray(rot6d_star, dtype=np.float64)
        self.c_star = np.asarray(c_star, dtype=np.float64)
        self.V_star = np.asarray(V_star, dtype=np.float64)
        self.alpha = alpha

    @classmethod
    def for_sample(cls, sample, alpha: float = 1.0) -> "OracleRegressor":
        return cls(matrix_to_rot6d(sample.R_star), sample.c_star.as_array(), sample.V_star, alpha)

    def __call__(self, stage, feature, state, bbox):
        a = self.alpha
        return Residual(
            a * (self.rot6d_star - state.rot6d), a * (self.c_star - state.c), a * (self.V_star - state.V)
        )


class LearnedRegressor(Regressor):
    """Per-stage reducer and regressor networks."""

    def __init__(self, reducers: Sequence[DenseNet], regressors: Sequence[DenseNet], direct: bool = False):
        self.reducers = list(reducers)
        self.regressors = list(regressors)
        self.direct = direct

    def reducer(self, stage):
        return self.reducers[stage - 1]

    def __call__(self, stage, feature, state, bbox):
        trans = state.T if self.direct else state.c
        x = regressor_input(feature, state.rot6d, trans, state.V_sub, bbox.normalized())
        return split_output(self.regressors[stage - 1](x))


class DirectTranslationRegressor(LearnedRegressor):
    """Ablation variant: predicts translation residuals directly, bypassing correction params."""

    def __init__(self, reducers, regressors):
        super().__init__(reducers, regressors, direct=True)


def initial_state(init: InitialState, bbox: BBoxInfo, K: CameraIntrinsics, direct: bool = False) -> RegressorState:
    side = feature_map_size(1)
    P0 = feature_to_image(grid_points(side, side), side)
    if direct:
        if init.T is None:
            raise ValueError("direct-translation runs need an initial translation")
        T = np.array(init.T, dtype=np.float64)
        c = _safe_correction(T, bbox)
    else:
        c = np.array(init.c, dtype=np.float64)
        T = translation_from_correction_array(c, (bbox.tau_x, bbox.tau_y), bbox.b, bbox.f)
    return RegressorState(0, np.array(init.rot6d, dtype=np.float64), c, T, np.array(init.V), P0)


def _safe_correction(T, bbox):
    if T[2] <= 0:
        return np.full(3, np.nan)
    return correction_from_translation_array(T, (bbox.tau_x, bbox.tau_y), bbox.b, bbox.f)


def regress_step(state: RegressorState, fmap: FeatureMap, reg: Regressor, bbox: BBoxInfo,
                 K: CameraIntrinsics) -> RegressorState:
    if state.t >= 3:
        raise ValueError("refinement already finished three iterations")
    stage = state.t + 1
    try:
        feature = build_aligned_feature(fmap, image_to_feature(state.P, fmap.width), reg.reducer(stage))
        res = reg(stage, feature, state, bbox)
        rot6d = state.rot6d + res.rot6d
        V = state.V + res.V
        if reg.direct:
            T = state.T + res.trans
            c = _safe_correction(T, bbox)
        else:
            c = state.c + res.trans
            T = translation_from_correction_array(c, (bbox.tau_x, bbox.tau_y), bbox.b, bbox.f)
        R = rot6d_to_matrix(rot6d)
        V_img = project_to_crop(V, R, T, crop_context(bbox, K))
    except HeadPoseError as exc:
        exc.iteration = stage
        if isinstance(exc, BehindCamera):
            raise
        raise type(exc)(f"iteration {stage}: {exc}") from exc
    return RegressorState(stage, rot6d, c, T, V, subsample_landmarks(V_img))


def run_refinement(init: InitialState, maps: Sequence[FeatureMap], reg: Regressor, bbox: BBoxInfo,
                   K: CameraIntrinsics, iterations: int = 3, gt=None):
    """Run `iterations` regress steps from the initial state.

    Returns (final_state, trace). The trace has one record per state,
    starting with the initial one; with ``gt`` (a SceneSample) each record
    also carries the per-space landmark losses of that state.
    """
    if not 1 <= iterations <= 3:
        raise ValueError(f"iterations must be 1..3, got {iterations}")
    state = initial_state(init, bbox, K, direct=reg.direct)
    trace = [trace_record(state, bbox, K, gt)]
    for _ in range(iterations):
        state = regress_step(state, maps[state.t], reg, bbox, K)
        trace.append(trace_record(state, bbox, K, gt))
    return state, trace


def trace_record(state: RegressorState, bbox: BBoxInfo, K: CameraIntrinsics, gt=None) -> dict:
    rec = {
        "t": state.t,
        "rot6d": state.rot6d.tolist(),
        "c": state.c.tolist(),
        "T": state.T.tolist(),
    }
    if gt is not None:
        R = state.R
        Vc = R @ state.V + state.T[:, None]
        Vi = project_to_crop(state.V, R, state.T, crop_context(bbox, K))
        rec["loss_head"] = float(np.abs(state.V - gt.V_star).sum(axis=0).mean())
        rec["loss_cam"] = float(np.abs(Vc - gt.V_cam).sum(axis=0).mean())
        rec["loss_img"] = float(np.abs(Vi - gt.V_img).sum(axis=0).mean())
        rec["loss_rot"] = float(np.linalg.norm(R - gt.R_star))
    return rec


def write_trace(path, trace: list[dict]) -> None:
    """JSON lines, one record per iteration."""
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
