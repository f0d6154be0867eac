"""Training objective: landmark losses in three spaces, rotation, edge length, sparse 2D.

Image-space quantities are measured in pixels of the 192x192 box crop.
Per-iteration terms are weighted 2**(t - n_iter), so the final iteration
counts fully and each earlier one half as much as the next.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .bbox import BBoxInfo, CROP_SIZE, to_crop_pixels, translation_from_correction_array, translation_from_correction_backward
from .errors import IndexOutOfRange, ShapeMismatch
from .geometry import CameraIntrinsics, project_camera_points, rot6d_to_matrix, rot6d_to_matrix_backward


@dataclass(frozen=True)
class LossWeights:
    head: float = 20.0
    cam: float = 2.0
    img: float = 0.01
    rot: float = 10.0
    edge: float = 2.0
    sparse: float = 1.25

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")


def iteration_weight(t: int, n_iter: int = 3) -> float:
    return 2.0 ** (t - n_iter)


@dataclass(frozen=True)
class CropContext:
    """Everything needed to map camera points into crop pixels (batched or not)."""

    f: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    tau: np.ndarray  # (..., 2)
    b: np.ndarray

    @classmethod
    def of(cls, K: CameraIntrinsics, bbox: BBoxInfo) -> "CropContext":
        return cls(
            np.float64(K.f), np.float64(K.cx), np.float64(K.cy),
            np.array([bbox.tau_x, bbox.tau_y]), np.float64(bbox.b),
        )

    def project(self, Xcam: np.ndarray) -> np.ndarray:
        uv = project_camera_points(Xcam, self.f, self.cx, self.cy)
        return to_crop_pixels(uv, self.tau, self.b, self.cx, self.cy)


@dataclass
class GroundTruth:
    V: np.ndarray  # (3, N) head space
    R: np.ndarray
    T: np.ndarray
    V_cam: np.ndarray
    V_img: np.ndarray  # (2, N) crop pixels
    L: np.ndarray  # (2, 68) crop pixels
    triangles: np.ndarray  # (M, 3)

    def __post_init__(self):
        n = self.V.shape[-1]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise IndexOutOfRange("triangle index outside vertex range")


@dataclass
class IterationOutputs:
    V: list  # per iteration (3, N)
    R: list  # per iteration (3, 3)
    T: list  # per iteration (3,)
    ctx: CropContext = field(repr=False)

    def __post_init__(self):
        if not (len(self.V) == len(self.R) == len(self.T)):
            raise ShapeMismatch("per-iteration lists differ in length")

    @property
    def V_cam(self) -> list:
        return [R @ V + np.asarray(T)[:, None] for V, R, T in zip(self.V, self.R, self.T)]

    @property
    def V_img(self) -> list:
        return [self.ctx.project(X) for X in self.V_cam]


def _l1_mean(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} vs ground truth {b.shape}")
    return np.abs(a - b).sum(axis=-2).mean(axis=-1)


def landmark_coordinate_losses(out: IterationOutputs, gt: GroundTruth) -> tuple[float, float, float]:
    n = len(out.V)
    heads = cams = imgs = 0.0
    for t, (V, Vc, Vi) in enumerate(zip(out.V, out.V_cam, out.V_img), start=1):
        w = iteration_weight(t, n)
        heads += w * _l1_mean(V, gt.V)
        cams += w * _l1_mean(Vc, gt.V_cam)
        imgs += w * _l1_mean(Vi, gt.V_img)
    return float(heads), float(cams), float(imgs)


def rotation_loss(out: IterationOutputs, gt: GroundTruth) -> float:
    n = len(out.R)
    total = 0.0
    for t, R in enumerate(out.R, start=1):
        if np.shape(R) != (3, 3):
            raise ShapeMismatch(f"rotation must be 3x3, got {np.shape(R)}")
        total += iteration_weight(t, n) * np.linalg.norm(R - gt.R)
    return float(total)


def _edges(triangles):
    tri = np.asarray(triangles)
    return np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])


def edge_length_loss(V3: np.ndarray, gt: GroundTruth) -> float:
    """Sum over triangles and their three vertex pairs of |len_pred - len_gt|.

    Edges shared by two triangles are counted once per triangle.
    """
    e = _edges(gt.triangles)
    n = V3.shape[-1]
    if e.size and (e.min() < 0 or e.max() >= n):
        raise IndexOutOfRange("triangle index outside vertex range")
    lp = np.linalg.norm(V3[:, e[:, 0]] - V3[:, e[:, 1]], axis=0)
    lg = np.linalg.norm(gt.V[:, e[:, 0]] - gt.V[:, e[:, 1]], axis=0)
    return float(np.abs(lp - lg).sum())


def sparse_landmark_loss(L: np.ndarray, L_star: np.ndarray) -> float:
    return float(_l1_mean(np.asarray(L), np.asarray(L_star)))


def total_loss(parts: dict, w: LossWeights = LossWeights()) -> float:
    """Weighted sum; ``parts`` maps head/cam/img/rot/edge/sparse to values (missing = 0)."""
    return float(
        w.head * parts.get("head", 0.0)
        + w.cam * parts.get("cam", 0.0)
        + w.img * parts.get("img", 0.0)
        + w.rot * parts.get("rot", 0.0)
        + w.edge * parts.get("edge", 0.0)
        + w.sparse * parts.get("sparse", 0.0)
    )


# ---------------------------------------------------------------------------
# Array-level value + gradient, used by training and the gradient checks.
# Leading batch dimensions are allowed everywhere; returned losses are
# per sample and gradients are of sum(scale * loss).
# ---------------------------------------------------------------------------


@dataclass
class StageGrad:
    loss: np.ndarray
    parts: dict
    d_rot6d: np.ndarray
    d_trans: np.ndarray  # wrt correction params, or wrt T in direct mode
    d_V: np.ndarray
    kinks: np.ndarray
    V_img: np.ndarray


def stage_loss_grad(
    rot6d, trans, V, ctx: CropContext, gt: dict, weight: float, w: LossWeights,
    edges: np.ndarray | None = None, direct: bool = False, scale: float = 1.0,
) -> StageGrad:
    """Loss terms of one iteration and their gradients.

    ``trans`` holds correction parameters (s, tx~, ty~), or the translation
    itself when ``direct`` is set. ``gt`` carries arrays V, R, T, V_cam, V_img.
    ``edges`` (pairs of vertex indices) switches on the edge-length term.
    """
    R = rot6d_to_matrix(rot6d)
    if direct:
        T = np.asarray(trans, dtype=np.float64)
    else:
        T = translation_from_correction_array(trans, ctx.tau, ctx.b, ctx.f)
    N = V.shape[-1]
    Vc = R @ V + T[..., :, None]
    Vi = ctx.project(Vc)

    dh = V - gt["V"]
    dc = Vc - gt["V_cam"]
    di = Vi - gt["V_img"]
    D = R - gt["R"]
    nD = np.sqrt(np.sum(D * D, axis=(-2, -1)))

    l_head = np.abs(dh).sum(axis=-2).mean(axis=-1)
    l_cam = np.abs(dc).sum(axis=-2).mean(axis=-1)
    l_img = np.abs(di).sum(axis=-2).mean(axis=-1)
    parts = {"head": weight * l_head, "cam": weight * l_cam, "img": weight * l_img, "rot": weight * nD}
    kink_parts = [dh > 0, dc > 0, di > 0]

    gV = scale * weight * w.head / N * np.sign(dh)
    gVc = scale * weight * w.cam / N * np.sign(dc)
    gi = scale * weight * w.img / N * np.sign(di)

    # crop projection u = k (f X / Z + cx - x0), k = 192 / b
    k = CROP_SIZE / np.asarray(ctx.b, dtype=np.float64)
    kf = (k * ctx.f)[..., None]
    X, Y, Z = Vc[..., 0, :], Vc[..., 1, :], Vc[..., 2, :]
    gu, gv = gi[..., 0, :], gi[..., 1, :]
    gVc = gVc + np.stack(
        [gu * kf / Z, gv * kf / Z, -(gu * X + gv * Y) * kf / (Z * Z)], axis=-2
    )

    gR = gVc @ np.swapaxes(V, -1, -2)
    safe = np.where(nD > 0, nD, 1.0)
    gR = gR + (scale * weight * w.rot * np.where(nD > 0, 1.0, 0.0) / safe)[..., None, None] * D
    gV = gV + np.swapaxes(R, -1, -2) @ gVc
    gT = gVc.sum(axis=-1)

    l_edge = np.zeros_like(l_head)
    if edges is not None:
        D, Dt = _edge_operator(edges, N)
        ep = _apply_right(V, Dt)
        eg = _apply_right(gt["V"], Dt)
        lp = _col_norm(ep)
        lg = _col_norm(eg)
        de = lp - lg
        l_edge = np.abs(de).sum(axis=-1)
        parts["edge"] = l_edge
        kink_parts.append(de > 0)
        ge = (scale * w.edge * np.sign(de) / lp)[..., None, :] * ep
        gV = gV + _apply_right(ge, D)

    loss = (
        w.head * parts["head"] + w.cam * parts["cam"] + w.img * parts["img"]
        + w.rot * parts["rot"] + w.edge * l_edge
    )
    d_rot6d = rot6d_to_matrix_backward(rot6d, gR)
    if direct:
        d_trans = gT
    else:
        d_trans = translation_from_correction_backward(trans, ctx.tau, ctx.b, ctx.f, gT)
    kinks = np.concatenate([np.ravel(k) for k in kink_parts])
    return StageGrad(loss, parts, d_rot6d, d_trans, gV, kinks, Vi)


def _col_norm(x):
    # faster than np.linalg.norm over a short middle axis
    return np.sqrt(x[..., 0, :] ** 2 + x[..., 1, :] ** 2 + x[..., 2, :] ** 2)


_EDGE_OPS: dict = {}


def _edge_operator(edges: np.ndarray, n: int):
    """Sparse signed incidence D (E x n) with D @ v = v[e0] - v[e1], and its transpose."""
    key = (n, edges.shape, hash(np.ascontiguousarray(edges).tobytes()))
    if key not in _EDGE_OPS:
        E = edges.shape[0]
        rows = np.repeat(np.arange(E), 2)
        cols = edges.ravel()
        vals = np.tile([1.0, -1.0], E)
        D = sparse.csr_matrix((vals, (rows, cols)), shape=(E, n))
        _EDGE_OPS[key] = (D, D.T.tocsr())
    return _EDGE_OPS[key]


def _apply_right(X: np.ndarray, M) -> np.ndarray:
    """X (..., k) @ M (k, m) for a sparse M, keeping leading dims."""
    flat = X.reshape(-1, X.shape[-1])
    return np.asarray((M.T @ flat.T).T).reshape(X.shape[:-1] + (M.shape[1],))


def image_grad_backward(rot6d, trans, V, ctx: CropContext, g_img, direct: bool = False):
    """Pull an upstream gradient on crop-pixel landmarks (..., 2, N) back to (rot6d, trans, V)."""
    R = rot6d_to_matrix(rot6d)
    if direct:
        T = np.asarray(trans, dtype=np.float64)
    else:
        T = translation_from_correction_array(trans, ctx.tau, ctx.b, ctx.f)
    Vc = R @ V + T[..., :, None]
    k = CROP_SIZE / np.asarray(ctx.b, dtype=np.float64)
    kf = (k * ctx.f)[..., None]
    X, Y, Z = Vc[..., 0, :], Vc[..., 1, :], Vc[..., 2, :]
    gu, gv = g_img[..., 0, :], g_img[..., 1, :]
    gVc = np.stack([gu * kf / Z, gv * kf / Z, -(gu * X + gv * Y) * kf / (Z * Z)], axis=-2)
    gR = gVc @ np.swapaxes(V, -1, -2)
    gV = np.swapaxes(R, -1, -2) @ gVc
    gT = gVc.sum(axis=-1)
    d_rot6d = rot6d_to_matrix_backward(rot6d, gR)
    if direct:
        d_trans = gT
    else:
        d_trans = translation_from_correction_backward(trans, ctx.tau, ctx.b, ctx.f, gT)
    return d_rot6d, d_trans, gV


def sparse_loss_grad(L, L_star, scale: float = 1.0):
    """Value and gradient of the sparse landmark L1 term."""
    d = np.asarray(L) - np.asarray(L_star)
    n = d.shape[-1]
    return np.abs(d).sum(axis=-2).mean(axis=-1), scale * np.sign(d) / n, d > 0


def edge_pairs(triangles: np.ndarray) -> np.ndarray:
    return _edges(triangles)
