"""Batched end-to-end training of the per-stage reducer and regressor networks.

The forward pass mirrors ``refinement.regress_step`` on a whole batch; the
backward pass is written out by hand. Gradients flow through the residual
chain, the regressor inputs, all loss terms and the bilinear sampling
positions (which depend on the previous stage's projected landmarks).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import (
    CropContext, LossWeights, edge_pairs, image_grad_backward, iteration_weight, sparse_loss_grad,
    stage_loss_grad,
)
from .nn import Adam, DenseNet, backward, forward, kink_signature, load_networks, save_networks
from .refinement import (
    INPUT_V_SCALE, N_SUB, OUTPUT_SCALES, SUB_IDX, InitialState, LearnedRegressor,
    regressor_dims, regressor_input, split_output,
)
from .sampling import (
    N_GRID_POINTS, feature_map_size, feature_to_image, grid_points, sample_points, sample_points_backward,
    soft_argmax, soft_argmax_backward,
)
from .scenes import N_VERTICES, TRIANGLES, SceneSet

log = logging.getLogger(__name__)

EDGES = edge_pairs(TRIANGLES)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 3
    direct: bool = False
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    decay_epoch: int | None = 20
    hidden: int = 128
    reducer_hidden: tuple = (16,)
    final_scale: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reducer_hidden"] = list(self.reducer_hidden)
        return d


@dataclass
class Model:
    reg: LearnedRegressor
    init: InitialState
    iterations: int
    channels: int

    @property
    def direct(self) -> bool:
        return self.reg.direct

    def networks(self) -> list[DenseNet]:
        nets = []
        for red, reg in zip(self.reg.reducers, self.reg.regressors):
            nets += [red, reg]
        return nets

    def params(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.params()]

    def save(self, path, extra: dict | None = None) -> None:
        nets = {}
        for i, (red, reg) in enumerate(zip(self.reg.reducers, self.reg.regressors), start=1):
            nets[f"reducer{i}"] = red
            nets[f"regressor{i}"] = reg
        meta = {
            "iterations": self.iterations,
            "direct": self.direct,
            "channels": self.channels,
            "init_rot6d": self.init.rot6d.tolist(),
            "init_V": self.init.V.T.tolist(),
            "init_T": None if self.init.T is None else self.init.T.tolist(),
        }
        meta.update(extra or {})
        save_networks(path, nets, meta)

    @classmethod
    def load(cls, path) -> "Model":
        nets, meta = load_networks(path)
        n = meta["iterations"]
        reds = [nets[f"reducer{i}"] for i in range(1, n + 1)]
        regs = [nets[f"regressor{i}"] for i in range(1, n + 1)]
        init = InitialState(
            np.array(meta["init_rot6d"]), np.array(meta["init_V"]).T.copy(),
            T=None if meta["init_T"] is None else np.array(meta["init_T"]),
        )
        return cls(LearnedRegressor(reds, regs, direct=meta["direct"]), init, n, meta["channels"])


def build_model(cfg: TrainConfig, channels: int, init: InitialState, rng: np.random.Generator) -> Model:
    reds, regs = [], []
    for stage in range(1, cfg.iterations + 1):
        n_points = N_GRID_POINTS if stage == 1 else N_SUB
        n_in, n_out = regressor_dims(n_points)
        reds.append(DenseNet.create([channels, *cfg.reducer_hidden, 5], rng))
        regs.append(DenseNet.create([n_in, cfg.hidden, cfg.hidden, n_out], rng, final_scale=cfg.final_scale))
    return Model(LearnedRegressor(reds, regs, direct=cfg.direct), init, cfg.iterations, channels)


def initial_from(data: SceneSet, index: int = 0) -> InitialState:
    s = data.samples[index]
    return InitialState.from_pose(s.R_star, s.V_star, T=s.T_star)


@dataclass
class PassResult:
    loss: float
    per_sample: np.ndarray
    grads: list | None
    kinks: np.ndarray
    outputs: list  # per stage dict(rot6d, trans, V)


def run_batch(model: Model, A: dict, w: LossWeights, need_grad: bool = True,
              heat: np.ndarray | None = None, L_star: np.ndarray | None = None,
              want_kinks: bool = False) -> PassResult:
    """Forward (and backward) pass over a batch of stacked arrays from ``SceneSet.arrays``.

    With ``heat``/``L_star`` the sparse landmark term on soft-argmax output is
    added; its gradient wrt the heatmap logits is appended to the grads.
    """
    B = A["b"].shape[0]
    n = model.iterations
    direct = model.direct
    ctx = CropContext(A["f"], A["cx"], A["cy"], A["tau"], A["b"])
    gt = {k: A[k] for k in ("V", "R", "T", "V_cam", "V_img")}
    bbox3 = np.stack([A["tau"][:, 0] / A["f"], A["tau"][:, 1] / A["f"], A["b"] / A["f"]], axis=-1)

    r6 = np.tile(model.init.rot6d, (B, 1))
    tr = np.tile(model.init.T if direct else model.init.c, (B, 1))
    V = np.tile(model.init.V, (B, 1, 1))
    side1 = feature_map_size(1)
    P = np.tile(feature_to_image(grid_points(side1, side1), side1), (B, 1, 1))

    scale = 1.0 / B
    stages, kinks, outputs = [], [], []
    per_sample = np.zeros(B)
    for t in range(1, n + 1):
        side = feature_map_size(t)
        maps = A["maps"][t - 1]
        Pf = P * (side / 192.0)
        F = sample_points(maps, Pf)
        Np = F.shape[1]
        red, reg = model.reg.reducers[t - 1], model.reg.regressors[t - 1]
        z, red_cache = forward(red, F.reshape(B * Np, -1))
        feat = z.reshape(B, 5 * Np)
        x = regressor_input(feat, r6, tr, V[..., SUB_IDX], bbox3)
        y, reg_cache = forward(reg, x)
        res = split_output(y)
        r6, tr, V = r6 + res.rot6d, tr + res.trans, V + res.V
        sg = stage_loss_grad(
            r6, tr, V, ctx, gt, iteration_weight(t, n), w,
            edges=EDGES if t == n else None, direct=direct, scale=scale,
        )
        per_sample += sg.loss
        P = sg.V_img[..., SUB_IDX]
        stages.append((red, reg, red_cache, reg_cache, sg, Np, maps, Pf))
        if want_kinks:
            # texel-cell membership of each sampling point is a kink of bilinear sampling
            kinks += [np.floor(Pf).ravel(), kink_signature(red, red_cache), kink_signature(reg, reg_cache), sg.kinks]
        outputs.append({"rot6d": r6, "trans": tr, "V": V})

    heat_grad = None
    if heat is not None:
        L = soft_argmax(heat) * (192.0 / heat.shape[-1])
        ls, gL, kL = sparse_loss_grad(L, L_star, scale=scale * w.sparse)
        per_sample += w.sparse * ls
        if want_kinks:
            kinks.append(kL.ravel())
        if need_grad:
            heat_grad = soft_argmax_backward(heat, gL * (192.0 / heat.shape[-1]))

    grads = None
    if need_grad:
        grads_by_stage = [None] * n
        G6 = np.zeros_like(r6)
        G3 = np.zeros_like(tr)
        GV = np.zeros_like(V)
        for t in range(n, 0, -1):
            red, reg, red_cache, reg_cache, sg, Np, maps, Pf = stages[t - 1]
            G6 = G6 + sg.d_rot6d
            G3 = G3 + sg.d_trans
            GV = GV + sg.d_V
            dy = np.concatenate(
                [
                    G6 * OUTPUT_SCALES["rot6d"],
                    G3 * OUTPUT_SCALES["trans"],
                    np.swapaxes(GV, -1, -2).reshape(B, -1) * OUTPUT_SCALES["V"],
                ],
                axis=-1,
            )
            g_reg, dx = backward(reg, reg_cache, dy)
            k = 5 * Np
            g_red, dF = backward(red, red_cache, dx[:, :k].reshape(B * Np, 5))
            grads_by_stage[t - 1] = g_red + g_reg
            G6 = G6 + dx[:, k : k + 6]
            G3 = G3 + dx[:, k + 6 : k + 9]
            dVs = dx[:, k + 9 : k + 9 + 3 * N_SUB].reshape(B, N_SUB, 3)
            GV = GV.copy()
            GV[..., SUB_IDX] += np.swapaxes(dVs, -1, -2) * INPUT_V_SCALE
            if t > 1:
                # sampling points of this stage are the previous stage's projected landmarks
                side = maps.shape[-1]
                dP = sample_points_backward(maps, Pf, dF.reshape(B, Np, -1)) * (side / 192.0)
                g_img = np.zeros((B, 2, N_VERTICES))
                g_img[..., SUB_IDX] = dP
                prev = outputs[t - 2]
                d6, d3, dV = image_grad_backward(prev["rot6d"], prev["trans"], prev["V"], ctx, g_img, direct)
                G6, G3, GV = G6 + d6, G3 + d3, GV + dV
        grads = [g for gs in grads_by_stage for g in gs]
        if heat_grad is not None:
            grads.append(heat_grad)

    return PassResult(float(per_sample.mean()), per_sample, grads, np.concatenate(kinks) if kinks else np.zeros(0), outputs)


def subset(A: dict, idx) -> dict:
    out = {k: v[idx] for k, v in A.items() if k != "maps"}
    out["maps"] = [m[idx] for m in A["maps"]]
    return out


def train(cfg: TrainConfig, data: SceneSet, model: Model | None = None, arrays: dict | None = None):
    """Train on a scene set; returns (model, history of per-epoch mean losses)."""
    rng = np.random.default_rng((cfg.seed, 11))
    if model is None:
        model = build_model(cfg, data.config.channels, initial_from(data), rng)
    A = data.arrays() if arrays is None else arrays
    opt = Adam(lr=cfg.lr, decay_epoch=cfg.decay_epoch)
    params = model.params()
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            res = run_batch(model, subset(A, idx), cfg.weights)
            opt.step(params, res.grads)
            total += res.loss * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.6f", epoch, history[-1])
    return model, history
