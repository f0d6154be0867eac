"""Minimal dense network with analytic backprop, Adam, and a finite-difference oracle.

Everything runs in float64. Inputs are row vectors: a batch is (B, in).

Checkpoint format (``save_networks`` / ``load_networks``): a NumPy ``.npz``
archive. Key ``meta`` holds a UTF-8 JSON document as a uint8 array::

    {"format": "headpose6d-densenet", "version": 1,
     "networks": {name: [{"in": int, "out": int, "activation": str}, ...]},
     "extra": {...}}

and for every network ``name`` and layer ``i`` the arrays ``{name}/W{i}``
(out x in, row-major float64) and ``{name}/b{i}`` (out,).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import IoFailure, ShapeMismatch, StaleCache

LEAKY_SLOPE = 0.01
CHECKPOINT_FORMAT = "headpose6d-densenet"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"  # or "leaky_relu"


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ShapeMismatch(f"layer dims do not chain: {a.W.shape} -> {b.W.shape}")
        if self.layers and self.layers[-1].activation != "identity":
            raise ValueError("final layer must be linear")

    @classmethod
    def create(
        cls, sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0
    ) -> "DenseNet":
        """Leaky-ReLU hidden layers, linear output, Glorot-uniform weights, zero bias."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-lim, lim, size=(n_out, n_in))
            last = i == len(sizes) - 2
            if last:
                W *= final_scale
            layers.append(Layer(W, np.zeros(n_out), "identity" if last else "leaky_relu"))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def layout(self) -> list[dict]:
        return [
            {"in": l.W.shape[1], "out": l.W.shape[0], "activation": l.activation}
            for l in self.layers
        ]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def _act(z, kind):
    if kind == "leaky_relu":
        return np.maximum(z, LEAKY_SLOPE * z)
    return z


def _dact(z, kind):
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


def forward(net: DenseNet, x: np.ndarray):
    """Returns (y, cache); cache keeps layer inputs and pre-activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, network expects {net.in_dim}")
    inputs, pres = [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.W.T + layer.b
        pres.append(z)
        a = _act(z, layer.activation)
    return a, {"inputs": inputs, "pres": pres}


def backward(net: DenseNet, cache: dict, dy: np.ndarray):
    """Returns (grads, dx) with grads aligned to net.params().

    Batched inputs accumulate parameter gradients over the batch.
    """
    if len(cache["inputs"]) != len(net.layers):
        raise StaleCache("cache does not belong to this network")
    for layer, z in zip(net.layers, cache["pres"]):
        if z.shape[-1] != layer.W.shape[0]:
            raise StaleCache("cache shapes disagree with current layers")
    g = np.asarray(dy, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation != "identity":
            g = g * _dact(cache["pres"][i], layer.activation)
        a_in = cache["inputs"][i]
        if g.ndim == 1:
            grads[2 * i] = np.outer(g, a_in)
            grads[2 * i + 1] = g.copy()
        else:
            g2 = g.reshape(-1, g.shape[-1])
            a2 = a_in.reshape(-1, a_in.shape[-1])
            grads[2 * i] = g2.T @ a2
            grads[2 * i + 1] = g2.sum(axis=0)
        g = g @ layer.W
    return grads, g


def kink_signature(net: DenseNet, cache: dict) -> np.ndarray:
    """Sign pattern of every leaky-ReLU pre-activation (for kink detection)."""
    parts = [
        (z > 0).ravel() for layer, z in zip(net.layers, cache["pres"]) if layer.activation == "leaky_relu"
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction and a step decay schedule."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_epoch: int | None = None
    decay_factor: float = 0.1
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    base_lr: float | None = None

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.lr

    def set_epoch(self, epoch: int) -> None:
        if self.decay_epoch is not None and epoch >= self.decay_epoch:
            self.lr = self.base_lr * self.decay_factor
        else:
            self.lr = self.base_lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place parameter update."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ShapeMismatch("parameter list does not match optimizer state")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        step = self.lr / c1
        root_c2 = np.sqrt(c2)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            tmp = np.square(g)
            tmp *= 1.0 - self.beta2
            v += tmp
            # (m / c1) / (sqrt(v / c2) + eps), with fewer temporaries
            np.sqrt(v, out=tmp)
            tmp /= root_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step
            p -= tmp


@dataclass
class FDResult:
    max_rel_error: float  # over coordinates the difference quotient can resolve
    checked: int
    excluded: list[int]
    worst_index: int | None = None
    unresolved: int = 0  # missed tol but below the round-off floor, checked in absolute terms
    unresolved_failures: list[int] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol and not self.unresolved_failures


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-4,
    coords: Sequence[int] | None = None,
    kinks: Callable[[np.ndarray], np.ndarray] | None = None,
    value: Callable[[np.ndarray], float] | None = None,
    tol: float = 1e-5,
) -> FDResult:
    """Compare f's analytic gradient with central differences.

    f returns (value, gradient) for a flat parameter vector; ``value`` is an
    optional cheaper value-only version. Coordinates where ``kinks`` reports a
    different sign pattern at x+h and x-h straddle a non-differentiable point
    and are excluded rather than failed.

    The error is |a - n| / max(1e-12, |a| + |n|). A difference quotient
    carries round-off of about eps |f| / h, so components too small for that
    to be below tol / 10 in relative terms cannot be resolved. When such a
    component misses tol, it must instead agree to within the round-off.
    """
    x = np.array(params, dtype=np.float64).ravel()
    f0, grad = f(x)
    value = value or (lambda v: f(v)[0])
    grad = np.asarray(grad, dtype=np.float64).ravel()
    idx = range(x.size) if coords is None else coords
    worst, worst_i, checked, excluded = 0.0, None, 0, []
    unresolved, bad = 0, []
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        if kinks is not None and not np.array_equal(kinks(xp), kinks(xm)):
            excluded.append(int(i))
            continue
        fp, fm = value(xp), value(xm)
        num = (fp - fm) / (2 * step)
        a = grad[i]
        checked += 1
        err = abs(a - num) / max(1e-12, abs(a) + abs(num))
        noise = np.finfo(np.float64).eps * max(1.0, abs(fp), abs(fm), abs(f0)) / step
        if err >= tol and max(abs(a), abs(num)) * tol / 10 < noise:
            unresolved += 1
            if abs(a - num) > noise:
                bad.append(int(i))
            continue
        if err > worst:
            worst, worst_i = err, int(i)
    return FDResult(worst, checked, excluded, worst_i, unresolved, bad)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, k = [], 0
    for a in like:
        out.append(vec[k : k + a.size].reshape(a.shape))
        k += a.size
    return out


def save_networks(path, nets: dict[str, DenseNet], extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": {name: net.layout() for name, net in nets.items()},
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, net in nets.items():
        for i, layer in enumerate(net.layers):
            arrays[f"{name}/W{i}"] = layer.W
            arrays[f"{name}/b{i}"] = layer.b
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_networks(path) -> tuple[dict[str, DenseNet], dict]:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(bytes(data["meta"]).decode())
    except (KeyError, ValueError) as exc:
        raise IoFailure(f"{path} carries no checkpoint metadata") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise IoFailure(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    nets = {}
    for name, layout in meta["networks"].items():
        layers = [
            Layer(data[f"{name}/W{i}"].copy(), data[f"{name}/b{i}"].copy(), s["activation"])
            for i, s in enumerate(layout)
        ]
        nets[name] = DenseNet(layers)
    return nets, meta["extra"]
