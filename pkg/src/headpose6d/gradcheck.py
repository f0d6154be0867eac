"""Finite-difference oracle for the full training objective.

Each configuration is a fresh synthetic scene, tiny randomly initialised
networks and random heatmap logits; the analytic gradient from
``training.run_batch`` (through the networks, sampling positions,
projection, the correction-to-translation map and soft-argmax) is compared
with central differences on a stratified sample of coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import LossWeights
from .nn import FDResult, finite_difference_check, flatten, unflatten
from .scenes import generate, scenario
from .training import TrainConfig, build_model, initial_from, run_batch, subset


@dataclass
class GradientReport:
    configs: int
    max_rel_error: float
    checked: int
    excluded: int
    unresolved: int
    unresolved_failures: int
    seconds: float
    worst_config: int | None

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol and self.unresolved_failures == 0


class _Probe:
    """Evaluates run_batch once per point and serves both value and kinks."""

    def __init__(self, model, A, w, like, L_star):
        self.model, self.A, self.w, self.like, self.L_star = model, A, w, like, L_star
        self.params = model.params()
        self._memo = {}

    def _set(self, x):
        arrs = unflatten(x, self.like)
        for p, a in zip(self.params, arrs[:-1]):
            p[...] = a
        return arrs[-1]

    def run(self, x, need_grad=False):
        key = x.tobytes()
        if not need_grad and key in self._memo:
            return self._memo[key]
        heat = self._set(x)
        res = run_batch(self.model, self.A, self.w, need_grad, heat, self.L_star, want_kinks=True)
        if len(self._memo) > 4:
            self._memo.clear()
        self._memo[key] = res
        return res

    def grad(self, x):
        res = self.run(x, need_grad=True)
        return res.loss, flatten(res.grads)

    def value(self, x):
        return self.run(x).loss

    def kinks(self, x):
        return self.run(x).kinks


def check_configuration(k: int, seed: int = 0, coords: int = 24, step: float = 1e-4,
                        tol: float = 1e-5) -> FDResult:
    rng = np.random.default_rng((seed, 31, k))
    direct = bool(k % 4 == 3)
    cfg = scenario("near", seed=int(rng.integers(2**31)), n_samples=1, channels=5, n_templates=1)
    data = generate(cfg)
    tc = TrainConfig(hidden=4, reducer_hidden=(4, 3), final_scale=1.0, direct=direct)
    model = build_model(tc, cfg.channels, initial_from(data, 0), rng)
    # start away from the ground truth so every loss term is active
    model.init = type(model.init)(
        model.init.rot6d + 0.05 * rng.normal(size=6),
        model.init.V + 0.002 * rng.normal(size=model.init.V.shape),
        model.init.c + np.array([0.05, 0.05, -0.05]),
        model.init.T + 0.01 * rng.normal(size=3),
    )
    A = subset(data.arrays(), [0])
    heat = 2.0 * rng.normal(size=(1, 68, 48, 48))
    like = model.params() + [heat]
    probe = _Probe(model, A, LossWeights(), like, data.samples[0].L_star[None])
    x0 = flatten(like)
    # stratify: one coordinate from each of a rotating window of parameter groups
    bounds = np.concatenate([[0], np.cumsum([a.size for a in like])])
    groups = [(k * coords + j) % len(like) for j in range(coords)]
    picks = [int(rng.integers(bounds[g], bounds[g + 1])) for g in groups]
    return finite_difference_check(probe.grad, x0, step, picks, probe.kinks, probe.value, tol)


def pipeline_gradient_check(n_configs: int = 100, seed: int = 0, coords: int = 24,
                            step: float = 1e-4, tol: float = 1e-5) -> GradientReport:
    t0 = time.perf_counter()
    worst, worst_k = 0.0, None
    checked = excluded = unresolved = failures = 0
    for k in range(n_configs):
        r = check_configuration(k, seed, coords, step, tol)
        if r.max_rel_error > worst:
            worst, worst_k = r.max_rel_error, k
        checked += r.checked
        excluded += len(r.excluded)
        unresolved += r.unresolved
        failures += len(r.unresolved_failures)
    return GradientReport(n_configs, worst, checked, excluded, unresolved, failures,
                          time.perf_counter() - t0, worst_k)
