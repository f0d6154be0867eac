"""Self-verification suite: every module's invariants measured against tolerances.

``verify_suite`` returns one ``Check`` per invariant. Each check records the
module, what the property is, the measured value and the tolerance, and
whether it passed. ``overrides`` lets a test replace a function under
check, which is how the mutation canary proves the suite can fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bbox as bb
from . import geometry as geo
from . import metrics as mt
from .gradcheck import pipeline_gradient_check
from .losses import iteration_weight
from .nn import DenseNet, backward, finite_difference_check, flatten, forward, kink_signature, unflatten
from .refinement import InitialState, OracleRegressor, initial_state, regress_step, run_refinement
from .sampling import sample_points, soft_argmax, soft_argmax_backward
from .scenes import TRIANGLES, generate, make_face_template, scenario


@dataclass(frozen=True)
class Check:
    module: str
    name: str
    anchor: str  # the property being exercised, in words
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.module:<17} {self.name:<34} measured={self.measured:.3e} "
                f"tol={self.tolerance:.1e}  [{self.anchor}]")


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def _random_translation_bbox(rng, n):
    T = np.stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), rng.uniform(0.2, 5.0, n)], -1)
    tau = rng.uniform(-600, 600, size=(n, 2))
    b = rng.uniform(20, 800, n)
    f = rng.uniform(300, 2000, n)
    return T, tau, b, f


def check_correction_round_trip(forward_fn=None, n: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Max per-sample relative error of T -> c -> T and c -> T -> c over n random (T, bbox)."""
    fwd = forward_fn or bb.translation_from_correction_array
    rng = np.random.default_rng(seed)
    T, tau, b, f = _random_translation_bbox(rng, n)
    t0 = time.perf_counter()
    c = bb.correction_from_translation_array(T, tau, b, f)
    T2 = fwd(c, tau, b, f)
    c2 = bb.correction_from_translation_array(T2, tau, b, f)
    secs = time.perf_counter() - t0
    err = max(_vec_rel(T2, T), _vec_rel(c2, c))
    return err, secs


def _vec_rel(a, b):
    """Max over samples of |a - b| / |b|, norms over the last axis."""
    return float(np.max(np.linalg.norm(a - b, axis=-1) / np.linalg.norm(b, axis=-1)))


def check_depth_invariance(n: int = 2000, seed: int = 1) -> float:
    """Max |s* - sigma| for analytic boxes over depths in [0.3, 3.0] m."""
    rng = np.random.default_rng(seed)
    K = geo.CameraIntrinsics(800.0, 640.0, 480.0, 1280, 960)
    worst = 0.0
    for _ in range(n):
        sigma = rng.uniform(0.7, 1.3)
        tz = rng.uniform(0.3, 3.0)
        T = np.array([rng.uniform(-0.3, 0.3) * tz, rng.uniform(-0.3, 0.3) * tz, tz])
        c = bb.correction_from_translation(T, bb.analytic_bbox(T, sigma, K))
        worst = max(worst, abs(c.s - sigma))
    return worst


def check_rot6d(n: int = 10_000, seed: int = 2) -> tuple[float, float, float]:
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(n, 6))
    R = geo.rot6d_to_matrix(r)
    ortho = float(np.max(np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3))))
    det = float(np.max(np.abs(np.linalg.det(R) - 1.0)))
    trip = float(np.max(np.abs(geo.rot6d_to_matrix(geo.matrix_to_rot6d(R)) - R)))
    return ortho, det, trip


def check_oracle(n_samples: int = 20, seed: int = 3) -> tuple[float, float]:
    """(max final ADD with alpha=1, max |error ratio - 0.5| per step with alpha=0.5)."""
    data = generate(scenario("near", seed=seed, n_samples=n_samples))
    s0 = data.samples[0]
    init = InitialState.from_pose(s0.R_star, s0.V_star)
    worst_add, worst_ratio = 0.0, 0.0
    for s in data.samples[1:]:
        final, _ = run_refinement(init, s.maps, OracleRegressor.for_sample(s, 1.0), s.bbox, s.K)
        worst_add = max(worst_add, mt.add_metric(s.V_star, final.R, final.T, s.R_star, s.T_star))
        errs = theta_errors(init, s, 0.5)
        for a, b in zip(errs[:-1], errs[1:]):
            worst_ratio = max(worst_ratio, abs(b / a - 0.5))
    return worst_add, worst_ratio


def theta_errors(init, s, alpha) -> list[float]:
    """Parameter-space error |theta_t - theta*| of an oracle run, t = 0..3."""
    reg = OracleRegressor.for_sample(s, alpha)
    target = np.concatenate([geo.matrix_to_rot6d(s.R_star), s.c_star.as_array(), s.V_star.ravel()])
    state = initial_state(init, s.bbox, s.K)
    errs = [float(np.linalg.norm(state.theta() - target))]
    for t in range(3):
        state = regress_step(state, s.maps[t], reg, s.bbox, s.K)
        errs.append(float(np.linalg.norm(state.theta() - target)))
    return errs


def check_net_gradient(seed: int = 4) -> float:
    rng = np.random.default_rng(seed)
    net = DenseNet.create([6, 7, 5, 3], rng)
    x = rng.normal(size=(4, 6))
    target = rng.normal(size=(4, 3))
    like = net.params()

    def f(v):
        for p, a in zip(net.params(), unflatten(v, like)):
            p[...] = a
        y, cache = forward(net, x)
        g, _ = backward(net, cache, y - target)
        return 0.5 * float(np.sum((y - target) ** 2)), flatten(g)

    def kinks(v):
        for p, a in zip(net.params(), unflatten(v, like)):
            p[...] = a
        return kink_signature(net, forward(net, x)[1])

    return finite_difference_check(f, flatten(like), 1e-4, kinks=kinks).max_rel_error


def check_soft_argmax_gradient(seed: int = 5) -> float:
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(3, 6, 7))
    w = rng.normal(size=(2, 3))

    def f(v):
        hh = v.reshape(h.shape)
        return float(np.sum(w * soft_argmax(hh))), soft_argmax_backward(hh, w).ravel()

    return finite_difference_check(f, h.ravel(), 1e-4).max_rel_error


def check_soft_argmax_recovery(n: int = 10, seed: int = 6) -> float:
    """Max error (crop px) of soft-argmax on noise-free rendered heatmaps."""
    data = generate(scenario("near", seed=seed, n_samples=n, noise_px=0.0, sigma_cue_noise=0.0), heatmaps=True)
    worst = 0.0
    for s in data.samples:
        L = soft_argmax(s.heatmap) * (192.0 / s.heatmap.shape[-1])
        worst = max(worst, float(np.max(np.abs(L - s.L_star))))
    return worst


def check_bilinear_nodes(seed: int = 7) -> float:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, 12, 12))
    ys, xs = np.meshgrid(np.arange(12.0), np.arange(12.0), indexing="ij")
    P = np.stack([xs.ravel(), ys.ravel()])
    got = sample_points(v, P)
    return float(np.max(np.abs(got - v.reshape(4, -1).T)))


def check_iteration_weights() -> float:
    return abs(sum(iteration_weight(t) for t in (1, 2, 3)) - 1.75)


def check_metrics() -> tuple[float, float, float]:
    rng = np.random.default_rng(8)
    V = make_face_template(11, 1.0).vertices
    I = np.eye(3)
    dT = rng.normal(size=3) * 0.01
    add_err = abs(mt.add_metric(V, I, dT, I, np.zeros(3)) - np.sqrt(dT[0] * dT[0] + dT[1] * dT[1] + dT[2] * dT[2]) * 1000.0)
    ge_err = abs(mt.rotation_errors(geo.rot_z(np.radians(10.0)), I)[3] - 10.0)
    R = geo.random_rotation(rng)
    fs = mt.face_size_error(R @ V + rng.normal(size=(3, 1)), V, TRIANGLES)
    return add_err, ge_err, fs


def check_dataset_determinism() -> float:
    a = generate(scenario("near", seed=9, n_samples=5))
    b = generate(scenario("near", seed=9, n_samples=5))
    return 0.0 if a.content_hash() == b.content_hash() else 1.0


def verify_suite(quick: bool = False, overrides: dict | None = None,
                 progress: Callable[[Check], None] | None = None, only: tuple | None = None) -> list[Check]:
    """Run every check; ``quick`` shrinks the sample counts of the slow ones.

    ``only`` restricts the run to the named modules.
    """
    ov = overrides or {}
    checks: list[Check] = []

    def want(module):
        return only is None or module in only

    def add(module, name, anchor, measured, tol, secs=0.0, strict_less=True):
        ok = measured < tol if strict_less else measured <= tol
        c = Check(module, name, anchor, float(measured), tol, bool(ok), secs)
        checks.append(c)
        if progress:
            progress(c)

    def timed(fn, *a, **k):
        t0 = time.perf_counter()
        out = fn(*a, **k)
        return out, time.perf_counter() - t0

    n = 1000 if quick else 10_000
    if want("bbox_translation"):
        (err, secs), el = timed(check_correction_round_trip, ov.get("translation_from_correction"), n)
        add("bbox_translation", "correction round trip", "exact inverse pair", err, 1e-12, el)
        add("bbox_translation", "round trip runtime (s)", "10k conversions under a second", secs, 1.0)
        v, el = timed(check_depth_invariance, 200 if quick else 2000)
        add("bbox_translation", "analytic-box scale invariance", "s* equals sigma at any depth", v, 1e-12, el)

    if want("geometry"):
        (o, d, r), el = timed(check_rot6d, n)
        add("geometry", "rot6d orthonormality", "Gram-Schmidt output is orthonormal", o, 1e-9, el)
        add("geometry", "rot6d determinant", "proper rotation", d, 1e-9)
        add("geometry", "matrix <-> 6D round trip", "first two columns embed R", r, 1e-12)

    if want("feature_sampling"):
        v, el = timed(check_bilinear_nodes)
        add("feature_sampling", "bilinear exact at texels", "interpolation at nodes", v, 1e-12, el)
        v, el = timed(check_soft_argmax_gradient)
        add("feature_sampling", "soft-argmax gradient", "finite-difference oracle", v, 1e-5, el)

    if want("synthetic_scenes"):
        v, el = timed(check_soft_argmax_recovery)
        add("synthetic_scenes", "noise-free heatmap recovery (px)", "soft-argmax of rendered bumps", v, 0.5, el)
        v, el = timed(check_dataset_determinism)
        add("synthetic_scenes", "seeded generation determinism", "same seed, same bytes", v, 0.0, el,
            strict_less=False)

    if want("losses"):
        add("losses", "iteration weight sum", "duplicated error scales by 1.75", check_iteration_weights(), 1e-15)
        rep, el = timed(pipeline_gradient_check, 10 if quick else 100)
        add("losses", "full objective gradient", "finite differences through every path",
            rep.max_rel_error if not rep.unresolved_failures else np.inf, 1e-5, el)

    if want("toy_net"):
        v, el = timed(check_net_gradient)
        add("toy_net", "dense net gradient", "finite-difference oracle", v, 1e-5, el)

    if want("refinement_loop"):
        (a, rr), el = timed(check_oracle, 6 if quick else 20)
        add("refinement_loop", "oracle alpha=1 final ADD (mm)", "oracle reaches ground truth", a, 1e-9, el)
        add("refinement_loop", "oracle alpha=0.5 contraction", "error halves per step", rr, 1e-9)

    if want("metrics"):
        a, g, fs = check_metrics()
        add("metrics", "ADD pure translation", "ADD equals |dT| in mm", a, 0.0, strict_less=False)
        add("metrics", "GE single-axis 10 deg", "geodesic equals axis angle", g, 1e-9)
        add("metrics", "face size rigid invariance", "areas preserved by rigid motion", fs, 1e-9)
    return checks
