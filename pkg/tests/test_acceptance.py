"""Acceptance criteria A1-A9, each at its stated tolerance.

Every test records one PASS/FAIL line; conftest prints them in the terminal
summary. Run alone with ``pytest tests/test_acceptance.py -v``. A6 and A7
train nine and twelve models respectively and take several minutes each.
"""

import json
import time
from dataclasses import replace

import numpy as np

from headpose6d import geometry as geo
from headpose6d import metrics as mt
from headpose6d.cli import RunConfig, run_experiment
from headpose6d.experiments import (
    TRANSLATION_TRAIN, AblationConfig, iteration_ablation, iteration_verdict, majority,
    predict_oracle, translation_ablation, translation_verdict,
)
from headpose6d.gradcheck import pipeline_gradient_check
from headpose6d.refinement import InitialState
from headpose6d.scenes import TRIANGLES, generate, make_dataset, make_face_template, scenario
from headpose6d.training import TrainConfig, train
from headpose6d.verify import check_correction_round_trip, check_depth_invariance, check_rot6d, theta_errors

LINES: list[str] = []


def record(tag: str, ok: bool, detail: str) -> None:
    LINES.append(f"{tag} {'PASS' if ok else 'FAIL'}  {detail}")


def test_a1_correction_round_trip():
    err, secs = check_correction_round_trip(n=10_000)
    ok = err < 1e-12 and secs < 1.0
    record("A1", ok, f"round trip rel err {err:.2e} (< 1e-12), {secs:.3f} s (< 1 s) on 10000 samples")
    assert ok


def test_a2_depth_invariance():
    dev = check_depth_invariance(n=2000)
    record("A2", dev < 1e-12, f"max |s* - sigma| {dev:.2e} (< 1e-12), Tz in [0.3, 3.0] m")
    assert dev < 1e-12


def test_a3_objective_gradient():
    rep = pipeline_gradient_check(100)
    ok = rep.max_rel_error < 1e-5 and rep.unresolved_failures == 0 and rep.seconds < 120.0
    record("A3", ok, f"max rel err {rep.max_rel_error:.2e} (< 1e-5) over {rep.configs} configs, "
                     f"{rep.checked} coords, {rep.excluded} kink-excluded, "
                     f"{rep.unresolved} round-off bounded ({rep.unresolved_failures} over), {rep.seconds:.1f} s (< 120 s)")
    assert ok


def test_a4_rot6d():
    ortho, det, trip = check_rot6d(n=10_000)
    ok = ortho < 1e-9 and det < 1e-9 and trip < 1e-12
    record("A4", ok, f"orthonormality {ortho:.1e}, det {det:.1e} (< 1e-9), round trip {trip:.1e} (< 1e-12)")
    assert ok


def test_a5_oracle_pipeline():
    worst_add, worst_ratio, count = 0.0, 0.0, 0
    for k, name in enumerate(("near", "far")):
        data = generate(scenario(name, seed=30 + k, n_samples=20))
        pred = predict_oracle(data, iterations=3, alpha=1.0)
        for i, s in enumerate(data.samples):
            add = mt.add_metric(s.V_star, pred.R[i, -1], pred.T[i, -1], s.R_star, s.T_star)
            worst_add = max(worst_add, add)
        s0 = data.samples[0]
        init = InitialState.from_pose(s0.R_star, s0.V_star)
        for s in data.samples[1:]:
            errs = theta_errors(init, s, 0.5)
            for a, b in zip(errs[:-1], errs[1:]):
                worst_ratio = max(worst_ratio, abs(b / a - 0.5))
        count += len(data.samples)
    ok = worst_add < 1e-9 and worst_ratio < 1e-9
    record("A5", ok, f"alpha=1 max ADD {worst_add:.2e} mm (< 1e-9) on {count} samples, "
                     f"alpha=0.5 max |ratio - 0.5| {worst_ratio:.2e} (< 1e-9)")
    assert ok


def test_a6_iteration_trend():
    t0 = time.perf_counter()
    rep = iteration_ablation(AblationConfig())
    secs = time.perf_counter() - t0
    v = iteration_verdict(rep, trend_fraction=0.9)
    per = ", ".join(f"seed {s}: ADD {x['add_1']:.2f}->{x['add_3']:.2f} mm mono {x['monotone_fraction']:.2f}"
                    for s, x in v.items())
    ok = all(x["pass"] for x in v.values()) and secs < 600.0
    record("A6", ok, f"{per} (need 3-iter <= 1-iter and mono >= 0.90), {secs:.0f} s (< 600 s)")
    assert ok


def test_a7_translation_collapse():
    t0 = time.perf_counter()
    rep = translation_ablation(AblationConfig(train=TRANSLATION_TRAIN))
    secs = time.perf_counter() - t0
    v = translation_verdict(rep, far_ratio=2.0, near_ratio=1.5)
    per = ", ".join(f"seed {s}: far {x['far_ratio']:.2f} near {x['near_ratio']:.2f}" for s, x in v.items())
    ok = majority(v) and secs < 600.0
    record("A7", ok, f"{per} (need far >= 2.0 and near within 1.5x, majority), {secs:.0f} s (< 600 s)")
    assert ok


def test_a8_metrics():
    rng = np.random.default_rng(80)
    V = make_face_template(3, 1.0).vertices
    I = np.eye(3)
    add_err = 0.0
    for _ in range(200):
        dT = rng.normal(size=3) * rng.uniform(1e-4, 1.0)
        want = np.sqrt(dT[0] * dT[0] + dT[1] * dT[1] + dT[2] * dT[2]) * 1000.0
        add_err = max(add_err, abs(mt.add_metric(V, I, dT, I, np.zeros(3)) - want))
    ge_err = 0.0
    for rot in (geo.rot_x, geo.rot_y, geo.rot_z):
        R0 = geo.random_rotation(rng)
        ge_err = max(ge_err, abs(mt.rotation_errors(rot(np.radians(10.0)) @ R0, R0)[3] - 10.0))
    fs = 0.0
    for _ in range(20):
        R = geo.random_rotation(rng)
        fs = max(fs, mt.face_size_error(R @ V + rng.normal(size=(3, 1)), V, TRIANGLES))
    ok = add_err == 0.0 and ge_err < 1e-9 and fs < 1e-9
    record("A8", ok, f"ADD - |dT|*1000 {add_err:.1e} (== 0), GE 10 deg err {ge_err:.1e} (< 1e-9), "
                     f"face-size rigid {fs:.1e} mm^2 (< 1e-9)")
    assert ok


def _report_bytes(out_dir, name):
    csv_bytes = (out_dir / f"{name}.csv").read_bytes()
    doc = json.loads((out_dir / f"{name}.json").read_text())
    doc.pop("timing", None)
    return csv_bytes, json.dumps(doc, sort_keys=True).encode()


def test_a9_determinism(tmp_path):
    cfg = scenario("near", seed=90, n_samples=8)
    a, b = make_dataset(cfg, tmp_path / "a").parent, make_dataset(cfg, tmp_path / "b").parent
    same_data = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("dataset.jsonl", "features.bin"))

    data = generate(scenario("near", seed=91, n_samples=40))
    tc = TrainConfig(epochs=2, seed=5, batch_size=8)
    runs = [train(tc, data) for _ in range(2)]
    same_train = runs[0][1] == runs[1][1] and all(
        p.tobytes() == q.tobytes() for p, q in zip(runs[0][0].params(), runs[1][0].params()))

    same_reports = True
    for cmd in ("train", "eval"):
        outs = []
        for k in range(2):
            out = tmp_path / f"{cmd}{k}"
            rc = RunConfig(cmd, seed=7, n_samples=24, n_test=8, epochs=1, out_dir=str(out))
            if cmd == "eval":
                rc = replace(rc, regressor="oracle")
            run_experiment(rc)
            outs.append(_report_bytes(out, cmd))
        same_reports &= outs[0] == outs[1]
    ok = same_data and same_train and same_reports
    record("A9", ok, f"datasets identical {same_data}, training trajectories identical {same_train}, "
                     f"reports identical {same_reports} (timing excluded)")
    assert ok
