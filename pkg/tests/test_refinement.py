import json

import numpy as np
import pytest

from headpose6d.bbox import translation_from_correction_array
from headpose6d.errors import BehindCamera, ShapeMismatch
from headpose6d.geometry import matrix_to_rot6d
from headpose6d.losses import LossWeights
from headpose6d.metrics import add_metric
from headpose6d.refinement import (
    N_SUB, SUB_IDX, InitialState, OracleRegressor, Residual, ZeroRegressor, initial_state, regress_step,
    run_refinement, subsample_landmarks, write_trace,
)
from headpose6d.training import TrainConfig, build_model, initial_from, run_batch
from headpose6d.verify import theta_errors


def test_subsample():
    V = np.arange(3 * 1220, dtype=float).reshape(3, 1220)
    S = subsample_landmarks(V)
    assert S.shape == (3, N_SUB) == (3, 305)
    np.testing.assert_array_equal(S, subsample_landmarks(V))
    assert len(set(SUB_IDX.tolist())) == 305 and SUB_IDX.min() >= 0 and SUB_IDX.max() <= 1219
    with pytest.raises(ShapeMismatch):
        subsample_landmarks(np.zeros((3, 100)))


def _init(data):
    return initial_from(data)


def test_zero_regressor_keeps_theta(near_small):
    s = near_small.samples[1]
    state = initial_state(_init(near_small), s.bbox, s.K)
    nxt = regress_step(state, s.maps[0], ZeroRegressor(), s.bbox, s.K)
    np.testing.assert_array_equal(nxt.theta(), state.theta())
    np.testing.assert_array_equal(nxt.T, state.T)
    assert nxt.t == 1 and nxt.P.shape == (2, 305)


def test_oracle_alpha_one(near_small):
    init = _init(near_small)
    for s in near_small.samples[1:]:
        final, trace = run_refinement(init, s.maps, OracleRegressor.for_sample(s), s.bbox, s.K)
        assert add_metric(s.V_star, final.R, final.T, s.R_star, s.T_star) < 1e-9
        np.testing.assert_allclose(final.T, s.T_star, rtol=1e-12)
        assert len(trace) == 4


def test_oracle_half_contracts(near_small):
    init = _init(near_small)
    for s in near_small.samples[1:]:
        e = theta_errors(init, s, 0.5)
        for a, b in zip(e[:-1], e[1:]):
            assert abs(b / a - 0.5) < 1e-9


def test_iteration_count_ratio(near_small):
    init = _init(near_small)
    s = near_small.samples[2]
    target = np.concatenate([matrix_to_rot6d(s.R_star), s.c_star.as_array(), s.V_star.ravel()])
    errs = {}
    for n in (1, 3):
        final, _ = run_refinement(init, s.maps, OracleRegressor.for_sample(s, 0.5), s.bbox, s.K, iterations=n)
        errs[n] = np.linalg.norm(final.theta() - target)
    assert abs(errs[1] / errs[3] - 4.0) < 1e-9


def test_refinement_deterministic_and_trace(near_small, tmp_path):
    init = _init(near_small)
    s = near_small.samples[3]
    a = run_refinement(init, s.maps, OracleRegressor.for_sample(s, 0.5), s.bbox, s.K, gt=s)[1]
    b = run_refinement(init, s.maps, OracleRegressor.for_sample(s, 0.5), s.bbox, s.K, gt=s)[1]
    assert a == b
    assert a[0]["loss_head"] > a[1]["loss_head"] > a[2]["loss_head"] > a[3]["loss_head"]
    write_trace(tmp_path / "t.jsonl", a)
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert [json.loads(x)["t"] for x in lines] == [0, 1, 2, 3]


def test_iterations_out_of_range(near_small):
    s = near_small.samples[0]
    with pytest.raises(ValueError):
        run_refinement(_init(near_small), s.maps, ZeroRegressor(), s.bbox, s.K, iterations=4)


class _PushBack(ZeroRegressor):
    direct = True

    def __call__(self, stage, feature, state, bbox):
        return Residual(np.zeros(6), np.array([0.0, 0.0, -10.0]), np.zeros_like(state.V))


def test_behind_camera_names_iteration(near_small):
    s = near_small.samples[0]
    init = InitialState.from_pose(s.R_star, s.V_star, T=s.T_star)
    with pytest.raises(BehindCamera) as exc:
        run_refinement(init, s.maps, _PushBack(), s.bbox, s.K)
    assert exc.value.iteration == 1


@pytest.mark.parametrize("direct", [False, True])
def test_batched_pass_matches_per_sample_refinement(near_small, direct):
    model = build_model(TrainConfig(direct=direct, hidden=8, reducer_hidden=(6,), final_scale=1.0),
                        near_small.config.channels, _init(near_small), np.random.default_rng(0))
    A = near_small.arrays()
    res = run_batch(model, A, LossWeights(), need_grad=False)
    for i, s in enumerate(near_small.samples):
        final, _ = run_refinement(model.init, s.maps, model.reg, s.bbox, s.K)
        np.testing.assert_allclose(final.rot6d, res.outputs[-1]["rot6d"][i], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(final.V, res.outputs[-1]["V"][i], rtol=1e-9, atol=1e-12)
        if direct:
            np.testing.assert_allclose(final.T, res.outputs[-1]["trans"][i], rtol=1e-9)
        else:
            np.testing.assert_allclose(final.c, res.outputs[-1]["trans"][i], rtol=1e-9)
            T = translation_from_correction_array(res.outputs[-1]["trans"][i], A["tau"][i], A["b"][i], A["f"][i])
            np.testing.assert_allclose(final.T, T, rtol=1e-9)
