import numpy as np

from headpose6d.experiments import evaluate, iteration_verdict, majority, translation_verdict
from headpose6d.losses import LossWeights
from headpose6d.scenes import generate, scenario
from headpose6d.training import Model, TrainConfig, run_batch, train

TINY = dict(epochs=2, hidden=8, reducer_hidden=(6,), batch_size=8, lr=1e-3)


def test_training_is_deterministic_and_lowers_loss():
    d = generate(scenario("near", seed=31, n_samples=24))
    m1, h1 = train(TrainConfig(**TINY, seed=3), d)
    m2, h2 = train(TrainConfig(**TINY, seed=3), d)
    assert h1 == h2
    for p, q in zip(m1.params(), m2.params()):
        assert p.tobytes() == q.tobytes()
    assert h1[-1] < h1[0]


def test_checkpoint_round_trip(tmp_path):
    d = generate(scenario("near", seed=32, n_samples=8))
    for direct in (False, True):
        m, _ = train(TrainConfig(**TINY, seed=1, direct=direct, iterations=2), d)
        m.save(tmp_path / "m.npz", {"k": 1})
        back = Model.load(tmp_path / "m.npz")
        assert back.iterations == 2 and back.direct == direct
        A = d.arrays()
        a = run_batch(m, A, LossWeights(), need_grad=False)
        b = run_batch(back, A, LossWeights(), need_grad=False)
        assert a.per_sample.tobytes() == b.per_sample.tobytes()


def test_evaluation_trace_shape():
    d = generate(scenario("near", seed=33, n_samples=8))
    m, _ = train(TrainConfig(**TINY, seed=0, iterations=2), d)
    e = evaluate(m, d)
    assert e.trace_add.shape == (8, 3)
    assert len(e.summary["trace_add_median"]) == 3
    assert 0.0 <= e.non_increasing_fraction() <= 1.0


def test_verdicts():
    rows = [
        {"seed": 0, "iterations": 1, "add_median": 10.0, "trace_non_increasing": 1.0},
        {"seed": 0, "iterations": 3, "add_median": 5.0, "trace_non_increasing": 0.95},
        {"seed": 1, "iterations": 1, "add_median": 10.0, "trace_non_increasing": 1.0},
        {"seed": 1, "iterations": 3, "add_median": 5.0, "trace_non_increasing": 0.5},
    ]
    v = iteration_verdict({"rows": rows})
    assert v[0]["pass"] and not v[1]["pass"]
    assert not majority(v)
    rows = []
    for seed, far_direct in ((0, 30.0), (1, 30.0), (2, 12.0)):
        rows += [
            {"seed": seed, "variant": "correction", "scenario": "far", "mae_t_mean": 10.0},
            {"seed": seed, "variant": "direct", "scenario": "far", "mae_t_mean": far_direct},
            {"seed": seed, "variant": "correction", "scenario": "near", "mae_t_mean": 5.0},
            {"seed": seed, "variant": "direct", "scenario": "near", "mae_t_mean": 6.0},
        ]
    v = translation_verdict({"rows": rows})
    assert [v[s]["pass"] for s in (0, 1, 2)] == [True, True, False]
    assert majority(v)
