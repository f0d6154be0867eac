import json

import numpy as np
import pytest

from headpose6d import cli
from headpose6d.bbox import translation_from_correction_array
from headpose6d.cli import RunConfig, main, read_config_file, run_experiment
from headpose6d.errors import ConfigError, IoFailure
from headpose6d.verify import check_correction_round_trip, verify_suite


def _strip_timing(doc):
    doc = dict(doc)
    doc.pop("timing", None)
    return doc


def test_gen_data_and_oracle_eval(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["gen-data", "--seed", "4", "--n-samples", "6", "--out-dir", str(out)]) == 0
    ds = out / "near_seed4"
    assert (ds / "dataset.jsonl").exists()
    assert main(["eval", "--regressor", "oracle", "--dataset", str(ds), "--out-dir", str(out / "ev")]) == 0
    doc = json.loads((out / "ev" / "eval.json").read_text())
    summary = doc["scenarios"]["near_seed4"]
    assert summary["add_mean"] < 1e-9
    assert doc["code_version"] and doc["datasets"]["near_seed4"]
    assert "ADD median" in capsys.readouterr().out


def test_oracle_generates_near_and_far(tmp_path):
    rep = run_experiment(RunConfig("eval", seed=2, regressor="oracle", n_test=5, out_dir=str(tmp_path)))
    assert set(rep.payload["scenarios"]) == {"near", "far"}
    assert all(v["add_mean"] < 1e-9 for v in rep.payload["scenarios"].values())


def test_train_then_eval(tmp_path):
    out = tmp_path / "m"
    args = ["--seed", "1", "--n-samples", "12", "--epochs", "1", "--out-dir", str(out)]
    assert main(["train", "--iterations", "2", *args]) == 0
    ck = out / "model.npz"
    assert ck.exists()
    assert main(["eval", "--seed", "1", "--checkpoint", str(ck), "--n-test", "4", "--out-dir", str(out)]) == 0
    doc = json.loads((out / "eval.json").read_text())
    assert len(doc["scenarios"]["near"]["trace_add_median"]) == 3


def test_reports_are_deterministic(tmp_path):
    docs = []
    for k in range(2):
        d = tmp_path / str(k)
        run_experiment(RunConfig("distribution-report", seed=3, n_samples=20, out_dir=str(d)))
        docs.append((d / "distribution_report.csv").read_bytes())
        docs.append(_strip_timing(json.loads((d / "distribution_report.json").read_text())))
    assert docs[0] == docs[2] and docs[1] == docs[3]


def test_iteration_comparison_shares_dataset(tmp_path):
    rep = run_experiment(RunConfig(
        "ablate-iterations", seed=5, seeds=(0,), n_samples=10, n_test=4, epochs=1, out_dir=str(tmp_path)))
    rows = rep.payload["rows"]
    assert sorted(r["iterations"] for r in rows) == [1, 3]
    assert rep.payload["datasets"]["train"] and rep.payload["datasets"]["test_near"]
    assert all(r["scenario"] == "near" for r in rows)


@pytest.mark.parametrize("argv,code", [
    (["eval"], 2),
    (["train", "--seed", "1", "--iterations", "4"], 2),
    (["train", "--seed", "1", "--regressor", "oracle"], 2),
    (["eval", "--regressor", "oracle", "--dataset", "/nonexistent/ds"], 3),
])
def test_exit_codes(argv, code, tmp_path):
    assert main(argv + ["--out-dir", str(tmp_path)]) == code


def test_bad_choice_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--regressor", "magic"])
    assert exc.value.code == 2


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nseed = 7\nn-samples = 11\nepochs=3\n")
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "envout"))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "2"])
    rc = cli.resolve_config(args)
    assert (rc.seed, rc.n_samples, rc.epochs) == (7, 11, 2)
    assert rc.out_dir == str(tmp_path / "envout")
    assert rc.iterations == 3


def test_config_file_errors(tmp_path):
    bad = tmp_path / "b.txt"
    bad.write_text("seed 3\n")
    with pytest.raises(ConfigError, match="key=value"):
        read_config_file(bad)
    bad.write_text("colour=red\n")
    with pytest.raises(ConfigError, match="colour"):
        read_config_file(bad)
    bad.write_text("epochs=many\n")
    with pytest.raises(ConfigError, match="epochs"):
        read_config_file(bad)
    with pytest.raises(IoFailure):
        read_config_file(tmp_path / "missing.txt")


def test_error_messages_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        RunConfig("train", out_dir=str(tmp_path)).validate()
    with pytest.raises(ConfigError, match="checkpoint"):
        RunConfig("eval", seed=1, out_dir=str(tmp_path)).validate()
    f = tmp_path / "file"
    f.write_text("")
    with pytest.raises(IoFailure, match="out_dir"):
        RunConfig("verify", out_dir=str(f)).validate()


def test_mutation_canary_fails_round_trip():
    def perturbed(c, tau, b, f):
        T = translation_from_correction_array(c, tau, b, f)
        return T * (1.0 + 1e-3)

    err, _ = check_correction_round_trip(perturbed, n=1000)
    assert err > 1e-4
    checks = verify_suite(quick=True, overrides={"translation_from_correction": perturbed}, only=("bbox_translation",))
    rt = [c for c in checks if c.name == "correction round trip"][0]
    assert not rt.passed and "FAIL" in rt.line()


def test_verify_lists_modules_and_properties():
    checks = verify_suite(quick=True, only=("geometry", "metrics", "bbox_translation"))
    assert {c.module for c in checks} == {"geometry", "metrics", "bbox_translation"}
    assert all(c.anchor and c.passed for c in checks)
