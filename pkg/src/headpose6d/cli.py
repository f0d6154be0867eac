"""Command-line harness: data generation, training, evaluation, ablations, verification.

Exit codes: 0 success, 1 a check or verdict failed, 2 bad configuration,
3 file I/O failure. Settings resolve as flags > key=value config file >
defaults; HEADPOSE6D_OUTPUT_DIR overrides the default output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from . import experiments as ex
from .errors import ConfigError, HeadPoseError, IoFailure
from .metrics import write_reports
from .scenes import SceneSet, dataset_hash, generate, load_dataset, make_dataset, scenario
from .training import Model, TrainConfig, train
from .verify import verify_suite

log = logging.getLogger("headpose6d")

COMMANDS = ("gen-data", "train", "eval", "ablate-iterations", "ablate-translation-model",
            "distribution-report", "verify")
REGRESSORS = ("oracle", "learned", "direct-translation")
OUTPUT_ENV = "HEADPOSE6D_OUTPUT_DIR"
STOCHASTIC = set(COMMANDS) - {"verify"}


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    out_dir: str = field(default_factory=_default_out)
    dataset: str | None = None
    test_datasets: tuple = ()
    checkpoint: str | None = None
    scenario: str = "near"
    n_samples: int = 2000
    n_test: int = 300
    iterations: int = 3
    regressor: str = "learned"
    epochs: int | None = None  # per-command budget when unset
    lr: float = ex.ABLATION_TRAIN.lr
    batch_size: int = 32
    bbox_mode: str = "analytic"
    noise_px: float = ex.ABLATION_SCENE["noise_px"]
    sigma_cue_noise: float = ex.ABLATION_SCENE["sigma_cue_noise"]
    seeds: tuple = (0, 1, 2)
    quick: bool = False

    def __post_init__(self):
        if self.epochs is None:
            budget = ex.TRANSLATION_TRAIN if self.command == "ablate-translation-model" else ex.ABLATION_TRAIN
            self.epochs = budget.epochs

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown {self.command!r}; choose one of {', '.join(COMMANDS)}")
        from_files = self.command == "eval" and (self.dataset is not None or self.test_datasets)
        if self.command in STOCHASTIC and self.seed is None and not from_files:
            raise ConfigError(f"seed: required for {self.command}; pass --seed N")
        if not 1 <= self.iterations <= 3:
            raise ConfigError(f"iterations: must be 1, 2 or 3, got {self.iterations}")
        if self.regressor not in REGRESSORS:
            raise ConfigError(f"regressor: must be one of {', '.join(REGRESSORS)}, got {self.regressor!r}")
        if self.bbox_mode not in ("analytic", "tight"):
            raise ConfigError(f"bbox_mode: must be analytic or tight, got {self.bbox_mode!r}")
        for name in ("n_samples", "n_test", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if self.command == "train" and self.regressor == "oracle":
            raise ConfigError("regressor: the oracle has nothing to train; use learned or direct-translation")
        if self.command == "eval" and self.regressor != "oracle" and self.checkpoint is None:
            raise ConfigError("checkpoint: eval of a learned regressor needs --checkpoint PATH")
        for name in ("dataset", "checkpoint"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise IoFailure(f"{name}: {p} does not exist")
        for p in self.test_datasets:
            if not Path(p).exists():
                raise IoFailure(f"test_datasets: {p} does not exist")
        out = Path(self.out_dir)
        if out.exists() and not out.is_dir():
            raise IoFailure(f"out_dir: {out} exists and is not a directory")

    def scene_overrides(self) -> dict:
        return {"noise_px": self.noise_px, "sigma_cue_noise": self.sigma_cue_noise, "bbox_mode": self.bbox_mode}

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return replace(
            ex.ABLATION_TRAIN, seed=self.seed if seed is None else seed, iterations=self.iterations,
            direct=self.regressor == "direct-translation", epochs=self.epochs, lr=self.lr,
            batch_size=self.batch_size, decay_epoch=max(1, int(round(self.epochs * 0.7))),
        )

    def ablation_config(self) -> ex.AblationConfig:
        return ex.AblationConfig(
            seeds=tuple(self.seeds), n_train=self.n_samples, n_test=self.n_test, data_seed=self.seed,
            train=self.train_config(self.seeds[0]), scenario_overrides=self.scene_overrides(),
        )

    def echo(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["test_datasets"] = list(self.test_datasets)
        d["seeds"] = list(self.seeds)
        d.pop("out_dir")  # reports must not depend on where they are written
        return d


@dataclass
class ExperimentReport:
    name: str
    payload: dict
    rows: list
    passed: bool = True
    lines: list = field(default_factory=list)  # human-readable summary
    paths: tuple = ()

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _scene_set(cfg: RunConfig, path: str | None, name: str, offset: int, n: int) -> tuple[SceneSet, str]:
    if path is not None:
        return load_dataset(path), dataset_hash(path)
    ds = generate(scenario(name, seed=cfg.seed + offset, n_samples=n, **cfg.scene_overrides()))
    return ds, ds.content_hash()


def _gen_data(cfg: RunConfig) -> ExperimentReport:
    sc = scenario(cfg.scenario, seed=cfg.seed, n_samples=cfg.n_samples, **cfg.scene_overrides())
    target = Path(cfg.out_dir) / f"{cfg.scenario}_seed{cfg.seed}"
    path = make_dataset(sc, target)
    h = dataset_hash(path)
    payload = {"experiment": "gen_data", "dataset": {"name": target.name, "sha256": h, "count": sc.n_samples},
               "scenario": sc.to_dict()}
    return ExperimentReport("gen_data", payload, [{"scenario": cfg.scenario, "count": sc.n_samples, "sha256": h}],
                            lines=[f"wrote {path} ({sc.n_samples} samples) sha256={h}"])


def _train(cfg: RunConfig) -> ExperimentReport:
    data, h = _scene_set(cfg, cfg.dataset, cfg.scenario, 0, cfg.n_samples)
    tc = cfg.train_config()
    model, history = train(tc, data)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.npz"
    model.save(ckpt, {"train_config": tc.to_dict(), "dataset_sha256": h, "code_version": __version__})
    payload = {"experiment": "train", "datasets": {"train": h}, "train": tc.to_dict(), "loss_history": history}
    rows = [{"epoch": i, "loss": v} for i, v in enumerate(history)]
    return ExperimentReport("train", payload, rows, lines=[f"final loss {history[-1]:.6f}", f"wrote {ckpt}"])


def _eval(cfg: RunConfig) -> ExperimentReport:
    if cfg.dataset is not None or cfg.test_datasets:
        paths = ([cfg.dataset] if cfg.dataset else []) + list(cfg.test_datasets)
        splits = {Path(p).name: _scene_set(cfg, p, "", 0, 0) for p in paths}
    else:
        splits = {name: _scene_set(cfg, None, name, k + 1, cfg.n_test) for k, name in enumerate(("near", "far"))}
    model = None if cfg.regressor == "oracle" else Model.load(cfg.checkpoint)
    rows, scen, hashes, lines = [], {}, {}, []
    for name, (ds, h) in splits.items():
        if model is None:
            e = ex.evaluate_oracle(ds, cfg.iterations)
        else:
            e = ex.evaluate(model, ds)
        hashes[name] = h
        scen[name] = e.summary
        rows.append({"scenario": name, "regressor": cfg.regressor, **{
            k: e.summary[k] for k in ("add_median", "add_mean", "mae_t_mean", "mae_r_mean", "ge_mean",
                                      "lmk_median_mean", "face_size_mean")}})
        lines.append(f"{name}: ADD median {e.summary['add_median']:.4f} mm, MAE_t {e.summary['mae_t_mean']:.4f} mm, "
                     f"MAE_r {e.summary['mae_r_mean']:.4f} deg")
    payload = {"experiment": "eval", "datasets": hashes, "scenarios": scen}
    return ExperimentReport("eval", payload, rows, lines=lines)


def _ablate_iterations(cfg: RunConfig) -> ExperimentReport:
    rep = ex.iteration_ablation(cfg.ablation_config())
    verdict = ex.iteration_verdict(rep)
    rep["verdict"] = {str(k): v for k, v in verdict.items()}
    rep["majority_pass"] = ex.majority(verdict)
    lines = [f"seed {s}: ADD 1-iter {v['add_1']:.3f} 3-iter {v['add_3']:.3f} "
             f"monotone {v['monotone_fraction']:.3f} {'pass' if v['pass'] else 'FAIL'}" for s, v in verdict.items()]
    return ExperimentReport("ablate_iterations", rep, rep["rows"], all(v["pass"] for v in verdict.values()), lines)


def _ablate_translation(cfg: RunConfig) -> ExperimentReport:
    rep = ex.translation_ablation(cfg.ablation_config())
    verdict = ex.translation_verdict(rep)
    rep["verdict"] = {str(k): v for k, v in verdict.items()}
    rep["majority_pass"] = ex.majority(verdict)
    lines = [f"seed {s}: far ratio {v['far_ratio']:.3f} near ratio {v['near_ratio']:.3f} "
             f"{'pass' if v['pass'] else 'FAIL'}" for s, v in verdict.items()]
    return ExperimentReport("ablate_translation_model", rep, rep["rows"], rep["majority_pass"], lines)


def _distribution(cfg: RunConfig) -> ExperimentReport:
    rep = ex.distribution_report(cfg.n_samples, cfg.seed, **cfg.scene_overrides())
    rows = [{"scenario": k, **v} for k, v in rep["scenarios"].items()]
    lines = [f"{k}: Tz [{v['tz_min']:.3f}, {v['tz_max']:.3f}] m, s [{v['s_min']:.4f}, {v['s_max']:.4f}]"
             for k, v in rep["scenarios"].items()]
    lines.append(f"Tz supports disjoint: {rep['tz_supports_disjoint']}; "
                 f"far corrections inside near range: {rep['correction_overlap']:.3f}")
    return ExperimentReport("distribution_report", rep, rows, lines=lines)


def _verify(cfg: RunConfig) -> ExperimentReport:
    checks = verify_suite(quick=cfg.quick, progress=lambda c: print(c.line(), flush=True))
    rows = [{"module": c.module, "check": c.name, "property": c.anchor, "measured": c.measured,
             "tolerance": c.tolerance, "passed": c.passed} for c in checks]
    failed = [c for c in checks if not c.passed]
    payload = {"experiment": "verify", "checks": rows, "failed": len(failed),
               "timing": {c.name: c.seconds for c in checks}}
    return ExperimentReport("verify", payload, rows, not failed, [f"{len(checks) - len(failed)}/{len(checks)} checks passed"])


HANDLERS = {
    "gen-data": _gen_data, "train": _train, "eval": _eval, "ablate-iterations": _ablate_iterations,
    "ablate-translation-model": _ablate_translation, "distribution-report": _distribution, "verify": _verify,
}


def run_experiment(cfg: RunConfig) -> ExperimentReport:
    """Validate, run the command, and write <name>.csv and <name>.json into out_dir."""
    cfg.validate()
    t0 = time.perf_counter()
    report = HANDLERS[cfg.command](cfg)
    report.payload.setdefault("code_version", __version__)
    report.payload["run_config"] = cfg.echo()
    report.payload.setdefault("timing", {})
    if isinstance(report.payload["timing"], dict):
        report.payload["timing"]["wall_seconds"] = time.perf_counter() - t0
    report.paths = write_reports(cfg.out_dir, report.name, report.rows, report.payload)
    return report


# ---------------------------------------------------------------------------
# argument and config-file parsing
# ---------------------------------------------------------------------------


def _int_tuple(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _str_tuple(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(str(x) for x in v)
    return tuple(x for x in str(v).replace(",", " ").split())


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


CONVERTERS = {
    "seed": int, "n_samples": int, "n_test": int, "iterations": int, "epochs": int, "batch_size": int,
    "lr": float, "noise_px": float, "sigma_cue_noise": float, "seeds": _int_tuple,
    "test_datasets": _str_tuple, "quick": _bool,
    "out_dir": str, "dataset": str, "checkpoint": str, "scenario": str, "regressor": str, "bbox_mode": str,
}


def read_config_file(path) -> dict:
    """Plain key=value lines; '#' starts a comment; keys may use dashes."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"config: cannot read {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config {path}:{n}: expected key=value, got {raw!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in CONVERTERS:
            raise ConfigError(f"config {path}:{n}: unknown key {k!r}")
        out[k] = _convert(k, v)
    return out


def _convert(key, value):
    try:
        return CONVERTERS[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="headpose6d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS
    for name in COMMANDS:
        sp = sub.add_parser(name, argument_default=S)
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            sp.add_argument("--quick", action="store_const", const=True, help="smaller sample counts")
            continue
        sp.add_argument("--scenario", choices=("near", "far", "custom"))
        sp.add_argument("--n-samples", dest="n_samples", type=int)
        sp.add_argument("--bbox-mode", dest="bbox_mode", choices=("analytic", "tight"))
        sp.add_argument("--noise-px", dest="noise_px", type=float)
        sp.add_argument("--sigma-cue-noise", dest="sigma_cue_noise", type=float)
        if name in ("train", "eval"):
            sp.add_argument("--dataset")
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--regressor", choices=REGRESSORS)
        if name == "eval":
            sp.add_argument("--checkpoint")
            sp.add_argument("--test-datasets", dest="test_datasets", nargs="+")
            sp.add_argument("--n-test", dest="n_test", type=int)
        if name in ("train", "ablate-iterations", "ablate-translation-model"):
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch-size", dest="batch_size", type=int)
        if name.startswith("ablate"):
            sp.add_argument("--n-test", dest="n_test", type=int)
            sp.add_argument("--seeds", type=int, nargs="+")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    vals = vars(args).copy()
    command = vals.pop("command")
    vals.pop("verbose", None)
    settings = read_config_file(vals.pop("config")) if "config" in vals else {}
    settings.update({k: _convert(k, v) for k, v in vals.items()})
    return RunConfig(command=command, **settings)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except IoFailure as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except HeadPoseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for line in report.lines:
        print(line)
    print(f"reports: {report.paths[0]} {report.paths[1]}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
