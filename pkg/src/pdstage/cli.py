"""Command-line entry point.

    pdstage ingest   --config run.yaml
    pdstage crossval --config run.yaml --train.max_epochs=10
    pdstage ablate   --config run.yaml
    pdstage train    --config run.yaml
    pdstage predict  --checkpoint model.ckpt --walk GaPt07_01.txt

Any ``--dotted.key=value`` (or ``--dotted.key value``) after the command
overrides the matching entry of the config file; values are parsed as YAML.

Exit codes: 0 success, 2 input error, 3 precondition failure, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import data as D
from .evaluation import (
    ABLATION_ORDER,
    CrossValidationResult,
    cross_validate,
    majority_vote,
    write_ablation_table,
    write_confusion_grid,
    write_report,
)
from .model import (
    InvalidConfigError,
    ModelConfig,
    apply_ablation,
    build_model,
    read_checkpoint,
    save_checkpoint,
    set_state,
)
from .training import TrainConfig, TrainingDivergence, fit, predict_proba

logger = logging.getLogger("pdstage")

EXIT_OK, EXIT_INPUT, EXIT_PRECONDITION, EXIT_DIVERGENCE = 0, 2, 3, 4

# walk-level class supports of the reference 10-fold run, for the ingest audit
REFERENCE_SUPPORTS = (90, 110, 73, 27)


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        self.code = code
        super().__init__(message)


DEFAULTS: Dict[str, Any] = {
    "data_dir": None,
    "demographics": None,
    "output_dir": "output",
    "overlap": 0.5,
    "model": ModelConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "cv": {"k": 10, "seed": 0},
    "ablation": list(ABLATION_ORDER),
    "workers": 1,
    "verbosity": "info",
}


@dataclass
class RunConfig:
    data_dir: Optional[str]
    demographics: Optional[str]
    output_dir: str
    overlap: float
    model: ModelConfig
    train: TrainConfig
    k: int
    seed: int
    ablation: List[str]
    workers: int
    verbosity: str
    model_overrides: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], model_overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        merged = _deep_merge(copy.deepcopy(DEFAULTS), raw)
        try:
            model = ModelConfig.from_dict(merged["model"])
            train = TrainConfig.from_dict(merged["train"])
        except (TypeError, ValueError) as exc:
            raise CliError(str(exc)) from None
        problems = model.problems() + train.problems()
        if problems:
            raise CliError("invalid config: " + "; ".join(problems))
        variants = merged["ablation"]
        if isinstance(variants, str):
            variants = [variants]
        bad = [v for v in variants if v not in ABLATION_ORDER]
        if bad:
            raise CliError(f"unknown ablation variants {bad}")
        cv = merged["cv"]
        return cls(merged["data_dir"], merged["demographics"], str(merged["output_dir"]),
                   float(merged["overlap"]), model, train, int(cv["k"]), int(cv["seed"]),
                   [v for v in ABLATION_ORDER if v in variants], int(merged["workers"]),
                   str(merged["verbosity"]), dict(model_overrides or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "data_dir": self.data_dir,
            "demographics": self.demographics,
            "output_dir": self.output_dir,
            "overlap": self.overlap,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "cv": {"k": self.k, "seed": self.seed},
            "ablation": list(self.ablation),
            "workers": self.workers,
            "verbosity": self.verbosity,
        }


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """``["--train.max_epochs=3", "--cv.k", "2"]`` -> nested dict."""
    out: Dict[str, Any] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise CliError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise CliError(f"override {tok} needs a value")
            i += 1
            text = tokens[i]
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(text)
        i += 1
    return out


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file {path} not found")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise CliError(f"config file {path} must hold a mapping")
    extra = parse_overrides(overrides)
    model_overrides = dict(raw.get("model", {}) or {})
    model_overrides.update(extra.get("model", {}))
    return RunConfig.from_dict(_deep_merge(raw, extra), model_overrides)


def _setup_logging(verbosity: str) -> None:
    level = getattr(logging, verbosity.upper(), logging.INFO)
    root = logging.getLogger()
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)


def _require_inputs(cfg: RunConfig) -> None:
    if not cfg.data_dir or not Path(cfg.data_dir).is_dir():
        raise CliError(f"data directory {cfg.data_dir!r} is not readable")
    if not cfg.demographics or not Path(cfg.demographics).is_file():
        raise CliError(f"demographics table {cfg.demographics!r} not found")


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from None
    return out


def _echo_config(cfg: RunConfig, out: Path, command: str) -> None:
    (out / f"{command}_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _load_dataset(cfg: RunConfig) -> D.GaitDataset:
    if not D.find_walk_files(cfg.data_dir):
        raise CliError(f"no walk files found in {cfg.data_dir}")
    dataset = D.build_dataset(cfg.data_dir, cfg.demographics, cfg.model.segment_length, cfg.overlap)
    if not dataset.walks:
        raise CliError(f"no parseable walk files in {cfg.data_dir}")
    return dataset


# ----------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> int:
    _require_inputs(cfg)
    out = _output_dir(cfg)
    _echo_config(cfg, out, "ingest")
    dataset = _load_dataset(cfg)
    D.write_manifest(dataset, out / "manifest.csv")
    for name, reason in dataset.excluded:
        logger.warning("excluded %s: %s", name, reason)
    counts = dataset.class_counts()
    print(f"walks ingested: {len(dataset.walks)} (reference 300), excluded: {len(dataset.excluded)}")
    print(f"subjects: {len(dataset.subjects)}")
    print(f"imputed values: {sum(w.imputed for w in dataset.walks)}")
    print("class  walks  reference")
    for c, (n, ref) in enumerate(zip(counts, REFERENCE_SUPPORTS)):
        print(f"{c:>5}  {n:>5}  {ref:>9}")
    return EXIT_OK


def _write_cv_outputs(result: CrossValidationResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for report in (result.segment, result.walk):
        write_report(report, out / f"{report.level}_report.csv", "delimited")
        write_report(report, out / f"{report.level}_report.json", "structured")
        write_confusion_grid(report.confusion, out / f"{report.level}_confusion.csv")
    for f in result.folds:
        f.history.write_csv(out / f"history_fold{f.fold:02d}.csv")
    assignments = {f"fold{f.fold:02d}": f.test_subjects for f in result.folds}
    (out / "folds.json").write_text(json.dumps(assignments, indent=2, sort_keys=True) + "\n")


def _crossval(cfg: RunConfig, dataset: D.GaitDataset, model: ModelConfig, tag: str) -> CrossValidationResult:
    try:
        return cross_validate(dataset, model, cfg.train, cfg.k, cfg.seed, cfg.workers)
    except TrainingDivergence as exc:
        raise CliError(f"{tag}: {exc}", EXIT_DIVERGENCE) from None
    except D.DataError as exc:
        raise CliError(f"{tag}: {exc}", EXIT_PRECONDITION) from None


def cmd_crossval(cfg: RunConfig) -> int:
    _require_inputs(cfg)
    out = _output_dir(cfg)
    _echo_config(cfg, out, "crossval")
    dataset = _load_dataset(cfg)
    result = _crossval(cfg, dataset, cfg.model, "crossval")
    _write_cv_outputs(result, out)
    print(f"walk-level accuracy {result.walk.accuracy:.4f} (reference 0.88), "
          f"weighted F1 {result.walk.weighted['f1']:.4f}")
    print(f"segment-level accuracy {result.segment.accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    _require_inputs(cfg)
    out = _output_dir(cfg)
    _echo_config(cfg, out, "ablate")
    dataset = _load_dataset(cfg)
    results = {}
    for variant in cfg.ablation:
        result = _crossval(cfg, dataset, apply_ablation(cfg.model, variant), f"variant {variant}")
        _write_cv_outputs(result, out / f"variant_{variant}")
        results[variant] = result.walk
        logger.info("variant %s walk accuracy %.4f", variant, result.walk.accuracy)
    rows = write_ablation_table(results, out / "ablation.csv")
    for row in rows:
        print(",".join(row))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require_inputs(cfg)
    out = _output_dir(cfg)
    _echo_config(cfg, out, "train")
    dataset = _load_dataset(cfg)
    fit_ids, val_ids = D.holdout_split(dataset.subjects, cfg.train.validation_fraction, cfg.seed)
    model = build_model(cfg.model, cfg.seed)
    try:
        history = fit(model, dataset.arrays(fit_ids), dataset.arrays(val_ids) if val_ids else None, cfg.train)
    except TrainingDivergence as exc:
        raise CliError(f"train: {exc}", EXIT_DIVERGENCE) from None
    history.write_csv(out / "history.csv")
    save_checkpoint(model, out / "model.ckpt")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def _check_against_checkpoint(cfg: RunConfig, ckpt_model: ModelConfig) -> None:
    ckpt = ckpt_model.to_dict()
    for key, value in sorted(cfg.model_overrides.items()):
        expected = ckpt.get(key)
        if key in ("classifier_hidden", "conv_filters"):
            value = json.loads(json.dumps(value))
        if expected != value:
            raise CliError(json.dumps({
                "error": "config/checkpoint mismatch",
                "field": key,
                "config": value,
                "checkpoint": expected,
            }, sort_keys=True), EXIT_PRECONDITION)


def cmd_predict(cfg: RunConfig, checkpoint: str, walk_file: str) -> int:
    if not Path(checkpoint).is_file():
        raise CliError(f"checkpoint {checkpoint} not found")
    if not Path(walk_file).is_file():
        raise CliError(f"walk file {walk_file} not found")
    try:
        ckpt_config, state = read_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    _check_against_checkpoint(cfg, ckpt_config)
    out = _output_dir(cfg)
    _echo_config(cfg, out, "predict")
    try:
        record = D.parse_vgrf_file(walk_file, require_name=False)
    except D.DataError as exc:
        raise CliError(str(exc)) from None
    if record.channels.shape[0] != ckpt_config.sensor_count:
        raise CliError(json.dumps({
            "error": "config/checkpoint mismatch", "field": "sensor_count",
            "walk": record.channels.shape[0], "checkpoint": ckpt_config.sensor_count,
        }, sort_keys=True), EXIT_PRECONDITION)
    p = ckpt_config.segment_length
    if record.length < p:
        raise CliError(f"walk too short: {record.length} samples, need at least {p}", EXIT_PRECONDITION)
    record, _ = D.preprocess(record)
    segments = D.segment_walk(record, p, cfg.overlap)
    model = build_model(ckpt_config)
    set_state(model, state)
    probs = predict_proba(model, np.stack([s.values for s in segments]))
    preds = probs.argmax(axis=1)
    stage = majority_vote(preds, probs)
    shares = np.bincount(preds, minlength=ckpt_config.class_count) / len(preds)
    print(f"segments: {len(preds)}")
    print(f"predicted class: {stage} ({D.SEVERITIES[stage] if stage < len(D.SEVERITIES) else stage})")
    for c, share in enumerate(shares):
        print(f"class {c} vote share: {share:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdstage", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("ingest", "preprocess walks and write a manifest"),
                        ("crossval", "k-fold cross-validation"),
                        ("ablate", "cross-validate every ablation variant"),
                        ("train", "fit on all subjects and save a checkpoint"),
                        ("predict", "stage a single walk with a checkpoint")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML/JSON run configuration")
        if name == "predict":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--walk", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = load_run_config(args.config, rest)
        _setup_logging(cfg.verbosity)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.walk)
        return {"ingest": cmd_ingest, "crossval": cmd_crossval, "ablate": cmd_ablate,
                "train": cmd_train}[args.command](cfg)
    except CliError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InvalidConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
