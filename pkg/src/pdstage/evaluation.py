"""Classification metrics, majority voting and the k-fold harness."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import GaitDataset, holdout_split, stratified_folds
from .model import ModelConfig, build_model
from .training import TrainConfig, TrainingHistory, fit, predict_proba

logger = logging.getLogger(__name__)

CLASS_LABELS = ("0 (Healthy)", "1 (Severity 2)", "2 (Severity 2.5)", "3 (Severity 3)")


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")
        self.counts = counts

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes: int) -> "ConfusionMatrix":
        counts = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass
class ClassMetrics:
    label: int
    support: int
    precision: float
    recall: float
    f1: float


@dataclass
class EvaluationReport:
    per_class: List[ClassMetrics]
    macro: Dict[str, float]
    weighted: Dict[str, float]
    accuracy: float
    confusion: ConfusionMatrix
    fold_accuracies: List[float] = field(default_factory=list)
    level: Optional[str] = None
    flags: List[str] = field(default_factory=list)

    @property
    def item_count(self) -> int:
        return self.confusion.total

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "item_count": self.item_count,
            "accuracy": self.accuracy,
            "per_class": [vars(c).copy() for c in self.per_class],
            "macro": dict(self.macro),
            "weighted": dict(self.weighted),
            "fold_accuracies": list(self.fold_accuracies),
            "confusion_matrix": self.confusion.counts.tolist(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            per_class=[ClassMetrics(**c) for c in d["per_class"]],
            macro=dict(d["macro"]),
            weighted=dict(d["weighted"]),
            accuracy=d["accuracy"],
            confusion=ConfusionMatrix(d["confusion_matrix"]),
            fold_accuracies=list(d["fold_accuracies"]),
            level=d["level"],
            flags=list(d["flags"]),
        )


def _ratio(num: int, den: int, what: str, label: int, flags: List[str]) -> float:
    if den == 0:
        flags.append(f"{what} undefined for class {label} (zero denominator), reported as 0")
        return 0.0
    return num / den


def compute_metrics(cm: Union[ConfusionMatrix, np.ndarray]) -> EvaluationReport:
    """One-vs-rest precision, recall and F1 per class, plus macro and
    support-weighted averages and overall accuracy. Undefined ratios are
    reported as 0 and listed in ``flags``."""
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(cm)
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    counts = cm.counts
    flags: List[str] = []
    per_class = []
    for c in range(cm.classes):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        pr = _ratio(tp, tp + fp, "precision", c, flags)
        re = _ratio(tp, tp + fn, "recall", c, flags)
        f1 = 0.0 if pr + re == 0 else 2.0 * pr * re / (pr + re)
        per_class.append(ClassMetrics(c, tp + fn, pr, re, f1))
    keys = ("precision", "recall", "f1")
    macro = {k: float(np.mean([getattr(m, k) for m in per_class])) for k in keys}
    supports = np.array([m.support for m in per_class], dtype=np.float64)
    weighted = {k: float(np.dot(supports, [getattr(m, k) for m in per_class]) / total) for k in keys}
    accuracy = int(np.trace(counts)) / total
    return EvaluationReport(per_class, macro, weighted, accuracy, cm, flags=flags)


def majority_vote(segment_predictions: Sequence[int], segment_probabilities: Sequence[Sequence[float]]) -> int:
    """Most frequent predicted class; ties go to the larger summed probability,
    then to the lower class index."""
    preds = np.asarray(segment_predictions, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("majority_vote needs at least one segment")
    probs = np.asarray(segment_probabilities, dtype=np.float64)
    votes = np.bincount(preds, minlength=probs.shape[1] if probs.ndim == 2 else 0)
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    # summing sorted columns keeps the tie-break independent of segment order
    mass = np.sort(probs[:, tied], axis=0).sum(axis=0)
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


# ----------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    test_subjects: List[str]
    segment_true: np.ndarray
    segment_pred: np.ndarray
    walk_keys: List[str]
    walk_true: np.ndarray
    walk_pred: np.ndarray
    history: TrainingHistory
    warnings: List[str]


@dataclass
class CrossValidationResult:
    segment: EvaluationReport
    walk: EvaluationReport
    folds: List[FoldResult]


def fold_seeds(seed: int, k: int) -> List[Tuple[int, int, int]]:
    """(model init / dropout seed, shuffle seed, validation split seed) per fold."""
    children = np.random.SeedSequence(seed).spawn(k)
    return [tuple(int(v) for v in c.generate_state(3)) for c in children]


def run_fold(dataset: GaitDataset, fold: int, test_subjects: Sequence[str], train_subjects: Sequence[str],
             model_config: ModelConfig, train_config: TrainConfig, seeds: Tuple[int, int, int]) -> FoldResult:
    labels = dataset.subjects
    warnings = []
    train_labels = {s: labels[s] for s in train_subjects}
    present = set(train_labels.values())
    for c in range(model_config.class_count):
        if c not in present:
            msg = f"fold {fold}: class {c} absent from training subjects"
            logger.warning(msg)
            warnings.append(msg)
    fit_ids, val_ids = holdout_split(train_labels, train_config.validation_fraction, seeds[2])
    model = build_model(model_config, seeds[0])
    cfg = TrainConfig(**{**train_config.to_dict(), "seed": seeds[1]})
    val = dataset.arrays(val_ids) if val_ids else None
    history = fit(model, dataset.arrays(fit_ids), val, cfg)

    seg_true, seg_pred, keys, walk_true, walk_pred = [], [], [], [], []
    for entry in dataset.walks_of(test_subjects):
        x = np.stack([s.values for s in entry.segments])
        probs = predict_proba(model, x, train_config.batch_size)
        preds = probs.argmax(axis=1)
        seg_true.extend([entry.record.label] * len(preds))
        seg_pred.extend(preds.tolist())
        keys.append(entry.record.key)
        walk_true.append(entry.record.label)
        walk_pred.append(majority_vote(preds, probs))
    logger.info("fold %d: %d test walks, walk accuracy %.4f", fold, len(keys),
                float(np.mean(np.array(walk_true) == np.array(walk_pred))) if keys else float("nan"))
    return FoldResult(fold, sorted(test_subjects), np.array(seg_true, dtype=np.int64),
                      np.array(seg_pred, dtype=np.int64), keys, np.array(walk_true, dtype=np.int64),
                      np.array(walk_pred, dtype=np.int64), history, warnings)


def _run_fold_args(args):
    return run_fold(*args)


def cross_validate(dataset: GaitDataset, model_config: ModelConfig, train_config: TrainConfig,
                   k: int = 10, seed: int = 0, workers: int = 1) -> CrossValidationResult:
    """Subject-level stratified k-fold CV. Returns pooled segment- and
    walk-level reports plus per-fold results; folds merge in index order."""
    plan = stratified_folds(dataset.subjects, k, seed)
    seeds = fold_seeds(seed, k)
    jobs = []
    for i in range(k):
        test, train = plan.test_and_train(i)
        jobs.append((dataset, i, test, train, model_config, train_config, seeds[i]))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold_args, jobs))
    else:
        folds = [_run_fold_args(j) for j in jobs]
    folds.sort(key=lambda f: f.fold)

    C = model_config.class_count
    reports = []
    for level in ("segment", "walk"):
        true = np.concatenate([getattr(f, f"{level}_true") for f in folds])
        pred = np.concatenate([getattr(f, f"{level}_pred") for f in folds])
        report = compute_metrics(ConfusionMatrix.from_predictions(true, pred, C))
        report.level = level
        report.fold_accuracies = [
            float(np.mean(getattr(f, f"{level}_true") == getattr(f, f"{level}_pred")))
            if len(getattr(f, f"{level}_true")) else 0.0
            for f in folds
        ]
        report.flags.extend(w for f in folds for w in f.warnings)
        reports.append(report)
    return CrossValidationResult(reports[0], reports[1], folds)


# ----------------------------------------------------------------------------
# report files


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def report_rows(report: EvaluationReport, labels: Sequence[str] = CLASS_LABELS) -> List[List[str]]:
    rows = [["label", "support", "precision", "recall", "f1", "accuracy"]]
    for m in report.per_class:
        name = labels[m.label] if m.label < len(labels) else str(m.label)
        rows.append([name, str(m.support), _fmt(m.precision), _fmt(m.recall), _fmt(m.f1),
                     _fmt(report.accuracy)])
    total = str(report.item_count)
    for name, avg in (("Macro Avg", report.macro), ("Weighted Avg", report.weighted)):
        rows.append([name, total, _fmt(avg["precision"]), _fmt(avg["recall"]), _fmt(avg["f1"]),
                     _fmt(report.accuracy)])
    return rows


def write_report(report: EvaluationReport, path: Union[str, Path], format: str = "delimited") -> None:
    path = Path(path)
    if format == "delimited":
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(report_rows(report))
    elif format == "structured":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown report format {format!r}")


def read_report(path: Union[str, Path]) -> EvaluationReport:
    return EvaluationReport.from_dict(json.loads(Path(path).read_text()))


def write_confusion_grid(cm: ConfusionMatrix, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in range(cm.classes)])
        for c in range(cm.classes):
            w.writerow([str(c)] + [str(int(v)) for v in cm.counts[c]])


ABLATION_ORDER = ("A", "B", "C", "D", "full")


def write_ablation_table(results: Dict[str, EvaluationReport], path: Union[str, Path]) -> List[List[str]]:
    """One row per variant (fixed order A, B, C, D, full) with weighted
    precision / recall / F1 and accuracy."""
    rows = [["variant", "conv", "spatial", "temporal", "precision", "recall", "f1", "accuracy"]]
    parts = {"A": (1, 1, 0), "B": (1, 0, 1), "C": (1, 0, 0), "D": (0, 1, 1), "full": (1, 1, 1)}
    for v in ABLATION_ORDER:
        if v not in results:
            continue
        r = results[v]
        rows.append([v, *("yes" if f else "no" for f in parts[v]), _fmt(r.weighted["precision"]),
                     _fmt(r.weighted["recall"]), _fmt(r.weighted["f1"]), _fmt(r.accuracy)])
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return rows
