"""Gait record ingestion and preprocessing.

Pipeline, in this order only: parse -> attach severity -> impute -> normalize
-> segment. Each walk file is whitespace-delimited text with 19 columns: time
in seconds followed by 18 vertical ground reaction force channels (8 sensors
under each foot plus the two per-foot totals).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

SENSOR_COUNT = 18
SEVERITIES = ("healthy", "stage2", "stage2_5", "stage3")
SEVERITY_INDEX = {name: i for i, name in enumerate(SEVERITIES)}
HOEHN_YAHR_TO_SEVERITY = {2.0: "stage2", 2.5: "stage2_5", 3.0: "stage3"}
STUDIES = ("Ga", "Ju", "Si")

WALK_FILE_RE = re.compile(r"^(?P<study>Ga|Ju|Si)(?P<cohort>Co|Pt)(?P<num>\d+)_(?P<walk>\d+)\.txt$")

# pipeline stages
PARSED, IMPUTED, NORMALIZED = 0, 1, 2


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class UnknownSubjectError(DataError, KeyError):
    def __str__(self):
        return self.args[0]


class ExcludedWalk(DataError):
    """A walk deliberately left out of the dataset (e.g. unsupported stage)."""


class PipelineOrderError(DataError):
    pass


@dataclass
class WalkRecord:
    subject_id: str
    study: str
    cohort: str
    walk_id: str
    time: np.ndarray
    channels: np.ndarray  # (18, length)
    severity: Optional[str] = None
    source: str = ""
    stage: int = PARSED

    def __post_init__(self):
        if self.channels.ndim != 2 or self.channels.shape[1] != len(self.time):
            raise DataError(
                f"channels {self.channels.shape} do not match time length {len(self.time)}"
            )
        if self.channels.shape[1] < 1:
            raise DataError("walk has no samples")
        if self.severity is not None and (self.cohort == "control") != (self.severity == "healthy"):
            raise DataError(f"{self.subject_id}: cohort {self.cohort} inconsistent with {self.severity}")

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    @property
    def label(self) -> int:
        if self.severity is None:
            return -1
        return SEVERITY_INDEX[self.severity]

    @property
    def key(self) -> str:
        return f"{self.subject_id}_{self.walk_id}"


@dataclass
class Segment:
    values: np.ndarray  # (S, p), a view into the normalized walk
    label: int
    subject_id: str
    walk_id: str
    start_offset: int

    @property
    def walk_key(self) -> str:
        return f"{self.subject_id}_{self.walk_id}"


# ----------------------------------------------------------------------------
# parsing


def parse_walk_name(name: str) -> Tuple[str, str, str, str]:
    """``GaPt07_02.txt`` -> ``("Ga", "parkinson", "GaPt07", "02")``."""
    m = WALK_FILE_RE.match(name)
    if not m:
        raise DataError(f"{name!r} does not follow the <Study><Co|Pt><NN>_<WW>.txt naming scheme")
    cohort = "control" if m["cohort"] == "Co" else "parkinson"
    return m["study"], cohort, f"{m['study']}{m['cohort']}{m['num']}", m["walk"]


def parse_vgrf_file(path: Union[str, Path], require_name: bool = True) -> WalkRecord:
    """Read one walk file. With ``require_name=False`` a file outside the
    naming scheme is accepted with unknown study and cohort."""
    path = Path(path)
    try:
        study, cohort, subject, walk = parse_walk_name(path.name)
    except DataError:
        if require_name:
            raise
        study, cohort, subject, walk = "", "unknown", path.stem, "00"
    width = SENSOR_COUNT + 1
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != width:
                raise ParseError(path, lineno, f"expected {width} columns, found {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ParseError(path, lineno, "non-numeric value") from None
    if not rows:
        raise ParseError(path, None, "file is empty")
    table = np.array(rows, dtype=np.float64)
    return WalkRecord(subject, study, cohort, walk, table[:, 0].copy(),
                      np.ascontiguousarray(table[:, 1:].T), source=str(path))


def find_walk_files(directory: Union[str, Path]) -> List[Path]:
    """Walk files in ``directory`` (non-recursive), sorted by name."""
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and WALK_FILE_RE.match(p.name))


# ----------------------------------------------------------------------------
# demographics and labels


@dataclass(frozen=True)
class SubjectInfo:
    subject_id: str
    group: Optional[str]
    hoehn_yahr: Optional[float]


_ID_COLS = ("id", "subject", "subject_id", "subjectid")
_GROUP_COLS = ("group", "cohort")
_HY_COLS = ("hoehnyahr", "hoehn_yahr", "hy", "h&y", "hoehn&yahr")
_GROUP_VALUES = {"pd": "parkinson", "parkinson": "parkinson", "1": "parkinson",
                 "co": "control", "control": "control", "2": "control"}


def _to_float(text: str) -> Optional[float]:
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def load_demographics(path: Union[str, Path]) -> Dict[str, SubjectInfo]:
    """Read a delimited demographics table with a header row naming a subject
    id column, an optional group column and a Hoehn & Yahr column."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: demographics table is empty")
    head = lines[0]
    if "\t" in head:
        rows = list(csv.reader(io.StringIO("\n".join(lines)), delimiter="\t"))
    elif "," in head:
        rows = list(csv.reader(io.StringIO("\n".join(lines))))
    else:
        rows = [ln.split() for ln in lines]
    header = [h.strip().lower().replace(" ", "") for h in rows[0]]

    def column(options):
        for opt in options:
            if opt in header:
                return header.index(opt)
        return None

    id_col, group_col, hy_col = column(_ID_COLS), column(_GROUP_COLS), column(_HY_COLS)
    if id_col is None or hy_col is None:
        raise DataError(f"{path}: header needs a subject id and a Hoehn-Yahr column, got {rows[0]}")
    table = {}
    for row in rows[1:]:
        row = [c.strip() for c in row]
        if len(row) <= id_col or not row[id_col]:
            continue
        group = None
        if group_col is not None and group_col < len(row):
            group = _GROUP_VALUES.get(row[group_col].lower())
        hy = _to_float(row[hy_col]) if hy_col < len(row) else None
        table[row[id_col]] = SubjectInfo(row[id_col], group, hy)
    return table


def attach_severity(record: WalkRecord, demographics: Mapping[str, SubjectInfo]) -> WalkRecord:
    """Label a walk from its subject's Hoehn & Yahr stage.

    Raises :class:`UnknownSubjectError` for subjects missing from the table and
    :class:`ExcludedWalk` for PD stages other than 2, 2.5 and 3.
    """
    if record.stage != PARSED:
        raise PipelineOrderError("attach_severity must run before imputation")
    info = demographics.get(record.subject_id)
    if info is None:
        raise UnknownSubjectError(f"subject {record.subject_id} not in demographics table")
    if info.group is not None and info.group != record.cohort:
        raise ExcludedWalk(
            f"{record.key}: file name says {record.cohort}, demographics say {info.group}"
        )
    if record.cohort == "control":
        severity = "healthy"
    else:
        severity = HOEHN_YAHR_TO_SEVERITY.get(info.hoehn_yahr)
        if severity is None:
            raise ExcludedWalk(f"{record.key}: Hoehn-Yahr {info.hoehn_yahr} outside {{2, 2.5, 3}}")
    return replace(record, severity=severity)


# ----------------------------------------------------------------------------
# preprocessing


def impute_missing(record: WalkRecord) -> Tuple[WalkRecord, int]:
    """Replace non-finite channel values with 0.0; returns the count replaced."""
    if record.stage > IMPUTED:
        raise PipelineOrderError("impute_missing must run before normalize")
    bad = ~np.isfinite(record.channels)
    count = int(bad.sum())
    channels = np.where(bad, 0.0, record.channels) if count else record.channels.copy()
    return replace(record, channels=channels, stage=IMPUTED), count


def zscore_rows(values: np.ndarray) -> np.ndarray:
    """Per-row z-score; rows with (numerically) zero spread become zeros."""
    mean = values.mean(axis=1, keepdims=True)
    centered = values - mean
    std = np.sqrt((centered * centered).mean(axis=1, keepdims=True))
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return np.where(flat, 0.0, centered / np.where(flat, 1.0, std))


def normalize(record: WalkRecord) -> WalkRecord:
    """Z-score each channel over the whole walk."""
    if record.stage < IMPUTED:
        raise PipelineOrderError("normalize needs an imputed record")
    return replace(record, channels=zscore_rows(record.channels), stage=NORMALIZED)


def segment_count(length: int, p: int = 100, stride: int = 50) -> int:
    return 0 if length < p else (length - p) // stride + 1


def segment_walk(record: WalkRecord, p: int = 100, overlap: float = 0.5) -> List[Segment]:
    """Windows of ``p`` samples starting every ``p * (1 - overlap)`` samples;
    the incomplete tail is dropped."""
    if record.stage != NORMALIZED:
        raise PipelineOrderError("segment_walk needs a normalized record")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(1, int(round(p * (1.0 - overlap))))
    n = segment_count(record.length, p, stride)
    if n == 0:
        logger.warning("walk %s has %d samples, shorter than segment length %d",
                       record.key, record.length, p)
        return []
    return [
        Segment(record.channels[:, off:off + p], record.label, record.subject_id,
                record.walk_id, off)
        for off in range(0, stride * n, stride)
    ]


def preprocess(record: WalkRecord) -> Tuple[WalkRecord, int]:
    """impute + normalize; returns the record and the imputation count."""
    record, count = impute_missing(record)
    return normalize(record), count


# ----------------------------------------------------------------------------
# dataset assembly


@dataclass
class WalkEntry:
    record: WalkRecord
    segments: List[Segment]
    imputed: int


@dataclass
class GaitDataset:
    walks: List[WalkEntry] = field(default_factory=list)
    excluded: List[Tuple[str, str]] = field(default_factory=list)
    segment_length: int = 100

    @property
    def subjects(self) -> Dict[str, int]:
        """subject id -> class index."""
        return {w.record.subject_id: w.record.label for w in self.walks}

    def walks_of(self, subject_ids: Iterable[str]) -> List[WalkEntry]:
        wanted = set(subject_ids)
        return [w for w in self.walks if w.record.subject_id in wanted]

    def arrays(self, subject_ids: Iterable[str]) -> Tuple[np.ndarray, np.ndarray]:
        segs = [s for w in self.walks_of(subject_ids) for s in w.segments]
        if not segs:
            n = self.walks[0].record.channels.shape[0] if self.walks else SENSOR_COUNT
            return np.empty((0, n, self.segment_length)), np.empty(0, dtype=np.int64)
        return np.stack([s.values for s in segs]), np.array([s.label for s in segs], dtype=np.int64)

    def class_counts(self) -> List[int]:
        counts = [0] * len(SEVERITIES)
        for w in self.walks:
            counts[w.record.label] += 1
        return counts


def build_dataset(data_dir: Union[str, Path], demographics_path: Union[str, Path],
                  p: int = 100, overlap: float = 0.5) -> GaitDataset:
    """Run the full pipeline over every walk file; files that fail any step
    are logged and recorded in ``excluded`` rather than aborting the run."""
    demographics = load_demographics(demographics_path)
    dataset = GaitDataset(segment_length=p)
    for path in find_walk_files(data_dir):
        try:
            record = attach_severity(parse_vgrf_file(path), demographics)
        except DataError as exc:
            logger.warning("excluding %s: %s", path.name, exc)
            dataset.excluded.append((path.name, str(exc)))
            continue
        record, count = preprocess(record)
        segments = segment_walk(record, p, overlap)
        if not segments:
            dataset.excluded.append((path.name, f"shorter than {p} samples"))
            continue
        dataset.walks.append(WalkEntry(record, segments, count))
    return dataset


def write_manifest(dataset: GaitDataset, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "walk", "study", "length", "segments", "label", "severity", "imputed"])
        for e in dataset.walks:
            r = e.record
            w.writerow([r.subject_id, r.walk_id, r.study, r.length, len(e.segments), r.label,
                        r.severity, e.imputed])


# ----------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    folds: List[List[str]]
    tallies: List[List[int]]  # per fold, subjects per class

    def __len__(self) -> int:
        return len(self.folds)

    def test_and_train(self, i: int) -> Tuple[List[str], List[str]]:
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return list(self.folds[i]), train


def _deal(subject_labels: Mapping[str, int], k: int, rng: np.random.Generator) -> List[List[str]]:
    """Round-robin dealing of each class (shuffled) into ``k`` bins, continuing
    the bin pointer across classes so bin sizes differ by at most one."""
    bins: List[List[str]] = [[] for _ in range(k)]
    pointer = 0
    for label in sorted(set(subject_labels.values())):
        members = sorted(s for s, lab in subject_labels.items() if lab == label)
        for s in (members[i] for i in rng.permutation(len(members))):
            bins[pointer].append(s)
            pointer = (pointer + 1) % k
    return bins


def stratified_folds(subject_labels: Mapping[str, int], k: int = 10, seed: int = 0) -> FoldPlan:
    """Subject-level folds, stratified by class (control = class 0)."""
    n_control = sum(1 for lab in subject_labels.values() if lab == 0)
    n_pd = len(subject_labels) - n_control
    if n_control < k or n_pd < k:
        raise DataError(
            f"need at least {k} subjects per cohort for {k} folds "
            f"(control {n_control}, parkinson {n_pd})"
        )
    folds = _deal(subject_labels, k, np.random.default_rng(seed))
    classes = len(SEVERITIES) if max(subject_labels.values(), default=0) < len(SEVERITIES) \
        else max(subject_labels.values()) + 1
    tallies = []
    for f in folds:
        t = [0] * classes
        for s in f:
            t[subject_labels[s]] += 1
        tallies.append(t)
    return FoldPlan([sorted(f) for f in folds], tallies)


def holdout_split(subject_labels: Mapping[str, int], fraction: float = 0.1,
                  seed: int = 0) -> Tuple[List[str], List[str]]:
    """Class-stratified ``(train, validation)`` subject split. Every class with
    at least two subjects contributes ``round(fraction * n)`` (min 1 overall)."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in sorted(set(subject_labels.values())):
        members = sorted(s for s, lab in subject_labels.items() if lab == label)
        members = [members[i] for i in rng.permutation(len(members))]
        take = int(math.floor(fraction * len(members) + 0.5)) if len(members) > 1 else 0
        val.extend(members[:take])
        train.extend(members[take:])
    if fraction > 0 and not val and len(train) > 1:
        val.append(train.pop())
    return sorted(train), sorted(val)
