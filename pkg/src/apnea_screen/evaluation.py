"""Leave-one-out evaluation: event-by-event scoring, 4-class severity
confusion matrix, and binary screening statistics.

Each fold holds one subject out, computes the metric scales from the
remaining subjects only, selects that subject's nearest phenotype neighbors,
pools and balances their epoch features, trains a fresh SVM, screens the
held-out recording, and scores the detected events against the expert
annotations. Nothing derived from the held-out subject (scales,
standardization, training rows) enters training, so the fold mimics a
never-seen subject.

Folds are independent; with jobs > 1 they run in worker processes and the
results are merged in subject-id order, so reports are identical for any
job count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .detector import (
    DetectedEvent,
    DetectorConfig,
    SEVERITIES,
    detect_events_from_arrays,
    severity_from_rei,
)
from .errors import ApneaScreenError
from .features import (
    FeatureConfig,
    STRIDE_S,
    desat_depths,
    epoch_starts,
    extract_features,
    feature_matrix,
    paradox_flags,
)
from .phenotype_knn import DatabaseTooSmall, KnnConfig, compute_scales, select_neighbors
from .recording_store import EventAnnotation, Subject, label_epochs, labels_to_array
from .svm import SvmConfig, balance_classes, decision_function, model_digest, standardize, train

DEFAULT_TRAIN_STRIDE_S = 5.0
DEFAULT_MAX_TRAIN_ROWS = 4000

STRATA = ("Normal", "Mild", "Moderate", "Severe", "All", "AHI<15", "AHI>=15")


class UnsortedInput(ApneaScreenError):
    pass


class EmptyCohort(ApneaScreenError):
    pass


class EmptyMatrix(ApneaScreenError):
    pass


class MissingAnnotations(ApneaScreenError):
    pass


# --- event-by-event scoring ----------------------------------------------

@dataclass(frozen=True)
class EventScore:
    tp: int
    fp: int
    fn: int
    ppv: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "EventScore":
        ppv = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2.0 * ppv * recall / (ppv + recall) if ppv + recall > 0 else 0.0
        return cls(tp=tp, fp=fp, fn=fn, ppv=ppv, recall=recall, f1=f1)


def _check_sorted_disjoint(intervals: Sequence[tuple[float, float]], name: str) -> None:
    prev_end = -math.inf
    for start, end in intervals:
        if start < prev_end:
            raise UnsortedInput(f"{name} events are unsorted or overlapping")
        prev_end = end


def match_events(
    detected: Sequence[DetectedEvent],
    annotated: Sequence[EventAnnotation],
    min_overlap_s: float = 0.0,
) -> EventScore:
    """Count detected events overlapping any annotation (TP), overlapping
    none (FP), and annotations hit by no detection (FN), in one sweep.
    By default any positive intersection counts (``min_overlap_s`` raises
    the bar); a detection spanning two annotations counts once and
    satisfies both."""
    det = [(ev.start_s, ev.end_s) for ev in detected]
    ann = [(ev.start_s, ev.end_s) for ev in annotated]
    _check_sorted_disjoint(det, "detected")
    _check_sorted_disjoint(ann, "annotated")

    det_hit = [False] * len(det)
    ann_hit = [False] * len(ann)
    i = j = 0
    while i < len(det) and j < len(ann):
        d_start, d_end = det[i]
        a_start, a_end = ann[j]
        overlap = min(d_end, a_end) - max(d_start, a_start)
        if overlap > min_overlap_s:
            det_hit[i] = True
            ann_hit[j] = True
        if d_end <= a_end:
            i += 1
        else:
            j += 1
    tp = sum(det_hit)
    return EventScore.from_counts(tp=tp, fp=len(det) - tp, fn=len(ann) - sum(ann_hit))


# --- cohort summaries -----------------------------------------------------

def median_mad(values: Sequence[float]) -> tuple[float, float]:
    """Median and (unscaled) median absolute deviation."""
    arr = np.asarray(values, dtype=np.float64)
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


@dataclass(frozen=True)
class PerSubjectResult:
    id: str
    expert_severity: str
    predicted_severity: str
    rei: float
    score: EventScore
    events: tuple[DetectedEvent, ...] = ()


def _stratum_members(results: Sequence[PerSubjectResult], stratum: str) -> list[PerSubjectResult]:
    if stratum == "All":
        return list(results)
    if stratum == "AHI<15":
        return [r for r in results if r.expert_severity in ("Normal", "Mild")]
    if stratum == "AHI>=15":
        return [r for r in results if r.expert_severity in ("Moderate", "Severe")]
    return [r for r in results if r.expert_severity == stratum]


def summarize_cohort(results: Sequence[PerSubjectResult]) -> dict:
    """median +/- MAD of ppv/recall/f1 per severity stratum. Strata with no
    subjects map to None."""
    if not results:
        raise EmptyCohort("no subjects to summarize")
    summary: dict[str, Optional[dict]] = {}
    for stratum in STRATA:
        members = _stratum_members(results, stratum)
        if not members:
            summary[stratum] = None
            continue
        entry = {"n": len(members)}
        for stat in ("ppv", "recall", "f1"):
            med, mad = median_mad([getattr(r.score, stat) for r in members])
            entry[stat] = {"median": med, "mad": mad}
        summary[stratum] = entry
    return summary


# --- severity confusion matrix and screening stats ------------------------

@dataclass(frozen=True)
class ConfusionMatrix4:
    """4x4 counts; rows are predicted severity, columns expert severity,
    both ordered Normal, Mild, Moderate, Severe."""

    m: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "ConfusionMatrix4":
        index = {name: k for k, name in enumerate(SEVERITIES)}
        m = np.zeros((4, 4), dtype=np.int64)
        for predicted, expert in pairs:
            m[index[predicted], index[expert]] += 1
        return cls(m=m)

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.int64)
        if m.shape != (4, 4) or (m < 0).any():
            raise ValueError("confusion matrix must be 4x4 with non-negative counts")
        object.__setattr__(self, "m", m)


def severity_metrics(matrix: ConfusionMatrix4) -> dict:
    """Overall accuracy plus per-class sensitivity (column-wise) and PPV
    (row-wise); undefined ratios are None."""
    m = matrix.m
    total = int(m.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    diag = np.diag(m)
    col_sums = m.sum(axis=0)
    row_sums = m.sum(axis=1)
    sensitivity = [
        float(diag[k] / col_sums[k]) if col_sums[k] > 0 else None for k in range(4)
    ]
    ppv = [float(diag[k] / row_sums[k]) if row_sums[k] > 0 else None for k in range(4)]
    return {
        "accuracy": float(diag.sum() / total),
        "sensitivity": dict(zip(SEVERITIES, sensitivity)),
        "ppv": dict(zip(SEVERITIES, ppv)),
    }


@dataclass(frozen=True)
class BinaryScreeningStats:
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: float
    lr_plus: Optional[float]  # math.inf when specificity == 1
    lr_minus: Optional[float]
    flags: tuple[str, ...] = ()


def binary_screening(matrix: ConfusionMatrix4) -> BinaryScreeningStats:
    """Collapse Moderate+Severe versus Normal+Mild on both axes (the
    "needs treatment" cutoff at 15 events/hour) and compute screening
    statistics with likelihood ratios."""
    m = matrix.m
    if m.sum() == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    pos = slice(2, 4)
    neg = slice(0, 2)
    tp = int(m[pos, pos].sum())
    fp = int(m[pos, neg].sum())
    fn = int(m[neg, pos].sum())
    tn = int(m[neg, neg].sum())

    flags = []
    sensitivity = specificity = None
    if tp + fn > 0:
        sensitivity = tp / (tp + fn)
    else:
        flags.append("no_expert_positives")
    if tn + fp > 0:
        specificity = tn / (tn + fp)
    else:
        flags.append("no_expert_negatives")
    accuracy = (tp + tn) / (tp + tn + fp + fn)

    lr_plus = lr_minus = None
    if sensitivity is not None and specificity is not None:
        if specificity == 1.0:
            lr_plus = math.inf
            flags.append("lr_plus_infinite")
        else:
            lr_plus = sensitivity / (1.0 - specificity)
        if specificity == 0.0:
            flags.append("lr_minus_undefined")
        else:
            lr_minus = (1.0 - sensitivity) / specificity
    return BinaryScreeningStats(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        sensitivity=sensitivity,
        specificity=specificity,
        accuracy=accuracy,
        lr_plus=lr_plus,
        lr_minus=lr_minus,
        flags=tuple(flags),
    )


# --- LOOCV ----------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    results: tuple[PerSubjectResult, ...]
    summaries: dict
    confusion: ConfusionMatrix4
    binary: BinaryScreeningStats
    model_digests: Optional[dict] = None


@dataclass(frozen=True)
class _SubjectPrep:
    """Per-subject arrays shared by every fold."""

    id: str
    matrix: np.ndarray
    paradox: np.ndarray
    desat: np.ndarray
    starts: np.ndarray
    labels: np.ndarray  # +1/-1 per epoch
    duration_s: float
    hours: float
    annotations: tuple[EventAnnotation, ...]
    expert_severity: str


def prepare_subject(subject: Subject, feat_cfg: FeatureConfig = FeatureConfig()) -> _SubjectPrep:
    from .features import build_epoch_grid

    feats = extract_features(subject, feat_cfg)
    grid = build_epoch_grid(subject.duration_s)
    labels = labels_to_array(label_epochs(subject, grid))
    annotations = tuple(subject.annotations or ())
    expert_rei = len(annotations) / subject.recording_hours
    return _SubjectPrep(
        id=subject.id,
        matrix=feature_matrix(feats),
        paradox=paradox_flags(feats),
        desat=desat_depths(feats),
        starts=epoch_starts(feats),
        labels=labels,
        duration_s=subject.duration_s,
        hours=subject.recording_hours,
        annotations=annotations,
        expert_severity=severity_from_rei(expert_rei),
    )


def _subsample_step(train_stride_s: float) -> int:
    return max(int(round(train_stride_s / STRIDE_S)), 1)


def _cap_rows(rows: np.ndarray, labels: np.ndarray, max_rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic even decimation down to max_rows."""
    n = len(rows)
    if n <= max_rows:
        return rows, labels
    idx = np.unique(np.round(np.linspace(0, n - 1, max_rows)).astype(np.intp))
    return rows[idx], labels[idx]


@dataclass(frozen=True)
class _FoldTask:
    subject_id: str
    train_rows: np.ndarray
    train_labels: np.ndarray
    held: _SubjectPrep
    svm_cfg: SvmConfig
    det_cfg: DetectorConfig
    max_train_rows: int
    collect_digest: bool


@dataclass(frozen=True)
class _FoldOutcome:
    subject_id: str
    events: tuple[DetectedEvent, ...]
    rei: float
    predicted_severity: str
    score: EventScore
    digest: Optional[str]


def _run_fold(task: _FoldTask) -> _FoldOutcome:
    rows, labels = balance_classes(task.train_rows, task.train_labels)
    rows, labels = _cap_rows(rows, labels, task.max_train_rows)
    tset = standardize(rows, labels)
    model = train(tset, C=task.svm_cfg.C, gamma=task.svm_cfg.gamma)

    held = task.held
    margins = decision_function(model, held.matrix)
    events = detect_events_from_arrays(
        margins > 0, held.paradox, held.starts, held.desat, held.duration_s, task.det_cfg
    )
    rei = len(events) / held.hours
    score = match_events(events, held.annotations)
    return _FoldOutcome(
        subject_id=held.id,
        events=tuple(events),
        rei=rei,
        predicted_severity=severity_from_rei(rei),
        score=score,
        digest=model_digest(model) if task.collect_digest else None,
    )


def train_subject_model(
    query: Subject,
    reference: Sequence[Subject],
    knn_cfg: KnnConfig = KnnConfig(),
    svm_cfg: SvmConfig = SvmConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    train_stride_s: float = DEFAULT_TRAIN_STRIDE_S,
    max_train_rows: int = DEFAULT_MAX_TRAIN_ROWS,
):
    """Subject-adaptive model: select the query's nearest phenotype
    neighbors in the reference set and train on their pooled epochs.
    Returns (model, neighbor_ids)."""
    scales = compute_scales([s.profile for s in reference])
    neighbor_ids = select_neighbors(query.profile, reference, knn_cfg, scales)
    by_id = {s.id: s for s in reference}
    step = _subsample_step(train_stride_s)
    rows_parts = []
    labels_parts = []
    for nid in neighbor_ids:
        p = prepare_subject(by_id[nid], feat_cfg)
        rows_parts.append(p.matrix[::step])
        labels_parts.append(p.labels[::step])
    rows, labels = balance_classes(np.concatenate(rows_parts), np.concatenate(labels_parts))
    rows, labels = _cap_rows(rows, labels, max_train_rows)
    model = train(standardize(rows, labels), C=svm_cfg.C, gamma=svm_cfg.gamma)
    return model, neighbor_ids


def run_loocv(
    database: Sequence[Subject],
    knn_cfg: KnnConfig = KnnConfig(),
    svm_cfg: SvmConfig = SvmConfig(),
    det_cfg: DetectorConfig = DetectorConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    train_stride_s: float = DEFAULT_TRAIN_STRIDE_S,
    max_train_rows: int = DEFAULT_MAX_TRAIN_ROWS,
    jobs: Optional[int] = 1,
    collect_model_digests: bool = False,
) -> EvalReport:
    """Leave-one-out over the whole database; deterministic given configs.

    Training epochs are pooled from the selected neighbors at
    ``train_stride_s`` spacing (the 0.5 s grid, 95% overlapping, is heavily
    redundant for training) and capped at ``max_train_rows`` after class
    balancing; the held-out subject is always predicted on the full grid.
    """
    subjects = sorted(database, key=lambda s: s.id)
    if len(subjects) < knn_cfg.k + knn_cfg.k_prime + 1:
        raise DatabaseTooSmall(
            f"LOOCV needs at least k + k' + 1 = {knn_cfg.k + knn_cfg.k_prime + 1} subjects,"
            f" have {len(subjects)}"
        )
    missing = [s.id for s in subjects if s.annotations is None]
    if missing:
        raise MissingAnnotations(f"subjects without annotations: {', '.join(missing)}")

    prep = {s.id: prepare_subject(s, feat_cfg) for s in subjects}
    step = _subsample_step(train_stride_s)

    tasks = []
    for held in subjects:
        fold = [s for s in subjects if s.id != held.id]
        scales = compute_scales([s.profile for s in fold])
        neighbor_ids = select_neighbors(held.profile, fold, knn_cfg, scales)
        train_rows = np.concatenate([prep[nid].matrix[::step] for nid in neighbor_ids])
        train_labels = np.concatenate([prep[nid].labels[::step] for nid in neighbor_ids])
        tasks.append(
            _FoldTask(
                subject_id=held.id,
                train_rows=train_rows,
                train_labels=train_labels,
                held=prep[held.id],
                svm_cfg=svm_cfg,
                det_cfg=det_cfg,
                max_train_rows=max_train_rows,
                collect_digest=collect_model_digests,
            )
        )

    if jobs is not None and jobs <= 1:
        outcomes = [_run_fold(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold, tasks))

    results = []
    pairs = []
    digests = {}
    for task, out in zip(tasks, outcomes):
        expert = task.held.expert_severity
        results.append(
            PerSubjectResult(
                id=out.subject_id,
                expert_severity=expert,
                predicted_severity=out.predicted_severity,
                rei=out.rei,
                score=out.score,
                events=out.events,
            )
        )
        pairs.append((out.predicted_severity, expert))
        if out.digest is not None:
            digests[out.subject_id] = out.digest

    matrix = ConfusionMatrix4.from_pairs(pairs)
    return EvalReport(
        results=tuple(results),
        summaries=summarize_cohort(results),
        confusion=matrix,
        binary=binary_screening(matrix),
        model_digests=digests or None,
    )


# --- report rendering -----------------------------------------------------

def _json_safe(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isinf(value):
        return None  # flagged separately
    return value


def report_to_dict(report: EvalReport) -> dict:
    metrics = severity_metrics(report.confusion)
    binary = report.binary
    return {
        "subjects": [
            {
                "id": r.id,
                "expert_severity": r.expert_severity,
                "predicted_severity": r.predicted_severity,
                "rei": r.rei,
                "tp": r.score.tp,
                "fp": r.score.fp,
                "fn": r.score.fn,
                "ppv": r.score.ppv,
                "recall": r.score.recall,
                "f1": r.score.f1,
            }
            for r in report.results
        ],
        "summaries": report.summaries,
        "confusion_matrix": report.confusion.m.tolist(),
        "severity_metrics": metrics,
        "binary_screening": {
            "tp": binary.tp,
            "fp": binary.fp,
            "tn": binary.tn,
            "fn": binary.fn,
            "sensitivity": binary.sensitivity,
            "specificity": binary.specificity,
            "accuracy": binary.accuracy,
            "lr_plus": _json_safe(binary.lr_plus),
            "lr_minus": _json_safe(binary.lr_minus),
            "flags": list(binary.flags),
        },
    }


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(value, digits=3):
    if value is None:
        return "-"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


def write_report_md(report: EvalReport, path) -> None:
    metrics = severity_metrics(report.confusion)
    binary = report.binary
    lines = ["# Screening evaluation report", "", "## Per-subject results", ""]
    lines.append("| id | expert | predicted | REI | TP | FP | FN | PPV | recall | F1 |")
    lines.append("|---|---|---|---|---|---|---|---|---|---|")
    for r in report.results:
        s = r.score
        lines.append(
            f"| {r.id} | {r.expert_severity} | {r.predicted_severity} | {r.rei:.1f} "
            f"| {s.tp} | {s.fp} | {s.fn} | {_fmt(s.ppv)} | {_fmt(s.recall)} | {_fmt(s.f1)} |"
        )
    lines += ["", "## Event scores by stratum (median +/- MAD)", ""]
    lines.append("| stratum | n | PPV | recall | F1 |")
    lines.append("|---|---|---|---|---|")
    for stratum in STRATA:
        entry = report.summaries.get(stratum)
        if entry is None:
            lines.append(f"| {stratum} | 0 | - | - | - |")
            continue
        cells = [
            f"{entry[stat]['median']:.2f} +/- {entry[stat]['mad']:.2f}"
            for stat in ("ppv", "recall", "f1")
        ]
        lines.append(f"| {stratum} | {entry['n']} | " + " | ".join(cells) + " |")
    lines += ["", "## Severity confusion matrix (rows predicted, columns expert)", ""]
    lines.append("| predicted \\ expert | " + " | ".join(SEVERITIES) + " |")
    lines.append("|---|---|---|---|---|")
    for k, name in enumerate(SEVERITIES):
        row = " | ".join(str(int(v)) for v in report.confusion.m[k])
        lines.append(f"| {name} | {row} |")
    lines += [
        "",
        f"4-class accuracy: {_fmt(metrics['accuracy'])}",
        "",
        "## Binary screening (REI >= 15)",
        "",
        f"- sensitivity: {_fmt(binary.sensitivity)}",
        f"- specificity: {_fmt(binary.specificity)}",
        f"- accuracy: {_fmt(binary.accuracy)}",
        f"- LR+: {_fmt(binary.lr_plus, 2)}",
        f"- LR-: {_fmt(binary.lr_minus, 3)}",
        "",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
