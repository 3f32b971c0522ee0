"""Turns per-epoch classifier output into timed apnea events.

The time axis is split into 0.5 s frames (one per epoch stride). Each frame
collects votes from every epoch window covering it: APN predictions count 1,
paradoxical-movement flags add a configurable bonus, and the total is
normalized by the achievable maximum. Frames above the vote threshold form
runs; runs closer than the merge gap are fused, runs shorter than 10 s are
dropped, and runs longer than 120 s are split into consecutive 120 s events
so long obstructed stretches still contribute multiple events to the REI.

A desaturation correction then rescues events the classifier missed: every
epoch whose SpO2 desaturation depth reaches the threshold is declared
apneic, and extraction is re-run on the union of the frame flags, the
detected events, and those epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ApneaScreenError
from .features import (
    EpochFeatures,
    FeatureConfig,
    STRIDE_S,
    WINDOW_S,
    build_epoch_grid,
    desat_depths,
    epoch_starts,
    extract_features,
    feature_matrix,
    paradox_flags,
)
from .recording_store import MAX_EVENT_S, MIN_EVENT_S, Subject
from .svm import TrainedModel, decision_function

SOURCE_SVM = "svm"
SOURCE_DESAT = "desat_correction"

SEVERITIES = ("Normal", "Mild", "Moderate", "Severe")

# Events-per-hour severity boundaries; the left endpoint belongs to the
# higher grade (rei = 15 is Moderate).
SEVERITY_THRESHOLDS = (5.0, 15.0, 30.0)


class GridMismatch(ApneaScreenError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    frame_s: float = STRIDE_S
    merge_gap_s: float = 5.0
    paradox_vote_bonus: float = 1.0
    vote_threshold: float = 0.5
    desat_threshold: float = 3.0

    def __post_init__(self):
        if min(self.frame_s, self.merge_gap_s, self.desat_threshold) <= 0:
            raise ValueError("detector config values must be positive")
        if self.paradox_vote_bonus <= 0:
            raise ValueError("paradox_vote_bonus must be positive")
        if not (0.0 < self.vote_threshold <= 1.0):
            raise ValueError("vote_threshold must be in (0, 1]")


@dataclass(frozen=True)
class DetectedEvent:
    start_s: float
    duration_s: float
    source: str = SOURCE_SVM

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class ScreeningReport:
    subject_id: str
    events: tuple[DetectedEvent, ...]
    rei: float
    severity: str


def severity_from_rei(rei: float) -> str:
    if rei < SEVERITY_THRESHOLDS[0]:
        return "Normal"
    if rei < SEVERITY_THRESHOLDS[1]:
        return "Mild"
    if rei < SEVERITY_THRESHOLDS[2]:
        return "Moderate"
    return "Severe"


def frame_votes(
    apn_predicted: np.ndarray,
    paradox: np.ndarray,
    grid,
    duration_s: float,
    cfg: DetectorConfig = DetectorConfig(),
) -> np.ndarray:
    """Per-frame apnea score in [0, 1].

    score = (#covering APN epochs + bonus * #covering paradox epochs)
            / (#covering epochs * (1 + bonus)); frames covered by no epoch
    score 0.
    """
    apn = np.asarray(apn_predicted, dtype=bool)
    par = np.asarray(paradox, dtype=bool)
    n_epochs = len(grid.epoch_starts)
    if len(apn) != n_epochs or len(par) != n_epochs:
        raise GridMismatch(
            f"{len(apn)} predictions / {len(par)} paradox flags for {n_epochs} epochs"
        )
    n_frames = int(round(duration_s / cfg.frame_s))
    span = int(round(WINDOW_S / cfg.frame_s))  # epochs covering an interior frame

    f = np.arange(n_frames)
    lo = np.clip(f - (span - 1), 0, n_epochs)  # first covering epoch index
    hi = np.clip(f + 1, 0, n_epochs)  # one past the last covering epoch

    apn_cum = np.concatenate(([0], np.cumsum(apn)))
    par_cum = np.concatenate(([0], np.cumsum(par)))
    n_cover = (hi - lo).astype(np.float64)
    n_apn = apn_cum[hi] - apn_cum[lo]
    n_par = par_cum[hi] - par_cum[lo]

    scores = np.zeros(n_frames)
    covered = n_cover > 0
    bonus = cfg.paradox_vote_bonus
    scores[covered] = (n_apn[covered] + bonus * n_par[covered]) / (
        n_cover[covered] * (1.0 + bonus)
    )
    return scores


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal True runs as half-open index pairs."""
    padded = np.concatenate(([False], np.asarray(flags, dtype=bool), [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[0::2], edges[1::2]))


def merged_intervals(frame_flags: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> list[tuple[float, float]]:
    """Maximal apneic runs in seconds, with gaps below the merge threshold
    fused; this is the pre-duration-filter view of the detector."""
    flags = np.asarray(frame_flags, dtype=bool)
    if flags.size == 0:
        raise ValueError("frame sequence is empty")
    merged: list[list[float]] = []
    for i0, i1 in _runs(flags):
        start, end = i0 * cfg.frame_s, i1 * cfg.frame_s
        if merged and start - merged[-1][1] < cfg.merge_gap_s:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return [(start, end) for start, end in merged]


def extract_events(frame_flags: np.ndarray, cfg: DetectorConfig = DetectorConfig()) -> list[DetectedEvent]:
    """Apneic frame runs -> merged, duration-bounded events."""
    events: list[DetectedEvent] = []
    for start, end in merged_intervals(frame_flags, cfg):
        if end - start < MIN_EVENT_S:
            continue
        while end - start > MAX_EVENT_S:
            events.append(DetectedEvent(start, MAX_EVENT_S, SOURCE_SVM))
            start += MAX_EVENT_S
        if end - start >= MIN_EVENT_S:
            events.append(DetectedEvent(start, end - start, SOURCE_SVM))
    return events


def desaturation_correction(
    events: Sequence[DetectedEvent],
    frame_flags: np.ndarray,
    epoch_features: Sequence[EpochFeatures],
    cfg: DetectorConfig = DetectorConfig(),
) -> list[DetectedEvent]:
    """Mark desaturated epochs as apneic and re-extract events on the union
    of the frame flags, the events' own spans, and the desaturated epochs.
    Events overlapping a previously detected SVM event keep the svm source;
    everything else is attributed to the correction.

    Epochs already inside an event contribute nothing new, so this realizes
    the "normal epoch with desaturation becomes apnea" rule; keeping the
    marked set independent of the incoming event list (and always including
    the original flags and event spans) is what makes a second application a
    no-op even around the 120 s split boundaries.
    """
    return _desat_correction_arrays(
        events, frame_flags, epoch_starts(epoch_features), desat_depths(epoch_features), cfg
    )


def _desat_correction_arrays(
    events: Sequence[DetectedEvent],
    frame_flags: np.ndarray,
    starts: np.ndarray,
    depths: np.ndarray,
    cfg: DetectorConfig,
) -> list[DetectedEvent]:
    flags = np.asarray(frame_flags, dtype=bool).copy()
    n_frames = len(flags)

    def mark(start_s: float, end_s: float) -> None:
        i0 = max(int(round(start_s / cfg.frame_s)), 0)
        i1 = min(int(round(end_s / cfg.frame_s)), n_frames)
        flags[i0:i1] = True

    for ev in events:
        mark(ev.start_s, ev.end_s)
    for start, deep in zip(starts, depths >= cfg.desat_threshold):
        if deep:
            mark(start, start + WINDOW_S)

    svm_spans = [(ev.start_s, ev.end_s) for ev in events if ev.source == SOURCE_SVM]
    corrected = []
    for ev in extract_events(flags, cfg):
        overlaps_svm = any(s < ev.end_s and ev.start_s < e for s, e in svm_spans)
        corrected.append(ev if overlaps_svm else replace(ev, source=SOURCE_DESAT))
    return corrected


def screen(
    subject: Subject,
    model: TrainedModel,
    cfg: DetectorConfig = DetectorConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    features: Optional[Sequence[EpochFeatures]] = None,
) -> ScreeningReport:
    """Detect events for one subject with a trained model and grade severity
    by the respiratory event index (events per recording hour)."""
    if features is None:
        features = extract_features(subject, feat_cfg)
    margins = decision_function(model, feature_matrix(features))
    events = detect_events_from_arrays(
        margins > 0,
        paradox_flags(features),
        epoch_starts(features),
        desat_depths(features),
        subject.duration_s,
        cfg,
    )
    rei = len(events) / subject.recording_hours
    return ScreeningReport(
        subject_id=subject.id,
        events=tuple(events),
        rei=rei,
        severity=severity_from_rei(rei),
    )


def detect_events_from_arrays(
    apn_predicted: np.ndarray,
    paradox: np.ndarray,
    starts: np.ndarray,
    depths: np.ndarray,
    duration_s: float,
    cfg: DetectorConfig = DetectorConfig(),
) -> list[DetectedEvent]:
    """Full detection chain: frame votes -> run extraction -> desaturation
    correction."""
    grid = build_epoch_grid(duration_s)
    scores = frame_votes(apn_predicted, paradox, grid, duration_s, cfg)
    flags = scores >= cfg.vote_threshold
    events = extract_events(flags, cfg)
    return _desat_correction_arrays(events, flags, starts, depths, cfg)
