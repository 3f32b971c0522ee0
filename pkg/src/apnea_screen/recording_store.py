"""On-disk subject database: loading, validation, and serialization.

A database root holds one directory per subject:

    <root>/<subject_id>/
        manifest.json   id, gender, age, bmi, comorbidities, channel files
        spo2.csv        one column ``spo2_percent``, 1 Hz
        effort.csv      two columns ``thoracic,abdominal``, shared rate
        events.csv      optional; columns ``kind,start_s,duration_s``

Loaded subjects are immutable (frozen dataclasses over read-only arrays) and
safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ApneaScreenError

NOR = "NOR"
APN = "APN"

EVENT_KINDS = ("OSA", "CSA", "MSA", "HYP")

# Annotated events must last between 10 and 120 seconds.
MIN_EVENT_S = 10.0
MAX_EVENT_S = 120.0

# Sensor dropouts up to this long are linearly interpolated; longer gaps
# make the subject unloadable.
MAX_GAP_S = 5.0

# Fraction of an epoch that must overlap annotated events for an APN label.
APN_OVERLAP_FRACTION = 0.5


class MissingFile(ApneaScreenError):
    pass


class MalformedManifest(ApneaScreenError):
    pass


class InvariantViolation(ApneaScreenError):
    pass


class NoAnnotations(ApneaScreenError):
    pass


@dataclass(frozen=True)
class PhenotypeProfile:
    gender: str  # "male" | "female"
    age: float
    bmi: float
    hypertension: bool
    diabetes: bool
    hypothyroidism: bool

    @property
    def comorbidities(self) -> tuple[bool, bool, bool]:
        return (self.hypertension, self.diabetes, self.hypothyroidism)


@dataclass(frozen=True)
class SignalChannel:
    sample_rate_hz: float
    samples: np.ndarray
    unit: str


@dataclass(frozen=True)
class EventAnnotation:
    kind: str
    start_s: float
    duration_s: float

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class Subject:
    id: str
    profile: PhenotypeProfile
    spo2: SignalChannel
    thoracic: SignalChannel
    abdominal: SignalChannel
    annotations: Optional[tuple[EventAnnotation, ...]] = None
    recording_hours: float = field(init=False, default=0.0)

    def __post_init__(self):
        object.__setattr__(self, "recording_hours", len(self.spo2.samples) / 3600.0)

    @property
    def duration_s(self) -> float:
        """Recording duration on the 1 Hz SpO2 reference clock."""
        return float(len(self.spo2.samples))


def _fail(subject_id: str, check: str) -> None:
    raise InvariantViolation(f"subject {subject_id!r}: {check}")


def _read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifest(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise MalformedManifest(f"{path}: top-level value must be an object")
    return manifest


def _manifest_get(manifest: dict, key: str, path: Path):
    if key not in manifest:
        raise MalformedManifest(f"{path}: missing key {key!r}")
    return manifest[key]


def _parse_profile(manifest: dict, path: Path, subject_id: str) -> PhenotypeProfile:
    gender = _manifest_get(manifest, "gender", path)
    if gender not in ("male", "female"):
        raise MalformedManifest(f"{path}: gender must be 'male' or 'female'")
    try:
        age = float(_manifest_get(manifest, "age", path))
        bmi = float(_manifest_get(manifest, "bmi", path))
    except (TypeError, ValueError) as exc:
        raise MalformedManifest(f"{path}: age/bmi must be numbers") from exc
    if not (0.0 < age <= 130.0):
        _fail(subject_id, f"age {age} outside (0, 130]")
    if not (5.0 < bmi <= 100.0):
        _fail(subject_id, f"bmi {bmi} outside (5, 100]")
    com = _manifest_get(manifest, "comorbidities", path)
    if not isinstance(com, dict):
        raise MalformedManifest(f"{path}: comorbidities must be an object")
    flags = {}
    for name in ("hypertension", "diabetes", "hypothyroidism"):
        if name not in com or not isinstance(com[name], bool):
            _fail(subject_id, f"comorbidity flag {name!r} missing or non-boolean")
        flags[name] = com[name]
    return PhenotypeProfile(gender=gender, age=age, bmi=bmi, **flags)


def _read_csv_columns(path: Path, expected_header: Sequence[str]) -> list[np.ndarray]:
    """Read a numeric CSV with a required header; empty cells become NaN."""
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header.split(",") != list(expected_header):
            raise InvariantViolation(
                f"{path}: expected header {','.join(expected_header)!r}, got {header!r}"
            )
        cols: list[list[float]] = [[] for _ in expected_header]
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                # In a single-column file a blank line is a missing sample.
                if len(expected_header) == 1:
                    cols[0].append(math.nan)
                continue
            parts = line.split(",")
            if len(parts) != len(expected_header):
                raise InvariantViolation(f"{path}:{lineno}: expected {len(expected_header)} fields")
            for col, part in zip(cols, parts):
                part = part.strip()
                if part == "" or part.lower() == "nan":
                    col.append(math.nan)
                else:
                    try:
                        col.append(float(part))
                    except ValueError as exc:
                        raise InvariantViolation(f"{path}:{lineno}: bad number {part!r}") from exc
    return [np.asarray(col, dtype=np.float64) for col in cols]


def _interpolate_gaps(samples: np.ndarray, fs_hz: float, subject_id: str, label: str) -> np.ndarray:
    """Linearly fill NaN runs up to MAX_GAP_S; edge gaps extend the nearest value."""
    bad = ~np.isfinite(samples)
    if not bad.any():
        return samples
    max_gap = int(round(MAX_GAP_S * fs_hz))
    # Run-length scan over the bad mask.
    idx = np.flatnonzero(np.diff(np.concatenate(([False], bad, [False])).astype(np.int8)))
    starts, ends = idx[0::2], idx[1::2]
    if (ends - starts).max() > max_gap:
        _fail(subject_id, f"{label}: gap longer than {MAX_GAP_S:g} s")
    if bad.all():
        _fail(subject_id, f"{label}: no valid samples")
    good = np.flatnonzero(~bad)
    filled = samples.copy()
    filled[bad] = np.interp(np.flatnonzero(bad), good, samples[good])
    return filled


def _validate_spo2(samples: np.ndarray, subject_id: str) -> None:
    if samples.size == 0:
        _fail(subject_id, "spo2: empty channel")
    if samples.min() < 0.0 or samples.max() > 100.0:
        _fail(subject_id, "spo2: samples outside [0, 100]")


def _parse_events(path: Path, subject_id: str, duration_s: float) -> tuple[EventAnnotation, ...]:
    kinds: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header.split(",") != ["kind", "start_s", "duration_s"]:
            raise InvariantViolation(f"{path}: expected header 'kind,start_s,duration_s'")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise InvariantViolation(f"{path}:{lineno}: expected 3 fields")
            kind = parts[0]
            if kind not in EVENT_KINDS:
                _fail(subject_id, f"event kind {kind!r} not in {EVENT_KINDS}")
            try:
                start = float(parts[1])
                dur = float(parts[2])
            except ValueError as exc:
                raise InvariantViolation(f"{path}:{lineno}: bad number") from exc
            rows.append((kind, start, dur))
            kinds.append(kind)
    rows.sort(key=lambda r: r[1])
    events = []
    prev_end = -math.inf
    for kind, start, dur in rows:
        if not (MIN_EVENT_S <= dur <= MAX_EVENT_S):
            _fail(subject_id, f"event duration {dur:g} s outside [10, 120]")
        if start < 0.0 or start + dur > duration_s:
            _fail(subject_id, f"event [{start:g}, {start + dur:g}) outside recording")
        if start < prev_end:
            _fail(subject_id, "annotated events overlap")
        prev_end = start + dur
        events.append(EventAnnotation(kind=kind, start_s=start, duration_s=dur))
    return tuple(events)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def load_subject(subject_dir: Path) -> Subject:
    """Load and validate a single subject directory."""
    subject_dir = Path(subject_dir)
    manifest_path = subject_dir / "manifest.json"
    manifest = _read_manifest(manifest_path)
    subject_id = _manifest_get(manifest, "id", manifest_path)
    if not isinstance(subject_id, str) or not subject_id:
        raise MalformedManifest(f"{manifest_path}: id must be a non-empty string")

    profile = _parse_profile(manifest, manifest_path, subject_id)

    channels = _manifest_get(manifest, "channels", manifest_path)
    if not isinstance(channels, dict) or set(channels) != {"spo2", "effort"}:
        raise MalformedManifest(f"{manifest_path}: channels must define 'spo2' and 'effort'")
    spo2_fs = float(channels["spo2"].get("fs_hz", 0))
    effort_fs = float(channels["effort"].get("fs_hz", 0))
    if spo2_fs != 1.0:
        _fail(subject_id, f"spo2 fs_hz must be 1 (reference clock), got {spo2_fs:g}")
    if effort_fs < 4.0:
        _fail(subject_id, f"effort fs_hz must be >= 4, got {effort_fs:g}")

    (spo2,) = _read_csv_columns(subject_dir / channels["spo2"]["file"], ["spo2_percent"])
    spo2 = _interpolate_gaps(spo2, 1.0, subject_id, "spo2")
    _validate_spo2(spo2, subject_id)

    thoracic, abdominal = _read_csv_columns(
        subject_dir / channels["effort"]["file"], ["thoracic", "abdominal"]
    )
    if thoracic.size == 0:
        _fail(subject_id, "effort: empty channel")
    thoracic = _interpolate_gaps(thoracic, effort_fs, subject_id, "thoracic")
    abdominal = _interpolate_gaps(abdominal, effort_fs, subject_id, "abdominal")

    duration_s = float(len(spo2))
    effort_duration = len(thoracic) / effort_fs
    if abs(effort_duration - duration_s) > 1.0:
        _fail(
            subject_id,
            f"effort span {effort_duration:.2f} s differs from spo2 span {duration_s:.2f} s by > 1 s",
        )

    events_path = subject_dir / "events.csv"
    annotations = _parse_events(events_path, subject_id, duration_s) if events_path.is_file() else None

    return Subject(
        id=subject_id,
        profile=profile,
        spo2=SignalChannel(1.0, _freeze(spo2), "percent"),
        thoracic=SignalChannel(effort_fs, _freeze(thoracic), "au"),
        abdominal=SignalChannel(effort_fs, _freeze(abdominal), "au"),
        annotations=annotations,
    )


def load_database(root_path) -> list[Subject]:
    """Load every subject directory under ``root_path``, sorted by id.

    Raises MissingFile / MalformedManifest / InvariantViolation naming the
    offending subject; duplicate ids are rejected.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise MissingFile(str(root))
    subjects = []
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        subjects.append(load_subject(entry))
    by_id: dict[str, Subject] = {}
    for s in subjects:
        if s.id in by_id:
            raise InvariantViolation(f"duplicate subject id {s.id!r}")
        by_id[s.id] = s
    return [by_id[k] for k in sorted(by_id)]


# --- serialization ------------------------------------------------------

def _format_float(x: float) -> str:
    return repr(float(x))


def save_subject(subject: Subject, subject_dir: Path) -> None:
    """Write one subject in the on-disk layout (canonical float formatting)."""
    subject_dir = Path(subject_dir)
    subject_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "id": subject.id,
        "gender": subject.profile.gender,
        "age": subject.profile.age,
        "bmi": subject.profile.bmi,
        "comorbidities": {
            "hypertension": subject.profile.hypertension,
            "diabetes": subject.profile.diabetes,
            "hypothyroidism": subject.profile.hypothyroidism,
        },
        "channels": {
            "spo2": {"file": "spo2.csv", "fs_hz": subject.spo2.sample_rate_hz},
            "effort": {"file": "effort.csv", "fs_hz": subject.thoracic.sample_rate_hz},
        },
    }
    with open(subject_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(subject_dir / "spo2.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("spo2_percent\n")
        fh.writelines(_format_float(v) + "\n" for v in subject.spo2.samples)
    with open(subject_dir / "effort.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("thoracic,abdominal\n")
        fh.writelines(
            f"{_format_float(t)},{_format_float(a)}\n"
            for t, a in zip(subject.thoracic.samples, subject.abdominal.samples)
        )
    if subject.annotations is not None:
        with open(subject_dir / "events.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("kind,start_s,duration_s\n")
            fh.writelines(
                f"{ev.kind},{_format_float(ev.start_s)},{_format_float(ev.duration_s)}\n"
                for ev in subject.annotations
            )


def save_database(subjects: Sequence[Subject], root_path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for subject in subjects:
        save_subject(subject, root / subject.id)


# --- epoch labeling -----------------------------------------------------

def label_epochs(subject: Subject, epoch_grid) -> list[str]:
    """Label each grid epoch APN/NOR from the subject's expert annotations.

    An epoch is APN when at least half of its window overlaps the union of
    annotated events. Raises NoAnnotations when the subject was never scored
    (an empty annotation list is a valid all-NOR scoring).
    """
    if subject.annotations is None:
        raise NoAnnotations(f"subject {subject.id!r} has no expert annotations")
    starts = np.asarray(epoch_grid.epoch_starts, dtype=np.float64)
    window = epoch_grid.window_s
    overlap = np.zeros(len(starts))
    for ev in subject.annotations:
        lo = np.maximum(starts, ev.start_s)
        hi = np.minimum(starts + window, ev.end_s)
        overlap += np.maximum(hi - lo, 0.0)
    apn = overlap >= APN_OVERLAP_FRACTION * window
    return [APN if flag else NOR for flag in apn]


def labels_to_array(labels: Sequence[str]) -> np.ndarray:
    """Map NOR/APN labels to a -1/+1 float vector for the classifier."""
    return np.asarray([1.0 if lab == APN else -1.0 for lab in labels], dtype=np.float64)
