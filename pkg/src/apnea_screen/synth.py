"""Deterministic synthetic cohort generator.

Writes databases in the recording_store layout: per subject a phenotype
manifest, a 1 Hz SpO2 channel, two effort channels, and annotations placed
exactly at the planted events. Severity proportions and group-level
demographics/event rates are calibrated so the cohort resembles a
sleep-clinic population, but the generator's purpose is pipeline validation,
not physiological fidelity.

Planted events reduce the breathing amplitude (and its noise) to under 10%
of baseline, trigger an SpO2 dip of at least 3 percentage points a few
seconds after onset, and optionally flip the abdominal channel anti-phase
(paradoxical breathing). Everything is drawn from per-subject generators
seeded from the cohort seed, so the same spec always produces byte-identical
files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import SEVERITY_THRESHOLDS
from .errors import ApneaScreenError
from .recording_store import (
    EventAnnotation,
    PhenotypeProfile,
    SignalChannel,
    Subject,
    load_database,
    save_subject,
)

# Events must clear this margin before the next slot begins; it leaves room
# for the SpO2 dip and its epoch footprint so consecutive detections do not
# fuse across events.
EVENT_MARGIN_S = 45.0
MIN_SLOT_S = 58.0
FIRST_EVENT_S = 30.0
TAIL_GUARD_S = 40.0

DEFAULT_SEVERITY_MIX = (10 / 62, 11 / 62, 4 / 62, 37 / 62)


class InvalidSpec(ApneaScreenError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int
    seed: int
    duration_min: float = 30.0
    severity_mix: tuple[float, float, float, float] = DEFAULT_SEVERITY_MIX
    effort_fs_hz: float = 8.0
    noise_level: float = 0.05
    paradox_fraction: float = 0.5

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise InvalidSpec("n_subjects must be positive")
        if self.duration_min < 5.0:
            raise InvalidSpec("duration_min must be at least 5 minutes")
        if len(self.severity_mix) != 4 or min(self.severity_mix) < 0:
            raise InvalidSpec("severity_mix must be four non-negative fractions")
        if abs(sum(self.severity_mix) - 1.0) > 1e-9:
            raise InvalidSpec("severity_mix must sum to 1")
        if self.effort_fs_hz < 4.0:
            raise InvalidSpec("effort_fs_hz must be at least 4 Hz")
        if not (0.0 < self.noise_level < 0.5):
            raise InvalidSpec("noise_level must be in (0, 0.5)")
        if not (0.0 <= self.paradox_fraction <= 1.0):
            raise InvalidSpec("paradox_fraction must be in [0, 1]")


@dataclass(frozen=True)
class _GroupCalibration:
    rate_center: float
    rate_sd: float
    rate_lo: float
    rate_hi: float
    age_mean: float
    age_sd: float
    bmi_mean: float
    bmi_sd: float
    male_fraction: float
    kind_weights: tuple[float, float, float, float]  # OSA, HYP, CSA, MSA


# Group-level event rates (per hour) and demographics for a plausible
# sleep-clinic mix; rates are clipped inside their severity band so the
# planted annotations grade back to the drawn severity.
SEVERITY_CALIBRATION: dict[str, _GroupCalibration] = {
    "Normal": _GroupCalibration(2.2, 1.4, 0.5, 4.5, 34.8, 16.3, 22.4, 2.8, 0.40, (0.10, 0.60, 0.20, 0.10)),
    "Mild": _GroupCalibration(9.9, 2.7, 5.5, 14.5, 38.6, 15.5, 25.0, 4.5, 0.64, (0.30, 0.55, 0.10, 0.05)),
    "Moderate": _GroupCalibration(24.9, 5.3, 15.5, 29.5, 49.8, 13.1, 27.0, 1.6, 1.00, (0.15, 0.70, 0.05, 0.10)),
    "Severe": _GroupCalibration(55.0, 15.0, 30.5, 55.0, 52.3, 13.8, 27.8, 3.7, 0.92, (0.55, 0.30, 0.03, 0.12)),
}

_COMORBIDITY_PREVALENCE = {
    # (hypertension, diabetes, hypothyroidism) per severity index 0..3
    "Normal": (0.15, 0.08, 0.06),
    "Mild": (0.30, 0.15, 0.08),
    "Moderate": (0.45, 0.22, 0.10),
    "Severe": (0.60, 0.29, 0.12),
}

_SEVERITY_ORDER = ("Normal", "Mild", "Moderate", "Severe")


def _apportion(mix, n: int) -> list[int]:
    """Largest-remainder apportionment of n subjects over the mix."""
    raw = [m * n for m in mix]
    counts = [int(math.floor(r)) for r in raw]
    remainders = sorted(range(4), key=lambda k: (raw[k] - counts[k], k), reverse=True)
    for k in remainders[: n - sum(counts)]:
        counts[k] += 1
    return counts


def _floor_half(x: float) -> float:
    return math.floor(x * 2.0) / 2.0


@dataclass(frozen=True)
class _PlannedEvent:
    kind: str
    onset_s: float
    duration_s: float
    paradox: bool
    reduction: float
    dip_lag_s: float
    dip_depth: float


def _severity_band_counts(severity: str, hours: float, slots_max: int) -> tuple[int, int]:
    """Smallest and largest event count whose events-per-hour grades back to
    the drawn severity."""
    bands = {
        "Normal": (0.0, SEVERITY_THRESHOLDS[0]),
        "Mild": (SEVERITY_THRESHOLDS[0], SEVERITY_THRESHOLDS[1]),
        "Moderate": (SEVERITY_THRESHOLDS[1], SEVERITY_THRESHOLDS[2]),
        "Severe": (SEVERITY_THRESHOLDS[2], math.inf),
    }
    lo_rate, hi_rate = bands[severity]
    n_lo = 0 if lo_rate == 0.0 else int(math.ceil(lo_rate * hours - 1e-9))
    n_hi = slots_max if math.isinf(hi_rate) else int(math.ceil(hi_rate * hours - 1e-9)) - 1
    return n_lo, min(n_hi, slots_max)


def _plan_events(rng: np.random.Generator, severity: str, cal: _GroupCalibration,
                 duration_s: float, paradox_fraction: float) -> tuple[float, list[_PlannedEvent]]:
    hours = duration_s / 3600.0
    rate = float(np.clip(rng.normal(cal.rate_center, cal.rate_sd), cal.rate_lo, cal.rate_hi))
    span = duration_s - FIRST_EVENT_S - TAIL_GUARD_S
    slots_max = int(span // MIN_SLOT_S)
    n_lo, n_hi = _severity_band_counts(severity, hours, slots_max)
    if n_lo > n_hi:
        raise InvalidSpec(
            f"duration {duration_s / 60.0:g} min is too short to plant a {severity} subject"
        )
    n_events = min(max(int(round(rate * hours)), n_lo), n_hi)
    if n_events == 0:
        return rate, []
    slot = span / n_events

    events = []
    for e in range(n_events):
        base = FIRST_EVENT_S + e * slot
        dur_max = min(30.0, slot - EVENT_MARGIN_S - 0.5)
        dur = _floor_half(rng.uniform(12.0, dur_max))
        onset = _floor_half(base + rng.uniform(0.0, slot - dur - EVENT_MARGIN_S - 0.5))
        kind = str(rng.choice(["OSA", "HYP", "CSA", "MSA"], p=cal.kind_weights))
        events.append(
            _PlannedEvent(
                kind=kind,
                onset_s=onset,
                duration_s=dur,
                paradox=bool(rng.random() < paradox_fraction),
                reduction=float(rng.uniform(0.04, 0.08)),
                dip_lag_s=float(rng.uniform(5.0, 10.0)),
                dip_depth=float(rng.uniform(4.0, 7.0)),
            )
        )
    return rate, events


def _effort_channels(rng, spec: CohortSpec, duration_s: float, events) -> tuple[np.ndarray, np.ndarray]:
    fs = spec.effort_fs_hz
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    freq = rng.uniform(0.2, 0.3)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    amp_th = rng.uniform(0.8, 1.2)
    amp_ab = rng.uniform(0.8, 1.2)

    modulation = np.ones(n)
    ab_sign = np.ones(n)
    for ev in events:
        i0 = int(round(ev.onset_s * fs))
        i1 = int(round((ev.onset_s + ev.duration_s) * fs))
        modulation[i0:i1] = ev.reduction
        if ev.paradox:
            ab_sign[i0:i1] = -1.0

    breathing = np.sin(2.0 * math.pi * freq * t + phase)
    noise_th = rng.standard_normal(n)
    noise_ab = rng.standard_normal(n)
    thoracic = amp_th * modulation * (breathing + spec.noise_level * noise_th)
    abdominal = amp_ab * modulation * (ab_sign * breathing + spec.noise_level * noise_ab)
    return np.round(thoracic, 6), np.round(abdominal, 6)


def _spo2_channel(rng, spec: CohortSpec, duration_s: float, events) -> np.ndarray:
    n = int(round(duration_s))
    base = rng.uniform(95.5, 97.5)
    values = base + 4.0 * spec.noise_level * rng.standard_normal(n)
    t = np.arange(n, dtype=np.float64)
    for ev in events:
        t0 = ev.onset_s + ev.dip_lag_s
        depth = ev.dip_depth
        # 4 s fall, 4 s hold, 7 s recovery back to baseline.
        fall = np.clip((t - t0) / 4.0, 0.0, 1.0)
        rise = np.clip((t - (t0 + 8.0)) / 7.0, 0.0, 1.0)
        values -= depth * fall * (1.0 - rise)
    return np.clip(np.round(values, 2), 50.0, 100.0)


def generate(spec: CohortSpec, out_dir) -> list[Subject]:
    """Write a synthetic database under ``out_dir`` plus a ``cohort_spec.json``
    provenance record; returns the freshly loaded (validated) subjects."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    duration_s = float(int(round(spec.duration_min * 60.0)))

    counts = _apportion(spec.severity_mix, spec.n_subjects)
    ordered = [sev for sev, c in zip(_SEVERITY_ORDER, counts) for _ in range(c)]
    master = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0x5EED])))
    severities = [ordered[k] for k in master.permutation(spec.n_subjects)]

    meta = []
    for idx in range(spec.n_subjects):
        subject_id = f"S{idx:03d}"
        severity = severities[idx]
        cal = SEVERITY_CALIBRATION[severity]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, idx])))

        age = float(np.clip(round(rng.normal(cal.age_mean, cal.age_sd), 1), 21.0, 90.0))
        bmi = float(np.clip(round(rng.normal(cal.bmi_mean, cal.bmi_sd), 1), 16.0, 45.0))
        gender = "male" if rng.random() < cal.male_fraction else "female"
        p_ht, p_dm, p_ho = _COMORBIDITY_PREVALENCE[severity]
        profile = PhenotypeProfile(
            gender=gender,
            age=age,
            bmi=bmi,
            hypertension=bool(rng.random() < p_ht),
            diabetes=bool(rng.random() < p_dm),
            hypothyroidism=bool(rng.random() < p_ho),
        )

        rate, events = _plan_events(rng, severity, cal, duration_s, spec.paradox_fraction)
        thoracic, abdominal = _effort_channels(rng, spec, duration_s, events)
        spo2 = _spo2_channel(rng, spec, duration_s, events)
        annotations = tuple(
            EventAnnotation(kind=ev.kind, start_s=ev.onset_s, duration_s=ev.duration_s)
            for ev in sorted(events, key=lambda e: e.onset_s)
        )
        subject = Subject(
            id=subject_id,
            profile=profile,
            spo2=SignalChannel(1.0, spo2, "percent"),
            thoracic=SignalChannel(spec.effort_fs_hz, thoracic, "au"),
            abdominal=SignalChannel(spec.effort_fs_hz, abdominal, "au"),
            annotations=annotations,
        )
        save_subject(subject, out / subject_id)
        meta.append(
            {
                "id": subject_id,
                "severity": severity,
                "target_rate_per_hour": rate,
                "n_events": len(events),
            }
        )

    record = {
        "spec": {
            "n_subjects": spec.n_subjects,
            "seed": spec.seed,
            "duration_min": spec.duration_min,
            "severity_mix": list(spec.severity_mix),
            "effort_fs_hz": spec.effort_fs_hz,
            "noise_level": spec.noise_level,
            "paradox_fraction": spec.paradox_fraction,
        },
        "subjects": meta,
    }
    with open(out / "cohort_spec.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return load_database(out)
