import numpy as np
import pytest

from apnea_screen.recording_store import (
    EventAnnotation,
    PhenotypeProfile,
    SignalChannel,
    Subject,
)
from apnea_screen.synth import CohortSpec, generate


def make_profile(
    gender="male",
    age=50.0,
    bmi=27.0,
    hypertension=False,
    diabetes=False,
    hypothyroidism=False,
) -> PhenotypeProfile:
    return PhenotypeProfile(
        gender=gender,
        age=age,
        bmi=bmi,
        hypertension=hypertension,
        diabetes=diabetes,
        hypothyroidism=hypothyroidism,
    )


def make_subject(
    subject_id="T000",
    duration_s=120,
    effort_fs=8.0,
    events=(),
    profile=None,
    annotated=True,
    spo2_base=97.0,
    seed=0,
) -> Subject:
    """Small in-memory subject: sinusoidal breathing with optional planted
    events (amplitude collapse plus a 4% SpO2 dip)."""
    # Separate per-channel streams keep signal prefixes identical when only
    # the duration changes (prefix-stability tests rely on this).
    rng_th = np.random.default_rng(seed)
    rng_ab = np.random.default_rng(seed + 104729)
    n_eff = int(duration_s * effort_fs)
    t = np.arange(n_eff) / effort_fs
    modulation = np.ones(n_eff)
    spo2 = np.full(int(duration_s), spo2_base)
    annotations = []
    for start, dur in events:
        i0, i1 = int(start * effort_fs), int((start + dur) * effort_fs)
        modulation[i0:i1] = 0.05
        j0 = int(start) + 5
        spo2[j0 : j0 + 10] = spo2_base - 4.0
        annotations.append(EventAnnotation(kind="OSA", start_s=float(start), duration_s=float(dur)))
    breathing = np.sin(2 * np.pi * 0.25 * t)
    thoracic = modulation * (breathing + 0.02 * rng_th.standard_normal(n_eff))
    abdominal = modulation * (breathing + 0.02 * rng_ab.standard_normal(n_eff))
    return Subject(
        id=subject_id,
        profile=profile or make_profile(),
        spo2=SignalChannel(1.0, spo2, "percent"),
        thoracic=SignalChannel(effort_fs, thoracic, "au"),
        abdominal=SignalChannel(effort_fs, abdominal, "au"),
        annotations=tuple(sorted(annotations, key=lambda e: e.start_s)) if annotated else None,
    )


@pytest.fixture(scope="session")
def small_db_dir(tmp_path_factory):
    """8-subject synthetic database shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("small_db")
    generate(CohortSpec(n_subjects=8, seed=7, duration_min=10.0), root)
    return root


@pytest.fixture(scope="session")
def small_db(small_db_dir):
    from apnea_screen.recording_store import load_database

    return load_database(small_db_dir)
