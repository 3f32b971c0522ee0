import json
from pathlib import Path

import numpy as np
import pytest

from apnea_screen.features import build_epoch_grid
from apnea_screen.recording_store import (
    APN,
    NOR,
    EventAnnotation,
    InvariantViolation,
    MalformedManifest,
    MissingFile,
    NoAnnotations,
    Subject,
    label_epochs,
    labels_to_array,
    load_database,
    load_subject,
    save_database,
)

from conftest import make_subject


def write_subject_dir(root: Path, subject_id="S000", n_spo2=120, effort_fs=4.0,
                      events_rows=None, spo2_values=None, age=50.0, bmi=27.0):
    sdir = root / subject_id
    sdir.mkdir(parents=True)
    manifest = {
        "id": subject_id,
        "gender": "male",
        "age": age,
        "bmi": bmi,
        "comorbidities": {"hypertension": False, "diabetes": True, "hypothyroidism": False},
        "channels": {
            "spo2": {"file": "spo2.csv", "fs_hz": 1},
            "effort": {"file": "effort.csv", "fs_hz": effort_fs},
        },
    }
    (sdir / "manifest.json").write_text(json.dumps(manifest))
    if spo2_values is None:
        spo2_values = ["96.0"] * n_spo2
    (sdir / "spo2.csv").write_text("spo2_percent\n" + "\n".join(spo2_values) + "\n")
    n_eff = int(n_spo2 * effort_fs)
    rows = "\n".join(f"{0.1 * (i % 7)},{0.1 * (i % 5)}" for i in range(n_eff))
    (sdir / "effort.csv").write_text("thoracic,abdominal\n" + rows + "\n")
    if events_rows is not None:
        (sdir / "events.csv").write_text(
            "kind,start_s,duration_s\n" + "\n".join(events_rows) + ("\n" if events_rows else "")
        )
    return sdir


def test_empty_root_gives_empty_list(tmp_path):
    assert load_database(tmp_path) == []


def test_missing_root_raises(tmp_path):
    with pytest.raises(MissingFile):
        load_database(tmp_path / "nope")


def test_recording_hours_from_1hz_sample_count(tmp_path):
    write_subject_dir(tmp_path, n_spo2=22680)
    (subject,) = load_database(tmp_path)
    assert subject.recording_hours == pytest.approx(6.3)
    assert subject.duration_s == 22680.0


def test_annotation_duration_bounds_enforced(tmp_path):
    write_subject_dir(tmp_path, events_rows=["OSA,20.0,8.0"])
    with pytest.raises(InvariantViolation, match="duration"):
        load_database(tmp_path)


def test_annotation_overlap_rejected(tmp_path):
    write_subject_dir(tmp_path, events_rows=["OSA,20.0,15.0", "HYP,30.0,15.0"])
    with pytest.raises(InvariantViolation, match="overlap"):
        load_database(tmp_path)


def test_annotations_sorted_on_load(tmp_path):
    write_subject_dir(tmp_path, events_rows=["OSA,60.0,12.0", "HYP,20.0,15.0"])
    (subject,) = load_database(tmp_path)
    starts = [ev.start_s for ev in subject.annotations]
    assert starts == sorted(starts) == [20.0, 60.0]


def test_annotation_outside_recording_rejected(tmp_path):
    write_subject_dir(tmp_path, n_spo2=100, events_rows=["OSA,95.0,10.0"])
    with pytest.raises(InvariantViolation, match="outside"):
        load_database(tmp_path)


def test_spo2_range_enforced(tmp_path):
    values = ["96.0"] * 119 + ["105.0"]
    write_subject_dir(tmp_path, spo2_values=values)
    with pytest.raises(InvariantViolation, match=r"\[0, 100\]"):
        load_database(tmp_path)


def test_short_gaps_interpolated(tmp_path):
    values = ["96.0"] * 50 + [""] * 4 + ["92.0"] + ["96.0"] * 65
    write_subject_dir(tmp_path, spo2_values=values)
    (subject,) = load_database(tmp_path)
    assert np.isfinite(subject.spo2.samples).all()
    # linear bridge between 96 at index 49 and 92 at index 54
    assert subject.spo2.samples[51] == pytest.approx(96.0 + (92.0 - 96.0) * 2 / 5)


def test_long_gaps_rejected(tmp_path):
    values = ["96.0"] * 50 + [""] * 6 + ["96.0"] * 64
    write_subject_dir(tmp_path, spo2_values=values)
    with pytest.raises(InvariantViolation, match="gap"):
        load_database(tmp_path)


def test_edge_gaps_extend_nearest_value(tmp_path):
    values = [""] * 3 + ["95.0"] + ["96.0"] * 116
    write_subject_dir(tmp_path, spo2_values=values)
    (subject,) = load_database(tmp_path)
    assert subject.spo2.samples[0] == 95.0
    assert subject.spo2.samples[2] == 95.0


def test_age_bounds_checked(tmp_path):
    write_subject_dir(tmp_path, age=140.0)
    with pytest.raises(InvariantViolation, match="age"):
        load_database(tmp_path)


def test_missing_manifest_key(tmp_path):
    sdir = write_subject_dir(tmp_path)
    manifest = json.loads((sdir / "manifest.json").read_text())
    del manifest["bmi"]
    (sdir / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(MalformedManifest, match="bmi"):
        load_database(tmp_path)


def test_duplicate_ids_rejected(tmp_path):
    write_subject_dir(tmp_path, subject_id="A")
    sdir = write_subject_dir(tmp_path, subject_id="B")
    manifest = json.loads((sdir / "manifest.json").read_text())
    manifest["id"] = "A"
    (sdir / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(InvariantViolation, match="duplicate"):
        load_database(tmp_path)


def test_effort_span_must_match_spo2(tmp_path):
    sdir = write_subject_dir(tmp_path, n_spo2=120, effort_fs=4.0)
    rows = "\n".join("0.1,0.2" for _ in range(4 * 110))  # 10 s short
    (sdir / "effort.csv").write_text("thoracic,abdominal\n" + rows + "\n")
    with pytest.raises(InvariantViolation, match="span"):
        load_database(tmp_path)


def test_loaded_subjects_are_immutable(tmp_path):
    write_subject_dir(tmp_path)
    (subject,) = load_database(tmp_path)
    with pytest.raises(ValueError):
        subject.spo2.samples[0] = 0.0


def test_round_trip_is_byte_identical(tmp_path):
    subject = make_subject(duration_s=100, events=[(30.0, 15.0)])
    first = tmp_path / "first"
    second = tmp_path / "second"
    save_database([subject], first)
    save_database(load_database(first), second)
    for name in ("manifest.json", "spo2.csv", "effort.csv", "events.csv"):
        assert (first / subject.id / name).read_bytes() == (second / subject.id / name).read_bytes()


# --- label_epochs ---------------------------------------------------------

def test_label_epochs_no_events_all_nor():
    subject = make_subject(duration_s=60, events=[])
    grid = build_epoch_grid(subject.duration_s)
    labels = label_epochs(subject, grid)
    assert set(labels) == {NOR}


def test_label_epochs_requires_annotations():
    subject = make_subject(duration_s=60, annotated=False)
    with pytest.raises(NoAnnotations):
        label_epochs(subject, build_epoch_grid(subject.duration_s))


def test_label_epochs_half_overlap_boundary():
    # event [100, 130): epoch starting 95 overlaps exactly 5 s -> APN
    subject = make_subject(duration_s=200, events=[(100.0, 30.0)])
    grid = build_epoch_grid(subject.duration_s)
    labels = label_epochs(subject, grid)
    starts = grid.epoch_starts
    assert labels[int(np.flatnonzero(starts == 95.0)[0])] == APN
    assert labels[int(np.flatnonzero(starts == 94.5)[0])] == NOR
    assert labels[int(np.flatnonzero(starts == 60.0)[0])] == NOR


def test_label_epochs_shift_invariance():
    base_events = [(40.0, 20.0), (90.0, 12.0)]
    shift = 13.0
    a = make_subject(duration_s=160, events=base_events)
    b = make_subject(
        duration_s=160 + int(shift), events=[(s + shift, d) for s, d in base_events]
    )
    grid_a = build_epoch_grid(150.0)
    grid_b_starts = grid_a.epoch_starts + shift
    from apnea_screen.features import EpochGrid

    grid_b = EpochGrid(window_s=grid_a.window_s, stride_s=grid_a.stride_s, epoch_starts=grid_b_starts)
    assert label_epochs(a, grid_a) == label_epochs(b, grid_b)


def test_apn_count_matches_brute_force_interval_sweep():
    events = [(25.0, 14.0), (70.0, 11.5)]
    subject = make_subject(duration_s=140, events=events)
    grid = build_epoch_grid(subject.duration_s)
    labels = label_epochs(subject, grid)
    for start, label in zip(grid.epoch_starts, labels):
        overlap = sum(
            max(0.0, min(start + 10.0, s + d) - max(start, s)) for s, d in events
        )
        assert (label == APN) == (overlap >= 5.0)


def test_labels_to_array():
    assert labels_to_array([APN, NOR, APN]).tolist() == [1.0, -1.0, 1.0]
