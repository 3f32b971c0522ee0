"""Per-epoch feature extraction from effort and SpO2 channels.

Signals are segmented into 10 s epochs at a 0.5 s stride (9.5 s overlap).
Respiratory features come from the two effort channels resampled to a common
4 Hz analysis rate, linearly detrended, and band-limited to the breathing
band with an FFT-domain mask (zero phase by construction): per-channel
amplitude (interquartile range), dominant breathing frequency (FFT magnitude
peak of the summed channels), and a paradoxical-movement score (Pearson
correlation between the channels; strongly negative means anti-phase motion).

SpO2 features use the raw 1 Hz samples: min/max/median/mean and the variance
of the first difference over the 10 s epoch, plus a desaturation depth
(median minus minimum) over a 20 s window centered on the epoch and clamped
inside the recording.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ApneaScreenError
from .recording_store import Subject

WINDOW_S = 10.0
OVERLAP_S = 9.5
STRIDE_S = WINDOW_S - OVERLAP_S
DESAT_WINDOW_S = 20.0

# Common effort analysis rate; 10 s windows become 40 samples with 0.1 Hz
# FFT bins, which is the frequency resolution quoted for the peak estimate.
ANALYSIS_FS_HZ = 4.0

# Breathing band: 6 to 42 breaths per minute.
DEFAULT_BAND_LOW_HZ = 0.1
DEFAULT_BAND_HIGH_HZ = 0.7
DEFAULT_PARADOX_THRESHOLD = -0.3

_DEGENERATE_VAR = 1e-20


class RecordingTooShort(ApneaScreenError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    band_low_hz: float = DEFAULT_BAND_LOW_HZ
    band_high_hz: float = DEFAULT_BAND_HIGH_HZ
    paradox_threshold: float = DEFAULT_PARADOX_THRESHOLD


@dataclass(frozen=True)
class EpochGrid:
    window_s: float
    stride_s: float
    epoch_starts: np.ndarray

    def __len__(self) -> int:
        return len(self.epoch_starts)


@dataclass(frozen=True)
class RespiratoryFeatures:
    amplitude_thoracic: float
    amplitude_abdominal: float
    frequency_hz: float
    paradox_score: float
    paradox_flag: bool
    degenerate: bool


@dataclass(frozen=True)
class EpochFeatures:
    start_s: float
    resp_amplitude_thoracic: float
    resp_amplitude_abdominal: float
    resp_frequency: float
    paradox_score: float
    paradox_flag: bool
    resp_degenerate: bool
    spo2_min: float
    spo2_max: float
    spo2_median: float
    spo2_mean: float
    spo2_deriv_var: float
    spo2_desat_depth: float


# Columns fed to the classifier, in order.
FEATURE_COLUMNS = (
    "resp_amplitude_thoracic",
    "resp_amplitude_abdominal",
    "resp_frequency",
    "paradox_score",
    "spo2_min",
    "spo2_max",
    "spo2_median",
    "spo2_mean",
    "spo2_deriv_var",
    "spo2_desat_depth",
)


def build_epoch_grid(recording_duration_s: float) -> EpochGrid:
    """Epoch start times {0, 0.5, 1.0, ...} with every window fully inside
    the recording. Recordings shorter than the 20 s desaturation window are
    rejected."""
    if recording_duration_s < DESAT_WINDOW_S:
        raise RecordingTooShort(
            f"recording of {recording_duration_s:g} s is shorter than {DESAT_WINDOW_S:g} s"
        )
    count = int(math.floor((recording_duration_s - WINDOW_S) / STRIDE_S + 1e-9)) + 1
    starts = np.arange(count, dtype=np.float64) * STRIDE_S
    return EpochGrid(window_s=WINDOW_S, stride_s=STRIDE_S, epoch_starts=starts)


def _resample_to_analysis_rate(window: np.ndarray, fs_hz: float) -> np.ndarray:
    """Block-average a 10 s window down to the 4 Hz analysis rate."""
    if fs_hz == ANALYSIS_FS_HZ:
        return np.asarray(window, dtype=np.float64)
    n_out = int(round(WINDOW_S * ANALYSIS_FS_HZ))
    n_in = len(window)
    edges = np.floor(np.arange(n_out) * n_in / n_out).astype(np.intp)
    sums = np.add.reduceat(np.asarray(window, dtype=np.float64), edges)
    counts = np.diff(np.append(edges, n_in))
    return sums / counts


def _detrend(x: np.ndarray) -> np.ndarray:
    n = len(x)
    t = np.arange(n, dtype=np.float64)
    t_mean = (n - 1) / 2.0
    tc = t - t_mean
    denom = float(tc @ tc)
    slope = float(tc @ x) / denom if denom > 0 else 0.0
    return x - (x.mean() + slope * tc)


def _band_mask(n: int, band_low: float, band_high: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, d=1.0 / ANALYSIS_FS_HZ)
    return (freqs >= band_low - 1e-9) & (freqs <= band_high + 1e-9)


def _band_limit(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    spectrum = np.fft.rfft(x)
    spectrum[~mask] = 0.0
    return np.fft.irfft(spectrum, n=len(x))


def _iqr(x: np.ndarray) -> float:
    q75, q25 = np.percentile(x, [75.0, 25.0])
    return float(q75 - q25)


def respiratory_features(
    thoracic: np.ndarray,
    abdominal: np.ndarray,
    fs_hz: float,
    cfg: FeatureConfig = FeatureConfig(),
) -> RespiratoryFeatures:
    """Amplitude, breathing frequency, and paradoxical-movement score for one
    10 s window of the two effort channels.

    All-constant windows take the degenerate path: zero amplitude, zero
    paradox score, and a degenerate flag instead of a frequency estimate.
    """
    if fs_hz < ANALYSIS_FS_HZ:
        raise ValueError(f"effort sample rate must be >= {ANALYSIS_FS_HZ:g} Hz")
    th = _detrend(_resample_to_analysis_rate(thoracic, fs_hz))
    ab = _detrend(_resample_to_analysis_rate(abdominal, fs_hz))
    mask = _band_mask(len(th), cfg.band_low_hz, cfg.band_high_hz)
    th_bl = _band_limit(th, mask)
    ab_bl = _band_limit(ab, mask)

    amp_th = _iqr(th_bl)
    amp_ab = _iqr(ab_bl)

    var_th = float(th_bl @ th_bl)
    var_ab = float(ab_bl @ ab_bl)
    if var_th > _DEGENERATE_VAR and var_ab > _DEGENERATE_VAR:
        th_c = th_bl - th_bl.mean()
        ab_c = ab_bl - ab_bl.mean()
        denom = math.sqrt(float(th_c @ th_c) * float(ab_c @ ab_c))
        score = float(th_c @ ab_c) / denom if denom > 0 else 0.0
        score = min(1.0, max(-1.0, score))
    else:
        score = 0.0

    summed = th_bl + ab_bl
    spectrum = np.abs(np.fft.rfft(summed))
    freqs = np.fft.rfftfreq(len(summed), d=1.0 / ANALYSIS_FS_HZ)
    band_idx = np.flatnonzero(mask)
    degenerate = float(summed @ summed) <= _DEGENERATE_VAR or band_idx.size == 0
    if degenerate:
        frequency = 0.0
    else:
        peak = band_idx[int(np.argmax(spectrum[band_idx]))]
        frequency = float(freqs[peak])

    return RespiratoryFeatures(
        amplitude_thoracic=amp_th,
        amplitude_abdominal=amp_ab,
        frequency_hz=frequency,
        paradox_score=score,
        paradox_flag=score < cfg.paradox_threshold,
        degenerate=degenerate,
    )


def spo2_features(window_10s: np.ndarray, window_20s: np.ndarray) -> dict[str, float]:
    """Desaturation feature subvector: epoch statistics from the 10 s window
    plus median-minus-min depth over the 20 s sliding window."""
    w10 = np.asarray(window_10s, dtype=np.float64)
    w20 = np.asarray(window_20s, dtype=np.float64)
    diffs = np.diff(w10)
    return {
        "spo2_min": float(w10.min()),
        "spo2_max": float(w10.max()),
        "spo2_median": float(np.median(w10)),
        "spo2_mean": float(w10.mean()),
        "spo2_deriv_var": float(diffs.var()),
        "spo2_desat_depth": max(float(np.median(w20) - w20.min()), 0.0),
    }


def _spo2_window_indices(starts: np.ndarray, duration_s: float) -> tuple[np.ndarray, np.ndarray]:
    """First-sample index of each epoch's 10 s window and of its clamped
    centered 20 s window, on the 1 Hz SpO2 clock."""
    i10 = np.ceil(starts - 1e-9).astype(np.intp)
    lo = np.clip(starts - (DESAT_WINDOW_S - WINDOW_S) / 2.0, 0.0, duration_s - DESAT_WINDOW_S)
    i20 = np.ceil(lo - 1e-9).astype(np.intp)
    return i10, i20


def extract_features(subject: Subject, cfg: FeatureConfig = FeatureConfig()) -> list[EpochFeatures]:
    """One EpochFeatures row per grid epoch, in grid order."""
    duration = subject.duration_s
    grid = build_epoch_grid(duration)
    starts = grid.epoch_starts
    spo2 = subject.spo2.samples
    fs = subject.thoracic.sample_rate_hz
    th_all = subject.thoracic.samples
    ab_all = subject.abdominal.samples

    # SpO2 statistics, vectorized over all epochs at once.
    i10, i20 = _spo2_window_indices(starts, duration)
    w10 = spo2[i10[:, None] + np.arange(10)]
    w20 = spo2[i20[:, None] + np.arange(20)]
    s_min = w10.min(axis=1)
    s_max = w10.max(axis=1)
    s_median = np.median(w10, axis=1)
    s_mean = w10.mean(axis=1)
    s_dvar = np.diff(w10, axis=1).var(axis=1)
    s_desat = np.maximum(np.median(w20, axis=1) - w20.min(axis=1), 0.0)

    n_raw = int(round(WINDOW_S * fs))
    max_start = len(th_all) - n_raw
    rows: list[EpochFeatures] = []
    for i, start in enumerate(starts):
        a = min(int(round(start * fs)), max_start)
        resp = respiratory_features(th_all[a : a + n_raw], ab_all[a : a + n_raw], fs, cfg)
        rows.append(
            EpochFeatures(
                start_s=float(start),
                resp_amplitude_thoracic=resp.amplitude_thoracic,
                resp_amplitude_abdominal=resp.amplitude_abdominal,
                resp_frequency=resp.frequency_hz,
                paradox_score=resp.paradox_score,
                paradox_flag=resp.paradox_flag,
                resp_degenerate=resp.degenerate,
                spo2_min=float(s_min[i]),
                spo2_max=float(s_max[i]),
                spo2_median=float(s_median[i]),
                spo2_mean=float(s_mean[i]),
                spo2_deriv_var=float(s_dvar[i]),
                spo2_desat_depth=float(s_desat[i]),
            )
        )
    return rows


def feature_matrix(features: Sequence[EpochFeatures]) -> np.ndarray:
    """Stack the classifier feature columns into an (n_epochs, d) array."""
    out = np.empty((len(features), len(FEATURE_COLUMNS)), dtype=np.float64)
    for j, name in enumerate(FEATURE_COLUMNS):
        out[:, j] = [getattr(f, name) for f in features]
    return out


def paradox_flags(features: Sequence[EpochFeatures]) -> np.ndarray:
    return np.asarray([f.paradox_flag for f in features], dtype=bool)


def desat_depths(features: Sequence[EpochFeatures]) -> np.ndarray:
    return np.asarray([f.spo2_desat_depth for f in features], dtype=np.float64)


def epoch_starts(features: Sequence[EpochFeatures]) -> np.ndarray:
    return np.asarray([f.start_s for f in features], dtype=np.float64)


def write_features_csv(features: Sequence[EpochFeatures], path) -> None:
    fields = [f.name for f in dataclasses.fields(EpochFeatures)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(fields) + "\n")
        for row in features:
            values = []
            for name in fields:
                v = getattr(row, name)
                values.append(str(v) if isinstance(v, bool) else repr(float(v)))
            fh.write(",".join(values) + "\n")
