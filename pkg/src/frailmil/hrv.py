"""ECG to HRV feature extraction.

R-peaks are found with a Pan-Tompkins style detector built entirely from FIR
stages (band-pass, five-point derivative, squaring, moving-window integration),
so detections are exactly translation-equivariant. Inter-beat intervals are
cleaned, then summarized by time-domain, spectral and Poincare indices.
"""

from __future__ import annotations

import datetime as dt
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import find_peaks, firwin, welch

from .exceptions import EcgError, NoPeaksError

HRV_FEATURES = ("MeanNN", "SDNN", "RMSSD", "pNN50", "LF", "HF", "LF_HF", "SD1", "SD2", "SD1_SD2")

DEFAULT_FS = 130.0
NN_BOUNDS_MS = (300.0, 2000.0)
NN_MAX_JUMP = 0.20
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
MIN_SPECTRAL_SPAN_S = 120.0


@dataclass(frozen=True)
class EcgRecording:
    patient: str
    date: dt.date
    samples: np.ndarray = field(repr=False)
    fs: float = DEFAULT_FS

    def __post_init__(self):
        if not self.fs > 0:
            raise EcgError(f"sampling rate must be positive, got {self.fs}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise EcgError("ECG samples must be a non-empty 1-D sequence")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs


def _causal_fir(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return np.convolve(x, taps)[: x.size]


def detect_r_peaks(ecg, fs: float | None = None) -> np.ndarray:
    """Sample indices of R-peaks in a single-lead ECG.

    ``ecg`` is an :class:`EcgRecording` or a 1-D array (then ``fs`` is
    required). Raises :class:`NoPeaksError` for flat or peakless signals.
    """
    if isinstance(ecg, EcgRecording):
        x, fs = ecg.samples, ecg.fs
    else:
        if fs is None:
            raise EcgError("fs is required when passing raw samples")
        x = np.asarray(ecg, dtype=np.float64)
    if x.size < 5 * fs:
        raise EcgError(f"recording too short: {x.size / fs:.2f} s < 5 s")
    if not np.all(np.isfinite(x)):
        raise EcgError("ECG contains non-finite samples")
    if np.ptp(x) == 0:
        raise NoPeaksError("flat-line ECG: no R-peaks")

    x = x - np.median(x)
    numtaps = int(0.25 * fs) | 1
    bp_delay = (numtaps - 1) / 2
    width = max(1, int(round(0.150 * fs)))
    # zero tail so beats near the end still produce an integrator peak
    padded = np.concatenate([x, np.zeros(numtaps + width + 4)])
    band = firwin(numtaps, [5.0, 15.0], pass_zero=False, fs=fs)
    filtered = _causal_fir(padded, band)
    # five-point derivative, delay 2 samples
    deriv = _causal_fir(filtered, np.array([2.0, 1.0, 0.0, -1.0, -2.0]) * (fs / 8.0))
    mwi = _causal_fir(deriv**2, np.full(width, 1.0 / width))
    delay = bp_delay + 2 + (width - 1) / 2

    refractory = max(1, int(round(0.200 * fs)))
    candidates, _ = find_peaks(mwi, distance=refractory)
    if candidates.size == 0 or mwi.max() <= 0:
        raise NoPeaksError("no QRS energy found")

    qrs = _dual_threshold(candidates, mwi[candidates], mwi, refractory)
    if not qrs:
        raise NoPeaksError("no candidate crossed the detection threshold")

    half = max(1, int(round(0.100 * fs)))
    peaks = []
    for i in qrs:
        center = int(round(i - delay))
        lo, hi = max(0, center - half), min(x.size, center + half + 1)
        if lo >= hi:
            continue
        peaks.append(lo + int(np.argmax(x[lo:hi])))
    peaks = _enforce_min_spacing(sorted(set(peaks)), x, math.floor(60.0 / 220.0 * fs))
    if not peaks:
        raise NoPeaksError("no R-peaks after refinement")
    return np.asarray(peaks, dtype=np.int64)


def _dual_threshold(candidates, values, mwi, refractory) -> list[int]:
    # thresholds start from whole-signal statistics, not the first seconds,
    # to keep detections independent of where the recording starts
    spki = 0.25 * float(mwi.max())
    npki = 0.5 * float(mwi.mean())
    qrs: list[int] = []
    noise: list[tuple[int, float]] = []
    rr: list[int] = []

    def thresholds():
        t1 = npki + 0.25 * (spki - npki)
        return t1, 0.5 * t1

    for idx, value in zip(candidates.tolist(), values.tolist()):
        thr1, thr2 = thresholds()
        if qrs and len(rr) >= 1:
            rr_avg = float(np.mean(rr[-8:]))
            if idx - qrs[-1] > 1.66 * rr_avg:
                missed = [(i, v) for i, v in noise if i > qrs[-1] + refractory and v > thr2]
                if missed:
                    i_best, v_best = max(missed, key=lambda p: (p[1], -p[0]))
                    rr.append(i_best - qrs[-1])
                    qrs.append(i_best)
                    spki = 0.25 * v_best + 0.75 * spki
                    noise = [(i, v) for i, v in noise if i > i_best]
                    thr1, thr2 = thresholds()
        if value > thr1 and (not qrs or idx - qrs[-1] > refractory):
            if qrs:
                rr.append(idx - qrs[-1])
            qrs.append(idx)
            spki = 0.125 * value + 0.875 * spki
            noise = []
        else:
            npki = 0.125 * value + 0.875 * npki
            noise.append((idx, value))
    return qrs


def _enforce_min_spacing(peaks: list[int], x: np.ndarray, min_gap: float) -> list[int]:
    kept: list[int] = []
    for p in peaks:
        if kept and p - kept[-1] < min_gap:
            if x[p] > x[kept[-1]]:
                kept[-1] = p
            continue
        kept.append(p)
    return kept


def peaks_to_nn(peaks, fs: float) -> np.ndarray:
    """Inter-beat intervals in milliseconds from peak sample indices."""
    peaks = np.asarray(peaks)
    if peaks.size < 2:
        raise EcgError("need at least 2 peaks to form an NN interval")
    if not fs > 0:
        raise EcgError(f"sampling rate must be positive, got {fs}")
    return np.diff(peaks).astype(np.float64) / fs * 1000.0


def clean_nn(nn) -> np.ndarray:
    """Drop intervals outside [300, 2000] ms or jumping > 20% from the last kept one."""
    nn = np.asarray(nn, dtype=np.float64)
    if nn.size == 0:
        raise EcgError("empty NN series")
    lo, hi = NN_BOUNDS_MS
    kept: list[float] = []
    for value in nn.tolist():
        if not lo <= value <= hi:
            continue
        if kept and abs(value - kept[-1]) > NN_MAX_JUMP * kept[-1]:
            continue
        kept.append(value)
    if not kept:
        raise EcgError("all NN intervals were rejected as artifacts")
    return np.asarray(kept)


def _require(nn, n: int) -> np.ndarray:
    nn = np.asarray(nn, dtype=np.float64)
    if nn.size < n:
        raise EcgError(f"need at least {n} NN intervals, got {nn.size}")
    return nn


def hrv_time_domain(nn) -> dict[str, float]:
    nn = _require(nn, 2)
    diffs = np.diff(nn)
    return {
        "MeanNN": float(np.mean(nn)),
        "SDNN": float(np.std(nn, ddof=1)),
        "RMSSD": float(np.sqrt(np.mean(diffs**2))),
        "pNN50": float(100.0 * np.count_nonzero(np.abs(diffs) > 50.0) / diffs.size),
    }


def hrv_frequency_domain(nn) -> dict[str, float]:
    """LF/HF band powers (ms^2) of the 4 Hz resampled tachogram via Welch."""
    nn = _require(nn, 4)
    t = np.cumsum(nn) / 1000.0
    t -= t[0]
    if t[-1] < MIN_SPECTRAL_SPAN_S:
        raise EcgError(f"NN series spans {t[-1]:.1f} s; spectral indices need {MIN_SPECTRAL_SPAN_S:.0f} s")
    fs_resample = 4.0
    grid = np.arange(0.0, t[-1], 1.0 / fs_resample)
    tachogram = CubicSpline(t, nn)(grid)
    tachogram -= tachogram.mean()
    nperseg = min(256, grid.size)
    freqs, psd = welch(
        tachogram, fs=fs_resample, window="hann", nperseg=nperseg, noverlap=nperseg // 2, detrend=False
    )
    df = freqs[1] - freqs[0]
    lf = float(psd[(freqs >= LF_BAND[0]) & (freqs < LF_BAND[1])].sum() * df)
    hf = float(psd[(freqs >= HF_BAND[0]) & (freqs < HF_BAND[1])].sum() * df)
    return {"LF": lf, "HF": hf, "LF_HF": lf / hf if hf > 0 else math.nan}


def hrv_nonlinear(nn) -> dict[str, float]:
    td = hrv_time_domain(nn)
    sd1 = td["RMSSD"] / math.sqrt(2.0)
    sd2 = math.sqrt(max(0.0, 2.0 * td["SDNN"] ** 2 - sd1**2))
    return {"SD1": sd1, "SD2": sd2, "SD1_SD2": sd1 / sd2 if sd2 > 0 else math.nan}


def hrv_features(nn) -> dict[str, float]:
    """All ten indices; spectral ones are NaN when the series is shorter than 120 s."""
    feats = dict(hrv_time_domain(nn))
    try:
        feats.update(hrv_frequency_domain(nn))
    except EcgError:
        feats.update(LF=math.nan, HF=math.nan, LF_HF=math.nan)
    feats.update(hrv_nonlinear(nn))
    return {name: feats[name] for name in HRV_FEATURES}


def aggregate_daily(segments) -> dict[str, float]:
    """Per-feature median over segments, ignoring missing (NaN) values."""
    segments = list(segments)
    if not segments:
        raise EcgError("no segments to aggregate")
    names = list(segments[0])
    values = np.array([[seg.get(n, math.nan) for n in names] for seg in segments], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(values, axis=0)
    return {n: float(v) for n, v in zip(names, med)}


def segment_nn(nn, segment_seconds: float = 300.0) -> list[np.ndarray]:
    """Split an NN series into roughly equal consecutive pieces of ~segment_seconds."""
    nn = np.asarray(nn, dtype=np.float64)
    total = nn.sum() / 1000.0
    n_seg = max(1, int(total // segment_seconds))
    if n_seg == 1:
        return [nn]
    edges = np.cumsum(nn) / 1000.0
    bounds = np.searchsorted(edges, np.arange(1, n_seg) * total / n_seg)
    return [s for s in np.split(nn, bounds) if s.size >= 2]


def recording_features(recording: EcgRecording, segment_seconds: float = 300.0) -> list[dict[str, float]]:
    """Segment-level HRV features of one recording."""
    peaks = detect_r_peaks(recording)
    nn = clean_nn(peaks_to_nn(peaks, recording.fs))
    segments = [s for s in segment_nn(nn, segment_seconds) if s.size >= 2]
    if not segments:
        raise EcgError(f"too few clean beats in recording {recording.patient}/{recording.date}")
    return [hrv_features(s) for s in segments]
