"""Pan-Tompkins QRS detection.

Stages: bandpass (cascaded integer lowpass/highpass), five-point derivative,
squaring, moving-window integration, then adaptive thresholding on the
integrated signal. The classic difference equations assume 200 Hz, so the
record is linearly resampled to 200 Hz and detections are mapped back to the
native rate.

Two simplifications relative to the original algorithm: thresholds run on the
integrated signal only, and there is no slope-based T-wave check; the 200 ms
refractory period and searchback take its place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks, lfilter

from heartsig.errors import ConfigError, EmptyInput, TooShort
from heartsig.ingest import BeatAnnotation, EcgRecord

WORK_RATE = 200

# group delays at 200 Hz, in samples
LOWPASS_DELAY = 5
HIGHPASS_DELAY = 16
BANDPASS_DELAY = LOWPASS_DELAY + HIGHPASS_DELAY
DERIVATIVE_DELAY = 2

_LP_B = np.zeros(13)
_LP_B[[0, 6, 12]] = [1.0, -2.0, 1.0]
_LP_A = np.array([1.0, -2.0, 1.0])
# 32 x(n-16) minus a 32-sample running sum
_HP_B = -np.ones(32)
_HP_B[16] += 32.0
_DERIV_B = np.array([2.0, 1.0, 0.0, -1.0, -2.0]) / 8.0


@dataclass(frozen=True)
class DetectorConfig:
    work_rate: int = WORK_RATE
    mwi_window_s: float = 0.150
    refractory_s: float = 0.200
    searchback_factor: float = 1.66
    peak_weight: float = 0.125
    threshold_mix: float = 0.25
    searchback_ratio: float = 0.5
    learning_s: float = 2.0
    refine_s: float = 0.040
    rr_history: int = 8

    def __post_init__(self):
        if self.work_rate != WORK_RATE:
            raise ConfigError("the filter coefficients are defined for 200 Hz only")
        if abs(self.mwi_window_s * self.work_rate - round(self.mwi_window_s * self.work_rate)) > 1e-9:
            raise ConfigError("moving-window length must be a whole number of samples")
        for name in ("peak_weight", "threshold_mix", "searchback_ratio"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.searchback_factor <= 1:
            raise ConfigError("searchback_factor must exceed 1")

    @property
    def mwi_window(self) -> int:
        return int(round(self.mwi_window_s * self.work_rate))

    @property
    def refractory(self) -> int:
        return int(round(self.refractory_s * self.work_rate))


@dataclass(frozen=True)
class QrsDetection:
    sample_index_native: int
    integrated_height: float
    rr_prev: float | None  # ms


def resample_to_200(x, fs: int = 360) -> np.ndarray:
    """Linear interpolation onto a 200 Hz grid; output length floor(len * 200 / fs)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot resample an empty signal")
    n_out = (x.size * WORK_RATE) // fs
    pos = np.arange(n_out) * (fs / WORK_RATE)
    return np.interp(pos, np.arange(x.size), x)


def to_native(index_200, fs: int = 360):
    """Map 200 Hz sample indices back to the native rate."""
    return np.rint(np.asarray(index_200, dtype=np.float64) * (fs / WORK_RATE)).astype(np.int64)


def lowpass(x) -> np.ndarray:
    return lfilter(_LP_B, _LP_A, np.asarray(x, dtype=np.float64))


def highpass(x) -> np.ndarray:
    return lfilter(_HP_B, [1.0], np.asarray(x, dtype=np.float64))


def bandpass(x) -> np.ndarray:
    """Lowpass then highpass, zero initial history. Total delay BANDPASS_DELAY samples."""
    return highpass(lowpass(x))


def derivative(x) -> np.ndarray:
    return lfilter(_DERIV_B, [1.0], np.asarray(x, dtype=np.float64))


def square(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * x


def mwi(x, window: int = 30) -> np.ndarray:
    """Causal boxcar average over ``window`` samples."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    n = np.arange(1, x.size + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / window


@dataclass
class _Stages:
    bandpassed: np.ndarray
    integrated: np.ndarray


def _stages(x200: np.ndarray, config: DetectorConfig) -> _Stages:
    # referencing to the first sample makes zero history equal to a steady-state start
    x = x200 - x200[0]
    bp = bandpass(x)
    return _Stages(bp, mwi(square(derivative(bp)), config.mwi_window))


def _threshold_peaks(peaks: np.ndarray, heights: np.ndarray, learn_max: float, learn_mean: float,
                     config: DetectorConfig) -> list[int]:
    """Classify integrated-signal peaks into QRS and noise; return indices into ``peaks``."""
    spk, npk = learn_max, learn_mean
    w = config.peak_weight
    qrs: list[int] = []
    rr: list[int] = []
    is_qrs = np.zeros(peaks.size, dtype=bool)

    def threshold():
        return npk + config.threshold_mix * (spk - npk)

    def searchback(upto_pos: int) -> None:
        nonlocal spk
        last = peaks[qrs[-1]]
        lo = qrs[-1] + 1
        cand = [j for j in range(lo, peaks.size)
                if peaks[j] < upto_pos and not is_qrs[j]
                and peaks[j] - last >= config.refractory
                and heights[j] > config.searchback_ratio * threshold()]
        if not cand:
            return
        j = max(cand, key=lambda k: (heights[k], -k))
        is_qrs[j] = True
        rr.append(int(peaks[j] - last))
        qrs.append(j)
        spk = 0.25 * heights[j] + 0.75 * spk

    for i, (p, h) in enumerate(zip(peaks, heights)):
        if qrs and rr:
            rr_avg = float(np.mean(rr[-config.rr_history:]))
            if p - peaks[qrs[-1]] > config.searchback_factor * rr_avg:
                searchback(p)
        if h > threshold() and (not qrs or p - peaks[qrs[-1]] >= config.refractory):
            is_qrs[i] = True
            if qrs:
                rr.append(int(p - peaks[qrs[-1]]))
            qrs.append(i)
            spk = w * h + (1 - w) * spk
        else:
            npk = w * h + (1 - w) * npk
    if qrs and rr:
        rr_avg = float(np.mean(rr[-config.rr_history:]))
        end = int(peaks[-1]) + 1 if peaks.size else 0
        if end - peaks[qrs[-1]] > config.searchback_factor * rr_avg:
            searchback(end)
    return sorted(qrs)


def detect_signal(x, fs: int = 360, config: DetectorConfig | None = None) -> list[QrsDetection]:
    """Run the detector on one channel sampled at ``fs``."""
    config = config or DetectorConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.size < config.learning_s * fs:
        raise TooShort(f"need at least {config.learning_s} s of signal, got {x.size / fs:.2f} s")
    x200 = resample_to_200(x, fs)
    st = _stages(x200, config)
    y = st.integrated
    learn = y[: int(config.learning_s * WORK_RATE)]
    if not np.any(y > 0):
        return []

    peaks, _ = find_peaks(y, distance=config.refractory)
    peaks = peaks[y[peaks] > 0]
    heights = y[peaks]
    chosen = _threshold_peaks(peaks, heights, float(learn.max()), float(learn.mean()), config)

    # integrated-signal lobe trails the QRS; search the bandpassed signal for the R peak
    half = int(round(config.refine_s * WORK_RATE))
    lag = DERIVATIVE_DELAY + (config.mwi_window - 1) // 2
    abs_bp = np.abs(st.bandpassed)
    out: list[QrsDetection] = []
    last_native = None
    for j in chosen:
        c = int(peaks[j]) - lag
        lo, hi = max(c - half, 0), min(c + half + 1, abs_bp.size)
        if lo >= hi:
            continue
        r200 = lo + int(np.argmax(abs_bp[lo:hi])) - BANDPASS_DELAY
        native = int(to_native(max(r200, 0), fs))
        native = min(native, x.size - 1)
        if last_native is not None and native - last_native < config.refractory_s * fs:
            continue
        rr_ms = None if last_native is None else 1000.0 * (native - last_native) / fs
        out.append(QrsDetection(native, float(heights[j]), rr_ms))
        last_native = native
    return out


def detect_qrs(record: EcgRecord, config: DetectorConfig | None = None, channel: int = 0) -> list[QrsDetection]:
    return detect_signal(record.channels[channel], record.fs, config)


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list[tuple[int, int]]  # (detection index, annotation index)

    @property
    def sensitivity(self) -> float:
        denom = self.true_positives + self.false_negatives
        return self.true_positives / denom if denom else 1.0

    @property
    def positive_predictivity(self) -> float:
        denom = self.true_positives + self.false_positives
        return self.true_positives / denom if denom else 1.0


def match_detections(detections, annotations, tolerance_s: float = 0.150, fs: int = 360) -> MatchResult:
    """Greedy one-to-one matching of detections to reference beats, closest pairs first."""
    d = np.array([getattr(v, "sample_index_native", v) for v in detections], dtype=np.int64)
    a = np.array([v.sample_index if isinstance(v, BeatAnnotation) else v for v in annotations],
                 dtype=np.int64)
    tol = tolerance_s * fs
    cands = []
    if d.size and a.size:
        order = np.argsort(a, kind="stable")
        a_sorted = a[order]
        for i, s in enumerate(d):
            lo = np.searchsorted(a_sorted, s - tol, side="left")
            hi = np.searchsorted(a_sorted, s + tol, side="right")
            for k in range(lo, hi):
                cands.append((abs(int(a_sorted[k]) - int(s)), i, int(order[k])))
    cands.sort()
    used_d, used_a = set(), set()
    pairs = []
    for _, i, k in cands:
        if i in used_d or k in used_a:
            continue
        used_d.add(i)
        used_a.add(k)
        pairs.append((i, k))
    pairs.sort()
    tp = len(pairs)
    return MatchResult(tp, int(d.size) - tp, int(a.size) - tp, pairs)
