"""Preprocessing and spectral featurization of EEG recordings."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import signal

from .eeg_io import BANDS, CHANNELS, FS, EegRecording, Task

WINDOW = 128
HOP = 32
N_FEATURES = len(BANDS) * len(CHANNELS)  # 84

# Soft-clip threshold in MADs is MAD_MULTIPLIER / beta.
MAD_MULTIPLIER = 1.0


@dataclass(frozen=True)
class IirFilter:
    b: np.ndarray
    a: np.ndarray
    order: int
    cutoff_hz: float
    fs: float

    def response(self, freq_hz: float | np.ndarray) -> np.ndarray:
        """Complex frequency response evaluated directly from the coefficients."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freq_hz, dtype=float) / self.fs)
        zinv = 1.0 / z
        num = np.polyval(self.b[::-1], zinv)
        den = np.polyval(self.a[::-1], zinv)
        return num / den


def design_highpass(order: int = 5, cutoff_hz: float = 1.0, fs: float = FS) -> IirFilter:
    """Butterworth highpass in transfer-function form."""
    if not 0 < cutoff_hz < fs / 2:
        raise ValueError(f"cutoff must lie in (0, {fs / 2}) Hz, got {cutoff_hz}")
    if order < 1:
        raise ValueError("order must be >= 1")
    b, a = signal.butter(order, cutoff_hz, btype="highpass", fs=fs)
    b, a = b / a[0], a / a[0]
    return IirFilter(b, a, order, float(cutoff_hz), float(fs))


def apply_filter(filt: IirFilter, recording: EegRecording) -> EegRecording:
    """Causal, single pass, per channel."""
    if recording.fs != filt.fs:
        raise ValueError(f"filter designed for fs={filt.fs}, recording has fs={recording.fs}")
    return recording.with_samples(signal.lfilter(filt.b, filt.a, recording.samples, axis=1))


class ArtifactMethod(str, enum.Enum):
    NONE = "none"
    THRESHOLD_DEFAULT = "threshold_default"


@dataclass(frozen=True)
class ArtifactConfig:
    method: ArtifactMethod = ArtifactMethod.THRESHOLD_DEFAULT
    beta: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "method", ArtifactMethod(self.method))
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")

    @property
    def k(self) -> float:
        return np.inf if self.beta == 0 else MAD_MULTIPLIER / self.beta


def soft_clip(x: np.ndarray, threshold: float) -> np.ndarray:
    """Identity below threshold/2, then tanh saturation approaching ``threshold``.

    The curve is continuous with unit slope at the knee and never reaches the
    threshold, so any sample above it comes out strictly below.
    """
    knee = 0.5 * threshold
    mag = np.abs(x)
    over = mag > knee
    out = np.array(x, dtype=np.float64, copy=True)
    sat = knee + knee * np.tanh((mag[over] - knee) / knee)
    # tanh rounds to exactly 1 far out; keep one ulp below the threshold
    out[over] = np.sign(x[over]) * np.minimum(sat, np.nextafter(threshold, 0.0))
    return out


def remove_artifacts(recording: EegRecording, cfg: ArtifactConfig = ArtifactConfig()) -> EegRecording:
    """Per-channel MAD soft clipping around the channel median.

    A simple stand-in for a full artifact-removal algorithm; ``beta`` plays the
    role of a shrinkage strength (larger beta -> lower threshold).
    """
    if cfg.method is ArtifactMethod.NONE or cfg.beta == 0:
        return recording
    out = np.empty_like(recording.samples)
    for ch, x in enumerate(recording.samples):
        med = np.median(x)
        mad = np.median(np.abs(x - med))
        if mad == 0:
            out[ch] = x
            continue
        out[ch] = med + soft_clip(x - med, cfg.k * mad)
    return recording.with_samples(out)


@dataclass(frozen=True)
class LabeledSegment:
    samples: np.ndarray  # (14, 128)
    label: Task
    task_index: int
    subject_id: int
    start_sample: int


def segment_recording(recording: EegRecording, window: int = WINDOW, hop: int = HOP) -> list[LabeledSegment]:
    """Fixed windows inside each annotation; windows never cross a task boundary."""
    if window < 1 or hop < 1:
        raise ValueError("window and hop must be positive")
    segs = []
    for ann in recording.annotations:
        for start in range(ann.start_sample, ann.end_sample - window + 1, hop):
            segs.append(
                LabeledSegment(
                    recording.samples[:, start:start + window],
                    ann.label,
                    ann.task_index,
                    recording.subject_id,
                    start,
                )
            )
    return segs


def welch_psd(x: np.ndarray, fs: float = FS) -> np.ndarray:
    """One-sided PSD (µV²/Hz) on the 0..fs/2 grid, single Hamming window.

    Accepts a 128-sample vector or any array whose last axis has 128 samples.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != WINDOW:
        raise ValueError(f"expected {WINDOW} samples, got {x.shape[-1]}")
    _, pxx = signal.welch(
        x, fs=fs, window="hamming", nperseg=WINDOW, noverlap=0,
        detrend=False, scaling="density", axis=-1,
    )
    return pxx


def psd_freqs(fs: float = FS) -> np.ndarray:
    return np.fft.rfftfreq(WINDOW, d=1.0 / fs)


def band_bin_mask(freqs: np.ndarray, bands: Sequence[tuple[str, float, float]] = BANDS) -> np.ndarray:
    """Boolean (n_bands, n_bins) membership: bin in [lo, hi), last band closed."""
    mask = np.zeros((len(bands), len(freqs)), dtype=bool)
    for i, (_, lo, hi) in enumerate(bands):
        mask[i] = (freqs >= lo) & (freqs < hi)
        if i == len(bands) - 1:
            mask[i] |= freqs == hi
    return mask


def band_powers(psd: np.ndarray, bands: Sequence[tuple[str, float, float]] = BANDS,
                fs: float = FS) -> np.ndarray:
    """Rectangle-rule band integrals; works on (..., 65) arrays."""
    psd = np.asarray(psd, dtype=np.float64)
    freqs = np.linspace(0.0, fs / 2, psd.shape[-1])
    df = freqs[1] - freqs[0]
    mask = band_bin_mask(freqs, bands).astype(np.float64)
    return psd @ mask.T * df


@dataclass(frozen=True)
class BandPowerVector:
    values: np.ndarray  # (84,), band-major
    label: Task
    task_index: int
    subject_id: int


def band_power_matrix(samples: np.ndarray) -> np.ndarray:
    """(..., 14, 128) samples -> (..., 84) band-major features."""
    bp = band_powers(welch_psd(samples))  # (..., 14, 6)
    bp = np.swapaxes(bp, -1, -2)
    return bp.reshape(bp.shape[:-2] + (N_FEATURES,))


def feature_vector(segment: LabeledSegment) -> BandPowerVector:
    if segment.samples.shape != (len(CHANNELS), WINDOW):
        raise ValueError(f"segment must be 14x{WINDOW}, got {segment.samples.shape}")
    return BandPowerVector(band_power_matrix(segment.samples), segment.label,
                           segment.task_index, segment.subject_id)


def feature_matrix(segments: Sequence[LabeledSegment]) -> np.ndarray:
    """Stack of feature vectors for many segments, (N, 84)."""
    if not segments:
        return np.zeros((0, N_FEATURES))
    return band_power_matrix(np.stack([s.samples for s in segments]))


def preprocess(recording: EegRecording, filt: IirFilter | None = None,
               artifacts: ArtifactConfig = ArtifactConfig()) -> EegRecording:
    """Highpass then artifact removal."""
    filt = filt or design_highpass(fs=recording.fs)
    return remove_artifacts(apply_filter(filt, recording), artifacts)
