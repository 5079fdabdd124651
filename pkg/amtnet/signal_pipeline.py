"""Preprocessing and time-frequency feature extraction.

Recordings are resampled, band-pass filtered and standardized, then cut into
50 ms Hann-windowed frames with 50% overlap. Each frame is transformed with an
FFT the size of the frame, and the amplitude spectra are turned into one of
three features: the plain spectrogram, a log Mel spectrogram or a log
constant-Q spectrogram.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import librosa
import numpy as np
from scipy import signal

from .errors import DegenerateSignal, InvalidCutoff, InvalidInput, SignalTooShort

LOGGER = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class FeatureKind(str, Enum):
    SPECTROGRAM = "spec"
    MEL = "mel"
    CQT = "cqt"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "FeatureKind":
        for kind, value in _KIND_CODES.items():
            if value == code:
                return kind
        raise InvalidInput(f"unknown feature kind code {code}")

    @classmethod
    def parse(cls, text: Union[str, "FeatureKind"]) -> "FeatureKind":
        if isinstance(text, FeatureKind):
            return text
        lowered = str(text).strip().lower()
        aliases = {"spectrogram": "spec", "stft": "spec", "constant-q": "cqt"}
        try:
            return cls(aliases.get(lowered, lowered))
        except ValueError as exc:
            raise InvalidInput(f"unsupported feature kind {text!r}") from exc


_KIND_CODES = {FeatureKind.SPECTROGRAM: 0, FeatureKind.MEL: 1, FeatureKind.CQT: 2}


@dataclass(frozen=True)
class FeatureConfig:
    """Parameters of preprocessing and feature extraction."""

    sample_rate: float = 44100.0
    f_min: float = 10.0
    f_max: float = 22050.0
    frame_seconds: float = 0.05
    overlap: float = 0.5
    n_mels: int = 400
    bins_per_octave: int = 36
    cqt_bin_rule: str = "floor"
    filter_order: int = 5
    log_eps: float = 1e-8

    def frame_length(self, sample_rate: Optional[float] = None) -> int:
        rate = self.sample_rate if sample_rate is None else sample_rate
        return int(round(self.frame_seconds * rate))

    def hop(self, sample_rate: Optional[float] = None) -> float:
        return self.frame_length(sample_rate) * (1.0 - self.overlap)

    def validate(self) -> list[str]:
        problems: list[str] = []
        if self.sample_rate <= 0:
            problems.append("features.sample_rate must be positive")
        if not 0 < self.f_min < self.f_max:
            problems.append("features.f_min must satisfy 0 < f_min < f_max")
        elif self.f_max > self.sample_rate / 2 * (1 + 1e-9):
            problems.append("features.f_max must not exceed the Nyquist frequency")
        if not 0 <= self.overlap < 1:
            problems.append("features.overlap must lie in [0, 1)")
        if self.frame_seconds <= 0:
            problems.append("features.frame_seconds must be positive")
        if self.n_mels < 2:
            problems.append("features.n_mels must be at least 2")
        if self.bins_per_octave < 1:
            problems.append("features.bins_per_octave must be at least 1")
        if self.cqt_bin_rule not in ("floor", "ceil"):
            problems.append("features.cqt_bin_rule must be 'floor' or 'ceil'")
        if self.filter_order < 1:
            problems.append("features.filter_order must be at least 1")
        return problems


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"waveform must be 1-D, got shape {samples.shape}")
        if not self.sample_rate > 0:
            raise InvalidInput(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def slice_seconds(self, start_s: float, duration_s: float) -> "Waveform":
        start = int(round(start_s * self.sample_rate))
        length = int(round(duration_s * self.sample_rate))
        return Waveform(self.samples[start : start + length], self.sample_rate)


@dataclass(frozen=True)
class FrameMatrix:
    frames: np.ndarray
    window: np.ndarray
    hop: float
    sample_rate: float

    @property
    def frame_len(self) -> int:
        return int(self.window.size)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class ComplexSpectra:
    values: np.ndarray
    sample_rate: float
    n_fft: int
    hop: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.n_fft, d=1.0 / self.sample_rate)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass(frozen=True)
class FeatureMap:
    """A (n_frames x n_bins) time-frequency array."""

    kind: FeatureKind
    data: np.ndarray
    freq_axis: Optional[np.ndarray] = None
    frame_rate: Optional[float] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise InvalidInput(f"feature map must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInput("feature map contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))


# ---------------------------------------------------------------------------
# Preprocessing


def _rate_ratio(source: float, target: float) -> Fraction:
    if float(source).is_integer() and float(target).is_integer():
        return Fraction(int(target), int(source))
    return Fraction(target / source).limit_denominator(1_000_000)


def resample(wave: Waveform, target_rate: float) -> Waveform:
    if wave.samples.size == 0:
        raise InvalidInput("cannot resample an empty waveform")
    if not target_rate > 0:
        raise InvalidInput(f"target rate must be positive, got {target_rate}")
    if wave.sample_rate == target_rate:
        return wave
    ratio = _rate_ratio(wave.sample_rate, target_rate)
    samples = signal.resample_poly(wave.samples, ratio.numerator, ratio.denominator)
    LOGGER.debug("Resampled %d samples %.1f Hz -> %.1f Hz", wave.samples.size, wave.sample_rate, target_rate)
    return Waveform(samples, float(target_rate))


def _bandpass_sos(sample_rate: float, lo: float, hi: float, order: int) -> np.ndarray:
    nyquist = sample_rate / 2
    if hi >= nyquist:
        return signal.butter(order, lo, btype="highpass", fs=sample_rate, output="sos")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")


def _settle_length(sos: np.ndarray, tolerance: float = 1e-6) -> int:
    """Samples until the slowest pole has decayed below ``tolerance``."""
    _, poles, _ = signal.sos2zpk(sos)
    radius = float(np.max(np.abs(poles)))
    if radius <= 0.0:
        return 0
    return int(np.ceil(np.log(tolerance) / np.log(radius)))


def bandpass(wave: Waveform, lo: float = 10.0, hi: float = 22050.0, order: int = 5) -> Waveform:
    """Zero-phase Butterworth band-pass; degenerates to a high-pass when hi is Nyquist.

    The signal is mirror-padded (even extension, no DC step at the edges) for
    as long as the slowest pole needs to settle, so start-up transients of the
    low cutoff stay in the padding.
    """
    if lo >= hi:
        raise InvalidCutoff(f"low cutoff {lo} Hz must be below high cutoff {hi} Hz")
    nyquist = wave.sample_rate / 2
    if lo <= 0 or hi > nyquist * (1 + 1e-9):
        raise InvalidCutoff(f"cutoffs must satisfy 0 < lo < hi <= {nyquist} Hz, got {lo}-{hi} Hz")
    sos = _bandpass_sos(wave.sample_rate, lo, hi, order)
    if wave.samples.size <= 3 * (2 * len(sos) + 1):
        raise SignalTooShort(f"{wave.samples.size} samples are too few to filter")
    padlen = min(_settle_length(sos), wave.samples.size - 1)
    filtered = signal.sosfiltfilt(sos, wave.samples, padtype="even", padlen=padlen)
    return Waveform(filtered, wave.sample_rate)


def normalize_waveform(wave: Waveform) -> Waveform:
    samples = wave.samples
    if samples.size == 0:
        raise DegenerateSignal("cannot normalize an empty waveform")
    mean = samples.mean()
    std = samples.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise DegenerateSignal("waveform has zero variance")
    return Waveform((samples - mean) / std, wave.sample_rate)


def preprocess(wave: Waveform, config: FeatureConfig = FeatureConfig()) -> Waveform:
    resampled = resample(wave, config.sample_rate)
    filtered = bandpass(resampled, config.f_min, config.f_max, config.filter_order)
    return normalize_waveform(filtered)


# ---------------------------------------------------------------------------
# Framing and spectra


def frame_and_window(wave: Waveform, config: FeatureConfig = FeatureConfig()) -> FrameMatrix:
    """Cut the signal into Hann-windowed frames.

    The signal is reflect-padded by half a frame on both sides; frame i starts
    at round(i * hop) in the padded signal, i.e. it is centred on sample
    i * hop of the original, and there are round(N / hop) frames.
    """
    frame_len = config.frame_length(wave.sample_rate)
    if frame_len < 2:
        raise InvalidInput(f"frame length of {frame_len} samples is too small")
    n_samples = wave.samples.size
    if n_samples < frame_len:
        raise SignalTooShort(f"signal of {n_samples} samples is shorter than one frame ({frame_len})")
    hop = config.hop(wave.sample_rate)
    n_frames = max(1, int(round(n_samples / hop)))
    pad = frame_len // 2
    padded = np.pad(wave.samples, pad, mode="reflect")
    starts = np.round(np.arange(n_frames) * hop).astype(np.int64)
    starts = starts[starts + frame_len <= padded.size]
    window = signal.windows.hann(frame_len, sym=False)
    frames = padded[starts[:, None] + np.arange(frame_len)[None, :]] * window
    return FrameMatrix(frames=frames, window=window, hop=hop, sample_rate=wave.sample_rate)


def stft(frames: FrameMatrix) -> ComplexSpectra:
    if frames.frames.size == 0:
        raise InvalidInput("no frames to transform")
    values = np.fft.rfft(frames.frames, n=frames.frame_len, axis=1)
    return ComplexSpectra(values=values, sample_rate=frames.sample_rate, n_fft=frames.frame_len, hop=frames.hop)


def spectrogram(spectra: ComplexSpectra) -> FeatureMap:
    return FeatureMap(
        kind=FeatureKind.SPECTROGRAM,
        data=np.abs(spectra.values),
        freq_axis=spectra.frequencies,
        frame_rate=spectra.frame_rate,
    )


# ---------------------------------------------------------------------------
# Mel spectrogram


def mel_scale(freq: ArrayLike) -> ArrayLike:
    """Mel(f) = 2595 * log10(1 + f / 700)."""
    mels = librosa.hz_to_mel(np.asarray(freq, dtype=np.float64), htk=True)
    return float(mels) if np.ndim(mels) == 0 else mels


def mel_to_hz(mels: ArrayLike) -> ArrayLike:
    freqs = librosa.mel_to_hz(np.asarray(mels, dtype=np.float64), htk=True)
    return float(freqs) if np.ndim(freqs) == 0 else freqs


def _pack_narrow_filters(bank: np.ndarray, fft_freqs: np.ndarray, centers: np.ndarray) -> None:
    """Give every filter a non-empty contiguous support that meets only its neighbours.

    Where filters are narrower than one FFT bin they fall between bins; such a
    filter gets weight 1 on the nearest free bin, and the lower bins of later
    filters are trimmed, so filter m starts after every filter up to m - 2 ends.
    """
    n_bins = bank.shape[1]
    ends: List[int] = []
    reach = -1
    moved = 0
    for m in range(bank.shape[0]):
        if m >= 2:
            reach = max(reach, ends[m - 2])
        row = bank[m]
        row[: reach + 1] = 0.0
        support = np.flatnonzero(row > 0)
        if support.size == 0:
            target = max(int(np.abs(fft_freqs - centers[m]).argmin()), reach + 1)
            if target >= n_bins:
                raise InvalidInput(f"{bank.shape[0]} Mel filters do not fit into {n_bins} FFT bins")
            row[target] = 1.0
            support = np.array([target])
            moved += 1
        ends.append(int(support[-1]))
    if moved:
        LOGGER.debug("%d Mel filters narrower than one bin placed on single bins", moved)


@lru_cache(maxsize=16)
def mel_filter_bank(
    sample_rate: float,
    n_fft: int,
    n_mels: int,
    f_min: float,
    f_max: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Triangular filters (n_mels x n_fft_bins) and their centre frequencies in Hz."""
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    mel_edges = np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2)
    hz_edges = np.asarray(mel_to_hz(mel_edges))
    lower = hz_edges[:-2, None]
    center = hz_edges[1:-1, None]
    upper = hz_edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    centers = hz_edges[1:-1].copy()
    _pack_narrow_filters(bank, fft_freqs, centers)
    bank.setflags(write=False)
    centers.setflags(write=False)
    return bank, centers


def mel_spectrogram(
    spectra: ComplexSpectra,
    n_mels: int = 400,
    f_min: float = 10.0,
    f_max: float = 22050.0,
    log_eps: float = 1e-8,
) -> FeatureMap:
    if n_mels < 2:
        raise InvalidInput(f"n_mels must be at least 2, got {n_mels}")
    if not 0 <= f_min < f_max:
        raise InvalidCutoff(f"Mel range {f_min}-{f_max} Hz is invalid")
    bank, centers = mel_filter_bank(float(spectra.sample_rate), int(spectra.n_fft), int(n_mels), float(f_min), float(f_max))
    energies = np.abs(spectra.values) @ bank.T
    return FeatureMap(
        kind=FeatureKind.MEL,
        data=np.log(energies + log_eps),
        freq_axis=np.array(centers),
        frame_rate=spectra.frame_rate,
    )


# ---------------------------------------------------------------------------
# Constant-Q spectrogram


def cqt_q(bins_per_octave: int) -> float:
    return 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)


def cqt_bin_count(bins_per_octave: int, f_min: float, f_max: float, rule: str = "floor") -> int:
    span = bins_per_octave * math.log2(f_max / f_min)
    if rule == "floor":
        return int(math.floor(span))
    if rule == "ceil":
        return int(math.ceil(span))
    raise InvalidInput(f"unknown CQT bin rule {rule!r}")


def cqt_frequencies(
    bins_per_octave: int = 36,
    f_min: float = 10.0,
    f_max: float = 22050.0,
    rule: str = "floor",
) -> Tuple[np.ndarray, np.ndarray]:
    """Centre frequencies f_k = 2**(k/b) * f_min and nominal bandwidths f_k / Q."""
    if bins_per_octave < 1:
        raise InvalidInput(f"bins per octave must be at least 1, got {bins_per_octave}")
    if f_min <= 0:
        raise InvalidCutoff(f"f_min must be positive, got {f_min}")
    if f_min >= f_max:
        raise InvalidCutoff(f"f_min {f_min} Hz must be below f_max {f_max} Hz")
    n_bins = cqt_bin_count(bins_per_octave, f_min, f_max, rule)
    k = np.arange(n_bins)
    # whole octaves are applied as exact powers of two so f[k + b] == 2 * f[k]
    octaves, steps = np.divmod(k, bins_per_octave)
    centers = (f_min * np.exp2(octaves.astype(np.float64))) * np.exp2(steps / bins_per_octave)
    return centers, centers / cqt_q(bins_per_octave)


@lru_cache(maxsize=16)
def cqt_kernel(
    sample_rate: float,
    n_fft: int,
    bins_per_octave: int,
    f_min: float,
    f_max: float,
    rule: str = "floor",
) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-area Gaussian band-pass responses (K x n_fft_bins) centred at f_k.

    Each response has a full width at half maximum of max(BW_k, bin spacing).
    """
    centers, bandwidths = cqt_frequencies(bins_per_octave, f_min, f_max, rule)
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    spacing = sample_rate / n_fft
    sigma = np.maximum(bandwidths, spacing) / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    kernel = np.exp(-0.5 * ((fft_freqs[None, :] - centers[:, None]) / sigma[:, None]) ** 2)
    kernel /= kernel.sum(axis=1, keepdims=True)
    kernel.setflags(write=False)
    centers.setflags(write=False)
    return kernel, centers


def cqt_spectrogram(
    spectra: ComplexSpectra,
    b: int = 36,
    f_min: float = 10.0,
    f_max: float = 22050.0,
    rule: str = "floor",
    log_eps: float = 1e-8,
) -> FeatureMap:
    kernel, centers = cqt_kernel(float(spectra.sample_rate), int(spectra.n_fft), int(b), float(f_min), float(f_max), rule)
    energies = np.abs(spectra.values) @ kernel.T
    return FeatureMap(
        kind=FeatureKind.CQT,
        data=np.log(energies + log_eps),
        freq_axis=np.array(centers),
        frame_rate=spectra.frame_rate,
    )


# ---------------------------------------------------------------------------
# End-to-end helpers


def extract_features(
    wave: Waveform,
    kind: Union[FeatureKind, str],
    config: FeatureConfig = FeatureConfig(),
) -> FeatureMap:
    """Feature of an already preprocessed waveform."""
    kind = FeatureKind.parse(kind)
    spectra = stft(frame_and_window(wave, config))
    if kind is FeatureKind.SPECTROGRAM:
        return spectrogram(spectra)
    if kind is FeatureKind.MEL:
        return mel_spectrogram(spectra, config.n_mels, config.f_min, config.f_max, config.log_eps)
    return cqt_spectrogram(
        spectra,
        config.bins_per_octave,
        config.f_min,
        config.f_max,
        config.cqt_bin_rule,
        config.log_eps,
    )


def waveform_to_feature(
    wave: Waveform,
    kind: Union[FeatureKind, str],
    config: FeatureConfig = FeatureConfig(),
) -> FeatureMap:
    return extract_features(preprocess(wave, config), kind, config)


def feature_frequencies(kind: Union[FeatureKind, str], config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    kind = FeatureKind.parse(kind)
    n_fft = config.frame_length()
    if kind is FeatureKind.SPECTROGRAM:
        return np.fft.rfftfreq(n_fft, d=1.0 / config.sample_rate)
    if kind is FeatureKind.MEL:
        _, centers = mel_filter_bank(float(config.sample_rate), n_fft, config.n_mels, float(config.f_min), float(config.f_max))
        return np.array(centers)
    centers, _ = cqt_frequencies(config.bins_per_octave, config.f_min, config.f_max, config.cqt_bin_rule)
    return centers


def feature_bin_count(kind: Union[FeatureKind, str], config: FeatureConfig = FeatureConfig()) -> int:
    kind = FeatureKind.parse(kind)
    if kind is FeatureKind.SPECTROGRAM:
        return config.frame_length() // 2 + 1
    if kind is FeatureKind.MEL:
        return config.n_mels
    return cqt_bin_count(config.bins_per_octave, config.f_min, config.f_max, config.cqt_bin_rule)
