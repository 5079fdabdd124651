"""Desk-scale stand-in corpus with the same metadata shape as ShipsEar.

Every class is a harmonic stack with its own fundamental and amplitude
modulation rate over broadband noise. The influential factors are imposed on
top of it: source range attenuates and low-passes, water depth adds a
surface-bounce echo, and wind adds band-limited noise bursts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import signal

from .dataset import (
    CATEGORIES,
    CategorySplit,
    RecordingMeta,
    SplitEntry,
    SplitManifest,
    write_metadata_manifest,
    write_wav,
)
from .errors import InvalidInput
from .signal_pipeline import Waveform

LOGGER = logging.getLogger(__name__)

SOUND_SPEED_M_S = 1500.0


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 12
    recordings_per_class: int = 4
    duration_s: float = 75.0
    sample_rate: float = 8000.0
    f0_min: float = 60.0
    f0_max: float = 600.0
    n_partials: int = 6
    noise_level: float = 0.2
    range_values: Tuple[float, ...] = (20.0, 150.0)
    depth_values: Tuple[float, ...] = (3.0, 9.0, 16.0)
    wind_values: Tuple[float, ...] = (0.0, 5.0, 15.0)
    # probability that a recording's factor values follow its class instead of a uniform draw
    class_factor_bias: float = 0.0
    wind_missing_fraction: float = 0.0
    wind_gain: float = 2.0
    test_fraction: float = 0.25

    def validate(self) -> List[str]:
        problems: List[str] = []
        if not 1 <= self.n_classes <= len(CATEGORIES):
            problems.append(f"synthetic.n_classes must lie in [1, {len(CATEGORIES)}]")
        if self.recordings_per_class < 1:
            problems.append("synthetic.recordings_per_class must be at least 1")
        if self.duration_s <= 0:
            problems.append("synthetic.duration_s must be positive")
        if self.sample_rate <= 0:
            problems.append("synthetic.sample_rate must be positive")
        if not 0 < self.f0_min <= self.f0_max < self.sample_rate / 2:
            problems.append("synthetic.f0_min/f0_max must satisfy 0 < f0_min <= f0_max < Nyquist")
        if self.n_partials < 1:
            problems.append("synthetic.n_partials must be at least 1")
        for label, values in (("range_values", self.range_values), ("depth_values", self.depth_values), ("wind_values", self.wind_values)):
            if not values:
                problems.append(f"synthetic.{label} must not be empty")
            elif min(values) < 0:
                problems.append(f"synthetic.{label} must be non-negative")
        for label, value in (
            ("class_factor_bias", self.class_factor_bias),
            ("wind_missing_fraction", self.wind_missing_fraction),
            ("test_fraction", self.test_fraction),
        ):
            if not 0 <= value <= 1:
                problems.append(f"synthetic.{label} must lie in [0, 1]")
        return problems

    def fundamental(self, class_index: int) -> float:
        if self.n_classes == 1:
            return self.f0_min
        return self.f0_min * (self.f0_max / self.f0_min) ** (class_index / (self.n_classes - 1))


def _pick_factor(values: Sequence[float], class_index: int, bias: float, rng: np.random.Generator) -> float:
    if rng.random() < bias:
        return float(values[class_index % len(values)])
    return float(values[rng.integers(len(values))])


def _harmonic_stack(spec: SyntheticSpec, class_index: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / spec.sample_rate
    f0 = spec.fundamental(class_index) * (1.0 + rng.uniform(-0.01, 0.01))
    tone = np.zeros(n_samples)
    for k in range(1, spec.n_partials + 1):
        if k * f0 >= spec.sample_rate / 2:
            break
        tone += np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k
    am_rate = 0.5 + 0.25 * class_index
    tone *= 1.0 + 0.3 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    return tone


def _apply_range(x: np.ndarray, range_m: float, sample_rate: float) -> np.ndarray:
    gain = 1.0 / (1.0 + range_m / 50.0)
    cutoff = 0.45 * sample_rate * 60.0 / (60.0 + range_m)
    sos = signal.butter(2, cutoff, btype="lowpass", fs=sample_rate, output="sos")
    return gain * signal.sosfilt(sos, x)


def _apply_depth(x: np.ndarray, depth_m: float, sample_rate: float) -> np.ndarray:
    delay = int(round(2.0 * depth_m / SOUND_SPEED_M_S * sample_rate))
    if delay <= 0 or delay >= x.size:
        return x
    echoed = x.copy()
    echoed[delay:] += 0.6 * x[:-delay]
    return echoed


def _wind_bursts(spec: SyntheticSpec, wind_kmh: float, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    if wind_kmh <= 0:
        return np.zeros(n_samples)
    rate = wind_kmh / 5.0
    count = rng.poisson(rate * spec.duration_s)
    envelope = np.zeros(n_samples)
    for _ in range(count):
        length = int(rng.uniform(0.1, 0.3) * spec.sample_rate)
        start = int(rng.integers(0, max(1, n_samples - length)))
        envelope[start : start + length] += signal.windows.hann(length, sym=True)[: n_samples - start]
    band = (0.15 * spec.sample_rate, 0.35 * spec.sample_rate)
    sos = signal.butter(4, band, btype="bandpass", fs=spec.sample_rate, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n_samples))
    noise /= noise.std() + 1e-12
    return spec.wind_gain * envelope * noise


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> List[Tuple[RecordingMeta, Waveform]]:
    """Generate ``n_classes * recordings_per_class`` labeled recordings, deterministic in ``seed``."""
    problems = spec.validate()
    if problems:
        raise InvalidInput("; ".join(problems))
    n_recordings = spec.n_classes * spec.recordings_per_class
    factor_seq, signal_seq = np.random.SeedSequence(seed).spawn(2)
    factor_rng = np.random.default_rng(factor_seq)
    signal_seqs = signal_seq.spawn(n_recordings)
    n_samples = int(round(spec.duration_s * spec.sample_rate))
    recordings: List[Tuple[RecordingMeta, Waveform]] = []
    for index in range(n_recordings):
        class_index = index // spec.recordings_per_class
        range_m = _pick_factor(spec.range_values, class_index, spec.class_factor_bias, factor_rng)
        depth_m = _pick_factor(spec.depth_values, class_index, spec.class_factor_bias, factor_rng)
        wind_kmh = _pick_factor(spec.wind_values, class_index, spec.class_factor_bias, factor_rng)
        wind_missing = factor_rng.random() < spec.wind_missing_fraction

        rng = np.random.default_rng(signal_seqs[index])
        x = _harmonic_stack(spec, class_index, n_samples, rng)
        x = x + spec.noise_level * rng.standard_normal(n_samples)
        x = _apply_range(x, range_m, spec.sample_rate)
        x = _apply_depth(x, depth_m, spec.sample_rate)
        x = x + _wind_bursts(spec, wind_kmh, n_samples, rng) / (1.0 + range_m / 50.0)

        meta = RecordingMeta(
            recording_id=index + 1,
            category=CATEGORIES[class_index],
            source_range_m=range_m,
            depth_m=depth_m,
            wind_kmh=None if wind_missing else wind_kmh,
            duration_s=n_samples / spec.sample_rate,
        )
        recordings.append((meta, Waveform(x, spec.sample_rate)))
    LOGGER.info("Generated %d synthetic recordings (%d classes, seed %d)", n_recordings, spec.n_classes, seed)
    return recordings


def synthetic_split(
    recordings: Sequence[Tuple[RecordingMeta, Waveform]],
    test_fraction: float = 0.25,
    seed: int = 0,
) -> SplitManifest:
    """Hold out whole recordings per category; a category with one recording stays in training."""
    rng = np.random.default_rng(seed)
    by_category: Dict[str, List[int]] = {}
    for meta, _ in recordings:
        by_category.setdefault(meta.category, []).append(meta.recording_id)
    categories: Dict[str, CategorySplit] = {}
    for name in CATEGORIES:
        ids = sorted(by_category.get(name, []))
        if not ids:
            continue
        n_test = 0
        if len(ids) > 1 and test_fraction > 0:
            n_test = min(len(ids) - 1, max(1, int(round(test_fraction * len(ids)))))
        order = rng.permutation(len(ids))
        test_ids = sorted(ids[i] for i in order[:n_test])
        train_ids = sorted(ids[i] for i in order[n_test:])
        categories[name] = CategorySplit(
            train=tuple(SplitEntry(i) for i in train_ids),
            test=tuple(SplitEntry(i) for i in test_ids),
        )
    return SplitManifest(categories=categories, source="<synthetic>")


def write_synthetic_corpus(
    recordings: Sequence[Tuple[RecordingMeta, Waveform]],
    out_dir: Union[str, Path],
    manifest: Optional[SplitManifest] = None,
) -> Path:
    """Write WAVs named by id, a metadata manifest and optionally the split, so the corpus loads like ShipsEar."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for meta, wave in recordings:
        write_wav(root / f"{meta.recording_id}.wav", wave)
    write_metadata_manifest(root / "metadata.csv", [meta for meta, _ in recordings])
    if manifest is not None:
        with (root / "split.yaml").open("w", encoding="utf-8") as handle:
            yaml.safe_dump(manifest.to_dict(), handle, sort_keys=False, allow_unicode=True)
    LOGGER.info("Synthetic corpus written to %s", root)
    return root
