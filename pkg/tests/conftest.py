from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import pytest
import torch

from amtnet.dataset import EXCLUDED, Factor, LabeledFeatures
from amtnet.signal_pipeline import FeatureConfig, FeatureKind
from amtnet.synthetic import SyntheticSpec


@pytest.fixture
def small_features() -> FeatureConfig:
    """4 kHz pipeline: 200-sample frames, 100-sample hop, 39 CQT bins."""
    return FeatureConfig(sample_rate=4000.0, f_min=20.0, f_max=2000.0, n_mels=32, bins_per_octave=6)


@pytest.fixture
def tiny_synthetic() -> SyntheticSpec:
    return SyntheticSpec(
        n_classes=3,
        recordings_per_class=3,
        duration_s=8.0,
        sample_rate=4000.0,
        f0_min=100.0,
        f0_max=400.0,
        range_values=(20.0, 150.0),
        depth_values=(3.0, 9.0, 16.0),
        wind_values=(0.0, 5.0, 15.0),
    )


def _labeled(
    n_per_class: int = 6,
    n_class: int = 3,
    frames: int = 16,
    bins: int = 16,
    seed: int = 0,
    noise: float = 0.3,
    missing_aux: bool = False,
) -> LabeledFeatures:
    """Separable toy maps: class c lights up a horizontal band of rows."""
    rng = np.random.default_rng(seed)
    n = n_per_class * n_class
    labels = np.repeat(np.arange(n_class), n_per_class)
    maps = noise * rng.standard_normal((n, 1, frames, bins))
    band = bins // n_class
    for index, label in enumerate(labels):
        maps[index, 0, :, label * band : (label + 1) * band] += 2.0
    range_labels = np.arange(n) % 2
    depth_labels = np.arange(n) % 3
    wind_labels = np.full(n, EXCLUDED) if missing_aux else (np.arange(n) // 2) % 3
    return LabeledFeatures(
        features=torch.from_numpy(maps.astype(np.float32)),
        labels=torch.from_numpy(labels).long(),
        aux_labels={
            Factor.SOURCE_RANGE: torch.from_numpy(range_labels).long(),
            Factor.DEPTH: torch.from_numpy(depth_labels).long(),
            Factor.WIND: torch.from_numpy(wind_labels).long(),
        },
        recording_ids=tuple(range(1, n + 1)),
        start_s=tuple(0.0 for _ in range(n)),
        kind=FeatureKind.CQT,
    )


@pytest.fixture
def labeled_factory() -> Callable[..., LabeledFeatures]:
    return _labeled


@pytest.fixture
def toy_data() -> LabeledFeatures:
    return _labeled()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def sine(freq: float, seconds: float, rate: float, phase: float = 0.0, amplitude: Optional[float] = 1.0) -> np.ndarray:
    t = np.arange(int(round(seconds * rate))) / rate
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture
def sine_wave() -> Callable[..., np.ndarray]:
    return sine
