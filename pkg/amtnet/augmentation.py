"""Local masking and replicating (LMR) for batches of time-frequency maps.

Random rectangles of a sample's map are overwritten by the rectangle at the
same coordinates taken from another sample of the same batch. Maps are laid
out ``(..., frames, bins)``; patches only ever touch the configured band of
bins.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch

from .errors import ConfigError

LOGGER = logging.getLogger(__name__)

Maps = TypeVar("Maps", np.ndarray, torch.Tensor)


@dataclass(frozen=True)
class LmrConfig:
    n_patches: Tuple[int, int] = (1, 3)
    time_fraction: Tuple[float, float] = (0.05, 0.15)
    freq_fraction: Tuple[float, float] = (0.05, 0.15)
    # half-open [first, last) bin range; None means every bin
    passband_rows: Optional[Tuple[int, int]] = None
    probability: float = 0.5

    def validate(self, n_rows: Optional[int] = None) -> List[str]:
        problems: List[str] = []
        lo, hi = self.n_patches
        if not 0 <= lo <= hi:
            problems.append("augmentation.lmr.n_patches must satisfy 0 <= min <= max")
        for label, (a, b) in (("time_fraction", self.time_fraction), ("freq_fraction", self.freq_fraction)):
            if not 0 < a <= b <= 1:
                problems.append(f"augmentation.lmr.{label} must satisfy 0 < min <= max <= 1")
        if not 0 <= self.probability <= 1:
            problems.append("augmentation.lmr.probability must lie in [0, 1]")
        if self.passband_rows is not None:
            first, last = self.passband_rows
            if not 0 <= first < last:
                problems.append("augmentation.lmr.passband_rows must satisfy 0 <= first < last")
            elif n_rows is not None and last > n_rows:
                problems.append(f"augmentation.lmr.passband_rows end {last} exceeds the {n_rows} feature bins")
        return problems

    def band(self, n_rows: int) -> Tuple[int, int]:
        if self.passband_rows is None:
            return 0, n_rows
        problems = self.validate(n_rows)
        if problems:
            raise ConfigError(problems)
        return self.passband_rows


@dataclass(frozen=True)
class Patch:
    sample: int
    donor: int
    t0: int
    t1: int
    f0: int
    f1: int


def _span(fraction: Tuple[float, float], extent: int, rng: np.random.Generator) -> int:
    return int(min(extent, max(1, round(rng.uniform(*fraction) * extent))))


def plan_patches(
    batch_size: int,
    n_frames: int,
    n_rows: int,
    config: LmrConfig,
    rng: np.random.Generator,
) -> List[Patch]:
    """Draw the patches (and their donors) for one batch."""
    if batch_size < 2:
        return []
    first, last = config.band(n_rows)
    band_rows = last - first
    patches: List[Patch] = []
    for sample in range(batch_size):
        if rng.random() >= config.probability:
            continue
        count = int(rng.integers(config.n_patches[0], config.n_patches[1] + 1))
        donor = int(rng.integers(batch_size - 1))
        if donor >= sample:
            donor += 1
        for _ in range(count):
            width = _span(config.time_fraction, n_frames, rng)
            height = _span(config.freq_fraction, band_rows, rng)
            t0 = int(rng.integers(0, n_frames - width + 1))
            f0 = first + int(rng.integers(0, band_rows - height + 1))
            patches.append(Patch(sample, donor, t0, t0 + width, f0, f0 + height))
    return patches


def replicate_patches(batch: Maps, patches: Sequence[Patch]) -> Maps:
    """Copy each patch from its donor; donors are always read from the unmodified batch."""
    out = batch.clone() if isinstance(batch, torch.Tensor) else np.array(batch, copy=True)
    for patch in patches:
        out[patch.sample, ..., patch.t0 : patch.t1, patch.f0 : patch.f1] = batch[
            patch.donor, ..., patch.t0 : patch.t1, patch.f0 : patch.f1
        ]
    return out


def lmr(batch: Maps, config: LmrConfig, rng: np.random.Generator) -> Maps:
    if batch.shape[0] < 2:
        if config.probability > 0:
            LOGGER.warning("LMR needs at least two maps per batch; augmentation skipped")
        return batch.clone() if isinstance(batch, torch.Tensor) else np.array(batch, copy=True)
    n_frames, n_rows = int(batch.shape[-2]), int(batch.shape[-1])
    patches = plan_patches(int(batch.shape[0]), n_frames, n_rows, config, rng)
    return replicate_patches(batch, patches)
