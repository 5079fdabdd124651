"""Adversarial multi-task underwater target recognition with lazy attribute access to avoid importing torch early."""
from __future__ import annotations

from importlib import import_module
from typing import Any

__all__ = [
    "main",
    "FeatureConfig",
    "FeatureKind",
    "waveform_to_feature",
    "generate_synthetic",
    "load_shipsear",
    "init_params",
    "TrainConfig",
    "train",
    "multi_seed_report",
    "load_run_config",
]

_EXPORTS = {
    "main": "amtnet.cli",
    "FeatureConfig": "amtnet.signal_pipeline",
    "FeatureKind": "amtnet.signal_pipeline",
    "waveform_to_feature": "amtnet.signal_pipeline",
    "generate_synthetic": "amtnet.synthetic",
    "load_shipsear": "amtnet.dataset",
    "init_params": "amtnet.network",
    "TrainConfig": "amtnet.training",
    "train": "amtnet.training",
    "multi_seed_report": "amtnet.evaluation",
    "load_run_config": "amtnet.config",
}


def __getattr__(name: str) -> Any:  # pragma: no cover - thin lazy loader
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    return getattr(import_module(module), name)
