"""Run configuration: YAML file, command-line overrides and defaults.

Precedence is flags > file > defaults. Every unknown key and bad value found
in one pass is reported together through a single ``ConfigError``.
"""
from __future__ import annotations

import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml

from .augmentation import LmrConfig
from .errors import ConfigError
from .evaluation import STDEV_CONVENTIONS
from .signal_pipeline import FeatureConfig, FeatureKind
from .synthetic import SyntheticSpec
from .training import TrainConfig

LOGGER = logging.getLogger(__name__)

DATA_ROOT_ENV = "AMT_DATA_ROOT"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

# train.seed and train.lmr are fed from the top-level seed and augmentation.lmr
_TRAIN_EXCLUDED = ("seed", "lmr")


@dataclass(frozen=True)
class DataConfig:
    root: Optional[str] = None
    metadata: Optional[str] = None
    split: Optional[str] = None
    synthetic: bool = False
    feature: str = "cqt"
    segment_s: float = 30.0
    hop_s: float = 15.0
    cache_dir: Optional[str] = None
    jobs: int = 1

    @property
    def feature_kind(self) -> FeatureKind:
        return FeatureKind.parse(self.feature)

    def validate(self) -> List[str]:
        problems: List[str] = []
        if self.feature not in {kind.value for kind in FeatureKind}:
            problems.append(f"data.feature must be one of {[k.value for k in FeatureKind]}, got {self.feature!r}")
        if self.segment_s <= 0 or self.hop_s <= 0:
            problems.append("data.segment_s and data.hop_s must be positive")
        if self.jobs < 1:
            problems.append("data.jobs must be at least 1")
        return problems


@dataclass(frozen=True)
class EvaluationConfig:
    seeds: Tuple[int, ...] = (123, 3407)
    stdev_convention: str = "standard_error"
    batch_size: int = 16
    tsne_perplexity: float = 30.0
    robustness_ids: Tuple[int, ...] = (11, 36, 65)
    window_s: float = 30.0

    def validate(self) -> List[str]:
        problems: List[str] = []
        if not self.seeds:
            problems.append("evaluation.seeds must list at least one seed")
        if self.stdev_convention not in STDEV_CONVENTIONS:
            problems.append(f"evaluation.stdev_convention must be one of {list(STDEV_CONVENTIONS)}")
        if self.batch_size < 1:
            problems.append("evaluation.batch_size must be at least 1")
        if self.tsne_perplexity <= 0:
            problems.append("evaluation.tsne_perplexity must be positive")
        if self.window_s <= 0:
            problems.append("evaluation.window_s must be positive")
        return problems


@dataclass(frozen=True)
class RunConfig:
    seed: int = 123
    out: str = "runs/amtnet"
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lmr: LmrConfig = field(default_factory=LmrConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, lmr=self.lmr)

    def validate(self) -> List[str]:
        problems: List[str] = []
        problems.extend(self.data.validate())
        problems.extend(self.features.validate())
        problems.extend(p for p in self.train_config().validate() if not p.startswith("augmentation."))
        problems.extend(self.lmr.validate())
        problems.extend(self.evaluation.validate())
        if self.data.synthetic:
            problems.extend(self.synthetic.validate())
        return problems

    def to_dict(self) -> Dict[str, Any]:
        train = _plain(asdict(self.train))
        for key in _TRAIN_EXCLUDED:
            train.pop(key, None)
        return {
            "seed": self.seed,
            "out": self.out,
            "data": _plain(asdict(self.data)),
            "synthetic": _plain(asdict(self.synthetic)),
            "features": _plain(asdict(self.features)),
            "train": train,
            "augmentation": {"lmr": _plain(asdict(self.lmr))},
            "evaluation": _plain(asdict(self.evaluation)),
        }


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


# ---------------------------------------------------------------------------
# Coercion


class _Invalid(Exception):
    pass


def _coerce(value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [arg for arg in args if arg is not type(None)]
        return _coerce(value, inner[0])
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise _Invalid(f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(item, args[0]) for item in value)
        if len(value) != len(args):
            raise _Invalid(f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(item, arg) for item, arg in zip(value, args))
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise _Invalid(f"expected true or false, got {value!r}")
    if hint is int:
        if isinstance(value, bool):
            raise _Invalid(f"expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            return int(value)
        raise _Invalid(f"expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, bool):
            raise _Invalid(f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise _Invalid(f"expected a number, got {value!r}") from exc
    if hint is str:
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
        raise _Invalid(f"expected a string, got {value!r}")
    return value


def _build_section(
    cls: type,
    raw: Any,
    prefix: str,
    problems: List[str],
    base: Any = None,
    excluded: Tuple[str, ...] = (),
) -> Any:
    """Overlay the mapping ``raw`` onto ``base`` (or the defaults of ``cls``)."""
    current = base if base is not None else cls()
    if raw is None:
        return current
    if not isinstance(raw, Mapping):
        problems.append(f"{prefix} must be a mapping")
        return current
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if f.name not in excluded and not is_dataclass(hints[f.name])}
    updates: Dict[str, Any] = {}
    for key, value in raw.items():
        if key not in names:
            problems.append(f"{prefix}.{key}: unknown key")
            continue
        try:
            updates[key] = _coerce(value, hints[key])
        except _Invalid as exc:
            problems.append(f"{prefix}.{key}: {exc}")
    return replace(current, **updates) if updates else current


def deep_merge(target: Dict[str, Any], source: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in source.items():
        if isinstance(value, Mapping) and isinstance(target.get(key), dict):
            deep_merge(target[key], value)
        else:
            target[key] = value
    return target


def apply_overrides(raw: Dict[str, Any], overrides: Mapping[str, Any]) -> None:
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = value


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    source = Path(path).expanduser()
    try:
        with source.open("r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError([f"{source}: {exc.strerror or exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"{source}: parse error: {exc}"]) from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{source}: top-level YAML must be a mapping"])
    return raw


def build_run_config(raw: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> RunConfig:
    problems: List[str] = []
    known = {"seed", "out", "data", "synthetic", "features", "train", "augmentation", "evaluation"}
    for key in raw:
        if key not in known:
            problems.append(f"{key}: unknown key")

    updates: Dict[str, Any] = {}
    for key, hint in (("seed", int), ("out", str)):
        if key in raw:
            try:
                updates[key] = _coerce(raw[key], hint)
            except _Invalid as exc:
                problems.append(f"{key}: {exc}")

    data = _build_section(DataConfig, raw.get("data"), "data", problems)
    environment = os.environ if env is None else env
    if data.root is None and environment.get(DATA_ROOT_ENV):
        data = replace(data, root=environment[DATA_ROOT_ENV])

    augmentation = raw.get("augmentation")
    lmr_raw = None
    if augmentation is not None:
        if not isinstance(augmentation, Mapping):
            problems.append("augmentation must be a mapping")
        else:
            for key in augmentation:
                if key != "lmr":
                    problems.append(f"augmentation.{key}: unknown key")
            lmr_raw = augmentation.get("lmr")

    config = RunConfig(
        data=data,
        synthetic=_build_section(SyntheticSpec, raw.get("synthetic"), "synthetic", problems),
        features=_build_section(FeatureConfig, raw.get("features"), "features", problems),
        train=_build_section(TrainConfig, raw.get("train"), "train", problems, excluded=_TRAIN_EXCLUDED),
        lmr=_build_section(LmrConfig, lmr_raw, "augmentation.lmr", problems),
        evaluation=_build_section(EvaluationConfig, raw.get("evaluation"), "evaluation", problems),
        **updates,
    )
    if not problems:
        problems.extend(config.validate())
    if problems:
        raise ConfigError(problems)
    return config


def load_run_config(
    path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Defaults, overlaid by the YAML file at ``path``, overlaid by dotted-key ``overrides``."""
    raw: Dict[str, Any] = {}
    if path is not None:
        deep_merge(raw, read_config_file(path))
    if overrides:
        apply_overrides(raw, overrides)
    config = build_run_config(raw, env)
    LOGGER.debug("Resolved configuration: %s", config)
    return config


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    target = Path(path)
    if target.suffix not in (".yaml", ".yml"):
        target = target / RESOLVED_CONFIG_NAME
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(config.to_dict(), handle, sort_keys=False, allow_unicode=True)
    return target
