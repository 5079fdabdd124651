"""Recording metadata, auxiliary label mapping, segmentation and train/test splits."""
from __future__ import annotations

import csv
import glob
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
import torch
import yaml

from .errors import (
    CacheFormatError,
    IngestError,
    InvalidInput,
    ManifestError,
    OutOfMappingRange,
    ShapeError,
    UnmappedRecording,
)
from .feature_cache import cache_file_name, read_feature_cache, write_feature_cache
from .signal_pipeline import FeatureConfig, FeatureKind, Waveform, extract_features, preprocess

LOGGER = logging.getLogger(__name__)

CATEGORIES: Tuple[str, ...] = (
    "Dredger",
    "Fish boat",
    "Motorboat",
    "Mussel boat",
    "Natural noise",
    "Ocean liner",
    "Passenger ship",
    "Pilot ship",
    "RO-RO ship",
    "Sailboat",
    "Trawler",
    "Tugboat",
)

EXCLUDED = -1

DEFAULT_SPLIT_PATH = Path(__file__).with_name("data") / "shipsear_split.yaml"

_ABSENT_MARKERS = {"", "—", "–", "-", "na", "n/a", "nan", "none", "not available"}


def _category_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


_CATEGORY_LOOKUP: Dict[str, str] = {_category_key(name): name for name in CATEGORIES}
_CATEGORY_LOOKUP.update(
    {
        "passengers": "Passenger ship",
        "passenger": "Passenger ship",
        "roro": "RO-RO ship",
        "naturalambientnoise": "Natural noise",
        "ambientnoise": "Natural noise",
        "fishingboat": "Fish boat",
        "pilotboat": "Pilot ship",
        "tug": "Tugboat",
    }
)


def canonical_category(name: str) -> str:
    try:
        return _CATEGORY_LOOKUP[_category_key(name)]
    except KeyError as exc:
        raise InvalidInput(f"unknown category {name!r}") from exc


def category_index(name: str) -> int:
    return CATEGORIES.index(canonical_category(name))


# ---------------------------------------------------------------------------
# Influential factors and label mapping


class Factor(str, Enum):
    SOURCE_RANGE = "range"
    DEPTH = "depth"
    WIND = "wind"

    @classmethod
    def parse(cls, text: Union[str, "Factor"]) -> "Factor":
        if isinstance(text, Factor):
            return text
        lowered = str(text).strip().lower().replace("-", "_")
        aliases = {"source_range": "range", "water_depth": "depth", "wind_speed": "wind"}
        try:
            return cls(aliases.get(lowered, lowered))
        except ValueError as exc:
            raise InvalidInput(f"unsupported influential factor {text!r}") from exc


@dataclass(frozen=True)
class LabelInterval:
    label: int
    low: float
    high: float
    low_inclusive: bool
    high_inclusive: bool
    description: str

    def contains(self, value: float) -> bool:
        above = value >= self.low if self.low_inclusive else value > self.low
        below = value <= self.high if self.high_inclusive else value < self.high
        return above and below


@dataclass(frozen=True)
class AuxiliaryTaskSpec:
    factor: Factor
    n_aux: int
    intervals: Tuple[LabelInterval, ...]

    def describe(self, label: int) -> str:
        if label == EXCLUDED:
            return "Not available"
        return self.intervals[label].description


AUX_TASKS: Dict[Factor, AuxiliaryTaskSpec] = {
    Factor.SOURCE_RANGE: AuxiliaryTaskSpec(
        Factor.SOURCE_RANGE,
        2,
        (
            LabelInterval(0, 0.0, 50.0, False, False, "Close source range"),
            LabelInterval(1, 50.0, 350.0, True, True, "Medium source range"),
        ),
    ),
    Factor.DEPTH: AuxiliaryTaskSpec(
        Factor.DEPTH,
        3,
        (
            LabelInterval(0, 0.0, 6.0, False, False, "Land-sea interface"),
            LabelInterval(1, 6.0, 12.0, True, True, "Shallow water"),
            LabelInterval(2, 12.0, 20.0, False, True, "Deep water"),
        ),
    ),
    Factor.WIND: AuxiliaryTaskSpec(
        Factor.WIND,
        3,
        (
            LabelInterval(0, 0.0, 0.0, True, True, "Calm"),
            LabelInterval(1, 0.0, 11.0, False, False, "Light air/breeze"),
            LabelInterval(2, 11.0, 18.0, True, True, "Gentle breeze"),
        ),
    ),
}


def aux_task_spec(factor: Union[Factor, str]) -> AuxiliaryTaskSpec:
    return AUX_TASKS[Factor.parse(factor)]


def map_aux_label(spec: AuxiliaryTaskSpec, value: Optional[float]) -> int:
    """Auxiliary class of an annotated factor value; ``EXCLUDED`` when absent."""
    if value is None:
        return EXCLUDED
    if value < 0:
        raise InvalidInput(f"{spec.factor.value} annotation must be non-negative, got {value}")
    for interval in spec.intervals:
        if interval.contains(value):
            return interval.label
    raise OutOfMappingRange(f"{spec.factor.value} value {value} falls outside every mapping interval")


# ---------------------------------------------------------------------------
# Recordings and segments


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: int
    category: str
    source_range_m: Optional[float] = None
    depth_m: Optional[float] = None
    wind_kmh: Optional[float] = None
    duration_s: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", canonical_category(self.category))
        for label, value in (
            ("source range", self.source_range_m),
            ("depth", self.depth_m),
            ("wind speed", self.wind_kmh),
        ):
            if value is not None and value < 0:
                raise InvalidInput(f"recording {self.recording_id}: {label} must be non-negative")

    @property
    def category_index(self) -> int:
        return CATEGORIES.index(self.category)

    def factor_value(self, factor: Factor) -> Optional[float]:
        if factor is Factor.SOURCE_RANGE:
            return self.source_range_m
        if factor is Factor.DEPTH:
            return self.depth_m
        return self.wind_kmh

    def aux_labels(self) -> Dict[Factor, int]:
        return {factor: map_aux_label(spec, self.factor_value(factor)) for factor, spec in AUX_TASKS.items()}


@dataclass(frozen=True, eq=False)
class Segment:
    recording_id: int
    start_s: float
    duration_s: float
    category: str
    y: int
    aux: Mapping[Factor, int]
    waveform: Optional[Waveform] = None
    feature_path: Optional[Path] = None

    @property
    def segment_id(self) -> str:
        return f"{self.recording_id}@{self.start_s:.1f}"

    def y_aux(self, factor: Union[Factor, str]) -> int:
        return self.aux[Factor.parse(factor)]


def segment_recording(
    rec: RecordingMeta,
    waveform: Waveform,
    segment_s: float = 30.0,
    hop_s: float = 15.0,
    start_s: float = 0.0,
    end_s: Optional[float] = None,
) -> List[Segment]:
    """Consecutive ``segment_s`` windows every ``hop_s`` seconds; an incomplete tail is dropped."""
    rate = waveform.sample_rate
    seg_len = int(round(segment_s * rate))
    hop = int(round(hop_s * rate))
    if seg_len <= 0 or hop <= 0:
        raise InvalidInput("segment length and hop must be positive")
    first = int(round(start_s * rate))
    stop = waveform.samples.size if end_s is None else min(waveform.samples.size, int(round(end_s * rate)))
    labels = rec.aux_labels()
    segments: List[Segment] = []
    offset = first
    while offset + seg_len <= stop:
        segments.append(
            Segment(
                recording_id=rec.recording_id,
                start_s=offset / rate,
                duration_s=segment_s,
                category=rec.category,
                y=rec.category_index,
                aux=labels,
                waveform=Waveform(waveform.samples[offset : offset + seg_len], rate),
            )
        )
        offset += hop
    if not segments:
        LOGGER.warning(
            "Recording %s yields no %.0f-s segment in %.1f-%.1f s; skipped.",
            rec.recording_id,
            segment_s,
            first / rate,
            stop / rate,
        )
    return segments


# ---------------------------------------------------------------------------
# Split manifest


@dataclass(frozen=True)
class SplitEntry:
    recording_id: int
    start_s: float = 0.0
    end_s: Optional[float] = None

    def overlaps(self, other: "SplitEntry") -> bool:
        if self.recording_id != other.recording_id:
            return False
        self_end = float("inf") if self.end_s is None else self.end_s
        other_end = float("inf") if other.end_s is None else other.end_s
        return self.start_s < other_end and other.start_s < self_end


@dataclass(frozen=True)
class CategorySplit:
    train: Tuple[SplitEntry, ...] = ()
    test: Tuple[SplitEntry, ...] = ()


@dataclass(frozen=True)
class SplitManifest:
    categories: Mapping[str, CategorySplit] = field(default_factory=dict)
    source: Optional[str] = None

    def entries_for(self, recording_id: int) -> List[Tuple[str, SplitEntry]]:
        found: List[Tuple[str, SplitEntry]] = []
        for split in self.categories.values():
            found.extend(("train", entry) for entry in split.train if entry.recording_id == recording_id)
            found.extend(("test", entry) for entry in split.test if entry.recording_id == recording_id)
        return found

    def record_counts(self) -> Tuple[int, int]:
        train = sum(len(split.train) for split in self.categories.values())
        test = sum(len(split.test) for split in self.categories.values())
        return train, test

    def to_dict(self) -> dict:
        def dump(entry: SplitEntry) -> Union[int, dict]:
            if entry.start_s == 0.0 and entry.end_s is None:
                return entry.recording_id
            return {"id": entry.recording_id, "start": entry.start_s, "end": entry.end_s}

        return {
            name: {"train": [dump(e) for e in split.train], "test": [dump(e) for e in split.test]}
            for name, split in self.categories.items()
        }


def _parse_split_entry(raw: object, where: str, source: str) -> SplitEntry:
    if isinstance(raw, bool):
        raise ManifestError(None, f"{where}: expected a recording id, got {raw!r}", source)
    if isinstance(raw, int):
        return SplitEntry(raw)
    if isinstance(raw, str) and raw.strip().isdigit():
        return SplitEntry(int(raw))
    if isinstance(raw, dict) and "id" in raw:
        try:
            start = float(raw.get("start", 0.0))
            end = raw.get("end")
            return SplitEntry(int(raw["id"]), start, None if end is None else float(end))
        except (TypeError, ValueError) as exc:
            raise ManifestError(None, f"{where}: malformed entry {raw!r}", source) from exc
    raise ManifestError(None, f"{where}: expected an id or an {{id, start, end}} mapping, got {raw!r}", source)


def _check_split_disjoint(manifest: SplitManifest) -> None:
    train = [entry for split in manifest.categories.values() for entry in split.train]
    test = [entry for split in manifest.categories.values() for entry in split.test]
    for entry in train:
        for other in test:
            if entry.overlaps(other):
                raise ManifestError(
                    None,
                    f"recording {entry.recording_id} has overlapping train and test ranges",
                    manifest.source,
                )


def parse_split_manifest(raw_config: object, source: str = "<split>") -> SplitManifest:
    if not isinstance(raw_config, dict):
        raise ManifestError(None, "top-level YAML must map category names to train/test lists", source)
    categories: Dict[str, CategorySplit] = {}
    for raw_name, payload in raw_config.items():
        try:
            name = canonical_category(str(raw_name))
        except InvalidInput as exc:
            raise ManifestError(None, str(exc), source) from exc
        if not isinstance(payload, dict):
            raise ManifestError(None, f"entry for {raw_name!r} must be a mapping with train/test lists", source)
        sides: Dict[str, Tuple[SplitEntry, ...]] = {}
        for side in ("train", "test"):
            items = payload.get(side) or []
            if not isinstance(items, list):
                raise ManifestError(None, f"{raw_name}.{side} must be a list", source)
            sides[side] = tuple(_parse_split_entry(item, f"{raw_name}.{side}", source) for item in items)
        categories[name] = CategorySplit(train=sides["train"], test=sides["test"])
    manifest = SplitManifest(categories=categories, source=source)
    _check_split_disjoint(manifest)
    return manifest


def load_split_manifest(path: Union[str, Path, None] = None) -> SplitManifest:
    target = Path(path).expanduser() if path else DEFAULT_SPLIT_PATH
    source = str(target)
    try:
        with target.open("r", encoding="utf-8") as handle:
            raw_config = yaml.safe_load(handle)
    except yaml.YAMLError as exc:
        raise ManifestError(None, f"parse error: {exc}", source) from exc
    except OSError as exc:
        raise ManifestError(None, str(exc), source) from exc
    return parse_split_manifest(raw_config or {}, source)


def build_split(
    manifest: SplitManifest,
    recordings: Iterable[Tuple[RecordingMeta, Waveform]],
    segment_s: float = 30.0,
    hop_s: float = 15.0,
) -> Tuple[List[Segment], List[Segment]]:
    train: List[Segment] = []
    test: List[Segment] = []
    for meta, wave in recordings:
        entries = manifest.entries_for(meta.recording_id)
        if not entries:
            raise UnmappedRecording(meta.recording_id)
        for side, entry in entries:
            segments = segment_recording(meta, wave, segment_s, hop_s, entry.start_s, entry.end_s)
            (train if side == "train" else test).extend(segments)
    LOGGER.info("Split built: %d train / %d test segments", len(train), len(test))
    return train, test


def aux_label_counts(metas: Iterable[RecordingMeta], factor: Union[Factor, str]) -> Counter:
    spec = aux_task_spec(factor)
    return Counter(map_aux_label(spec, meta.factor_value(spec.factor)) for meta in metas)


# ---------------------------------------------------------------------------
# Ingestion


@dataclass(frozen=True)
class IngestFailure:
    source: Optional[str]
    recording_id: Optional[int]
    reason: str


def _parse_optional_number(text: str, line: int, label: str, source: str) -> Optional[float]:
    cleaned = text.strip()
    if cleaned.lower() in _ABSENT_MARKERS:
        return None
    try:
        return float(cleaned)
    except ValueError as exc:
        raise ManifestError(line, f"{label} {cleaned!r} is not a number", source) from exc


def _split_row(line: str) -> List[str]:
    if "\t" in line:
        delimiter = "\t"
    elif ";" in line:
        delimiter = ";"
    else:
        delimiter = ","
    return [cell.strip() for cell in next(csv.reader([line], delimiter=delimiter))]


def parse_metadata_rows(lines: Iterable[str], source: str = "<metadata>") -> List[RecordingMeta]:
    """Rows of ``id, category, range_m, depth_m, wind_kmh[, duration_s]``."""
    metas: List[RecordingMeta] = []
    seen_data = False
    for line_no, raw_line in enumerate(lines, start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        cells = _split_row(line)
        if not seen_data and not cells[0].isdigit():
            seen_data = True
            continue
        seen_data = True
        if len(cells) not in (5, 6):
            raise ManifestError(line_no, f"expected 5 or 6 fields, found {len(cells)}", source)
        if not cells[0].isdigit():
            raise ManifestError(line_no, f"recording id {cells[0]!r} is not an integer", source)
        try:
            meta = RecordingMeta(
                recording_id=int(cells[0]),
                category=cells[1],
                source_range_m=_parse_optional_number(cells[2], line_no, "source range", source),
                depth_m=_parse_optional_number(cells[3], line_no, "depth", source),
                wind_kmh=_parse_optional_number(cells[4], line_no, "wind speed", source),
                duration_s=_parse_optional_number(cells[5], line_no, "duration", source) if len(cells) == 6 else None,
            )
        except InvalidInput as exc:
            raise ManifestError(line_no, str(exc), source) from exc
        metas.append(meta)
    return metas


def load_metadata_manifest(path: Union[str, Path]) -> List[RecordingMeta]:
    target = Path(path).expanduser()
    with target.open("r", encoding="utf-8") as handle:
        return parse_metadata_rows(handle, str(target))


def write_metadata_manifest(path: Union[str, Path], metas: Iterable[RecordingMeta]) -> Path:
    def fmt(value: Optional[float]) -> str:
        return "—" if value is None else f"{value:g}"

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as handle:
        handle.write("id, category, range_m, depth_m, wind_kmh, duration_s\n")
        for meta in metas:
            handle.write(
                f"{meta.recording_id}, {meta.category}, {fmt(meta.source_range_m)}, "
                f"{fmt(meta.depth_m)}, {fmt(meta.wind_kmh)}, {fmt(meta.duration_s)}\n"
            )
    return target


def read_wav(path: Union[str, Path], recording_id: Optional[int] = None) -> Waveform:
    """Read a WAV file; multichannel files keep the channel with the highest RMS."""
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, OSError, ValueError) as exc:
        raise IngestError(recording_id, f"unreadable WAV {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise IngestError(recording_id, f"WAV {path} holds no samples")
    rms = np.sqrt(np.mean(data**2, axis=0))
    channel = int(np.argmax(rms))
    if data.shape[1] > 1:
        LOGGER.debug("%s: selected channel %d of %d by RMS", path, channel, data.shape[1])
    try:
        return Waveform(data[:, channel], float(rate))
    except InvalidInput as exc:
        raise IngestError(recording_id, f"{path}: {exc}") from exc


def write_wav(path: Union[str, Path], wave: Waveform) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(target), wave.samples.astype(np.float32), int(round(wave.sample_rate)), subtype="FLOAT")
    return target


_WAV_ID_RE = re.compile(r"^(\d+)")


def index_wav_files(root: Union[str, Path]) -> Dict[int, Path]:
    """Map recording ids (leading digits of the file name) to WAV paths."""
    found: Dict[int, Path] = {}
    pattern = os.path.join(str(root), "**", "*")
    for file_path in sorted(glob.glob(pattern, recursive=True)):
        path = Path(file_path)
        if path.suffix.lower() != ".wav" or not path.is_file():
            continue
        match = _WAV_ID_RE.match(path.stem)
        if not match:
            continue
        recording_id = int(match.group(1))
        if recording_id in found:
            LOGGER.warning("Duplicate WAV for recording %d: keeping %s, ignoring %s", recording_id, found[recording_id], path)
            continue
        found[recording_id] = path
    return found


def _record_ingest_failure(
    failures: Optional[List[IngestFailure]],
    source: Optional[str],
    recording_id: Optional[int],
    reason: str,
) -> None:
    if failures is None:
        raise IngestError(recording_id, reason)
    LOGGER.warning("%s in %s", reason, source or "<input>")
    failures.append(IngestFailure(source=source, recording_id=recording_id, reason=reason))


def load_shipsear(
    root_path: Union[str, Path],
    metadata_manifest: Union[str, Path],
    *,
    failures: Optional[List[IngestFailure]] = None,
) -> List[Tuple[RecordingMeta, Waveform]]:
    """Load every manifest row's recording.

    Without a ``failures`` list the first missing or unreadable file raises
    ``IngestError``; with one, failures are recorded there and loading goes on.
    """
    metas = load_metadata_manifest(metadata_manifest)
    files = index_wav_files(root_path)
    loaded: List[Tuple[RecordingMeta, Waveform]] = []
    for meta in metas:
        path = files.get(meta.recording_id)
        if path is None:
            _record_ingest_failure(failures, str(root_path), meta.recording_id, "WAV file not found")
            continue
        try:
            wave = read_wav(path, meta.recording_id)
        except IngestError as exc:
            _record_ingest_failure(failures, str(path), meta.recording_id, exc.reason)
            continue
        loaded.append((replace(meta, duration_s=wave.duration), wave))
    LOGGER.info("Loaded %d of %d manifest recordings from %s", len(loaded), len(metas), root_path)
    return loaded


def preprocess_recordings(
    recordings: Iterable[Tuple[RecordingMeta, Waveform]],
    config: FeatureConfig,
) -> List[Tuple[RecordingMeta, Waveform]]:
    return [(meta, preprocess(wave, config)) for meta, wave in recordings]


# ---------------------------------------------------------------------------
# Featurized sets


@dataclass
class LabeledFeatures:
    """Stacked model inputs (N, 1, T, F) with their labels."""

    features: torch.Tensor
    labels: torch.Tensor
    aux_labels: Dict[Factor, torch.Tensor]
    recording_ids: Tuple[int, ...]
    start_s: Tuple[float, ...]
    kind: FeatureKind

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def aux(self, factor: Union[Factor, str]) -> torch.Tensor:
        return self.aux_labels[Factor.parse(factor)]

    def subset(self, indices: Sequence[int]) -> "LabeledFeatures":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledFeatures(
            features=self.features[index],
            labels=self.labels[index],
            aux_labels={factor: labels[index] for factor, labels in self.aux_labels.items()},
            recording_ids=tuple(self.recording_ids[i] for i in index.tolist()),
            start_s=tuple(self.start_s[i] for i in index.tolist()),
            kind=self.kind,
        )

    def segment_ids(self) -> List[str]:
        return [f"{rid}@{start:.1f}" for rid, start in zip(self.recording_ids, self.start_s)]


def featurize_segments(
    segments: Sequence[Segment],
    kind: Union[FeatureKind, str],
    config: FeatureConfig = FeatureConfig(),
    cache_dir: Union[str, Path, None] = None,
    force: bool = False,
) -> LabeledFeatures:
    """Extract (or load cached) features for preprocessed segments."""
    kind = FeatureKind.parse(kind)
    if not segments:
        raise InvalidInput("no segments to featurize")
    matrices: List[np.ndarray] = []
    for segment in segments:
        cache_path = None
        if cache_dir is not None:
            cache_path = Path(cache_dir) / cache_file_name(str(segment.recording_id), segment.start_s, kind)
        if cache_path is not None and cache_path.exists() and not force:
            try:
                matrices.append(read_feature_cache(cache_path, config).data)
                continue
            except CacheFormatError as exc:
                if segment.waveform is None:
                    raise
                LOGGER.warning("Rebuilding stale cache: %s", exc)
        if segment.waveform is None:
            raise InvalidInput(f"segment {segment.segment_id} has neither samples nor a cached feature")
        feature = extract_features(segment.waveform, kind, config)
        if cache_path is not None:
            write_feature_cache(cache_path, feature)
        matrices.append(feature.data.astype(np.float32))
    shapes = {matrix.shape for matrix in matrices}
    if len(shapes) != 1:
        raise ShapeError(f"segments produced differing feature shapes: {sorted(shapes)}")
    stacked = torch.from_numpy(np.stack(matrices).astype(np.float32)).unsqueeze(1)
    return LabeledFeatures(
        features=stacked,
        labels=torch.tensor([segment.y for segment in segments], dtype=torch.long),
        aux_labels={
            factor: torch.tensor([segment.aux[factor] for segment in segments], dtype=torch.long)
            for factor in Factor
        },
        recording_ids=tuple(segment.recording_id for segment in segments),
        start_s=tuple(segment.start_s for segment in segments),
        kind=kind,
    )


def carve_validation(
    data: LabeledFeatures,
    fraction: float,
    seed: int,
) -> Tuple[LabeledFeatures, Optional[LabeledFeatures]]:
    """Hold out about ``fraction`` of each category's recordings for validation.

    A category always keeps at least one recording in the training part.
    """
    if fraction <= 0 or len(data) == 0:
        return data, None
    rng = np.random.default_rng(seed)
    labels = data.labels.tolist()
    recordings_by_class: Dict[int, List[int]] = {}
    for recording_id, label in zip(data.recording_ids, labels):
        bucket = recordings_by_class.setdefault(label, [])
        if recording_id not in bucket:
            bucket.append(recording_id)
    held_out: set = set()
    for label in sorted(recordings_by_class):
        recordings = sorted(recordings_by_class[label])
        count = min(len(recordings) - 1, int(round(fraction * len(recordings))))
        if count > 0:
            held_out.update(rng.choice(recordings, size=count, replace=False).tolist())
    if not held_out:
        return data, None
    val_index = [i for i, rid in enumerate(data.recording_ids) if rid in held_out]
    train_index = [i for i, rid in enumerate(data.recording_ids) if rid not in held_out]
    return data.subset(train_index), data.subset(val_index)
