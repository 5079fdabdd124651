"""Binary container for feature maps and exported embedding matrices.

Layout: magic ``AMTF``, a version byte, a kind byte, two little-endian u32
dimensions (rows, columns), then the matrix as row-major little-endian
float32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from enum import IntEnum
from pathlib import Path
from typing import Any, Optional, Tuple, Union

import numpy as np

from .errors import CacheFormatError
from .signal_pipeline import FeatureConfig, FeatureKind, FeatureMap, feature_bin_count, feature_frequencies

MAGIC = b"AMTF"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")


class MatrixKind(IntEnum):
    SPECTROGRAM = 0
    MEL = 1
    CQT = 2
    EMBEDDING = 3
    REPRESENTATION = 4


def write_matrix(path: Union[str, Path], data: np.ndarray, kind: MatrixKind) -> Path:
    matrix = np.asarray(data)
    if matrix.ndim != 2:
        raise CacheFormatError(f"only 2-D matrices can be cached, got shape {matrix.shape}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes(order="C")
    with target.open("wb") as handle:
        handle.write(_HEADER.pack(MAGIC, VERSION, int(kind), rows, cols))
        handle.write(payload)
    return target


def read_matrix(path: Union[str, Path]) -> Tuple[MatrixKind, np.ndarray]:
    source = Path(path)
    raw = source.read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheFormatError(f"{source}: truncated header")
    magic, version, kind_code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"{source}: unsupported version {version}")
    try:
        kind = MatrixKind(kind_code)
    except ValueError as exc:
        raise CacheFormatError(f"{source}: unknown kind byte {kind_code}") from exc
    expected = rows * cols * 4
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise CacheFormatError(f"{source}: expected {expected} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return kind, data


def write_feature_cache(path: Union[str, Path], feature: FeatureMap) -> Path:
    return write_matrix(path, feature.data, MatrixKind(feature.kind.code))


def read_feature_cache(path: Union[str, Path], config: Optional[FeatureConfig] = None) -> FeatureMap:
    """Load a cached feature map; with a config its width is checked and axis metadata rebuilt."""
    kind_code, data = read_matrix(path)
    if kind_code > MatrixKind.CQT:
        raise CacheFormatError(f"{path}: holds a {kind_code.name.lower()} matrix, not a feature map")
    kind = FeatureKind.from_code(int(kind_code))
    freq_axis = None
    frame_rate = None
    if config is not None:
        expected = feature_bin_count(kind, config)
        if data.shape[1] != expected:
            raise CacheFormatError(f"{path}: {data.shape[1]} frequency bins cached, the configuration gives {expected}")
        freq_axis = feature_frequencies(kind, config)
        frame_rate = config.sample_rate / config.hop()
    return FeatureMap(kind=kind, data=data, freq_axis=freq_axis, frame_rate=frame_rate)


def cache_file_name(stem: str, start_s: float, kind: FeatureKind) -> str:
    return f"{stem}_{start_s:07.1f}s.{kind.value}.amtf"


def cache_fingerprint(config: FeatureConfig, **context: Any) -> str:
    """Digest of the feature parameters and whatever else shaped the cached samples.

    Caches live in a directory named by it, so a changed configuration or
    corpus never reads maps computed under another one.
    """
    payload = {"features": asdict(config), **context}
    encoded = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha1(encoded).hexdigest()[:12]
