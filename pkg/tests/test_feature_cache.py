from dataclasses import replace

import numpy as np
import pytest

from amtnet.errors import CacheFormatError
from amtnet.feature_cache import (
    MAGIC,
    MatrixKind,
    cache_file_name,
    cache_fingerprint,
    read_feature_cache,
    read_matrix,
    write_feature_cache,
    write_matrix,
)
from amtnet.signal_pipeline import FeatureKind, FeatureMap


class TestFeatureCache:
    def test_feature_map_survives_the_container(self, tmp_path, small_features):
        data = np.random.default_rng(0).standard_normal((120, 39))
        path = write_feature_cache(tmp_path / "a.amtf", FeatureMap(FeatureKind.CQT, data))
        loaded = read_feature_cache(path, small_features)
        assert loaded.kind is FeatureKind.CQT
        np.testing.assert_array_equal(loaded.data, data.astype(np.float32))
        assert loaded.freq_axis is not None and loaded.freq_axis.size == 39
        assert loaded.frame_rate == pytest.approx(40.0)

    def test_header_layout(self, tmp_path):
        path = write_matrix(tmp_path / "m.amtf", np.zeros((2, 3)), MatrixKind.MEL)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert raw[4] == 1 and raw[5] == int(MatrixKind.MEL)
        assert int.from_bytes(raw[6:10], "little") == 2
        assert int.from_bytes(raw[10:14], "little") == 3
        assert len(raw) == 14 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = write_matrix(tmp_path / "m.amtf", np.ones((2, 2)), MatrixKind.CQT)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CacheFormatError):
            read_matrix(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = write_matrix(tmp_path / "m.amtf", np.ones((4, 4)), MatrixKind.CQT)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CacheFormatError):
            read_matrix(path)

    def test_embedding_matrix_is_not_a_feature(self, tmp_path):
        path = write_matrix(tmp_path / "e.amtf", np.ones((4, 512)), MatrixKind.EMBEDDING)
        with pytest.raises(CacheFormatError):
            read_feature_cache(path)

    def test_only_matrices_accepted(self, tmp_path):
        with pytest.raises(CacheFormatError):
            write_matrix(tmp_path / "v.amtf", np.ones(5), MatrixKind.CQT)

    def test_file_name(self):
        assert cache_file_name("28", 15.0, FeatureKind.CQT) == "28_00015.0s.cqt.amtf"
        assert cache_file_name("7", 0.0, FeatureKind.MEL) == "7_00000.0s.mel.amtf"

    def test_width_checked_against_configuration(self, tmp_path, small_features):
        path = write_feature_cache(tmp_path / "m.amtf", FeatureMap(FeatureKind.MEL, np.ones((120, 32))))
        assert read_feature_cache(path, small_features).data.shape == (120, 32)
        with pytest.raises(CacheFormatError):
            read_feature_cache(path, replace(small_features, n_mels=16))


class TestFingerprint:
    def test_stable_for_equal_settings(self, small_features):
        assert cache_fingerprint(small_features, seed=3) == cache_fingerprint(replace(small_features), seed=3)

    def test_feature_settings_change_it(self, small_features):
        base = cache_fingerprint(small_features)
        assert cache_fingerprint(replace(small_features, n_mels=16)) != base
        assert cache_fingerprint(replace(small_features, f_min=30.0)) != base

    def test_corpus_context_changes_it(self, small_features):
        assert cache_fingerprint(small_features, seed=3) != cache_fingerprint(small_features, seed=4)
        assert cache_fingerprint(small_features, segment_s=3.0) != cache_fingerprint(small_features, segment_s=30.0)
