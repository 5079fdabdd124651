import logging
from dataclasses import replace

import numpy as np
import pytest

from amtnet.dataset import (
    AUX_TASKS,
    CATEGORIES,
    EXCLUDED,
    Factor,
    RecordingMeta,
    Segment,
    aux_label_counts,
    aux_task_spec,
    build_split,
    canonical_category,
    carve_validation,
    featurize_segments,
    load_metadata_manifest,
    load_shipsear,
    load_split_manifest,
    map_aux_label,
    parse_metadata_rows,
    parse_split_manifest,
    read_wav,
    segment_recording,
    write_metadata_manifest,
    write_wav,
)
from amtnet.errors import (
    CacheFormatError,
    IngestError,
    InvalidInput,
    ManifestError,
    OutOfMappingRange,
    UnmappedRecording,
)
from amtnet.feature_cache import cache_file_name, read_feature_cache
from amtnet.signal_pipeline import FeatureKind, Waveform

RATE = 100.0


def _wave(seconds: float, rate: float = RATE, seed: int = 0) -> Waveform:
    return Waveform(np.random.default_rng(seed).standard_normal(int(round(seconds * rate))), rate)


class TestAuxLabelMapping:
    def test_source_range(self):
        spec = aux_task_spec("range")
        assert map_aux_label(spec, 49.9) == 0
        assert map_aux_label(spec, 50.0) == 1
        assert spec.describe(1) == "Medium source range"
        assert map_aux_label(spec, 350.0) == 1

    def test_depth_boundary(self):
        spec = aux_task_spec(Factor.DEPTH)
        assert map_aux_label(spec, 5.9) == 0
        assert map_aux_label(spec, 6.0) == 1
        assert map_aux_label(spec, 12.0) == 1
        assert map_aux_label(spec, 12.0001) == 2
        assert map_aux_label(spec, 20.0) == 2

    def test_wind(self):
        spec = aux_task_spec("wind")
        assert map_aux_label(spec, 0.0) == 0
        assert map_aux_label(spec, 10.9) == 1
        assert map_aux_label(spec, 11.0) == 2
        assert map_aux_label(spec, 18.0) == 2

    def test_absent_value_excluded(self):
        spec = aux_task_spec("wind")
        assert map_aux_label(spec, None) == EXCLUDED
        assert spec.describe(EXCLUDED) == "Not available"

    @pytest.mark.parametrize("factor,value", [("range", 351.0), ("range", 0.0), ("depth", 20.5), ("wind", 18.5)])
    def test_outside_every_interval(self, factor, value):
        with pytest.raises(OutOfMappingRange):
            map_aux_label(aux_task_spec(factor), value)

    def test_class_counts(self):
        assert [AUX_TASKS[f].n_aux for f in Factor] == [2, 3, 3]

    def test_label_counts(self):
        metas = [
            RecordingMeta(1, "Tugboat", wind_kmh=0.0),
            RecordingMeta(2, "Tugboat", wind_kmh=None),
            RecordingMeta(3, "Tugboat", wind_kmh=15.0),
            RecordingMeta(4, "Tugboat", wind_kmh=None),
        ]
        counts = aux_label_counts(metas, "wind")
        assert counts[EXCLUDED] == 2 and counts[0] == 1 and counts[2] == 1


class TestCategories:
    def test_twelve_classes(self):
        assert len(CATEGORIES) == 12

    def test_aliases(self):
        assert canonical_category("passengers") == "Passenger ship"
        assert canonical_category("ro-ro ship") == "RO-RO ship"
        assert canonical_category("Fishing boat") == "Fish boat"

    def test_unknown_category_rejected(self):
        with pytest.raises(InvalidInput):
            canonical_category("Submarine")


class TestSegmentation:
    def test_sixty_seconds(self):
        segments = segment_recording(RecordingMeta(1, "Dredger"), _wave(60.0))
        assert [s.start_s for s in segments] == [0.0, 15.0, 30.0]
        assert all(s.waveform.samples.size == 3000 for s in segments)

    def test_thirty_seconds(self):
        assert len(segment_recording(RecordingMeta(1, "Dredger"), _wave(30.0))) == 1

    def test_short_recording_dropped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="amtnet.dataset"):
            segments = segment_recording(RecordingMeta(1, "Dredger"), _wave(29.0))
        assert segments == []
        assert "no 30-s segment" in caplog.text

    def test_labels_follow_recording(self):
        meta = RecordingMeta(5, "Sailboat", source_range_m=40.0, depth_m=8.0, wind_kmh=None)
        segment = segment_recording(meta, _wave(30.0))[0]
        assert segment.y == CATEGORIES.index("Sailboat")
        assert segment.y_aux("range") == 0
        assert segment.y_aux("depth") == 1
        assert segment.y_aux("wind") == EXCLUDED
        assert segment.segment_id == "5@0.0"


class TestSplitManifest:
    def test_packaged_record_counts(self):
        manifest = load_split_manifest()
        assert manifest.record_counts() == (65, 26)
        assert len(manifest.categories) == 12

    def test_intra_recording_split(self):
        manifest = load_split_manifest()
        meta = RecordingMeta(28, "Trawler", 100.0, 15.0, 0.0)
        train, test = build_split(manifest, [(meta, _wave(163.0))])
        assert [s.start_s for s in train] == [15.0, 30.0, 45.0, 60.0, 75.0, 90.0]
        assert [s.start_s for s in test] == [125.0]

    def test_unlisted_recording_rejected(self):
        with pytest.raises(UnmappedRecording):
            build_split(load_split_manifest(), [(RecordingMeta(999, "Tugboat"), _wave(30.0))])

    def test_sets_are_disjoint(self):
        manifest = parse_split_manifest({"Tugboat": {"train": [1], "test": [2]}})
        recordings = [(RecordingMeta(1, "Tugboat"), _wave(60.0, seed=1)), (RecordingMeta(2, "Tugboat"), _wave(60.0, seed=2))]
        train, test = build_split(manifest, recordings)
        assert {s.recording_id for s in train} == {1}
        assert {s.recording_id for s in test} == {2}
        assert not {s.segment_id for s in train} & {s.segment_id for s in test}

    def test_overlapping_ranges_rejected(self):
        raw = {"Trawler": {"train": [{"id": 28, "start": 0, "end": 100}], "test": [{"id": 28, "start": 90, "end": 160}]}}
        with pytest.raises(ManifestError):
            parse_split_manifest(raw)

    def test_unknown_category_rejected(self):
        with pytest.raises(ManifestError):
            parse_split_manifest({"Submarine": {"train": [1], "test": [2]}})

    def test_round_trip_through_yaml_layout(self):
        manifest = load_split_manifest()
        again = parse_split_manifest(manifest.to_dict())
        assert again.categories == manifest.categories


class TestMetadataManifest:
    def test_row_mapping(self):
        (meta,) = parse_metadata_rows(["28, Trawler, 100, 15, 0"])
        assert meta == RecordingMeta(28, "Trawler", 100.0, 15.0, 0.0)

    def test_missing_wind(self):
        (meta,) = parse_metadata_rows(["id, category, range_m, depth_m, wind_kmh", "6, Passengers, 60, 8, —"])
        assert meta.category == "Passenger ship"
        assert meta.wind_kmh is None
        assert meta.aux_labels()[Factor.WIND] == EXCLUDED

    def test_empty_manifest(self):
        assert parse_metadata_rows([]) == []

    def test_malformed_row_reports_line(self):
        with pytest.raises(ManifestError) as excinfo:
            parse_metadata_rows(["1, Tugboat, 10, 5, 0", "2, Tugboat, 10"])
        assert excinfo.value.line == 2

    def test_non_numeric_value_rejected(self):
        with pytest.raises(ManifestError):
            parse_metadata_rows(["1; Tugboat; far; 5; 0"])

    def test_written_manifest_reads_back(self, tmp_path):
        metas = [RecordingMeta(3, "Tugboat", 20.0, 9.0, None, 75.0), RecordingMeta(4, "Dredger", 150.0, 3.0, 5.0, 75.0)]
        path = write_metadata_manifest(tmp_path / "metadata.csv", metas)
        assert load_metadata_manifest(path) == metas


class TestIngestion:
    def test_loudest_channel_selected(self, tmp_path):
        import soundfile as sf

        quiet = 0.01 * np.ones(800)
        loud = np.sin(np.linspace(0, 40 * np.pi, 800))
        sf.write(str(tmp_path / "5.wav"), np.stack([quiet, loud], axis=1), 8000, subtype="FLOAT")
        wave = read_wav(tmp_path / "5.wav")
        np.testing.assert_allclose(wave.samples, loud, atol=1e-6)
        assert wave.sample_rate == 8000.0

    def test_unreadable_wav(self, tmp_path):
        (tmp_path / "7.wav").write_bytes(b"not audio")
        with pytest.raises(IngestError) as excinfo:
            read_wav(tmp_path / "7.wav", recording_id=7)
        assert excinfo.value.recording_id == 7

    def test_missing_files_collected(self, tmp_path):
        write_wav(tmp_path / "1__tug.wav", _wave(2.0, rate=8000.0))
        write_metadata_manifest(tmp_path / "metadata.csv", [RecordingMeta(1, "Tugboat"), RecordingMeta(2, "Tugboat")])
        failures = []
        loaded = load_shipsear(tmp_path, tmp_path / "metadata.csv", failures=failures)
        assert [meta.recording_id for meta, _ in loaded] == [1]
        assert loaded[0][0].duration_s == pytest.approx(2.0)
        assert [f.recording_id for f in failures] == [2]

    def test_missing_file_raises_without_collector(self, tmp_path):
        write_metadata_manifest(tmp_path / "metadata.csv", [RecordingMeta(2, "Tugboat")])
        with pytest.raises(IngestError):
            load_shipsear(tmp_path, tmp_path / "metadata.csv")


class TestFeaturize:
    def _segments(self, rate: float, n: int = 2):
        meta = RecordingMeta(11, "Tugboat", 20.0, 9.0, 5.0)
        wave = Waveform(np.random.default_rng(0).standard_normal(int(rate * (3.0 + 1.5 * (n - 1)))), rate)
        return segment_recording(meta, wave, segment_s=3.0, hop_s=1.5)

    def test_stacked_shape_and_labels(self, small_features):
        segments = self._segments(small_features.sample_rate)
        data = featurize_segments(segments, "cqt", small_features)
        assert tuple(data.features.shape) == (2, 1, 120, 39)
        assert data.labels.tolist() == [CATEGORIES.index("Tugboat")] * 2
        assert data.aux("depth").tolist() == [1, 1]
        assert data.segment_ids() == ["11@0.0", "11@1.5"]

    def test_cache_reused_unless_forced(self, tmp_path, small_features):
        segments = self._segments(small_features.sample_rate)
        first = featurize_segments(segments, FeatureKind.MEL, small_features, cache_dir=tmp_path)
        assert (tmp_path / cache_file_name("11", 1.5, FeatureKind.MEL)).exists()
        stripped = [Segment(s.recording_id, s.start_s, s.duration_s, s.category, s.y, s.aux) for s in segments]
        again = featurize_segments(stripped, FeatureKind.MEL, small_features, cache_dir=tmp_path)
        np.testing.assert_array_equal(again.features.numpy(), first.features.numpy())
        with pytest.raises(InvalidInput):
            featurize_segments(stripped, FeatureKind.MEL, small_features, cache_dir=tmp_path, force=True)

    def test_cache_of_other_width_rebuilt(self, tmp_path, small_features):
        segments = self._segments(small_features.sample_rate)
        featurize_segments(segments, FeatureKind.MEL, small_features, cache_dir=tmp_path)
        narrower = replace(small_features, n_mels=16)
        data = featurize_segments(segments, FeatureKind.MEL, narrower, cache_dir=tmp_path)
        assert data.features.shape[-1] == 16
        cached = read_feature_cache(tmp_path / cache_file_name("11", 0.0, FeatureKind.MEL), narrower)
        np.testing.assert_array_equal(cached.data, data.features[0, 0].numpy())
        stripped = [Segment(s.recording_id, s.start_s, s.duration_s, s.category, s.y, s.aux) for s in segments]
        with pytest.raises(CacheFormatError):
            featurize_segments(stripped, FeatureKind.MEL, small_features, cache_dir=tmp_path)


class TestCarveValidation:
    def test_every_class_keeps_a_training_recording(self, labeled_factory):
        data = labeled_factory(n_per_class=10)
        train, val = carve_validation(data, 0.2, seed=0)
        assert val is not None
        assert len(train) + len(val) == len(data)
        assert set(train.labels.tolist()) == {0, 1, 2}
        assert not set(train.recording_ids) & set(val.recording_ids)

    def test_zero_fraction_keeps_everything(self, toy_data):
        train, val = carve_validation(toy_data, 0.0, seed=0)
        assert val is None and train is toy_data
