import math

import numpy as np
import pytest

from amtnet.errors import DegenerateSignal, InvalidCutoff, InvalidInput, SignalTooShort
from amtnet.signal_pipeline import (
    ComplexSpectra,
    FeatureConfig,
    FeatureKind,
    Waveform,
    bandpass,
    cqt_bin_count,
    cqt_frequencies,
    cqt_q,
    extract_features,
    feature_bin_count,
    frame_and_window,
    mel_filter_bank,
    mel_scale,
    mel_spectrogram,
    mel_to_hz,
    normalize_waveform,
    preprocess,
    resample,
    spectrogram,
    stft,
    waveform_to_feature,
)

FULL_RATE = 44100.0


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x**2)))


class TestResample:
    def test_thirty_seconds_lands_on_target_length(self):
        wave = Waveform(np.random.default_rng(0).standard_normal(30 * 52734), 52734.0)
        out = resample(wave, FULL_RATE)
        assert out.sample_rate == FULL_RATE
        assert out.samples.size == 1_323_000

    def test_same_rate_is_identity(self):
        samples = np.random.default_rng(1).standard_normal(4410)
        out = resample(Waveform(samples, FULL_RATE), FULL_RATE)
        np.testing.assert_array_equal(out.samples, samples)

    def test_tone_keeps_its_frequency(self, sine_wave):
        out = resample(Waveform(sine_wave(1000.0, 1.0, 52734.0), 52734.0), FULL_RATE)
        spectrum = np.abs(np.fft.rfft(out.samples))
        freqs = np.fft.rfftfreq(out.samples.size, d=1.0 / FULL_RATE)
        assert abs(freqs[np.argmax(spectrum)] - 1000.0) <= freqs[1]

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidInput):
            resample(Waveform(np.array([]), 52734.0), FULL_RATE)


class TestBandpass:
    def test_infrasonic_tone_removed(self, sine_wave):
        x = sine_wave(5.0, 10.0, FULL_RATE)
        out = bandpass(Waveform(x, FULL_RATE), 10.0, 22050.0, 5)
        core = slice(x.size // 10, -x.size // 10)
        assert _rms(out.samples[core]) < 0.01 * _rms(x[core])

    def test_passband_tone_kept(self, sine_wave):
        x = sine_wave(1000.0, 2.0, FULL_RATE)
        out = bandpass(Waveform(x, FULL_RATE), 10.0, 22050.0, 5)
        assert abs(_rms(out.samples) - _rms(x)) < 0.1 * _rms(x)

    def test_two_sided_band_rejects_above_hi(self, sine_wave):
        x = sine_wave(5000.0, 4.0, FULL_RATE, phase=1.0)
        out = bandpass(Waveform(x, FULL_RATE), 10.0, 1000.0, 5)
        core = slice(x.size // 8, -x.size // 8)
        assert _rms(out.samples[core]) < 0.01 * _rms(x[core])
        half = x.size // 2
        assert _rms(out.samples[half:-x.size // 8]) < 0.01 * _rms(x[core])

    @pytest.mark.parametrize(
        ("freq", "lo", "hi"),
        [(5.0, 10.0, 22050.0), (5.0, 10.0, 1000.0), (2000.0, 10.0, 1000.0), (400.0, 20.0, 200.0)],
    )
    def test_forty_db_outside_the_band(self, sine_wave, freq, lo, hi):
        x = sine_wave(freq, 10.0, FULL_RATE, phase=0.7)
        out = bandpass(Waveform(x, FULL_RATE), lo, hi, 5)
        core = slice(x.size // 10, -x.size // 10)
        assert _rms(out.samples[core]) < 0.01 * _rms(x[core])

    def test_no_start_up_transient(self, sine_wave):
        # starts at its peak; an odd extension would put a DC step at both edges
        x = sine_wave(1000.0, 1.0, FULL_RATE, phase=math.pi / 2)
        out = bandpass(Waveform(x, FULL_RATE), 10.0, 22050.0, 5)
        edge = 4410
        assert _rms(out.samples[:edge] - x[:edge]) < 0.01
        assert _rms(out.samples[-edge:] - x[-edge:]) < 0.01

    def test_silence_stays_silent(self):
        out = bandpass(Waveform(np.zeros(44100), FULL_RATE))
        np.testing.assert_array_equal(out.samples, np.zeros(44100))

    def test_inverted_cutoffs_rejected(self):
        with pytest.raises(InvalidCutoff):
            bandpass(Waveform(np.ones(44100), FULL_RATE), 1000.0, 500.0)

    def test_cutoff_above_nyquist_rejected(self):
        with pytest.raises(InvalidCutoff):
            bandpass(Waveform(np.ones(8000), 8000.0), 10.0, 6000.0)


class TestNormalize:
    def test_two_points(self):
        out = normalize_waveform(Waveform(np.array([1.0, 3.0]), 1.0))
        np.testing.assert_allclose(out.samples, [-1.0, 1.0])

    def test_affine_invariance(self):
        x = np.random.default_rng(2).standard_normal(1000)
        a = normalize_waveform(Waveform(x, 1.0)).samples
        b = normalize_waveform(Waveform(3.5 * x - 7.0, 1.0)).samples
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_uniform_noise_statistics(self):
        x = np.random.default_rng(3).uniform(0, 1, 10000)
        out = normalize_waveform(Waveform(x, 1.0)).samples
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-9

    def test_constant_signal_rejected(self):
        with pytest.raises(DegenerateSignal):
            normalize_waveform(Waveform(np.full(100, 4.0), 1.0))


class TestFraming:
    def test_thirty_seconds_gives_1200_frames(self):
        frames = frame_and_window(Waveform(np.zeros(1_323_000), FULL_RATE))
        assert frames.frames.shape == (1200, 2205)
        assert frames.hop == pytest.approx(1102.5)

    def test_fifteen_seconds_gives_600_frames(self):
        frames = frame_and_window(Waveform(np.zeros(661_500), FULL_RATE))
        assert frames.n_frames == 600

    def test_constant_signal_frames_equal_window(self):
        frames = frame_and_window(Waveform(np.ones(44100), FULL_RATE))
        np.testing.assert_allclose(frames.frames, np.broadcast_to(frames.window, frames.frames.shape))

    def test_window_is_periodic_hann(self):
        frames = frame_and_window(Waveform(np.ones(44100), FULL_RATE))
        n = frames.frame_len
        expected = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
        np.testing.assert_allclose(frames.window, expected, atol=1e-12)

    def test_shorter_than_one_frame_rejected(self):
        with pytest.raises(SignalTooShort):
            frame_and_window(Waveform(np.ones(1000), FULL_RATE))


class TestSpectra:
    def test_zero_frames_give_zero_spectrum(self):
        spectra = stft(frame_and_window(Waveform(np.zeros(4410), FULL_RATE)))
        np.testing.assert_array_equal(np.abs(spectra.values), 0.0)

    def test_bin_centred_tone_peaks_at_its_bin(self, sine_wave):
        # bins are 20 Hz apart for 2205-sample frames
        spectra = stft(frame_and_window(Waveform(sine_wave(1000.0, 1.0, FULL_RATE), FULL_RATE)))
        peaks = np.argmax(np.abs(spectra.values), axis=1)
        np.testing.assert_array_equal(peaks[2:-2], 50)

    def test_amplitude_of_complex_value(self):
        spectra = ComplexSpectra(values=np.array([[3 + 4j]]), sample_rate=2.0, n_fft=1, hop=1.0)
        np.testing.assert_allclose(spectrogram(spectra).data, [[5.0]])

    def test_thirty_second_spectrogram_shape(self):
        wave = Waveform(np.random.default_rng(4).standard_normal(1_323_000), FULL_RATE)
        feature = extract_features(wave, FeatureKind.SPECTROGRAM)
        assert feature.shape == (1200, 1103)
        assert feature.kind is FeatureKind.SPECTROGRAM


class TestMel:
    def test_scale_formula(self):
        assert mel_scale(700.0) == pytest.approx(2595.0 * math.log10(2.0))
        assert mel_to_hz(mel_scale(1234.5)) == pytest.approx(1234.5)

    def test_filters_cover_a_bin_each(self):
        bank, centers = mel_filter_bank(FULL_RATE, 2205, 400, 10.0, 22050.0)
        assert bank.shape == (400, 1103)
        assert np.all(bank.sum(axis=1) > 0)
        assert np.all(np.diff(centers) > 0)
        assert bank.max() <= 1.0

    @pytest.mark.parametrize(
        ("rate", "n_fft", "n_mels", "f_min", "f_max"),
        [(FULL_RATE, 2205, 400, 10.0, 22050.0), (4000.0, 200, 32, 20.0, 2000.0)],
    )
    def test_supports_contiguous_and_meet_only_neighbours(self, rate, n_fft, n_mels, f_min, f_max):
        bank, _ = mel_filter_bank(rate, n_fft, n_mels, f_min, f_max)
        first = np.array([np.flatnonzero(row)[0] for row in bank])
        last = np.array([np.flatnonzero(row)[-1] for row in bank])
        np.testing.assert_array_equal(np.count_nonzero(bank, axis=1), last - first + 1)
        for m in range(2, n_mels):
            assert last[: m - 1].max() < first[m], m

    def test_wide_filters_keep_their_triangles(self):
        bank, centers = mel_filter_bank(FULL_RATE, 2205, 400, 10.0, 22050.0)
        top = int(np.searchsorted(centers, 5000.0))
        assert np.all(np.count_nonzero(bank[top:], axis=1) >= 3)
        assert np.all(bank[top:].max(axis=1) > 0.5)

    def test_too_many_filters_rejected(self):
        with pytest.raises(InvalidInput):
            mel_filter_bank(4000.0, 200, 400, 20.0, 2000.0)

    def test_zero_spectra_give_log_eps(self):
        spectra = ComplexSpectra(values=np.zeros((3, 101)), sample_rate=4000.0, n_fft=200, hop=100.0)
        feature = mel_spectrogram(spectra, n_mels=16, f_min=20.0, f_max=2000.0)
        np.testing.assert_allclose(feature.data, np.log(1e-8))

    def test_inverted_range_rejected(self):
        spectra = ComplexSpectra(values=np.zeros((3, 101)), sample_rate=4000.0, n_fft=200, hop=100.0)
        with pytest.raises(InvalidCutoff):
            mel_spectrogram(spectra, n_mels=16, f_min=2000.0, f_max=20.0)


class TestCqt:
    def test_bin_count_rules(self):
        assert cqt_bin_count(36, 10.0, 22050.0, "floor") == 399
        assert cqt_bin_count(36, 10.0, 22050.0, "ceil") == 400

    def test_octaves_are_exact_doublings(self):
        centers, bandwidths = cqt_frequencies(36, 10.0, 22050.0)
        assert centers[0] == 10.0
        np.testing.assert_array_equal(centers[36:], 2.0 * centers[:-36])
        np.testing.assert_allclose(bandwidths, centers / cqt_q(36))

    def test_q_for_36_bins(self):
        assert cqt_q(36) == pytest.approx(1.0 / (2 ** (1 / 36) - 1))

    def test_non_positive_fmin_rejected(self):
        with pytest.raises(InvalidCutoff):
            cqt_frequencies(36, 0.0, 22050.0)

    def test_thirty_second_cqt_shape(self):
        wave = Waveform(np.random.default_rng(5).standard_normal(1_323_000), FULL_RATE)
        feature = waveform_to_feature(wave, "cqt")
        assert feature.shape == (1200, 399)
        assert np.all(np.isfinite(feature.data))

    def test_tone_peaks_near_its_bin(self, sine_wave, small_features):
        wave = preprocess(Waveform(sine_wave(440.0, 2.0, 4000.0), 4000.0), small_features)
        feature = extract_features(wave, FeatureKind.CQT, small_features)
        centers, _ = cqt_frequencies(6, 20.0, 2000.0)
        peak = centers[np.argmax(feature.data[10])]
        assert abs(math.log2(peak / 440.0)) <= 1.0 / 6.0


class TestFeatureConfig:
    def test_defaults_validate(self):
        assert FeatureConfig().validate() == []

    def test_problems_collected(self):
        problems = FeatureConfig(f_min=0.0, overlap=1.0, cqt_bin_rule="round").validate()
        assert len(problems) == 3

    def test_bin_counts_per_kind(self, small_features):
        assert feature_bin_count("spec", small_features) == 101
        assert feature_bin_count("mel", small_features) == 32
        assert feature_bin_count("cqt", small_features) == 39

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInput):
            FeatureKind.parse("wavelet")
