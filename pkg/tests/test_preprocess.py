"""Filter responses (measured via FFT oracles), resampling, normalisation,
and augmentation determinism."""

import numpy as np
import pytest

from topomoe.data import EegBatch
from topomoe.errors import ValidationError
from topomoe.preprocess import (AugmentConfig, RawRecording, augment,
                                batch_from_recordings, resample_to_200,
                                scale_and_normalize, zero_phase_filter)
from topomoe.topology import build_topology

FS = 200.0
T = 2000
TIME = np.arange(T) / FS
MARGIN = 200


def tone_amplitude(x: np.ndarray, freq: float, fs: float) -> float:
    """FFT amplitude of the central 80% at the given frequency (exact bin)."""
    centre = x[T // 10: -T // 10]
    spectrum = np.abs(np.fft.rfft(centre)) * 2.0 / centre.size
    return float(spectrum[int(round(freq * centre.size / fs))])


class TestZeroPhaseFilter:
    def test_dc_rejection(self):
        out = zero_phase_filter(np.full(T, 5.0), FS)
        assert np.abs(out[MARGIN:-MARGIN]).max() < 0.05

    def test_passband_10hz_gain(self):
        out = zero_phase_filter(np.sin(2 * np.pi * 10 * TIME), FS)
        assert 0.9 <= tone_amplitude(out, 10.0, FS) <= 1.1

    def test_notch_50hz_attenuation(self):
        out = zero_phase_filter(np.sin(2 * np.pi * 50 * TIME), FS)
        assert tone_amplitude(out, 50.0, FS) < 0.1

    def test_zero_phase_lag(self):
        tone = np.sin(2 * np.pi * 10 * TIME)
        out = zero_phase_filter(tone, FS)
        a, b = out[MARGIN:-MARGIN], tone[MARGIN:-MARGIN]
        lag = int(np.argmax(np.correlate(a, b, mode="full"))) - (a.size - 1)
        assert lag == 0

    def test_linearity(self, rng):
        x = rng.normal(size=T)
        y = rng.normal(size=T)
        a, b = 1.7, -0.4
        lhs = zero_phase_filter(a * x + b * y, FS)
        rhs = a * zero_phase_filter(x, FS) + b * zero_phase_filter(y, FS)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_approximate_idempotence_in_passband(self):
        tone = np.sin(2 * np.pi * 10 * TIME)
        once = zero_phase_filter(tone, FS)
        twice = zero_phase_filter(once, FS)
        a1 = tone_amplitude(once, 10.0, FS)
        a2 = tone_amplitude(twice, 10.0, FS)
        assert abs(a2 - a1) / a1 < 0.05

    def test_rejects_low_rate_and_short_input(self):
        with pytest.raises(ValidationError):
            zero_phase_filter(np.zeros(500), 100.0)
        with pytest.raises(ValidationError):
            zero_phase_filter(np.zeros(30), FS)


class TestResample:
    def test_identity_at_200(self, rng):
        x = rng.normal(size=400)
        np.testing.assert_array_equal(resample_to_200(x, 200.0), x)

    def test_integer_ratio_length(self, rng):
        assert resample_to_200(rng.normal(size=800), 400.0).shape == (400,)

    def test_upsampling_rejected(self):
        with pytest.raises(ValidationError):
            resample_to_200(np.zeros(100), 100.0)

    def test_tone_survives_decimation(self):
        fs_in = 1000.0
        t_in = np.arange(4000) / fs_in
        x = np.sin(2 * np.pi * 5 * t_in)
        out = resample_to_200(x, fs_in)
        spectrum = np.abs(np.fft.rfft(out))
        freqs = np.fft.rfftfreq(out.size, d=1 / 200.0)
        assert abs(freqs[int(np.argmax(spectrum))] - 5.0) < 0.5

    def test_tone_survives_fractional_ratio(self):
        fs_in = 256.0
        t_in = np.arange(2048) / fs_in
        x = np.sin(2 * np.pi * 5 * t_in)
        out = resample_to_200(x, fs_in)
        assert out.size == int(np.floor(2048 * 200 / 256))
        spectrum = np.abs(np.fft.rfft(out))
        freqs = np.fft.rfftfreq(out.size, d=1 / 200.0)
        assert abs(freqs[int(np.argmax(spectrum))] - 5.0) < 0.5

    @pytest.mark.parametrize("fs_in,n", [(250.0, 1000), (512.0, 4096), (1000.0, 3000)])
    def test_duration_preserved(self, fs_in, n, rng):
        out = resample_to_200(rng.normal(size=n), fs_in)
        assert abs(out.size / 200.0 - n / fs_in) <= 1 / 200.0


class TestScaleAndNormalize:
    def test_microvolt_two_point(self):
        out = scale_and_normalize(np.array([1000.0, -1000.0]), "microvolts")
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-9)

    def test_constant_channel_floors_to_zero(self):
        out = scale_and_normalize(np.full(100, 7.0), "millivolts")
        np.testing.assert_array_equal(out, np.zeros(100))

    def test_standardisation(self, rng):
        out = scale_and_normalize(rng.normal(3.0, 5.0, size=1000), "volts")
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-4

    def test_unknown_unit(self):
        with pytest.raises(ValidationError):
            scale_and_normalize(np.zeros(4), "nanovolts")


def _batch(rng, b=3, r=2, e=2, t=400) -> EegBatch:
    return EegBatch(
        signals=rng.normal(size=(b, r, e, t)).astype(np.float32),
        valid=np.ones((b, r, e), dtype=bool),
        fs=200,
        names=[f"ch{i}" for i in range(r * e)],
    )


class TestAugment:
    def test_zero_probabilities_are_identity(self, rng):
        batch = _batch(rng)
        cfg = AugmentConfig(p_noise=0, p_channel_loss=0, p_drift=0, seed=5)
        out = augment(batch, cfg)
        np.testing.assert_array_equal(out.signals, batch.signals)
        np.testing.assert_array_equal(out.valid, batch.valid)

    def test_forced_channel_loss(self, rng):
        batch = _batch(rng, b=2, r=1, e=1)
        cfg = AugmentConfig(p_noise=0, p_channel_loss=1.0, p_drift=0, seed=5)
        out = augment(batch, cfg)
        assert not out.valid.any()
        np.testing.assert_array_equal(out.signals, np.zeros_like(out.signals))

    def test_seed_determinism(self, rng):
        batch = _batch(rng)
        cfg = AugmentConfig(seed=99)
        a = augment(batch, cfg)
        b = augment(batch, cfg)
        np.testing.assert_array_equal(a.signals, b.signals)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_different_seeds_differ(self, rng):
        batch = _batch(rng, b=8)
        a = augment(batch, AugmentConfig(seed=1, p_noise=1.0))
        b = augment(batch, AugmentConfig(seed=2, p_noise=1.0))
        assert not np.array_equal(a.signals, b.signals)

    def test_shape_unchanged_and_input_untouched(self, rng):
        batch = _batch(rng)
        before = batch.signals.copy()
        out = augment(batch, AugmentConfig(p_noise=1, p_channel_loss=1, p_drift=1,
                                           max_drift=5, seed=0))
        assert out.signals.shape == batch.signals.shape
        np.testing.assert_array_equal(batch.signals, before)

    def test_max_drift_validated(self, rng):
        batch = _batch(rng, t=100)
        with pytest.raises(ValidationError):
            augment(batch, AugmentConfig(max_drift=50, seed=0))


class TestRecordingPipeline:
    def test_batch_from_recordings(self, rng):
        topo = build_topology(["Fp1", "Cz", "O1"], standard="ten_twenty")
        fs_in = 256.0
        n = 2048
        recs = [RawRecording(channels=[("Fp1", rng.normal(size=n) * 50),
                                       ("Cz", rng.normal(size=n) * 50),
                                       ("O1", rng.normal(size=n) * 50)],
                             fs=fs_in, amplitude_unit="microvolts")
                for _ in range(2)]
        batch = batch_from_recordings(recs, topo)
        assert batch.fs == 200
        assert batch.signals.shape[:3] == (2, 5, 7)
        assert batch.valid.sum() == 2 * 3
        occupied = batch.flat_valid()[0]
        flat = batch.flat_signals()[0]
        assert np.abs(flat[occupied]).max() > 0
        assert np.abs(flat[~occupied]).max() == 0

    def test_unequal_lengths_rejected(self, rng):
        rec = RawRecording(channels=[("Fp1", np.zeros(100)), ("Cz", np.zeros(90))],
                           fs=256.0)
        with pytest.raises(ValidationError):
            rec.validate()
