"""Signal conditioning and probabilistic augmentation.

Conditioning chain per channel: zero-phase band-pass 0.5-50 Hz plus a
50 Hz powerline notch (each applied forward-then-backward so the net phase
response is zero), downsampling to a uniform 200 Hz, amplitude scaling to
millivolts, then per-channel standardisation.

Only the 50 Hz fundamental gets a notch: its harmonics sit above the 50 Hz
band edge, so the band-pass already removes them at any supported rate.

Augmentation simulates acquisition faults on normalised batches; additive
Gaussian noise, loss of a randomly chosen electrode (zeroed and marked
invalid), and temporal drift realised as a circular shift so tensor shapes
stay fixed.  All draws come from the seeded generator in the config, making
augmentation a pure function of (input, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from ._kernels import resample_sinc
from .data import EegBatch
from .errors import ValidationError
from .topology import TopologyMap

TARGET_FS = 200
PASSBAND_HZ = (0.5, 50.0)
NOTCH_HZ = 50.0
NOTCH_Q = 30.0
BANDPASS_ORDER = 4          # -> 8 poles for the band-pass realisation
MIN_FS = 120.0              # keeps the 50 Hz edge under Nyquist with margin
MIN_LEN = 6 * 2 * BANDPASS_ORDER
_PAD = 3 * 2 * BANDPASS_ORDER

AMPLITUDE_SCALE_TO_MV = {
    "volts": 1000.0,
    "millivolts": 1.0,
    "microvolts": 0.001,
}


@dataclass
class RawRecording:
    """Named channels straight off disk, before any conditioning."""

    channels: list[tuple[str, np.ndarray]]
    fs: float
    amplitude_unit: str = "microvolts"

    def validate(self) -> None:
        if self.fs <= 0:
            raise ValidationError(f"sampling rate must be positive, got {self.fs}")
        if not self.channels:
            raise ValidationError("recording has no channels")
        lengths = {len(x) for _, x in self.channels}
        if len(lengths) != 1:
            raise ValidationError(f"channels have unequal lengths: {sorted(lengths)}")
        if self.amplitude_unit not in AMPLITUDE_SCALE_TO_MV:
            raise ValidationError(
                f"unknown amplitude unit {self.amplitude_unit!r}; "
                f"choose from {sorted(AMPLITUDE_SCALE_TO_MV)}")


@dataclass
class AugmentConfig:
    p_noise: float = 0.3
    p_channel_loss: float = 0.1
    p_drift: float = 0.3
    noise_sigma: float = 0.1
    max_drift: int = 20
    seed: int = 0

    def validate(self, time_steps: int) -> None:
        for label, p in (("p_noise", self.p_noise),
                         ("p_channel_loss", self.p_channel_loss),
                         ("p_drift", self.p_drift)):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{label} must be in [0,1], got {p}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.max_drift < time_steps / 10:
            raise ValidationError(
                f"max_drift {self.max_drift} must be < T/10 = {time_steps / 10}")


def zero_phase_filter(x: np.ndarray, fs: float) -> np.ndarray:
    """Band-pass 0.5-50 Hz plus 50 Hz notch, forward-backward."""
    x = np.asarray(x, dtype=np.float64)
    if fs < MIN_FS:
        raise ValidationError(f"sampling rate {fs} Hz below the supported minimum {MIN_FS}")
    if x.ndim != 1 or len(x) <= MIN_LEN:
        raise ValidationError(
            f"signal too short to filter: need > {MIN_LEN} samples, got {x.shape}")
    sos = sps.butter(BANDPASS_ORDER, PASSBAND_HZ, btype="bandpass", fs=fs, output="sos")
    y = sps.sosfiltfilt(sos, x, padtype="even", padlen=_PAD)
    b, a = sps.iirnotch(NOTCH_HZ, NOTCH_Q, fs=fs)
    return sps.filtfilt(b, a, y, padtype="even", padlen=_PAD)


def resample_to_200(x: np.ndarray, fs_in: float) -> np.ndarray:
    """Downsample to exactly 200 Hz; output length floor(len * 200 / fs_in).

    Integer ratios decimate by striding (the 50 Hz low-pass already
    guarantees no aliasing); fractional ratios use windowed-sinc
    interpolation at the output instants.
    """
    x = np.asarray(x)
    if fs_in < TARGET_FS:
        raise ValidationError(
            f"cannot upsample: input rate {fs_in} Hz is below {TARGET_FS} Hz")
    n_out = int(len(x) * TARGET_FS // fs_in) if float(fs_in).is_integer() else int(
        np.floor(len(x) * TARGET_FS / fs_in))
    if fs_in == TARGET_FS:
        return x.copy()
    ratio = fs_in / TARGET_FS
    if float(ratio).is_integer():
        step = int(ratio)
        return x[: n_out * step : step].copy()
    data = np.ascontiguousarray(x, dtype=np.float64)
    return resample_sinc(data, ratio, n_out, 16)


def scale_and_normalize(x: np.ndarray, unit: str = "microvolts") -> np.ndarray:
    """Convert to millivolts, then standardise to zero mean / unit variance.

    A variance floor keeps constant channels finite (they come out as all
    zeros instead of dividing by zero).
    """
    if unit not in AMPLITUDE_SCALE_TO_MV:
        raise ValidationError(f"unknown amplitude unit {unit!r}")
    x = np.asarray(x, dtype=np.float64) * AMPLITUDE_SCALE_TO_MV[unit]
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(max(var, 1e-12))


def preprocess_channel(x: np.ndarray, fs: float, unit: str = "microvolts") -> np.ndarray:
    """Full per-channel chain: filter at the native rate, resample, normalise."""
    return scale_and_normalize(resample_to_200(zero_phase_filter(x, fs), fs), unit)


def batch_from_recordings(recordings: list[RawRecording], topo: TopologyMap
                          ) -> EegBatch:
    """Condition recordings and lay their channels out on the topology grid."""
    if not recordings:
        raise ValidationError("no recordings given")
    processed = []
    for rec in recordings:
        rec.validate()
        chans = {}
        for name, samples in rec.channels:
            if name not in topo.entries:
                raise ValidationError(f"electrode {name!r} not in the topology map")
            chans[name] = preprocess_channel(samples, rec.fs, rec.amplitude_unit)
        processed.append(chans)
    t = min(len(next(iter(p.values()))) for p in processed)
    b, r, e = len(processed), topo.regions, topo.per_region
    signals = np.zeros((b, r, e, t), dtype=np.float32)
    valid = np.zeros((b, r, e), dtype=bool)
    for i, chans in enumerate(processed):
        for name, series in chans.items():
            i_region, i_intra, _ = topo.entries[name]
            signals[i, i_region, i_intra] = series[:t]
            valid[i, i_region, i_intra] = True
    return EegBatch(signals=signals, valid=valid, fs=TARGET_FS,
                    names=topo.names_in_order(), labels=None)


def augment(batch: EegBatch, cfg: AugmentConfig) -> EegBatch:
    """Per-sample noise / channel-loss / drift with seeded Bernoulli draws."""
    cfg.validate(batch.time_steps)
    rng = np.random.default_rng(cfg.seed)
    out = batch.copy()
    b, r, e, t = out.signals.shape
    for i in range(b):
        u_noise, u_loss, u_drift = rng.random(3)
        if u_noise < cfg.p_noise:
            noise = rng.normal(0.0, cfg.noise_sigma, size=(r, e, t))
            noise[~out.valid[i]] = 0.0
            out.signals[i] += noise.astype(out.signals.dtype)
        if u_loss < cfg.p_channel_loss:
            candidates = np.argwhere(out.valid[i])
            if candidates.size:
                ri, ei = candidates[rng.integers(len(candidates))]
                out.signals[i, ri, ei] = 0.0
                out.valid[i, ri, ei] = False
        if u_drift < cfg.p_drift and cfg.max_drift > 0:
            shift = int(rng.integers(-cfg.max_drift, cfg.max_drift + 1))
            out.signals[i] = np.roll(out.signals[i], shift, axis=-1)
    return out
