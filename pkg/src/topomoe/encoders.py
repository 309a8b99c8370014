"""Per-electrode feature projection: three parallel encoders map each
electrode's whole time series to D-dimensional embeddings.

* waveform path: stacked conv blocks (ReLU over batch-normed convolutions),
  temporal mean-pool, linear projection;
* band-power path: DFT band powers over the five canonical rhythm bands,
  log1p-compressed, then a two-layer MLP;
* raw path: a single linear map; deliberately free of nonlinearities so it
  can double as the information-preserving reconstruction target.

All three are strictly per-electrode: row i of every output depends only on
electrode i's samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .nn import BatchNorm1d, Conv1d, Linear, Module
from .tensor import Tensor

BAND_FLOOR_HZ = 0.5
BAND_CEIL_HZ = 50.0


@dataclass(frozen=True)
class Band:
    name: str
    lo: float
    hi: float


@dataclass(frozen=True)
class BandSpec:
    bands: tuple[Band, ...]

    def __post_init__(self):
        if len(self.bands) != 5:
            raise ValidationError(f"expected 5 frequency bands, got {len(self.bands)}")
        prev_hi = None
        for band in self.bands:
            if not (BAND_FLOOR_HZ <= band.lo < band.hi <= BAND_CEIL_HZ):
                raise ValidationError(
                    f"band {band.name}: [{band.lo},{band.hi}) outside "
                    f"[{BAND_FLOOR_HZ},{BAND_CEIL_HZ}] or empty")
            if prev_hi is not None and band.lo < prev_hi:
                raise ValidationError(f"band {band.name} overlaps the previous band")
            prev_hi = band.hi

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.bands)

    def __len__(self) -> int:
        return len(self.bands)

    def bin_sets(self, n_samples: int, fs: float) -> list[np.ndarray]:
        """DFT bin indices per band: k such that lo <= k*fs/n < hi."""
        k = np.arange(n_samples // 2 + 1)
        freqs = k * fs / n_samples
        sets = []
        for band in self.bands:
            members = k[(freqs >= band.lo) & (freqs < band.hi)]
            if members.size == 0:
                raise ValidationError(
                    f"band {band.name}: no DFT bins in [{band.lo},{band.hi}) Hz "
                    f"at {n_samples} samples / {fs} Hz")
            sets.append(members)
        return sets


DEFAULT_BANDS = BandSpec(bands=(
    Band("delta", 0.5, 4.0),
    Band("theta", 4.0, 8.0),
    Band("alpha", 8.0, 13.0),
    Band("beta", 13.0, 30.0),
    Band("gamma", 30.0, 50.0),
))


def band_power(x: np.ndarray, bands: BandSpec, fs: float = 200.0) -> np.ndarray:
    """Mean squared DFT magnitude per band for one channel (length-T array).

    Returns the raw (uncompressed) power vector; the frequency encoder
    applies log1p before its MLP.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ShapeError(f"band_power: expected a 1-d signal of length >= 2, got shape {x.shape}")
    return band_power_batch(x[None, :], bands, fs)[0]


def band_power_batch(x: np.ndarray, bands: BandSpec, fs: float = 200.0) -> np.ndarray:
    """(N, T) signals -> (N, N_b) raw band powers."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    spectrum = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    out = np.empty(x.shape[:-1] + (len(bands),), dtype=np.float64)
    for j, bins in enumerate(bands.bin_sets(n, fs)):
        out[..., j] = spectrum[..., bins].mean(axis=-1)
    return out


class TimeEncoder(Module):
    """Waveform path: three stride-2 conv blocks, mean-pool, linear to D."""

    CHANNELS = (1, 16, 32, 64)
    KERNEL = 7
    STRIDE = 2

    def __init__(self, dim: int, time_steps: int, rng: np.random.Generator):
        self.time_steps = time_steps
        chans = self.CHANNELS
        self.convs = [Conv1d(chans[i], chans[i + 1], self.KERNEL, self.STRIDE, rng)
                      for i in range(len(chans) - 1)]
        self.norms = [BatchNorm1d(chans[i + 1]) for i in range(len(chans) - 1)]
        t = time_steps
        for _ in self.convs:
            t = (t - self.KERNEL) // self.STRIDE + 1
            if t < 1:
                raise ValidationError(
                    f"time series of {time_steps} samples is too short for the conv stack")
        self.proj = Linear(chans[-1], dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.time_steps:
            raise ShapeError(
                f"time encoder expects (N,1,{self.time_steps}), got {x.shape}")
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = T.relu(norm(conv(h)))
        pooled = T.mean(h, axis=2)
        return self.proj(pooled)


class FreqEncoder(Module):
    """Band-power path: log1p-compressed powers through a two-layer MLP."""

    def __init__(self, dim: int, bands: BandSpec, fs: float, rng: np.random.Generator):
        self.bands = bands
        self.fs = fs
        self.lin1 = Linear(len(bands), dim, rng)
        self.lin2 = Linear(dim, dim, rng)

    def __call__(self, signals: np.ndarray) -> Tensor:
        powers = band_power_batch(signals, self.bands, self.fs)
        compressed = Tensor(np.log1p(powers))
        return self.lin2(T.relu(self.lin1(compressed)))


class RawEncoder(Module):
    """Reference path: one linear map, no nonlinearity or normalisation."""

    def __init__(self, dim: int, time_steps: int, rng: np.random.Generator):
        self.time_steps = time_steps
        self.proj = Linear(time_steps, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.time_steps:
            raise ShapeError(f"raw encoder expects (N,{self.time_steps}), got {x.shape}")
        return self.proj(x)


@dataclass
class FeatureTriple:
    """The three per-electrode feature streams, each (B, L, D)."""

    time: Tensor
    freq: Tensor
    raw: Tensor


class FeatureProjection(Module):
    """Runs all three encoders over a (B, L, T) batch of electrode series."""

    def __init__(self, dim: int, time_steps: int, bands: BandSpec, fs: float,
                 rng: np.random.Generator):
        self.time_steps = time_steps
        self.time_enc = TimeEncoder(dim, time_steps, rng)
        self.freq_enc = FreqEncoder(dim, bands, fs, rng)
        self.raw_enc = RawEncoder(dim, time_steps, rng)

    def __call__(self, signals: np.ndarray) -> FeatureTriple:
        if signals.ndim != 3:
            raise ShapeError(f"feature projection expects (B,L,T), got {signals.shape}")
        b, slots, t = signals.shape
        if t != self.time_steps:
            raise ShapeError(
                f"time dimension {t} does not match the configured {self.time_steps}")
        flat = signals.reshape(b * slots, t)
        x = Tensor(flat)
        h_time = self.time_enc(T.reshape(x, (b * slots, 1, t)))
        h_freq = self.freq_enc(flat)
        h_raw = self.raw_enc(x)
        dim = h_time.shape[-1]
        return FeatureTriple(
            time=T.reshape(h_time, (b, slots, dim)),
            freq=T.reshape(h_freq, (b, slots, dim)),
            raw=T.reshape(h_raw, (b, slots, dim)),
        )
