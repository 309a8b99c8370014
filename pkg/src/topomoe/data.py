"""Batched EEG containers, the dataset file format, and synthetic data.

Dataset files ("EEGB" format) are self-describing: magic, version, the
B/R/E/T extents, sampling rate, a label-presence flag, an electrode-name
table with one length-prefixed string per slot (empty marks a padding
slot), the little-endian float32 signal payload, and optionally one u32
label per sample.

The synthetic generator builds class-coded recordings: pink-noise
background on every electrode plus a Hann-windowed sinusoidal burst whose
frequency band and target brain region depend on the class label.  It is
the desk-scale stand-in for real corpora and is deterministic under its
seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .encoders import BandSpec, DEFAULT_BANDS
from .errors import CorruptionError, ValidationError
from .topology import REGION_NAMES

MAGIC = b"EEGB"
FORMAT_VERSION = 1


@dataclass
class EegBatch:
    """Signals shaped batch x region x electrode x time plus validity."""

    signals: np.ndarray
    valid: np.ndarray
    fs: int
    names: list[str]
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.signals.ndim != 4:
            raise ValidationError(f"signals must be (B,R,E,T), got {self.signals.shape}")
        b, r, e, _ = self.signals.shape
        if self.valid.shape != (b, r, e):
            raise ValidationError(
                f"validity mask {self.valid.shape} does not match signals {self.signals.shape}")
        if len(self.names) != r * e:
            raise ValidationError(f"expected {r * e} slot names, got {len(self.names)}")
        if self.labels is not None and self.labels.shape != (b,):
            raise ValidationError(f"labels must be ({b},), got {self.labels.shape}")

    @property
    def batch(self) -> int:
        return self.signals.shape[0]

    @property
    def regions(self) -> int:
        return self.signals.shape[1]

    @property
    def per_region(self) -> int:
        return self.signals.shape[2]

    @property
    def time_steps(self) -> int:
        return self.signals.shape[3]

    @property
    def slots(self) -> int:
        return self.regions * self.per_region

    def flat_signals(self) -> np.ndarray:
        b, r, e, t = self.signals.shape
        return self.signals.reshape(b, r * e, t)

    def flat_valid(self) -> np.ndarray:
        b, r, e = self.valid.shape
        return self.valid.reshape(b, r * e)

    def copy(self) -> "EegBatch":
        return EegBatch(self.signals.copy(), self.valid.copy(), self.fs,
                        list(self.names),
                        None if self.labels is None else self.labels.copy())

    def select(self, idx: np.ndarray) -> "EegBatch":
        return EegBatch(self.signals[idx], self.valid[idx], self.fs, list(self.names),
                        None if self.labels is None else self.labels[idx])


def write_dataset(path, batch: EegBatch) -> None:
    b, r, e, t = batch.signals.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<IIII", b, r, e, t))
        fh.write(struct.pack("<I", int(batch.fs)))
        fh.write(struct.pack("<B", 1 if batch.labels is not None else 0))
        for name in batch.names:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
        fh.write(np.ascontiguousarray(batch.signals, dtype="<f4").tobytes())
        if batch.labels is not None:
            fh.write(np.ascontiguousarray(batch.labels, dtype="<u4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CorruptionError(f"dataset truncated while reading {what}")
    return blob


def read_dataset(path) -> EegBatch:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CorruptionError(f"{path}: not a dataset file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CorruptionError(f"{path}: unsupported dataset version {version}")
        b, r, e, t = struct.unpack("<IIII", _read_exact(fh, 16, "extents"))
        (fs,) = struct.unpack("<I", _read_exact(fh, 4, "sampling rate"))
        (has_labels,) = struct.unpack("<B", _read_exact(fh, 1, "label flag"))
        names = []
        for i in range(r * e):
            (ln,) = struct.unpack("<I", _read_exact(fh, 4, f"name {i} length"))
            names.append(_read_exact(fh, ln, f"name {i}").decode("utf-8"))
        payload = _read_exact(fh, b * r * e * t * 4, "signal payload")
        signals = np.frombuffer(payload, dtype="<f4").reshape(b, r, e, t).copy()
        labels = None
        if has_labels:
            raw = _read_exact(fh, b * 4, "labels")
            labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
        trailing = fh.read(1)
        if trailing:
            raise CorruptionError(f"{path}: trailing bytes after payload")
    occupied = np.array([bool(n) for n in names]).reshape(r, e)
    valid = np.broadcast_to(occupied, (b, r, e)).copy()
    return EegBatch(signals=signals, valid=valid, fs=int(fs), names=names, labels=labels)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Class-coded synthetic EEG: which band carries extra power, and on
    which region's electrodes."""

    n_classes: int = 2
    band_profile: tuple[str, ...] = ("alpha", "beta")
    region_profile: tuple[str, ...] = ("frontal", "occipital")
    snr: float = 4.0
    per_class: int = 32
    seed: int = 0
    regions: int = 5
    per_region: int = 4
    time_steps: int = 400
    fs: int = 200
    bands: BandSpec = field(default_factory=lambda: DEFAULT_BANDS)

    def validate(self) -> None:
        if self.n_classes < 1 or self.per_class < 1:
            raise ValidationError("need at least one class and one sample per class")
        band_names = set(self.bands.names)
        for name in self.band_profile:
            if name not in band_names:
                raise ValidationError(f"unknown band {name!r} in profile; known: {sorted(band_names)}")
        for name in self.region_profile:
            if name not in REGION_NAMES[: self.regions]:
                raise ValidationError(
                    f"unknown region {name!r} in profile; known: {REGION_NAMES[: self.regions]}")
        if not self.band_profile or not self.region_profile:
            raise ValidationError("band and region profiles must be non-empty")


def _pink_noise(rng: np.random.Generator, t: int) -> np.ndarray:
    """1/f-shaped noise, unit RMS."""
    white = rng.normal(size=t)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(t)
    shaping = np.ones_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    shaping[0] = 0.0
    x = np.fft.irfft(spectrum * shaping, n=t)
    return x / np.sqrt(np.mean(x ** 2))


def gen_synthetic(spec: SyntheticSpec) -> EegBatch:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    r, e, t = spec.regions, spec.per_region, spec.time_steps
    total = spec.n_classes * spec.per_class
    signals = np.zeros((total, r, e, t), dtype=np.float64)
    labels = np.zeros(total, dtype=np.int64)
    band_by_name = {b.name: b for b in spec.bands.bands}
    time = np.arange(t) / spec.fs

    i = 0
    for label in range(spec.n_classes):
        band = band_by_name[spec.band_profile[label % len(spec.band_profile)]]
        region = REGION_NAMES.index(spec.region_profile[label % len(spec.region_profile)])
        for _ in range(spec.per_class):
            for ri in range(r):
                for ei in range(e):
                    signals[i, ri, ei] = _pink_noise(rng, t)
            freq = rng.uniform(band.lo, min(band.hi, spec.fs / 2 - 1e-6))
            phase = rng.uniform(0, 2 * np.pi)
            dur = int(t * rng.uniform(0.4, 0.8))
            start = rng.integers(0, t - dur + 1)
            envelope = np.zeros(t)
            envelope[start: start + dur] = np.hanning(dur)
            burst = np.sin(2 * np.pi * freq * time + phase) * envelope
            rms = np.sqrt(np.mean(burst ** 2))
            burst *= spec.snr / max(rms, 1e-12)
            signals[i, region, :, :] += burst[None, :]
            labels[i] = label
            i += 1

    # per-channel standardisation, matching the preprocessing contract
    mu = signals.mean(axis=-1, keepdims=True)
    var = signals.var(axis=-1, keepdims=True)
    signals = (signals - mu) / np.sqrt(np.maximum(var, 1e-12))

    order = rng.permutation(total)
    names = [f"{REGION_NAMES[ri]}:{ei}" for ri in range(r) for ei in range(e)]
    return EegBatch(
        signals=signals[order].astype(np.float32),
        valid=np.ones((total, r, e), dtype=bool),
        fs=spec.fs,
        names=names,
        labels=labels[order],
    )
