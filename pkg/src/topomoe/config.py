"""Run configuration: every architectural and training hyperparameter in
one validated record, round-trippable through a flat ``key = value`` file.

Unknown keys are hard errors (no silent typos), parse failures report the
line and field, and the canonical JSON form feeds the checkpoint hash so a
set of weights always travels with the exact configuration that made it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .encoders import Band, BandSpec
from .errors import ValidationError
from .preprocess import AugmentConfig

BAND_ORDER = ("delta", "theta", "alpha", "beta", "gamma")


@dataclass(frozen=True)
class LossWeights:
    time: float = 0.8
    freq: float = 0.2
    aux: float = 1.0

    def validate(self) -> None:
        if min(self.time, self.freq, self.aux) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.time + self.freq <= 0:
            raise ValidationError("at least one reconstruction weight must be positive")


@dataclass
class ModelConfig:
    # architecture
    dim: int = 32
    depth: int = 2
    heads: int = 4
    experts: int = 4
    top_k: int = 2
    aux_alpha: float = 0.01
    ffn_mult: int = 4
    time_steps: int = 400
    regions: int = 5
    electrodes_per_region: int = 4
    use_te: bool = True
    # fusion
    dcm_heads: int = 4
    dcm_ffn_mult: int = 2
    # frequency bands (order fixed by BAND_ORDER)
    band_edges: tuple[tuple[float, float], ...] = (
        (0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0))
    # augmentation
    p_noise: float = 0.3
    p_channel_loss: float = 0.1
    p_drift: float = 0.3
    noise_sigma: float = 0.1
    max_drift: int = 20
    # training
    lr: float = 1e-3
    wd: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 25
    clip: float = 1.0
    mask_ratio: float = 0.25
    lambda_t: float = 0.8
    lambda_f: float = 0.2
    lambda_aux: float = 1.0
    seed: int = 0
    batch_size: int = 8
    # probing
    probe_epochs: int = 200
    probe_lr: float = 1e-3
    probe_test_frac: float = 0.25

    @property
    def slots(self) -> int:
        return self.regions * self.electrodes_per_region

    @property
    def bands(self) -> BandSpec:
        return BandSpec(tuple(Band(name, lo, hi)
                              for name, (lo, hi) in zip(BAND_ORDER, self.band_edges)))

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(time=self.lambda_t, freq=self.lambda_f, aux=self.lambda_aux)

    def augment_config(self, seed: int) -> AugmentConfig:
        return AugmentConfig(p_noise=self.p_noise, p_channel_loss=self.p_channel_loss,
                             p_drift=self.p_drift, noise_sigma=self.noise_sigma,
                             max_drift=self.max_drift, seed=seed)

    def validate(self) -> None:
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ValidationError(f"model.dim must be a positive even number, got {self.dim}")
        if self.dim % self.heads != 0:
            raise ValidationError(f"model.heads {self.heads} must divide model.dim {self.dim}")
        if self.dim % self.dcm_heads != 0:
            raise ValidationError(f"dcm.heads {self.dcm_heads} must divide model.dim {self.dim}")
        if self.depth < 0:
            raise ValidationError(f"model.depth must be >= 0, got {self.depth}")
        if not 1 <= self.top_k <= self.experts:
            raise ValidationError(
                f"model.top_k {self.top_k} must be in [1, model.experts={self.experts}]")
        if min(self.regions, self.electrodes_per_region, self.time_steps) < 1:
            raise ValidationError("regions, electrodes per region, and time steps must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValidationError(f"train.mask_ratio must be in [0,1], got {self.mask_ratio}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size must be >= 1")
        if self.clip <= 0:
            raise ValidationError(f"train.clip must be positive, got {self.clip}")
        if not 0 < self.probe_test_frac < 1:
            raise ValidationError("probe.test_frac must be in (0,1)")
        self.loss_weights.validate()
        self.bands  # constructing the BandSpec validates the edges
        self.augment_config(0).validate(self.time_steps)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def canonical_json(self) -> str:
        record = dataclasses.asdict(self)
        record["band_edges"] = [list(edge) for edge in record["band_edges"]]
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    def architecture_fields(self) -> dict:
        keys = ("dim", "depth", "heads", "experts", "top_k", "ffn_mult", "time_steps",
                "regions", "electrodes_per_region", "use_te", "dcm_heads",
                "dcm_ffn_mult", "band_edges")
        return {k: getattr(self, k) for k in keys}


def _band_keys():
    keys = {}
    for i, name in enumerate(BAND_ORDER):
        keys[f"bands.{name}.lo"] = (i, 0)
        keys[f"bands.{name}.hi"] = (i, 1)
    return keys


_KEYMAP: dict[str, tuple[str, type]] = {
    "model.dim": ("dim", int),
    "model.depth": ("depth", int),
    "model.heads": ("heads", int),
    "model.experts": ("experts", int),
    "model.top_k": ("top_k", int),
    "model.aux_alpha": ("aux_alpha", float),
    "model.ffn_mult": ("ffn_mult", int),
    "model.time_steps": ("time_steps", int),
    "model.regions": ("regions", int),
    "model.electrodes_per_region": ("electrodes_per_region", int),
    "model.use_te": ("use_te", bool),
    "dcm.heads": ("dcm_heads", int),
    "dcm.ffn_mult": ("dcm_ffn_mult", int),
    "aug.p_noise": ("p_noise", float),
    "aug.p_channel_loss": ("p_channel_loss", float),
    "aug.p_drift": ("p_drift", float),
    "aug.noise_sigma": ("noise_sigma", float),
    "aug.max_drift": ("max_drift", int),
    "train.lr": ("lr", float),
    "train.wd": ("wd", float),
    "train.warmup_epochs": ("warmup_epochs", int),
    "train.epochs": ("epochs", int),
    "train.clip": ("clip", float),
    "train.mask_ratio": ("mask_ratio", float),
    "train.lambda_t": ("lambda_t", float),
    "train.lambda_f": ("lambda_f", float),
    "train.lambda_aux": ("lambda_aux", float),
    "train.seed": ("seed", int),
    "train.batch_size": ("batch_size", int),
    "probe.epochs": ("probe_epochs", int),
    "probe.lr": ("probe_lr", float),
    "probe.test_frac": ("probe_test_frac", float),
}

_BAND_KEYMAP = _band_keys()


def _convert(key: str, raw: str, kind: type, lineno: int):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        return kind(raw)
    except ValueError:
        raise ValidationError(
            f"config line {lineno}: key {key!r} expects {kind.__name__}, got {raw!r}"
        ) from None


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or ModelConfig()
    updates: dict[str, object] = {}
    edges = [list(edge) for edge in cfg.band_edges]
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in _KEYMAP:
            attr, kind = _KEYMAP[key]
            updates[attr] = _convert(key, raw, kind, lineno)
        elif key in _BAND_KEYMAP:
            i, j = _BAND_KEYMAP[key]
            edges[i][j] = _convert(key, raw, float, lineno)
        else:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
    updates["band_edges"] = tuple(tuple(edge) for edge in edges)
    out = cfg.replace(**updates)
    out.validate()
    return out


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def dump_config(cfg: ModelConfig) -> str:
    lines = []
    for key, (attr, kind) in _KEYMAP.items():
        value = getattr(cfg, attr)
        if kind is bool:
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    for name, (lo, hi) in zip(BAND_ORDER, cfg.band_edges):
        lines.append(f"bands.{name}.lo = {lo}")
        lines.append(f"bands.{name}.hi = {hi}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ModelConfig) -> int:
    """FNV-1a 64-bit hash of the canonical JSON form."""
    h = 0xCBF29CE484222325
    for byte in cfg.canonical_json().encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
