"""Full model assembly: feature projection, cross-domain fusion, address
embeddings, masking token, MoE backbone, and the two reconstruction heads.

The electrode axis is the sequence axis throughout; rotary positions are
the absolute slot indices, so attention perceives the relative spatial
order of electrodes.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import FeatureProjection, FeatureTriple
from .errors import ValidationError
from .fusion import CrossDomainFusion
from .nn import Linear, Module, parameter
from .tensor import Tensor
from .topology import TopologicalEmbedding, generate_indices
from .transformer import Backbone, RoutingStats


class Model(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        self.hfpm = FeatureProjection(d, cfg.time_steps, cfg.bands, 200.0, rng)
        self.fusion = CrossDomainFusion(d, cfg.dcm_heads, cfg.dcm_ffn_mult, rng)
        self.topo_embed = TopologicalEmbedding(
            cfg.regions, cfg.electrodes_per_region, d, rng, enabled=cfg.use_te)
        self.backbone = Backbone(d, cfg.depth, cfg.heads, cfg.experts, cfg.ffn_mult, rng)
        self.head_time = Linear(d, d, rng)
        self.head_freq = Linear(d, d, rng)
        self.mask_vec = parameter(rng.normal(0.0, 0.02, size=d), "mask_vec")

    def positions(self) -> np.ndarray:
        return np.arange(self.cfg.slots)

    def encode(self, signals: np.ndarray, valid: np.ndarray
               ) -> tuple[Tensor, FeatureTriple]:
        """(B, L, T) signals -> embedded sequence before masking/backbone."""
        b, slots, _ = signals.shape
        if slots != self.cfg.slots:
            raise ValidationError(
                f"batch has {slots} electrode slots, model expects {self.cfg.slots}")
        triple = self.hfpm(signals)
        fused = self.fusion(triple.time, triple.freq, valid)
        indices = generate_indices(b, self.cfg.slots, self.cfg.regions,
                                   self.cfg.electrodes_per_region)
        h_in = self.topo_embed(fused, triple.raw, indices)
        return h_in, triple

    def run_backbone(self, h: Tensor, valid: np.ndarray
                     ) -> tuple[Tensor, RoutingStats | None]:
        return self.backbone(h, valid, self.positions(), self.cfg.top_k)

    def forward_features(self, signals: np.ndarray, valid: np.ndarray
                         ) -> tuple[Tensor, RoutingStats | None]:
        """Unmasked forward pass to the backbone output."""
        h_in, _ = self.encode(signals, valid)
        return self.run_backbone(h_in, valid)

    def extract_features(self, signals: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Mean of the backbone output over valid positions, per sample.

        Inference only: no masking, no graph recording, parameters untouched.
        """
        with T.no_grad():
            h_out, _ = self.forward_features(signals, valid)
        weights = valid.astype(h_out.data.dtype)
        counts = weights.sum(axis=1)
        if (counts == 0).any():
            raise ValidationError("a sample has no valid electrodes to pool over")
        pooled = (h_out.data * weights[:, :, None]).sum(axis=1) / counts[:, None]
        return pooled

    def pooled_features_tensor(self, signals: np.ndarray, valid: np.ndarray) -> Tensor:
        """Differentiable masked-mean pooling (for fine-tuning)."""
        h_out, _ = self.forward_features(signals, valid)
        b, slots, d = h_out.shape
        weights = valid.astype(h_out.data.dtype)
        counts = weights.sum(axis=1)
        if (counts == 0).any():
            raise ValidationError("a sample has no valid electrodes to pool over")
        scale = (weights / counts[:, None])[:, :, None]
        gated = T.mul(h_out, Tensor(np.broadcast_to(scale, h_out.shape).copy()))
        return T.tsum(gated, axis=1)


def build_model(cfg: ModelConfig, seed: int | None = None) -> Model:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return Model(cfg, rng)
