"""Bidirectional time/frequency cross-attention and fusion.

The waveform stream queries the band-power stream and vice versa; each
direction is a residual + post-LayerNorm block, and the two enriched
streams are concatenated and pushed through a two-layer FFN back to D.
No positional encoding lives here; rotary encoding belongs to the
backbone's self-attention only, so the whole module is permutation-
equivariant over electrodes.

Masked (padding / dropped) electrodes still produce outputs as queries but
are excluded from the key set, so their content cannot leak into valid rows.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, dim = x.shape
    return T.transpose(T.reshape(x, (b, length, heads, dim // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, heads, length, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, length, heads * dh))


def masked_attention_weights(scores: Tensor, key_valid: np.ndarray) -> Tensor:
    """Softmax over the key axis with invalid keys forced to zero weight.

    Scores at masked keys are zeroed before a large negative offset is
    added, so arbitrary (finite) garbage in masked positions cannot change
    the result.
    """
    if key_valid.ndim != 2:
        raise ShapeError(f"key mask must be (B, L), got {key_valid.shape}")
    if not key_valid.any(axis=1).all():
        raise ValidationError("attention: a sample has no valid keys (softmax undefined)")
    m = key_valid.astype(scores.data.dtype)[:, None, None, :]
    m = np.broadcast_to(m, scores.shape).copy()
    offset = (m - 1.0) * 1e9
    gated = T.add(T.mul(scores, Tensor(m)), Tensor(offset))
    return T.softmax(gated)


class CrossAttention(Module):
    """Scaled dot-product attention with queries from one stream and
    keys/values from the other.  Projections are plain matrices (no bias)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValidationError(f"heads {heads} must divide dim {dim}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)

    def attention_weights(self, q_src: Tensor, kv_src: Tensor,
                          key_valid: np.ndarray) -> Tensor:
        if q_src.shape != kv_src.shape:
            raise ShapeError(
                f"cross-attention streams must match, got {q_src.shape} vs {kv_src.shape}")
        dh = q_src.shape[-1] // self.heads
        q = split_heads(self.wq(q_src), self.heads)
        k = split_heads(self.wk(kv_src), self.heads)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        return masked_attention_weights(scores, key_valid)

    def __call__(self, q_src: Tensor, kv_src: Tensor, key_valid: np.ndarray) -> Tensor:
        weights = self.attention_weights(q_src, kv_src, key_valid)
        v = split_heads(self.wv(kv_src), self.heads)
        return self.wo(merge_heads(T.matmul(weights, v)))


class CrossDomainFusion(Module):
    """Two mirrored cross-attention directions plus the fusing FFN."""

    def __init__(self, dim: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.time_queries = CrossAttention(dim, heads, rng)
        self.freq_queries = CrossAttention(dim, heads, rng)
        self.norm_time = LayerNorm(dim)
        self.norm_freq = LayerNorm(dim)
        hidden = ffn_mult * dim
        self.ffn_in = Linear(2 * dim, hidden, rng)
        self.ffn_out = Linear(hidden, dim, rng)

    def enriched(self, h_time: Tensor, h_freq: Tensor, valid: np.ndarray
                 ) -> tuple[Tensor, Tensor]:
        ht = self.norm_time(T.add(h_time, self.time_queries(h_time, h_freq, valid)))
        hf = self.norm_freq(T.add(h_freq, self.freq_queries(h_freq, h_time, valid)))
        return ht, hf

    def __call__(self, h_time: Tensor, h_freq: Tensor, valid: np.ndarray) -> Tensor:
        ht, hf = self.enriched(h_time, h_freq, valid)
        both = T.concat([ht, hf], axis=-1)
        return self.ffn_out(T.relu(self.ffn_in(both)))
