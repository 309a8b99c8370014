"""MoE transformer backbone: pre-norm blocks of rotary self-attention and
sparsely-activated expert FFNs.

Routing follows softmax-then-select: the gate's full softmax is computed
over all experts, the top-k logits are kept (ties broken toward the lowest
expert index), and the kept probabilities are renormalised to sum to one.
Renormalisation is realised as a softmax over the selected logits, which is
algebraically identical and makes the k == n_experts case bit-equal to the
dense mixture.

The balancing loss multiplies the fraction of tokens routed to each expert
(counts normalised so the fractions sum to 1) with that expert's mean
full-softmax probability over all tokens; gradients reach the gate through
the probability term only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .fusion import masked_attention_weights, merge_heads, split_heads
from .nn import LayerNorm, Linear, Module, parameter
from .tensor import Tensor

ROPE_BASE = 10000.0


def rope_rotate(x: Tensor, positions: np.ndarray) -> Tensor:
    """Rotary position encoding (pairwise rotations over the last axis)."""
    return T.rope(x, positions, base=ROPE_BASE)


class SelfAttention(Module):
    """Multi-head self-attention; queries and keys are rotated by their
    positions before the dot product, values stay unrotated."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValidationError(f"heads {heads} must divide dim {dim}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)

    def attention_weights(self, h: Tensor, valid: np.ndarray,
                          positions: np.ndarray) -> Tensor:
        dh = h.shape[-1] // self.heads
        q = rope_rotate(split_heads(self.wq(h), self.heads), positions)
        k = rope_rotate(split_heads(self.wk(h), self.heads), positions)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        return masked_attention_weights(scores, valid)

    def __call__(self, h: Tensor, valid: np.ndarray, positions: np.ndarray) -> Tensor:
        weights = self.attention_weights(h, valid, positions)
        v = split_heads(self.wv(h), self.heads)
        return self.wo(merge_heads(T.matmul(weights, v)))


class Expert(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


@dataclass
class RoutingStats:
    """Routing bookkeeping, mergeable across layers.

    ``prob_sum_tensors`` keeps the differentiable per-layer sums of the full
    softmax probabilities so the balancing loss can backpropagate into the
    gates; ``prob_sums`` mirrors them as plain numbers for logging.
    """

    n_experts: int
    top_k: int
    token_counts: np.ndarray
    prob_sums: np.ndarray
    total_tokens: int
    prob_sum_tensors: list[Tensor] = field(default_factory=list)

    @property
    def fractions(self) -> np.ndarray:
        """Fraction of routing slots per expert; sums to 1."""
        return self.token_counts / (self.top_k * self.total_tokens)

    @property
    def mean_probs(self) -> np.ndarray:
        return self.prob_sums / self.total_tokens

    @property
    def max_load(self) -> float:
        return float(self.fractions.max())

    @classmethod
    def merge(cls, stats: list["RoutingStats"]) -> "RoutingStats":
        if not stats:
            raise ValidationError("cannot merge zero routing records")
        first = stats[0]
        for s in stats[1:]:
            if s.n_experts != first.n_experts or s.top_k != first.top_k:
                raise ValidationError("routing records disagree on expert count or top-k")
        return cls(
            n_experts=first.n_experts,
            top_k=first.top_k,
            token_counts=np.sum([s.token_counts for s in stats], axis=0),
            prob_sums=np.sum([s.prob_sums for s in stats], axis=0),
            total_tokens=sum(s.total_tokens for s in stats),
            prob_sum_tensors=[t for s in stats for t in s.prob_sum_tensors],
        )


def select_top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits per row, ties to the lowest expert
    index, returned in ascending expert order."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


class MoE(Module):
    def __init__(self, dim: int, n_experts: int, hidden: int, rng: np.random.Generator):
        if n_experts < 1:
            raise ValidationError(f"need at least one expert, got {n_experts}")
        scale = np.sqrt(2.0 / (dim + n_experts))
        self.gate = parameter(rng.normal(0.0, scale, size=(dim, n_experts)), "gate")
        self.experts = [Expert(dim, hidden, rng) for _ in range(n_experts)]

    def __call__(self, x: Tensor, k: int) -> tuple[Tensor, RoutingStats]:
        n_experts = len(self.experts)
        if not (1 <= k <= n_experts):
            raise ValidationError(f"top_k {k} must be in [1, {n_experts}]")
        if x.ndim != 2:
            raise ShapeError(f"MoE expects flattened (tokens, dim), got {x.shape}")
        n_tokens = x.shape[0]
        logits = T.matmul(x, self.gate)
        probs = T.softmax(logits)
        chosen = select_top_k(logits.data, k)
        weights = T.softmax(T.gather_last(logits, chosen))
        weights_flat = T.reshape(weights, (n_tokens * k,))

        out: Tensor | None = None
        all_tokens = np.arange(n_tokens)
        for j in range(n_experts):
            tok, slot = np.nonzero(chosen == j)
            if tok.size == 0:
                continue
            full = tok.size == n_tokens
            rows = x if full else T.take_rows(x, tok)
            gain = T.take_rows(weights_flat, tok * k + slot)
            scaled = T.scale_rows(self.experts[j](rows), gain)
            part = scaled if full else T.scatter_rows(tok, scaled, n_tokens)
            out = part if out is None else T.add(out, part)

        prob_sum = T.tsum(probs, axis=0)
        stats = RoutingStats(
            n_experts=n_experts,
            top_k=k,
            token_counts=np.bincount(chosen.ravel(), minlength=n_experts),
            prob_sums=prob_sum.data.astype(np.float64).copy(),
            total_tokens=n_tokens,
            prob_sum_tensors=[prob_sum],
        )
        return out, stats


def aux_loss(stats: RoutingStats, alpha: float) -> Tensor:
    """Balancing penalty: alpha * n_experts * sum_j f_j * pbar_j."""
    if stats.total_tokens < 1:
        raise ValidationError("balancing loss needs at least one routed token")
    fractions = Tensor(stats.fractions)
    total = stats.prob_sum_tensors[0]
    for t in stats.prob_sum_tensors[1:]:
        total = T.add(total, t)
    mean_probs = T.mul(total, 1.0 / stats.total_tokens)
    return T.mul(T.tsum(T.mul(mean_probs, fractions)), alpha * stats.n_experts)


class TransformerBlock(Module):
    """Pre-norm residual pair: attention then the expert mixture."""

    def __init__(self, dim: int, heads: int, n_experts: int, ffn_mult: int,
                 rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm_moe = LayerNorm(dim)
        self.moe = MoE(dim, n_experts, ffn_mult * dim, rng)

    def __call__(self, h: Tensor, valid: np.ndarray, positions: np.ndarray,
                 k: int) -> tuple[Tensor, RoutingStats]:
        b, length, dim = h.shape
        h = T.add(h, self.attn(self.norm_attn(h), valid, positions))
        flat = T.reshape(self.norm_moe(h), (b * length, dim))
        mixed, stats = self.moe(flat, k)
        h = T.add(h, T.reshape(mixed, (b, length, dim)))
        return h, stats


class Backbone(Module):
    def __init__(self, dim: int, depth: int, heads: int, n_experts: int,
                 ffn_mult: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, n_experts, ffn_mult, rng)
                       for _ in range(depth)]

    def __call__(self, h: Tensor, valid: np.ndarray, positions: np.ndarray,
                 k: int) -> tuple[Tensor, RoutingStats | None]:
        collected: list[RoutingStats] = []
        for block in self.blocks:
            h, stats = block(h, valid, positions, k)
            collected.append(stats)
        return h, (RoutingStats.merge(collected) if collected else None)
