"""Masked-reconstruction pre-training: token masking, the dual-domain
losses, and the optimisation step.

Masking replaces whole rows of the embedded sequence (after the address
embeddings were added) with a single learnable vector, so a masked token
keeps no hint of its content or address beyond what rotary attention
reveals.  Reconstruction targets are the raw-path and band-power-path
features of the unmasked input, treated as constants (no gradient flows
into the encoders from the target side; the usual guard against both
sides collapsing to zero).

All randomness is derived per (seed, step) through SeedSequence, never from
sequential generator state, so resuming from a checkpoint reproduces an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossWeights, ModelConfig
from .data import EegBatch
from .errors import NumericFault, ValidationError
from .model import Model
from .preprocess import augment
from .tensor import Tensor
from .transformer import RoutingStats, aux_loss


def derived_rng(seed: int, step: int, tag: str) -> np.random.Generator:
    """Deterministic stream for one purpose at one step."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0x7FFFFFFF, step, zlib.crc32(tag.encode())]))


@dataclass
class MaskPlan:
    """Which (batch, position) tokens are hidden this step."""

    flat_indices: np.ndarray   # indices into the flattened (B*L) token axis
    per_item: np.ndarray
    ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.flat_indices.size)


def plan_masking(valid: np.ndarray, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Sample round(ratio * n_valid) positions per item, without replacement,
    uniformly over that item's valid positions."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"mask ratio must be in [0,1], got {ratio}")
    b, slots = valid.shape
    chosen: list[np.ndarray] = []
    per_item = np.zeros(b, dtype=np.int64)
    for i in range(b):
        candidates = np.flatnonzero(valid[i])
        count = int(round(ratio * candidates.size))
        per_item[i] = count
        if count:
            picks = rng.choice(candidates, size=count, replace=False)
            chosen.append(np.sort(picks) + i * slots)
    flat = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return MaskPlan(flat_indices=flat, per_item=per_item, ratio=ratio)


def mask_tokens(h_in: Tensor, plan: MaskPlan, mask_vec: Tensor) -> Tensor:
    return T.replace_rows(h_in, plan.flat_indices, mask_vec)


def reconstruction_losses(h_out: Tensor, raw_target: np.ndarray,
                          freq_target: np.ndarray, plan: MaskPlan,
                          head_time, head_freq) -> tuple[Tensor, Tensor]:
    """Squared-L2 reconstruction error at the masked positions.

    Each masked token contributes the full squared norm over the feature
    axis (no division by D); the losses average over masked tokens only.
    """
    if plan.n_masked == 0:
        raise ValidationError("reconstruction loss undefined with an empty mask set")
    b, slots, d = h_out.shape
    rows = T.take_rows(T.reshape(h_out, (b * slots, d)), plan.flat_indices)
    t_rows = Tensor(raw_target.reshape(-1, d)[plan.flat_indices])
    f_rows = Tensor(freq_target.reshape(-1, d)[plan.flat_indices])
    diff_t = T.sub(head_time(rows), t_rows)
    diff_f = T.sub(head_freq(rows), f_rows)
    loss_t = T.mean(T.tsum(T.mul(diff_t, diff_t), axis=1))
    loss_f = T.mean(T.tsum(T.mul(diff_f, diff_f), axis=1))
    return loss_t, loss_f


def total_loss(loss_t: Tensor, loss_f: Tensor, loss_aux: Tensor | None,
               weights: LossWeights) -> Tensor:
    weights.validate()
    out = T.add(T.mul(loss_t, weights.time), T.mul(loss_f, weights.freq))
    if loss_aux is not None and weights.aux > 0:
        out = T.add(out, T.mul(loss_aux, weights.aux))
    return out


def pretraining_loss(model: Model, signals: np.ndarray, valid: np.ndarray,
                     plan: MaskPlan, weights: LossWeights, aux_alpha: float,
                     targets: tuple[np.ndarray, np.ndarray] | None = None,
                     ) -> tuple[Tensor, dict[str, float], RoutingStats | None]:
    """Forward pass through the whole pipeline to the weighted total loss.

    ``targets`` overrides the (detached) reconstruction targets; the
    gradient checker uses this to hold them fixed while perturbing
    parameters, matching the stop-gradient treatment of the analytic path.
    """
    h_in, triple = model.encode(signals, valid)
    h_masked = mask_tokens(h_in, plan, model.mask_vec)
    h_out, stats = model.run_backbone(h_masked, valid)
    if targets is None:
        raw_target, freq_target = triple.raw.data, triple.freq.data
    else:
        raw_target, freq_target = targets
    loss_t, loss_f = reconstruction_losses(h_out, raw_target, freq_target, plan,
                                           model.head_time, model.head_freq)
    loss_aux = aux_loss(stats, aux_alpha) if stats is not None else None
    combined = total_loss(loss_t, loss_f, loss_aux, weights)
    parts = {
        "time": loss_t.item(),
        "freq": loss_f.item(),
        "aux": loss_aux.item() if loss_aux is not None else 0.0,
        "total": combined.item(),
    }
    return combined, parts, stats


class AdamW:
    """Decoupled weight decay + adaptive moments, with global-norm clipping
    and linear warmup to a constant rate.

    The effective rate at step t (0-based) is base * min(1, (t+1)/warmup).
    Weight decay is scaled by the effective rate, so lr == 0 changes nothing.
    Parameters without a gradient (dead paths) are left untouched.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float,
                 wd: float = 0.0, clip: float = 1.0, warmup_steps: int = 0):
        self.named_params = named_params
        self.lr = lr
        self.wd = wd
        self.clip = clip
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def effective_lr(self) -> float:
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self) -> tuple[float, float]:
        """Apply one update; returns (pre-clip gradient norm, effective lr)."""
        norm = self.grad_norm()
        if not np.isfinite(norm):
            raise NumericFault("gradient norm is not finite; aborting the step")
        scale = self.clip / norm if (self.clip > 0 and norm > self.clip) else 1.0
        lr = self.effective_lr()
        t = self.step_count + 1
        bias1 = 1.0 - self.BETA1 ** t
        bias2 = 1.0 - self.BETA2 ** t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[name] = self.BETA1 * self.m[name] + (1 - self.BETA1) * g
            v = self.v[name] = self.BETA2 * self.v[name] + (1 - self.BETA2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.EPS)
            p.data = p.data - lr * update - lr * self.wd * p.data
        self.step_count += 1
        return norm, lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {"opt.step": np.array([float(self.step_count)], dtype=np.float64)}
        for name, _ in self.named_params:
            state[f"opt.m.{name}"] = self.m[name]
            state[f"opt.v.{name}"] = self.v[name]
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["opt.step"][0])
        for name, p in self.named_params:
            m = state.get(f"opt.m.{name}")
            v = state.get(f"opt.v.{name}")
            if m is None or v is None:
                raise ValidationError(f"optimizer state missing for parameter {name}")
            if m.shape != p.shape or v.shape != p.shape:
                raise ValidationError(f"optimizer state shape mismatch for {name}")
            self.m[name] = m.astype(p.data.dtype)
            self.v[name] = v.astype(p.data.dtype)


def train_step(model: Model, opt: AdamW, batch: EegBatch, cfg: ModelConfig,
               step: int) -> dict[str, float]:
    """One pre-training step: augment, forward, backward, clip, update."""
    aug_cfg = cfg.augment_config(
        seed=int(derived_rng(cfg.seed, step, "augment").integers(2 ** 62)))
    augmented = augment(batch, aug_cfg)
    signals = augmented.flat_signals()
    valid = augmented.flat_valid()
    plan = plan_masking(valid, cfg.mask_ratio, derived_rng(cfg.seed, step, "mask"))
    model.zero_grad()
    loss, parts, stats = pretraining_loss(
        model, signals, valid, plan, cfg.loss_weights, cfg.aux_alpha)
    if not np.isfinite(parts["total"]):
        raise NumericFault(f"non-finite loss at step {step}")
    T.backward(loss)
    grad_norm, lr = opt.step()
    parts["grad_norm"] = grad_norm
    parts["lr"] = lr
    parts["expert_load_max"] = stats.max_load if stats is not None else 0.0
    return parts
