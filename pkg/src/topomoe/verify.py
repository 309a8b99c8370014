"""Self-contained invariant checks behind the ``verify`` command.

Each check recomputes its expectation through an independent route
(brute-force DFT, pair enumeration, finite differences, hand algebra) and
compares against the production path, printing one line per property.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoders import DEFAULT_BANDS, band_power
from .fusion import CrossAttention
from .metrics import (ConfusionMatrix, ScoredPredictions, auc_pr, auroc,
                      balanced_accuracy, cohens_kappa, f1_scores)
from .model import build_model
from .preprocess import zero_phase_filter
from .tensor import Tensor
from .topology import TopologicalEmbedding, generate_indices
from .transformer import MoE, RoutingStats, aux_loss, rope_rotate


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check(name: str, passed: bool, detail: str) -> CheckResult:
    return CheckResult(name=name, passed=bool(passed), detail=detail)


def check_primitive_gradients() -> CheckResult:
    """Analytic adjoints of each primitive vs central differences (float64)."""
    rng = np.random.default_rng(7)
    worst = 0.0
    with T.f64_mode():
        # constants are drawn once so every closure is deterministic
        m_w = Tensor(rng.normal(size=(4, 3)))
        c_w = Tensor(rng.normal(size=(2, 1, 3)))
        sm_c = Tensor(rng.normal(size=(3, 4)))
        ln_c = Tensor(rng.normal(size=(3, 5)))
        bn_c = Tensor(rng.normal(size=(3, 2, 4)))
        bn_g, bn_b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rp_c = Tensor(rng.normal(size=(2, 3, 4)))
        cases: list[tuple[str, Callable[[Tensor], Tensor], tuple[int, ...]]] = [
            ("matmul", lambda x: T.tsum(T.matmul(x, m_w)), (5, 4)),
            ("conv1d", lambda x: T.tsum(T.conv1d(x, c_w, stride=2)), (2, 1, 11)),
            ("relu", lambda x: T.tsum(T.relu(x)), (6,)),
            ("softmax", lambda x: T.tsum(T.mul(T.softmax(x), sm_c)), (3, 4)),
            ("layer_norm", lambda x: T.tsum(T.mul(T.layer_norm(x), ln_c)), (3, 5)),
            ("batch_norm", lambda x: T.tsum(T.mul(T.batch_norm(x, bn_g, bn_b), bn_c)),
             (3, 2, 4)),
            ("mean", lambda x: T.tsum(T.relu(T.mean(x, axis=1))), (3, 4)),
            ("rope", lambda x: T.tsum(T.mul(T.rope(x, np.arange(3)), rp_c)), (2, 3, 4)),
            ("cross_entropy", lambda x: T.cross_entropy(x, np.array([0, 2, 1])), (3, 4)),
        ]
        for name, build, shape in cases:
            for trial in range(12):
                x0 = np.random.default_rng(100 + trial).normal(size=shape)
                x = Tensor(x0, requires_grad=True, name=name)
                report = T.grad_check(lambda: build(x), [x], step=1e-5, tol=1e-4)
                worst = max(worst, report.max_rel_err)
                if not report.passed:
                    return _check("gradients/primitives", False,
                                  f"{name} rel err {report.max_rel_err:.2e}")
    return _check("gradients/primitives", worst < 1e-4, f"max rel err {worst:.2e}")


def check_rope_norms() -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x = Tensor(rng.normal(size=(2, 6, 8)))
        pos = rng.integers(0, 50, size=6)
        rotated = rope_rotate(x, pos)
        before = np.linalg.norm(x.data, axis=-1)
        after = np.linalg.norm(rotated.data, axis=-1)
        worst = max(worst, float(np.abs(before - after).max()))
        back = T.rope(rotated, -pos)
        worst = max(worst, float(np.abs(back.data - x.data).max()))
    return _check("rope/norm+inverse", worst < 1e-6, f"max deviation {worst:.2e}")


def check_rope_relative_shift() -> CheckResult:
    """Attention weights depend only on relative positions."""
    rng = np.random.default_rng(12)
    worst = 0.0
    with T.f64_mode():
        from .transformer import SelfAttention
        attn = SelfAttention(dim=16, heads=2, rng=np.random.default_rng(3))
        for _ in range(100):
            h = Tensor(rng.normal(size=(1, 5, 16)))
            valid = np.ones((1, 5), dtype=bool)
            pos = np.sort(rng.integers(0, 40, size=5))
            shift = int(rng.integers(1, 30))
            w0 = attn.attention_weights(h, valid, pos).data
            w1 = attn.attention_weights(h, valid, pos + shift).data
            worst = max(worst, float(np.abs(w0 - w1).max()))
    return _check("rope/relative-shift", worst < 1e-5, f"max weight change {worst:.2e}")


def check_moe_dense_equivalence() -> CheckResult:
    """k = n_experts routing equals the dense softmax mixture bitwise."""
    rng = np.random.default_rng(13)
    moe = MoE(dim=8, n_experts=3, hidden=16, rng=np.random.default_rng(5))
    x = Tensor(rng.normal(size=(11, 8)).astype(np.float32))
    with T.no_grad():
        out, _ = moe(x, k=3)
        probs = T.softmax(T.matmul(x, moe.gate))
        dense = None
        for j, expert in enumerate(moe.experts):
            p_j = T.reshape(T.slice_axis(probs, 1, j, j + 1), (11,))
            term = T.scale_rows(expert(x), p_j)
            dense = term if dense is None else T.add(dense, term)
    exact = np.array_equal(out.data, dense.data)
    gap = float(np.abs(out.data - dense.data).max())
    return _check("moe/dense-equivalence", exact, f"max abs gap {gap:.2e}")


def check_aux_loss_algebra() -> CheckResult:
    n_e = 4
    uniform = RoutingStats(
        n_experts=n_e, top_k=2,
        token_counts=np.full(n_e, 50), prob_sums=np.full(n_e, 100 / n_e),
        total_tokens=100, prob_sum_tensors=[Tensor(np.full(n_e, 100 / n_e))])
    val_uniform = aux_loss(uniform, alpha=0.01).item()
    collapsed = RoutingStats(
        n_experts=n_e, top_k=1,
        token_counts=np.array([100, 0, 0, 0]), prob_sums=np.array([100.0, 0, 0, 0]),
        total_tokens=100, prob_sum_tensors=[Tensor(np.array([100.0, 0, 0, 0]))])
    val_collapsed = aux_loss(collapsed, alpha=0.01).item()
    ok = abs(val_uniform - 0.01) < 1e-6 and abs(val_collapsed - 0.01 * n_e) < 1e-6
    return _check("moe/balancing-algebra", ok,
                  f"uniform {val_uniform:.6f} (want 0.01), collapsed {val_collapsed:.6f} (want 0.04)")


def check_routing_recount() -> CheckResult:
    """Routing statistics match a per-token brute-force recount."""
    rng = np.random.default_rng(14)
    moe = MoE(dim=6, n_experts=4, hidden=8, rng=np.random.default_rng(6))
    x = Tensor(rng.normal(size=(1000, 6)))
    with T.no_grad():
        _, stats = moe(x, k=2)
        logits = T.matmul(x, moe.gate).data
    counts = np.zeros(4, dtype=np.int64)
    prob_sums = np.zeros(4)
    for row in logits:
        order = sorted(range(4), key=lambda j: (-row[j], j))[:2]
        for j in order:
            counts[j] += 1
        e = np.exp(row - row.max())
        prob_sums += e / e.sum()
    ok = np.array_equal(counts, stats.token_counts) and np.allclose(
        prob_sums, stats.prob_sums, atol=1e-6)
    return _check("moe/routing-recount", ok,
                  f"counts {stats.token_counts.tolist()} vs brute {counts.tolist()}")


def check_band_power() -> CheckResult:
    fs, t = 200.0, 400
    x = np.sin(2 * np.pi * 10.0 * np.arange(t) / fs)
    powers = band_power(x, DEFAULT_BANDS, fs)
    bin_counts = np.array([len(b) for b in DEFAULT_BANDS.bin_sets(t, fs)])
    concentration = powers[2] * bin_counts[2] / (powers * bin_counts).sum()
    shift_gap = 0.0
    rng = np.random.default_rng(15)
    for _ in range(20):
        sig = rng.normal(size=t)
        p0 = band_power(sig, DEFAULT_BANDS, fs)
        p1 = band_power(np.roll(sig, int(rng.integers(1, t))), DEFAULT_BANDS, fs)
        shift_gap = max(shift_gap, float(np.abs(p0 - p1).max() / np.abs(p0).max()))
    expected_alpha = (t / 2) ** 2 / len(DEFAULT_BANDS.bin_sets(t, fs)[2])
    ok = (concentration >= 0.999999
          and abs(powers[2] - expected_alpha) / expected_alpha < 1e-9
          and shift_gap < 1e-6)
    return _check("encoders/band-power", ok,
                  f"alpha {powers[2]:.3f} (want {expected_alpha:.3f}), "
                  f"concentration {concentration:.8f}, shift gap {shift_gap:.2e}")


def check_filter_responses() -> CheckResult:
    fs, t = 200.0, 2000
    margin = 200
    time = np.arange(t) / fs

    dc = zero_phase_filter(np.full(t, 5.0), fs)
    dc_peak = float(np.abs(dc[margin:-margin]).max())

    def centre_amplitude(freq: float) -> float:
        out = zero_phase_filter(np.sin(2 * np.pi * freq * time), fs)
        centre = out[t // 10: -t // 10]
        spectrum = np.abs(np.fft.rfft(centre)) * 2 / centre.size
        bin_idx = int(round(freq * centre.size / fs))
        return float(spectrum[bin_idx])

    amp10 = centre_amplitude(10.0)
    amp50 = centre_amplitude(50.0)

    tone = np.sin(2 * np.pi * 10.0 * time)
    out = zero_phase_filter(tone, fs)
    xc = np.correlate(out[margin:-margin], tone[margin:-margin], mode="full")
    lag = int(np.argmax(xc)) - (len(tone) - 2 * margin - 1)

    ok = dc_peak < 0.05 and 0.9 <= amp10 <= 1.1 and amp50 < 0.1 and lag == 0
    return _check("preprocess/filter-response", ok,
                  f"dc {dc_peak:.3f}, 10Hz gain {amp10:.3f}, 50Hz {amp50:.3f}, lag {lag}")


def _auroc_trapezoid(preds: ScoredPredictions) -> float:
    """Independent route: trapezoidal integration of the ROC curve."""
    s = preds.positive_scores()
    y = preds.labels
    thresholds = np.unique(s)[::-1]
    n_pos = (y == 1).sum()
    n_neg = (y == 0).sum()
    tpr = [0.0]
    fpr = [0.0]
    for thr in thresholds:
        chosen = s >= thr
        tpr.append(((y == 1) & chosen).sum() / n_pos)
        fpr.append(((y == 0) & chosen).sum() / n_neg)
    return float(np.trapezoid(tpr, fpr))


def check_metric_oracles() -> CheckResult:
    checks = []
    cm = ConfusionMatrix(np.array([[3, 1], [2, 2]]))
    checks.append(abs(balanced_accuracy(cm) - 0.625) < 1e-9)
    cm2 = ConfusionMatrix(np.array([[20, 5], [10, 15]]))
    checks.append(abs(cohens_kappa(cm2) - 0.4) < 1e-9)
    per, _ = f1_scores(ConfusionMatrix(np.array([[3, 1], [2, 0]])))
    checks.append(abs(per[0] - 6.0 / 9.0) < 1e-9)
    preds = ScoredPredictions(np.array([0, 0, 1, 1]),
                              np.array([0.1, 0.4, 0.35, 0.8]))
    checks.append(abs(auroc(preds) - 0.75) < 1e-9)
    checks.append(abs(auc_pr(ScoredPredictions(np.array([1, 1, 0, 0]),
                                               np.array([0.9, 0.8, 0.2, 0.1]))) - 1.0) < 1e-9)
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(6, 60))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 3)
        p = ScoredPredictions(labels, scores)
        worst = max(worst, abs(auroc(p) - _auroc_trapezoid(p)))
    checks.append(worst < 1e-9)
    return _check("metrics/oracles", all(checks),
                  f"fixtures {'ok' if all(checks) else 'FAILED'}, pair-vs-curve gap {worst:.2e}")


def check_topology_indices() -> CheckResult:
    for regions, per_region in ((5, 4), (5, 13), (25, 400)):
        slots = regions * per_region
        i_region, i_intra, i_abs = generate_indices(1, slots, regions, per_region)
        j = np.arange(slots)
        if not (np.array_equal(i_abs[0], j)
                and np.array_equal(i_region[0], j // per_region)
                and np.array_equal(i_intra[0], j % per_region)
                and np.array_equal(i_region[0] * per_region + i_intra[0], i_abs[0])):
            return _check("topology/index-law", False, f"violation at R={regions} E={per_region}")
    rng = np.random.default_rng(17)
    te = TopologicalEmbedding(3, 2, 4, rng, enabled=False)
    fused = Tensor(rng.normal(size=(2, 6, 4)))
    raw = Tensor(rng.normal(size=(2, 6, 4)))
    out = te(fused, raw, generate_indices(2, 6, 3, 2))
    reduces = np.array_equal(out.data, fused.data + raw.data)
    return _check("topology/index-law", reduces,
                  "index law exhaustive to L=10^4; zero tables reduce to fused+raw" if reduces
                  else "zero-table reduction failed")


def check_attention_masking() -> CheckResult:
    """Garbage in masked key rows cannot change valid outputs."""
    rng = np.random.default_rng(18)
    attn = CrossAttention(dim=8, heads=2, rng=np.random.default_rng(8))
    q = Tensor(rng.normal(size=(1, 4, 8)))
    kv0 = rng.normal(size=(1, 4, 8))
    kv1 = kv0.copy()
    kv1[0, 2] = 1e4
    valid = np.array([[True, True, False, True]])
    with T.no_grad():
        out0 = attn(q, Tensor(kv0), valid).data
        out1 = attn(q, Tensor(kv1), valid).data
    gap = float(np.abs(out0 - out1).max())
    return _check("fusion/mask-isolation", gap < 1e-6, f"max change {gap:.2e}")


def check_model_gradient() -> CheckResult:
    """Whole-pipeline gradient vs finite differences on a toy config."""
    from .pretraining import plan_masking, pretraining_loss

    cfg = ModelConfig(dim=8, depth=1, heads=2, experts=2, top_k=1, ffn_mult=2,
                      time_steps=64, regions=2, electrodes_per_region=1,
                      dcm_heads=2, dcm_ffn_mult=1, max_drift=2)
    rng = np.random.default_rng(19)
    with T.f64_mode():
        model = build_model(cfg, seed=0)
        signals = rng.normal(size=(2, 2, 64))
        valid = np.ones((2, 2), dtype=bool)
        plan = plan_masking(valid, 0.5, np.random.default_rng(1))
        with T.no_grad():
            _, triple = model.encode(signals, valid)
            targets = (triple.raw.data.copy(), triple.freq.data.copy())

        def loss_fn():
            total, _, _ = pretraining_loss(model, signals, valid, plan,
                                           cfg.loss_weights, cfg.aux_alpha,
                                           targets=targets)
            return total

        report = T.grad_check(loss_fn, model.parameters(), step=1e-5, tol=1e-3,
                              samples_per_tensor=4, rng=np.random.default_rng(2))
    return _check("gradients/full-model", report.passed,
                  f"max rel err {report.max_rel_err:.2e}")


ALL_CHECKS: list[Callable[[], CheckResult]] = [
    check_primitive_gradients,
    check_model_gradient,
    check_rope_norms,
    check_rope_relative_shift,
    check_moe_dense_equivalence,
    check_aux_loss_algebra,
    check_routing_recount,
    check_band_power,
    check_filter_responses,
    check_metric_oracles,
    check_topology_indices,
    check_attention_masking,
]


def run_all() -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        try:
            results.append(fn())
        except Exception as exc:  # report the failure, keep going
            results.append(CheckResult(fn.__name__, False, f"raised {exc!r}"))
    return results
