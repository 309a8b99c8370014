"""Masking plans, reconstruction losses, the loss combination, and the
optimizer's clipping/warmup/decay behaviour."""

import numpy as np
import pytest

from topomoe import tensor as T
from topomoe.config import LossWeights, ModelConfig
from topomoe.errors import ValidationError
from topomoe.model import build_model
from topomoe.nn import Linear
from topomoe.pretraining import (AdamW, MaskPlan, derived_rng, mask_tokens,
                                 plan_masking, pretraining_loss,
                                 reconstruction_losses, total_loss)
from topomoe.tensor import Tensor

TOY = ModelConfig(dim=8, depth=1, heads=2, experts=2, top_k=1, ffn_mult=2,
                  time_steps=64, regions=2, electrodes_per_region=2,
                  dcm_heads=2, dcm_ffn_mult=1, max_drift=2)


class TestMaskPlanning:
    def test_ratio_zero_masks_nothing(self, rng):
        valid = np.ones((3, 10), dtype=bool)
        plan = plan_masking(valid, 0.0, rng)
        assert plan.n_masked == 0
        x = Tensor(rng.normal(size=(3, 10, 4)))
        out = mask_tokens(x, plan, Tensor(rng.normal(size=4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_ratio_one_masks_all_valid(self, rng):
        valid = np.ones((2, 6), dtype=bool)
        valid[1, 3:] = False
        plan = plan_masking(valid, 1.0, rng)
        vec = rng.normal(size=4).astype(np.float32)
        out = mask_tokens(Tensor(rng.normal(size=(2, 6, 4))), plan, Tensor(vec)).data
        flat_valid = valid.reshape(-1)
        np.testing.assert_allclose(out.reshape(-1, 4)[flat_valid],
                                   np.tile(vec, (flat_valid.sum(), 1)), rtol=1e-6)

    def test_count_is_round_of_ratio(self, rng):
        valid = np.ones((4, 1600), dtype=bool)
        plan = plan_masking(valid, 0.25, rng)
        np.testing.assert_array_equal(plan.per_item, [400] * 4)
        valid20 = np.ones((1, 20), dtype=bool)
        assert plan_masking(valid20, 0.25, rng).n_masked == 5

    def test_only_valid_positions_masked(self, rng):
        valid = np.zeros((1, 10), dtype=bool)
        valid[0, [1, 4, 7]] = True
        plan = plan_masking(valid, 1.0, rng)
        np.testing.assert_array_equal(np.sort(plan.flat_indices), [1, 4, 7])

    def test_deterministic_under_seed(self):
        valid = np.ones((2, 30), dtype=bool)
        a = plan_masking(valid, 0.5, np.random.default_rng(9))
        b = plan_masking(valid, 0.5, np.random.default_rng(9))
        np.testing.assert_array_equal(a.flat_indices, b.flat_indices)
        c = plan_masking(valid, 0.5, np.random.default_rng(10))
        assert not np.array_equal(a.flat_indices, c.flat_indices)


class TestReconstructionLosses:
    def make_heads(self, rng, d=4):
        head_t, head_f = Linear(d, d, rng), Linear(d, d, rng)
        return head_t, head_f

    def test_exact_targets_give_zero(self, rng):
        d = 4
        head_t, head_f = self.make_heads(rng, d)
        h_out = Tensor(rng.normal(size=(2, 3, d)))
        plan = MaskPlan(flat_indices=np.array([0, 4]), per_item=np.array([1, 1]),
                        ratio=0.3)
        with T.no_grad():
            flat = T.reshape(h_out, (6, d))
            t_target = head_t(flat).data.reshape(2, 3, d)
            f_target = head_f(flat).data.reshape(2, 3, d)
        lt, lf = reconstruction_losses(h_out, t_target, f_target, plan, head_t, head_f)
        assert abs(lt.item()) < 1e-10
        assert abs(lf.item()) < 1e-10

    def test_uniform_offset_gives_d_delta_squared(self, rng):
        d, delta = 4, 0.7
        head_t, head_f = self.make_heads(rng, d)
        h_out = Tensor(rng.normal(size=(2, 3, d)))
        plan = MaskPlan(flat_indices=np.array([1, 3, 5]),
                        per_item=np.array([1, 2]), ratio=0.5)
        with T.no_grad():
            flat = T.reshape(h_out, (6, d))
            base_t = head_t(flat).data.reshape(2, 3, d)
            base_f = head_f(flat).data.reshape(2, 3, d)
        lt, lf = reconstruction_losses(h_out, base_t - delta, base_f, plan,
                                       head_t, head_f)
        assert abs(lt.item() - d * delta ** 2) < 1e-5
        assert abs(lf.item()) < 1e-10

    def test_matches_per_position_loop(self, rng):
        d = 5
        head_t, head_f = self.make_heads(rng, d)
        h_out = Tensor(rng.normal(size=(2, 4, d)))
        raw = rng.normal(size=(2, 4, d))
        freq = rng.normal(size=(2, 4, d))
        idx = np.array([0, 3, 6])
        plan = MaskPlan(flat_indices=idx, per_item=np.array([2, 1]), ratio=0.4)
        lt, lf = reconstruction_losses(h_out, raw, freq, plan, head_t, head_f)
        with T.no_grad():
            pred_t = head_t(T.reshape(h_out, (8, d))).data
            pred_f = head_f(T.reshape(h_out, (8, d))).data
        loop_t = np.mean([np.sum((pred_t[i] - raw.reshape(-1, d)[i]) ** 2) for i in idx])
        loop_f = np.mean([np.sum((pred_f[i] - freq.reshape(-1, d)[i]) ** 2) for i in idx])
        assert abs(lt.item() - loop_t) < 1e-4
        assert abs(lf.item() - loop_f) < 1e-4

    def test_empty_mask_rejected(self, rng):
        head_t, head_f = self.make_heads(rng)
        plan = MaskPlan(flat_indices=np.zeros(0, dtype=int),
                        per_item=np.zeros(2, dtype=int), ratio=0.0)
        with pytest.raises(ValidationError):
            reconstruction_losses(Tensor(rng.normal(size=(2, 3, 4))),
                                  rng.normal(size=(2, 3, 4)),
                                  rng.normal(size=(2, 3, 4)), plan, head_t, head_f)

    def test_unmasked_targets_do_not_matter(self, rng):
        d = 4
        head_t, head_f = self.make_heads(rng, d)
        h_out = Tensor(rng.normal(size=(1, 4, d)))
        raw = rng.normal(size=(1, 4, d))
        freq = rng.normal(size=(1, 4, d))
        plan = MaskPlan(flat_indices=np.array([1]), per_item=np.array([1]), ratio=0.25)
        lt1, lf1 = reconstruction_losses(h_out, raw, freq, plan, head_t, head_f)
        raw2, freq2 = raw.copy(), freq.copy()
        raw2[0, 2] += 100.0
        freq2[0, 0] -= 50.0
        lt2, lf2 = reconstruction_losses(h_out, raw2, freq2, plan, head_t, head_f)
        assert lt1.item() == lt2.item()
        assert lf1.item() == lf2.item()


class TestTotalLoss:
    def test_paper_weighting(self):
        lt, lf = Tensor(np.array(2.0)), Tensor(np.array(3.0))
        out = total_loss(lt, lf, None, LossWeights(time=0.8, freq=0.2, aux=0.0))
        assert abs(out.item() - (0.8 * 2 + 0.2 * 3)) < 1e-7

    def test_zero_components(self):
        zero = Tensor(np.array(0.0))
        assert total_loss(zero, zero, zero, LossWeights(1, 1, 1)).item() == 0.0

    def test_single_component_passthrough(self):
        lt, lf = Tensor(np.array(4.5)), Tensor(np.array(9.9))
        out = total_loss(lt, lf, None, LossWeights(time=1.0, freq=0.0, aux=0.0))
        assert abs(out.item() - 4.5) < 1e-7

    def test_linear_in_components(self, rng):
        a, b = rng.random(2)
        w = LossWeights(time=0.8, freq=0.2, aux=0.3)
        l1 = total_loss(Tensor(np.array(a)), Tensor(np.array(b)),
                        Tensor(np.array(0.1)), w).item()
        l2 = total_loss(Tensor(np.array(2 * a)), Tensor(np.array(b)),
                        Tensor(np.array(0.1)), w).item()
        assert abs((l2 - l1) - 0.8 * a) < 1e-6

    def test_degenerate_weights_rejected(self):
        with pytest.raises(ValidationError):
            total_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0)), None,
                       LossWeights(time=0.0, freq=0.0, aux=1.0))


class TestAdamW:
    def test_zero_lr_is_identity(self, rng):
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="p")
        before = p.data.copy()
        opt = AdamW([("p", p)], lr=0.0, wd=0.5, clip=1.0)
        p.grad = rng.normal(size=(3, 3)).astype(p.data.dtype)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_global_norm_clip(self, rng):
        p = Tensor(np.zeros((4, 5)), requires_grad=True, name="p")
        q = Tensor(np.zeros(7), requires_grad=True, name="q")
        opt = AdamW([("p", p), ("q", q)], lr=1e-3, clip=1.0)
        gp = rng.normal(size=(4, 5))
        gq = rng.normal(size=7)
        scale = 10.0 / np.sqrt((gp ** 2).sum() + (gq ** 2).sum())
        p.grad = (gp * scale).astype(p.data.dtype)
        q.grad = (gq * scale).astype(q.data.dtype)
        norm, _ = opt.step()
        assert abs(norm - 10.0) < 1e-5
        applied = np.sqrt((np.asarray(p.grad, dtype=np.float64) ** 2).sum()
                          + (np.asarray(q.grad, dtype=np.float64) ** 2).sum())
        clipped = applied * (1.0 / norm)
        assert abs(clipped * 10.0 - 10.0) < 1e-6  # clip factor = clip / norm

    def test_warmup_schedule(self):
        p = Tensor(np.zeros(1), requires_grad=True, name="p")
        opt = AdamW([("p", p)], lr=1.0, warmup_steps=4)
        rates = []
        for _ in range(6):
            rates.append(opt.effective_lr())
            p.grad = np.ones(1, dtype=p.data.dtype)
            opt.step()
        np.testing.assert_allclose(rates, [0.25, 0.5, 0.75, 1.0, 1.0, 1.0])

    def test_missing_grads_skip_update(self, rng):
        p = Tensor(rng.normal(size=3), requires_grad=True, name="p")
        before = p.data.copy()
        opt = AdamW([("p", p)], lr=0.1, wd=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_state_round_trip(self, rng):
        p = Tensor(rng.normal(size=(2, 2)), requires_grad=True, name="p")
        opt = AdamW([("p", p)], lr=0.01)
        for _ in range(3):
            p.grad = rng.normal(size=(2, 2)).astype(p.data.dtype)
            opt.step()
        state = opt.state_arrays()
        opt2 = AdamW([("p", p)], lr=0.01)
        opt2.load_state_arrays(state)
        assert opt2.step_count == 3
        np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
        np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


class TestPipelineLoss:
    def test_dead_freq_path_has_zero_gradient(self, rng):
        model = build_model(TOY, seed=0)
        signals = rng.normal(size=(2, 4, 64))
        valid = np.ones((2, 4), dtype=bool)
        plan = plan_masking(valid, 0.5, np.random.default_rng(0))
        model.zero_grad()
        loss, _, _ = pretraining_loss(model, signals, valid, plan,
                                      LossWeights(time=1.0, freq=0.0, aux=0.0),
                                      aux_alpha=0.0)
        T.backward(loss)
        freq_grad = model.head_freq.w.grad
        assert freq_grad is None or np.linalg.norm(freq_grad) == 0.0
        assert np.linalg.norm(model.head_time.w.grad) > 0

    def test_unmasked_positions_contribute_no_reconstruction_gradient(self, rng):
        """Perturbing an unmasked target row leaves both losses unchanged."""
        model = build_model(TOY, seed=0)
        signals = rng.normal(size=(1, 4, 64))
        valid = np.ones((1, 4), dtype=bool)
        plan = plan_masking(valid, 0.5, np.random.default_rng(3))
        unmasked = sorted(set(range(4)) - set(plan.flat_indices.tolist()))[0]
        _, triple = model.encode(signals, valid)
        raw = triple.raw.data.copy()
        freq = triple.freq.data.copy()
        base = pretraining_loss(model, signals, valid, plan, TOY.loss_weights,
                                TOY.aux_alpha, targets=(raw, freq))[1]
        raw[0, unmasked] += 5.0
        freq[0, unmasked] += 5.0
        bumped = pretraining_loss(model, signals, valid, plan, TOY.loss_weights,
                                  TOY.aux_alpha, targets=(raw, freq))[1]
        assert base["time"] == bumped["time"]
        assert base["freq"] == bumped["freq"]

    def test_derived_rng_is_stateless(self):
        a = derived_rng(7, 3, "mask").integers(1 << 30)
        b = derived_rng(7, 3, "mask").integers(1 << 30)
        c = derived_rng(7, 4, "mask").integers(1 << 30)
        d = derived_rng(7, 3, "augment").integers(1 << 30)
        assert a == b and a != c and a != d
