"""Cross-attention contracts and the fused time/frequency block."""

import numpy as np
import pytest

from topomoe import tensor as T
from topomoe.errors import ValidationError
from topomoe.fusion import CrossAttention, CrossDomainFusion
from topomoe.tensor import Tensor


def all_valid(b, length):
    return np.ones((b, length), dtype=bool)


class TestCrossAttention:
    def test_single_position_is_projected_value(self, rng):
        attn = CrossAttention(dim=8, heads=2, rng=rng)
        q = Tensor(rng.normal(size=(1, 1, 8)))
        kv = rng.normal(size=(1, 1, 8)).astype(np.float32)
        out = attn(q, Tensor(kv), all_valid(1, 1)).data
        expected = (kv[0] @ attn.wv.w.data) @ attn.wo.w.data
        np.testing.assert_allclose(out[0], expected, rtol=1e-5)

    def test_identical_values_collapse(self, rng):
        attn = CrossAttention(dim=8, heads=2, rng=rng)
        q = Tensor(rng.normal(size=(1, 5, 8)))
        row = rng.normal(size=8).astype(np.float32)
        kv = Tensor(np.tile(row, (1, 5, 1)))
        out = attn(q, kv, all_valid(1, 5)).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape),
                                   atol=1e-5)

    def test_weights_rows_sum_to_one_over_valid(self, rng):
        attn = CrossAttention(dim=8, heads=4, rng=rng)
        q = Tensor(rng.normal(size=(2, 6, 8)))
        kv = Tensor(rng.normal(size=(2, 6, 8)))
        valid = all_valid(2, 6)
        valid[0, 4:] = False
        w = attn.attention_weights(q, kv, valid).data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        assert np.abs(w[0, :, :, 4:]).max() < 1e-12

    def test_all_masked_keys_rejected(self, rng):
        attn = CrossAttention(dim=8, heads=2, rng=rng)
        q = Tensor(rng.normal(size=(1, 3, 8)))
        kv = Tensor(rng.normal(size=(1, 3, 8)))
        with pytest.raises(ValidationError):
            attn(q, kv, np.zeros((1, 3), dtype=bool))

    def test_masked_key_content_ignored(self, rng):
        attn = CrossAttention(dim=8, heads=2, rng=rng)
        q = Tensor(rng.normal(size=(1, 4, 8)))
        kv0 = rng.normal(size=(1, 4, 8))
        kv1 = kv0.copy()
        kv1[0, 1] = 300.0
        valid = np.array([[True, False, True, True]])
        out0 = attn(q, Tensor(kv0), valid).data
        out1 = attn(q, Tensor(kv1), valid).data
        np.testing.assert_allclose(out0, out1, atol=1e-6)


class TestCrossDomainFusion:
    def make(self, rng, dim=8):
        return CrossDomainFusion(dim=dim, heads=2, ffn_mult=2, rng=rng)

    def test_zero_values_leave_residual_layernorm(self, rng):
        dcm = self.make(rng)
        dcm.time_queries.wv.w.data[:] = 0
        dcm.freq_queries.wv.w.data[:] = 0
        h_t = Tensor(rng.normal(size=(1, 4, 8)))
        h_f = Tensor(rng.normal(size=(1, 4, 8)))
        ht, hf = dcm.enriched(h_t, h_f, all_valid(1, 4))
        np.testing.assert_allclose(ht.data, T.layer_norm(
            h_t, dcm.norm_time.gamma, dcm.norm_time.beta).data, atol=1e-6)
        np.testing.assert_allclose(hf.data, T.layer_norm(
            h_f, dcm.norm_freq.gamma, dcm.norm_freq.beta).data, atol=1e-6)

    def test_mirror_symmetry_under_swapped_parameters(self, rng):
        dcm = self.make(rng)
        mirrored = self.make(np.random.default_rng(0))
        # transplant parameters so the two directions swap roles exactly
        mirrored.time_queries.load_state_dict(dcm.freq_queries.state_dict())
        mirrored.freq_queries.load_state_dict(dcm.time_queries.state_dict())
        mirrored.norm_time.load_state_dict(dcm.norm_freq.state_dict())
        mirrored.norm_freq.load_state_dict(dcm.norm_time.state_dict())
        h_t = Tensor(rng.normal(size=(1, 4, 8)))
        h_f = Tensor(rng.normal(size=(1, 4, 8)))
        valid = all_valid(1, 4)
        ht, hf = dcm.enriched(h_t, h_f, valid)
        mf, mt = mirrored.enriched(h_f, h_t, valid)
        np.testing.assert_allclose(ht.data, mt.data, atol=1e-6)
        np.testing.assert_allclose(hf.data, mf.data, atol=1e-6)

    def test_permutation_equivariance(self, rng):
        dcm = self.make(rng)
        h_t = rng.normal(size=(1, 5, 8))
        h_f = rng.normal(size=(1, 5, 8))
        valid = all_valid(1, 5)
        valid[0, 3] = False
        perm = np.array([4, 2, 0, 3, 1])
        base = dcm(Tensor(h_t), Tensor(h_f), valid).data
        permuted = dcm(Tensor(h_t[:, perm]), Tensor(h_f[:, perm]), valid[:, perm]).data
        np.testing.assert_allclose(base[:, perm], permuted, atol=1e-5)

    def test_output_mixes_globally(self, rng):
        dcm = self.make(rng)
        h_t = rng.normal(size=(1, 5, 8))
        h_f = rng.normal(size=(1, 5, 8))
        bumped = h_f.copy()
        bumped[0, 4] += 1.0
        valid = all_valid(1, 5)
        base = dcm(Tensor(h_t), Tensor(h_f), valid).data
        moved = dcm(Tensor(h_t), Tensor(bumped), valid).data
        assert np.abs(base - moved).max(axis=2).min() > 1e-9  # every row moved

    def test_gradient_through_fusion(self, rng):
        with T.f64_mode():
            dcm = CrossDomainFusion(dim=8, heads=2, ffn_mult=2,
                                    rng=np.random.default_rng(1))
            h_t = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True, name="h_t")
            h_f = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True, name="h_f")
            valid = all_valid(2, 3)
            report = T.grad_check(lambda: T.mean(dcm(h_t, h_f, valid)),
                                  [h_t, h_f], step=1e-5, tol=1e-3,
                                  samples_per_tensor=20)
        assert report.passed, report.max_rel_err
