"""Feature extraction, stratified splitting, probing, and fine-tuning."""

import numpy as np
import pytest

from topomoe.config import ModelConfig
from topomoe.data import SyntheticSpec, gen_synthetic
from topomoe.errors import ValidationError
from topomoe.metrics import report_from_scores
from topomoe.model import build_model
from topomoe.probe import (LinearProbe, export_features, finetune_model, probe,
                           probe_model, stratified_split)

TOY = ModelConfig(dim=8, depth=1, heads=2, experts=2, top_k=1, ffn_mult=2,
                  time_steps=64, regions=2, electrodes_per_region=2,
                  dcm_heads=2, dcm_ffn_mult=1, max_drift=2,
                  probe_epochs=120, probe_lr=5e-2)


class TestFeatureExtraction:
    def test_single_valid_position_is_that_row(self, rng):
        model = build_model(TOY, seed=0)
        signals = rng.normal(size=(1, 4, 64))
        valid = np.array([[False, True, False, False]])
        feats = model.extract_features(signals, valid)
        from topomoe import tensor as T
        with T.no_grad():
            h_out, _ = model.forward_features(signals, valid)
        np.testing.assert_allclose(feats[0], h_out.data[0, 1], rtol=1e-6)

    def test_duplicated_sample_gives_identical_rows(self, rng):
        model = build_model(TOY, seed=0)
        one = rng.normal(size=(1, 4, 64))
        signals = np.concatenate([one, one], axis=0)
        valid = np.ones((2, 4), dtype=bool)
        feats = model.extract_features(signals, valid)
        np.testing.assert_allclose(feats[0], feats[1], atol=1e-5)

    def test_parameters_untouched(self, rng):
        model = build_model(TOY, seed=0)
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        model.extract_features(rng.normal(size=(2, 4, 64)),
                               np.ones((2, 4), dtype=bool))
        for n, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n])
            assert p.grad is None

    def test_electrode_permutation_changes_features(self, rng):
        model = build_model(TOY, seed=0)
        signals = rng.normal(size=(1, 4, 64))
        valid = np.ones((1, 4), dtype=bool)
        base = model.extract_features(signals, valid)
        perm = np.array([3, 1, 0, 2])
        permuted = model.extract_features(signals[:, perm], valid)
        assert np.abs(base - permuted).max() > 1e-4


class TestStratifiedSplit:
    def test_partitions_and_stratifies(self, rng):
        labels = np.repeat([0, 1, 2], 20)
        train, test = stratified_split(labels, 0.25, rng)
        assert len(set(train) & set(test)) == 0
        assert len(train) + len(test) == 60
        for cls in range(3):
            assert (labels[test] == cls).sum() == 5

    def test_degenerate_split_rejected(self, rng):
        with pytest.raises(ValidationError):
            stratified_split(np.array([0, 0, 0, 1]), 0.1, rng)


class TestProbe:
    def test_separable_gaussians_high_accuracy(self, rng):
        n, d = 120, 8
        labels = np.repeat([0, 1], n // 2)
        features = rng.normal(size=(n, d)) + 4.0 * labels[:, None]
        split = stratified_split(labels, 0.25, rng)
        report = probe(features, labels, split, TOY, seed=0)
        assert report.metrics["balanced_accuracy"] > 0.95

    def test_shuffled_labels_near_chance(self, rng):
        """Permutation null: accuracy within 3 sigma of 1/C."""
        n, d, c = 400, 6, 2
        features = rng.normal(size=(n, d))
        accs = []
        for trial in range(5):
            labels = rng.permutation(np.repeat(np.arange(c), n // c))
            split = stratified_split(labels, 0.25, rng)
            report = probe(features, labels, split, TOY, seed=trial)
            accs.append(report.metrics["balanced_accuracy"])
        n_test = n // 4
        sigma = np.sqrt(0.25 / n_test)
        assert abs(np.mean(accs) - 0.5) < 3 * sigma / np.sqrt(len(accs)) + 0.02

    def test_metric_set_switches_with_class_count(self, rng):
        n, d = 90, 6
        labels3 = np.repeat([0, 1, 2], n // 3)
        feats = rng.normal(size=(n, d)) + 2.0 * labels3[:, None]
        split = stratified_split(labels3, 0.25, rng)
        report = probe(feats, labels3, split, TOY, seed=0)
        assert report.task == "multiclass"
        assert "cohens_kappa" in report.metrics

    def test_probe_model_end_to_end(self, rng):
        model = build_model(TOY, seed=0)
        batch = gen_synthetic(SyntheticSpec(
            per_class=12, snr=8.0, seed=4, regions=2, per_region=2,
            time_steps=64, band_profile=("alpha", "beta"),
            region_profile=("frontal", "central")))
        report = probe_model(model, batch, TOY, seed=0)
        assert report.task == "binary"
        assert 0.0 <= report.metrics["balanced_accuracy"] <= 1.0


class TestFinetune:
    def test_finetune_runs_and_reports(self, rng):
        cfg = TOY.replace(epochs=10)
        model = build_model(cfg, seed=0)
        batch = gen_synthetic(SyntheticSpec(
            per_class=12, snr=8.0, seed=4, regions=2, per_region=2,
            time_steps=64, band_profile=("alpha", "beta"),
            region_profile=("frontal", "central")))
        report, head = finetune_model(model, batch, cfg, seed=0)
        assert set(report.metrics) == {"balanced_accuracy", "auroc", "auc_pr"}
        assert head.w.shape == (cfg.dim, 2)

    def test_finetune_tracks_probe_within_noise(self, rng):
        """Paired comparison on one pretrained toy model: fine-tuning should
        not fall meaningfully below the frozen-feature probe."""
        from topomoe.pretraining import AdamW, train_step

        cfg = TOY.replace(epochs=15, lr=3e-3, warmup_epochs=1)
        batch = gen_synthetic(SyntheticSpec(
            per_class=16, snr=6.0, seed=7, regions=2, per_region=2,
            time_steps=64, band_profile=("alpha", "beta"),
            region_profile=("frontal", "central")))
        model = build_model(cfg, seed=0)
        opt = AdamW(list(model.named_parameters()), lr=cfg.lr, wd=cfg.wd,
                    clip=cfg.clip, warmup_steps=4)
        for step in range(30):
            idx = np.random.default_rng(step).permutation(batch.batch)[:8]
            train_step(model, opt, batch.select(idx), cfg, step)
        probe_acc = probe_model(model, batch, cfg, seed=0).metrics["balanced_accuracy"]
        ft_report, _ = finetune_model(model, batch, cfg, seed=0)
        ft_acc = ft_report.metrics["balanced_accuracy"]
        assert ft_acc >= probe_acc - 0.15

    def test_finetune_moves_backbone_weights(self, rng):
        cfg = TOY.replace(epochs=3)
        model = build_model(cfg, seed=0)
        before = model.hfpm.raw_enc.proj.w.data.copy()
        batch = gen_synthetic(SyntheticSpec(
            per_class=8, snr=8.0, seed=4, regions=2, per_region=2,
            time_steps=64, band_profile=("alpha", "beta"),
            region_profile=("frontal", "central")))
        finetune_model(model, batch, cfg, seed=0)
        assert np.abs(model.hfpm.raw_enc.proj.w.data - before).max() > 0


class TestExportFeatures:
    def test_csv_shape(self, rng):
        model = build_model(TOY, seed=0)
        batch = gen_synthetic(SyntheticSpec(
            per_class=3, seed=1, regions=2, per_region=2, time_steps=64,
            region_profile=("frontal", "central")))
        text = export_features(model, batch)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join([f"f{i}" for i in range(TOY.dim)] + ["label"])
        assert len(lines) == 1 + batch.batch
        assert len(lines[1].split(",")) == TOY.dim + 1
