"""Linear probing and full fine-tuning on top of pretrained features.

Probing freezes everything: features are masked-mean pooled backbone
outputs, and only a linear classifier is trained on them.  Fine-tuning
re-opens the whole network with a fresh classification head.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import EegBatch
from .errors import ValidationError
from .metrics import MetricReport, report_from_scores
from .model import Model
from .nn import Linear
from .pretraining import AdamW
from .tensor import Tensor


def stratified_split(labels: np.ndarray, test_frac: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle and split; every class must land on both sides."""
    labels = np.asarray(labels)
    train_parts, test_parts = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        n_test = int(round(test_frac * idx.size))
        if n_test < 1 or n_test >= idx.size:
            raise ValidationError(
                f"degenerate split: class {cls} has {idx.size} samples, "
                f"test fraction {test_frac} leaves one side empty")
        test_parts.append(idx[:n_test])
        train_parts.append(idx[n_test:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


class LinearProbe:
    """Single linear layer trained with cross-entropy on frozen features.

    Features are standardised with training-split statistics before the
    classifier sees them.
    """

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        self.head = Linear(dim, n_classes, rng)
        self.mu = np.zeros(dim)
        self.sd = np.ones(dim)

    def _transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mu) / self.sd

    def fit(self, features: np.ndarray, labels: np.ndarray, epochs: int, lr: float):
        self.mu = features.mean(axis=0)
        self.sd = np.sqrt(np.maximum(features.var(axis=0), 1e-12))
        x = self._transform(features)
        opt = AdamW(list(self.head.named_parameters()), lr=lr, wd=0.0, clip=0.0)
        for _ in range(epochs):
            self.head.zero_grad()
            loss = T.cross_entropy(self.head(Tensor(x)), labels)
            T.backward(loss)
            opt.step()
        return self

    def scores(self, features: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits = self.head(Tensor(self._transform(features))).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def probe(features: np.ndarray, labels: np.ndarray,
          split: tuple[np.ndarray, np.ndarray], cfg: ModelConfig,
          seed: int = 0) -> MetricReport:
    """Train the probe on the train split, report metrics on the test split."""
    if not np.isfinite(features).all():
        raise ValidationError("probe features contain non-finite values")
    train_idx, test_idx = split
    n_classes = int(labels.max()) + 1
    head = LinearProbe(features.shape[1], n_classes, np.random.default_rng(seed))
    head.fit(features[train_idx], labels[train_idx], cfg.probe_epochs, cfg.probe_lr)
    return report_from_scores(labels[test_idx], head.scores(features[test_idx]))


def probe_model(model: Model, batch: EegBatch, cfg: ModelConfig,
                seed: int = 0) -> MetricReport:
    if batch.labels is None:
        raise ValidationError("probing needs a labelled dataset")
    features = model.extract_features(batch.flat_signals(), batch.flat_valid())
    split = stratified_split(batch.labels, cfg.probe_test_frac,
                             np.random.default_rng(seed))
    return probe(features, batch.labels, split, cfg, seed=seed)


def finetune_model(model: Model, batch: EegBatch, cfg: ModelConfig,
                   seed: int = 0) -> tuple[MetricReport, Linear]:
    """Unfreeze everything, add a classification head, train on the train
    split with the configured training hyperparameters."""
    if batch.labels is None:
        raise ValidationError("fine-tuning needs a labelled dataset")
    rng = np.random.default_rng(seed)
    n_classes = int(batch.labels.max()) + 1
    head = Linear(cfg.dim, n_classes, rng)
    split = stratified_split(batch.labels, cfg.probe_test_frac,
                             np.random.default_rng(seed))
    train_idx, test_idx = split
    train = batch.select(train_idx)
    named = list(model.named_parameters()) + [
        (f"head.{n}", p) for n, p in head.named_parameters()]
    opt = AdamW(named, lr=cfg.probe_lr, wd=cfg.wd, clip=cfg.clip)
    signals, valid = train.flat_signals(), train.flat_valid()
    for _ in range(cfg.epochs):
        model.zero_grad()
        head.zero_grad()
        pooled = model.pooled_features_tensor(signals, valid)
        loss = T.cross_entropy(head(pooled), train.labels)
        T.backward(loss)
        opt.step()
    test = batch.select(test_idx)
    pooled = model.pooled_features_tensor(test.flat_signals(), test.flat_valid())
    with T.no_grad():
        logits = head(pooled).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return report_from_scores(test.labels, e / e.sum(axis=1, keepdims=True)), head


def export_features(model: Model, batch: EegBatch) -> str:
    """CSV text of pooled features (plus labels when present)."""
    features = model.extract_features(batch.flat_signals(), batch.flat_valid())
    cols = [f"f{i}" for i in range(features.shape[1])]
    if batch.labels is not None:
        cols.append("label")
    rows = [",".join(cols)]
    for i in range(features.shape[0]):
        cells = [repr(float(v)) for v in features[i]]
        if batch.labels is not None:
            cells.append(str(int(batch.labels[i])))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
