"""Parameter-holding layers built on the tensor op suite.

A Module is just a container whose attributes (parameters, child modules,
lists of modules) are discovered in insertion order, which keeps parameter
naming (and therefore checkpoints and optimizer state) deterministic.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValidationError(
                f"state dict mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValidationError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.asarray(arr, dtype=T.default_dtype())
            p.grad = None


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        scale = np.sqrt(2.0 / (d_in + d_out))
        self.w = parameter(rng.normal(0.0, scale, size=(d_in, d_out)), "w")
        self.b = parameter(np.zeros(d_out), "b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        self.stride = stride
        scale = np.sqrt(2.0 / (c_in * kernel))
        self.w = parameter(rng.normal(0.0, scale, size=(c_out, c_in, kernel)), "w")
        self.b = parameter(np.zeros(c_out), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.w, self.b, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(d), "gamma")
        self.beta = parameter(np.zeros(d), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class BatchNorm1d(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(c), "gamma")
        self.beta = parameter(np.zeros(c), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, eps=self.eps)


class EmbeddingTable(Module):
    def __init__(self, rows: int, d: int, rng: np.random.Generator, scale: float = 0.02):
        self.table = parameter(rng.normal(0.0, scale, size=(rows, d)), "table")

    def __call__(self, indices: np.ndarray) -> Tensor:
        return T.embedding(self.table, indices)
