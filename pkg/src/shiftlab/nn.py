"""Parameter containers for the backbone and adapters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import Tensor, layer_norm, matmul, parameter


class Module:
    """Any ``Tensor`` attribute is a parameter; nested modules are walked in
    attribute-insertion order, which makes parameter names stable."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False,
                 std: float | None = None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        w = np.zeros((d_in, d_out)) if zero else normal(rng, (d_in, d_out), std)
        self.weight = parameter(w)
        if bias:
            self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        bias = getattr(self, "bias", None)
        return y + bias if bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)
