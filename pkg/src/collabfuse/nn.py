"""Linear layers, tanh MLPs and an Adam optimizer on top of :mod:`autodiff`."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "linear"):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of linear layers with tanh between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{k}") for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        return self.layers[-1](x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def iter_named(params: Sequence[Tensor]) -> Iterator[tuple[str, Tensor]]:
    for p in params:
        yield p.name or "", p
