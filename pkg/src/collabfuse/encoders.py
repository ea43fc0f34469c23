"""Per-modality Gaussian encoders: observation -> (feature, log-variance)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .nn import Linear


@dataclass
class GaussianFeature:
    f: Tensor
    u: Tensor  # log-variance, same shape as f
    rho: Tensor  # mean of u over the feature axis


class GaussianEncoder:
    """Shared tanh trunk with a feature head and a log-variance head.

    One encoder exists per global modality and is shared by every agent.  The
    log-variance passes through softplus by default, so ``u >= 0`` and the
    implied precision ``exp(-u)`` lies in (0, 1].
    """

    def __init__(self, modality: str, obs_dim: int, rng: np.random.Generator,
                 hidden: int = 64, dim: int = 16, uncertainty_activation: str = "softplus"):
        if uncertainty_activation not in ("softplus", "none"):
            raise ValueError(f"unknown uncertainty activation {uncertainty_activation!r}")
        self.modality = modality
        self.uncertainty_activation = uncertainty_activation
        self.obs_dim = obs_dim
        self.dim = dim
        self.trunk = [
            Linear(obs_dim, hidden, rng, name=f"enc.{modality}.trunk.0"),
            Linear(hidden, hidden, rng, name=f"enc.{modality}.trunk.1"),
        ]
        self.feature_head = Linear(hidden, dim, rng, name=f"enc.{modality}.feature")
        self.uncertainty_head = Linear(hidden, dim, rng, name=f"enc.{modality}.uncertainty")

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.trunk for p in layer.parameters()]
        return params + self.feature_head.parameters() + self.uncertainty_head.parameters()

    def __call__(self, x) -> GaussianFeature:
        return encode(x, self)


def encode(x, enc: GaussianEncoder) -> GaussianFeature:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1:] != (enc.obs_dim,):
        raise ShapeError(
            f"encoder for {enc.modality!r} expects last dim {enc.obs_dim}, got shape {x.shape}"
        )
    h = x
    for layer in enc.trunk:
        h = layer(h).tanh()
    f = enc.feature_head(h)
    u = enc.uncertainty_head(h)
    if enc.uncertainty_activation == "softplus":
        # u >= 0 keeps the +u regularizer bounded below; "none" is unbounded
        u = u.softplus()
    return GaussianFeature(f, u, pool_uncertainty(u))


def pool_uncertainty(u: Tensor) -> Tensor:
    """Global average pool of a log-variance map over its last axis."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    if u.data.ndim == 0 or u.shape[-1] == 0:
        raise ShapeError(f"pool_uncertainty needs a non-empty map, got shape {u.shape}")
    return u.mean(axis=-1)
