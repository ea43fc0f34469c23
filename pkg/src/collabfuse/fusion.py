"""Precision-weighted aggregation per modality, projection/concat, prediction head.

Within one modality the accepted providers are combined coordinate-wise as

    f_agg = sum_i Z_i * w_i * f_i / (sum_i Z_i * w_i + eps),   w_i = exp(-u_i)

which is the inverse-variance (minimum-variance) combination when ``u`` is a
log-variance.  With ``weighted=False`` every ``w_i`` is 1 (plain masked mean).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, concat, select_mask
from .nn import MLP, Linear

DEFAULT_EPS = 1e-8


def precision(u: Tensor) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(u)
    return (-u).exp()


def aggregate(f: Tensor, u: Tensor, z, eps: float = DEFAULT_EPS,
              weighted: bool = True) -> tuple[Tensor, np.ndarray]:
    """Batched aggregation over the provider axis (-2).

    ``f`` and ``u`` have shape ``(..., A, D)``; ``z`` is ``(..., A, 1)`` (Tensor or
    array).  Returns ``(f_agg (..., D), empty (...))`` where ``empty`` marks pools
    whose forward mask is all zero.
    """
    if f.shape != u.shape:
        raise ShapeError(f"aggregate: feature shape {f.shape} != uncertainty shape {u.shape}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    if weighted:
        w = z * precision(u)
    else:
        w = z * np.ones(f.shape)
    num = (w * f).sum(axis=-2)
    den = w.sum(axis=-2) + eps
    empty = ~np.any(z.data != 0, axis=(-2, -1))
    return num / den, empty


def aggregate_modality(entries: Sequence[tuple], eps: float = DEFAULT_EPS,
                       weighted: bool = True) -> Tensor | None:
    """Aggregate a list of ``(f, u, z)`` providers for one modality.

    Returns ``None`` when there is no provider or every forward ``z`` is 0; the
    caller substitutes the learned missing-modality vector.
    """
    if not entries:
        return None
    fs, us, zs = [], [], []
    dim = None
    for f, u, z in entries:
        f = f if isinstance(f, Tensor) else Tensor(f)
        u = u if isinstance(u, Tensor) else Tensor(u)
        z = z if isinstance(z, Tensor) else Tensor(z)
        if f.data.ndim != 1 or f.shape != u.shape or (dim is not None and f.shape[0] != dim):
            raise ShapeError(
                f"aggregate_modality: provider shapes f={f.shape} u={u.shape}, expected ({dim},)"
            )
        dim = f.shape[0]
        fs.append(f.reshape(1, dim))
        us.append(u.reshape(1, dim))
        zs.append(z.reshape(1, 1))
    f_agg, empty = aggregate(concat(fs, axis=0), concat(us, axis=0), concat(zs, axis=0), eps, weighted)
    return None if bool(empty) else f_agg


class FusionLayer:
    def __init__(self, modalities: Sequence[str], rng: np.random.Generator, dim: int = 16,
                 proj_dim: int = 16, hidden: Sequence[int] = (64, 32)):
        self.modalities = tuple(modalities)
        self.dim = dim
        self.proj_dim = proj_dim
        self.projections = {m: Linear(dim, proj_dim, rng, name=f"fusion.proj.{m}") for m in self.modalities}
        self.defaults = {
            m: Tensor(np.zeros(proj_dim), requires_grad=True, name=f"fusion.default.{m}")
            for m in self.modalities
        }
        self.head = MLP([len(self.modalities) * proj_dim, *hidden, 1], rng, name="fusion.head")

    def parameters(self) -> list[Tensor]:
        params = []
        for m in self.modalities:
            params += self.projections[m].parameters()
            params.append(self.defaults[m])
        return params + self.head.parameters()


def fuse(aggregates, layer: FusionLayer) -> Tensor:
    """Project each modality's aggregate and concatenate in modality order.

    ``aggregates`` holds one slot per modality: ``None`` (no provider), a Tensor
    ``f_agg``, or a pair ``(f_agg, empty_mask)`` for batched input.
    """
    if len(aggregates) != len(layer.modalities):
        raise ShapeError(f"fuse: expected {len(layer.modalities)} slots, got {len(aggregates)}")
    batch_shape = None
    for slot in aggregates:
        if slot is not None:
            t = slot[0] if isinstance(slot, tuple) else slot
            batch_shape = t.shape[:-1]
            break
    parts = []
    for m, slot in zip(layer.modalities, aggregates):
        default = layer.defaults[m]
        if slot is None:
            parts.append(default if not batch_shape else default + np.zeros(batch_shape + (layer.proj_dim,)))
            continue
        f_agg, empty = slot if isinstance(slot, tuple) else (slot, np.zeros(slot.shape[:-1], dtype=bool))
        projected = layer.projections[m](f_agg)
        if np.any(empty):
            projected = select_mask(np.asarray(empty)[..., None], default, projected)
        parts.append(projected)
    return concat(parts, axis=-1)


def predict(F: Tensor, layer: FusionLayer) -> Tensor:
    expected = len(layer.modalities) * layer.proj_dim
    if F.shape[-1:] != (expected,):
        raise ShapeError(f"predict: head expects last dim {expected}, got shape {F.shape}")
    return layer.head(F)[..., 0]
