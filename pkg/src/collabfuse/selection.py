"""Uncertainty-guided accept/reject decisions per (collaborator, modality).

A small policy maps the ego's and a collaborator's uncertainty tokens to two
logits (index 0 = Reject, 1 = Accept).  During training the decision is the
Gumbel-max sample and the training mask is the straight-through surrogate
``stopgrad(Z_hard - p) + p``; at evaluation the noise is off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, stopgrad
from .nn import MLP

REJECT, ACCEPT = 0, 1


class SelectionPolicy:
    def __init__(self, rng: np.random.Generator, hidden: int = 32, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.mlp = MLP([2, hidden, 2], rng, name="policy")
        self.temperature = temperature

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()


def policy_logits(rho_ego, rho_nbr, policy: SelectionPolicy) -> Tensor:
    """Logits of shape ``S + (2,)`` for tokens of (broadcast-compatible) shape ``S``."""
    rho_ego = rho_ego if isinstance(rho_ego, Tensor) else Tensor(rho_ego)
    rho_nbr = rho_nbr if isinstance(rho_nbr, Tensor) else Tensor(rho_nbr)
    shape = np.broadcast_shapes(rho_ego.shape, rho_nbr.shape)
    if rho_ego.shape != shape:
        rho_ego = rho_ego + np.zeros(shape)
    if rho_nbr.shape != shape:
        rho_nbr = rho_nbr + np.zeros(shape)
    pair = concat([rho_ego.reshape(shape + (1,)), rho_nbr.reshape(shape + (1,))], axis=-1)
    return policy.mlp(pair)


def gumbel_noise(rng: np.random.Generator, size=None):
    """Standard Gumbel draws ``-log(-log U)`` with ``U`` in the open unit interval."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=size)
    return -np.log(-np.log(u))


def soft_select(logits: Tensor, g, temperature: float = 1.0) -> Tensor:
    """Accept probability of the noisy tempered softmax."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    noisy = (logits + np.asarray(g, dtype=np.float64)) * (1.0 / temperature)
    return noisy.softmax()[..., ACCEPT]


def hard_select(logits, g=None) -> np.ndarray:
    """Gumbel-max decision; ties go to Reject."""
    l = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if g is not None:
        l = l + np.asarray(g, dtype=np.float64)
    return (l[..., ACCEPT] > l[..., REJECT]).astype(np.float64)


def straight_through(z_hard, p: Tensor) -> Tensor:
    """Forward value ``z_hard``; gradient identical to that of ``p``."""
    z = Tensor(np.broadcast_to(np.asarray(z_hard, dtype=np.float64), p.shape))
    return stopgrad(z - p) + p


@dataclass
class Decision:
    logits: np.ndarray
    gumbel: np.ndarray
    p: float
    z: int


@dataclass
class DecisionMatrix:
    """Per-frame decisions keyed by ``(collaborator, modality)``."""

    entries: dict[tuple[int, str], Decision] = field(default_factory=dict)

    def accepted(self) -> list[tuple[int, str]]:
        return [k for k, d in self.entries.items() if d.z == 1]

    def z(self, agent: int, modality: str) -> int:
        d = self.entries.get((agent, modality))
        return 0 if d is None else d.z


def decide_frame(ego_tokens: dict[str, float], nbr_tokens: dict[tuple[int, str], float],
                 policy: SelectionPolicy, rng: np.random.Generator | None = None,
                 sentinel: float = 6.0) -> DecisionMatrix:
    """Decisions for one frame from the ego's tokens and the received ones.

    Pairs are evaluated independently, so the result does not depend on the
    order of ``nbr_tokens``.  With ``rng=None`` no noise is added.
    """
    dm = DecisionMatrix()
    for (i, m), rho_i in nbr_tokens.items():
        rho_0 = ego_tokens.get(m, sentinel)
        l = policy_logits(Tensor(rho_0), Tensor(rho_i), policy).data
        g = np.zeros(2) if rng is None else gumbel_noise(rng, 2)
        noisy = (l + g) / policy.temperature
        e = np.exp(noisy - noisy.max())
        dm.entries[(i, m)] = Decision(l, g, float(e[ACCEPT] / e.sum()), int(hard_select(l, g)))
    return dm
