"""End-to-end pipeline: encode -> select -> aggregate -> fuse -> predict.

Frames are processed in batches.  Variable topology (who is in range, who
carries which modality) is carried by constant 0/1 masks, so one tape covers
a whole batch.  Evaluation runs the handshake and feature requests through
:mod:`comms` frame by frame and only reads what crossed the wire.
"""

from __future__ import annotations

import copy
from types import SimpleNamespace
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import comms
from .autodiff import Tensor, concat, select_mask
from .encoders import GaussianEncoder, GaussianFeature, encode
from .fusion import FusionLayer, aggregate, fuse, predict
from .selection import SelectionPolicy, gumbel_noise, hard_select, policy_logits, soft_select, straight_through
from .world import FrameArrays, ScenarioConfig


@dataclass(frozen=True)
class VariantSpec:
    selection: str  # "pair" | "agent" | "all" | "none"
    weighted: bool
    collaborate: bool = True

    @property
    def handshake(self) -> bool:
        return self.selection in ("pair", "agent")


VARIANTS: dict[str, VariantSpec] = {
    "full": VariantSpec("pair", True),
    "no_select": VariantSpec("all", True),
    "no_bayes": VariantSpec("pair", False),
    "neither": VariantSpec("all", False),
    "single_agent": VariantSpec("none", True, collaborate=False),
    "blind_fusion": VariantSpec("all", False),
    "agent_level": VariantSpec("agent", False),
}


def variant_spec(tag: str) -> VariantSpec:
    try:
        return VARIANTS[tag]
    except KeyError:
        raise ValueError(f"unknown variant {tag!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class ModelConfig:
    hidden: int = 64
    embed_dim: int = 16
    proj_dim: int = 16
    policy_hidden: int = 32
    temperature: float = 1.0
    sentinel_logvar: float = 6.0
    eps: float = 1e-8
    uncertainty_activation: str = "softplus"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Selection:
    z: dict[str, Tensor]  # per modality, (B, A, 1), ego column fixed
    hard: np.ndarray  # (B, A, M) forward mask actually used
    p: dict[str, Tensor]  # soft accept probabilities (B, N) when a policy ran


@dataclass
class ForwardResult:
    logits: Tensor  # (B,)
    features: dict[str, GaussianFeature]
    selection: Selection
    avail: np.ndarray


class CollabModel:
    def __init__(self, scenario: ScenarioConfig, variant: str = "full", seed: int = 0,
                 config: ModelConfig | None = None):
        self.scenario = scenario
        self.variant = variant
        self.spec = variant_spec(variant)
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng([seed, 0x5EED])
        self.modalities = scenario.global_modalities
        self.encoders = {
            m: GaussianEncoder(m, scenario.obs_dims[m], rng, hidden=cfg.hidden, dim=cfg.embed_dim,
                               uncertainty_activation=cfg.uncertainty_activation)
            for m in self.modalities
        }
        self.policy = SelectionPolicy(rng, hidden=cfg.policy_hidden, temperature=cfg.temperature)
        self.fusion = FusionLayer(self.modalities, rng, dim=cfg.embed_dim, proj_dim=cfg.proj_dim)

    def parameters(self) -> list[Tensor]:
        params = [p for m in self.modalities for p in self.encoders[m].parameters()]
        return params + self.policy.parameters() + self.fusion.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def with_variant(self, variant: str) -> "CollabModel":
        other = copy.deepcopy(self)
        other.variant = variant
        other.spec = variant_spec(variant)
        return other

    # -- stages -----------------------------------------------------------

    def availability(self, arrs: FrameArrays) -> np.ndarray:
        avail = arrs.avail.copy()
        if not self.spec.collaborate:
            avail[:, 1:, :] = 0.0
        return avail

    def encode(self, arrs: FrameArrays) -> dict[str, GaussianFeature]:
        return {m: encode(Tensor(arrs.x[m]), self.encoders[m]) for m in self.modalities}

    def _ego_token(self, rho_ego: Tensor, has: np.ndarray) -> Tensor:
        if np.all(has):
            return rho_ego
        return select_mask(has[:, None], rho_ego, Tensor(self.config.sentinel_logvar))

    def _gate(self, logits: Tensor, train: bool, rng):
        if train:
            g = gumbel_noise(rng, logits.shape)
            p = soft_select(logits, g, self.config.temperature)
            return straight_through(hard_select(logits, g), p), p
        return Tensor(hard_select(logits)), None

    def select(self, rho: dict[str, Tensor], arrs: FrameArrays, avail: np.ndarray,
               train: bool = False, rng: np.random.Generator | None = None) -> Selection:
        """Masks per modality.  ``rho[m]`` is ``(B, A)``; column 0 is the ego's token."""
        B, A, M = avail.shape
        kind = self.spec.selection
        z: dict[str, Tensor] = {}
        probs: dict[str, Tensor] = {}
        hard = np.zeros((B, A, M))
        if kind in ("all", "none") or A == 1:
            for k, m in enumerate(self.modalities):
                z[m] = Tensor(avail[:, :, k:k + 1])
                hard[:, :, k] = avail[:, :, k]
            return Selection(z, hard, probs)

        if kind == "pair":
            for k, m in enumerate(self.modalities):
                ego = self._ego_token(rho[m][:, 0:1], arrs.carries[:, 0, k] > 0)
                logits = policy_logits(ego, rho[m][:, 1:], self.policy)
                zn, p = self._gate(logits, train, rng)
                probs[m] = p
                zn = zn * avail[:, 1:, k]
                z[m] = concat([Tensor(avail[:, 0:1, k]), zn], axis=1).reshape(B, A, 1)
                hard[:, :, k] = z[m].data[:, :, 0]
            return Selection(z, hard, probs)

        # agent level: one token per agent (mean over carried modalities), one gate per agent
        carries = arrs.carries
        stacked = concat([rho[m].reshape(B, A, 1) for m in self.modalities], axis=-1)
        counts = np.maximum(carries.sum(axis=-1), 1.0)
        agent_rho = (stacked * carries).sum(axis=-1) / counts
        logits = policy_logits(agent_rho[:, 0:1], agent_rho[:, 1:], self.policy)
        zn, p = self._gate(logits, train, rng)
        probs["agent"] = p
        for k, m in enumerate(self.modalities):
            zk = zn * avail[:, 1:, k]
            z[m] = concat([Tensor(avail[:, 0:1, k]), zk], axis=1).reshape(B, A, 1)
            hard[:, :, k] = z[m].data[:, :, 0]
        return Selection(z, hard, probs)

    def fuse_predict(self, f: dict[str, Tensor], u: dict[str, Tensor], z: dict[str, Tensor]) -> Tensor:
        slots = [aggregate(f[m], u[m], z[m], self.config.eps, self.spec.weighted) for m in self.modalities]
        return predict(fuse(slots, self.fusion), self.fusion)

    # -- passes -----------------------------------------------------------

    def forward(self, arrs: FrameArrays, train: bool = False,
                rng: np.random.Generator | None = None) -> ForwardResult:
        """Direct (no wire) pass; used for training."""
        avail = self.availability(arrs)
        feats = self.encode(arrs)
        sel = self.select({m: feats[m].rho for m in self.modalities}, arrs, avail, train, rng)
        logits = self.fuse_predict({m: feats[m].f for m in self.modalities},
                                   {m: feats[m].u for m in self.modalities}, sel.z)
        return ForwardResult(logits, feats, sel, avail)

    def infer(self, arrs: FrameArrays, request_overhead: bool = False,
              tamper=None) -> tuple[np.ndarray, list[comms.FrameCommLog], ForwardResult]:
        """Evaluation pass with the two-round protocol between agents.

        Returns ``(logits, per-frame comm logs, result)``.  ``tamper(b, i, m, z, f, u)``,
        if given, rewrites the sender-side payload of every offered pair before
        the request round.
        """
        mods = self.modalities
        D = self.config.embed_dim
        avail = self.availability(arrs)
        feats = self.encode(arrs)
        B, A, M = avail.shape
        f_loc = {m: feats[m].f.data for m in mods}
        u_loc = {m: feats[m].u.data for m in mods}
        rho_loc = {m: feats[m].rho.data for m in mods}
        logs = [comms.FrameCommLog() for _ in range(B)]

        # round 1: handshake; the ego only sees tokens that were on the wire
        rho_seen = {m: np.zeros((B, A)) for m in mods}
        for m in mods:
            rho_seen[m][:, 0] = rho_loc[m][:, 0]
        if self.spec.handshake:
            for b in range(B):
                nbrs = [i for i in range(1, A) if avail[b, i].any()]
                offered = {(i, m): SimpleNamespace(f=f_loc[m][b, i], u=u_loc[m][b, i], rho=rho_loc[m][b, i])
                           for i in nbrs for k, m in enumerate(mods) if avail[b, i, k]}
                wire, nbytes = comms.handshake(nbrs, offered, mods)
                for (i, m), r in comms.receive_meta(wire, mods).items():
                    rho_seen[m][b, i] = r
                logs[b].meta_bytes = nbytes
        sel = self.select({m: Tensor(rho_seen[m]) for m in mods}, arrs, avail, train=False)

        # round 2: requested features
        f_seen = {m: np.zeros((B, A, D)) for m in mods}
        u_seen = {m: np.zeros((B, A, D)) for m in mods}
        for m in mods:
            f_seen[m][:, 0] = f_loc[m][:, 0]
            u_seen[m][:, 0] = u_loc[m][:, 0]
        for b in range(B):
            decisions = {(i, m): int(sel.hard[b, i, k]) for i in range(1, A)
                         for k, m in enumerate(mods) if avail[b, i, k]}
            # sender-side outbox holds every offered pair; only accepted ones are read
            outbox = {}
            for (i, m), zval in decisions.items():
                fu = (f_loc[m][b, i], u_loc[m][b, i])
                outbox[(i, m)] = tamper(b, i, m, zval, *fu) if tamper else fu
            wire, nbytes = comms.request_features(decisions, outbox, mods, D)
            for (i, m), pkt in comms.receive_features(wire, mods, D).items():
                f_seen[m][b, i] = pkt.f
                u_seen[m][b, i] = pkt.u
            logs[b].feature_bytes = nbytes
            logs[b].accepted_pairs = len(wire)
            logs[b].offered_pairs = len(decisions)
            if request_overhead and self.spec.handshake:
                logs[b].request_bytes = comms.request_bytes(len(decisions))

        logits = self.fuse_predict({m: Tensor(f_seen[m]) for m in mods},
                                   {m: Tensor(u_seen[m]) for m in mods}, sel.z)
        return logits.data, logs, ForwardResult(logits, feats, sel, avail)
