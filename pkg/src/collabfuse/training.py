"""Loss, optimizer loop, cosine schedule, metrics and variant construction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .comms import FrameCommLog, package_size
from .model import VARIANTS, CollabModel, ForwardResult, ModelConfig, variant_spec
from .nn import Adam
from .world import FrameArrays

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    reg_coeff: float = 0.003
    variant: str = "full"
    train_frames: int = 8000
    test_frames: int = 4000
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.reg_coeff < 0:
            raise ValueError("reg_coeff must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        variant_spec(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    task: Tensor
    reg: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.task.item(), self.reg.item(), self.total.item()


def bce_with_logits(logit: Tensor, label) -> Tensor:
    """Elementwise binary cross-entropy on a logit, overflow-safe."""
    return logit.softplus() - logit * np.asarray(label, dtype=np.float64)


def loss(logit: Tensor, label, u_list: Sequence[Tensor], reg_coeff: float = 1.0) -> LossBreakdown:
    """Single-frame loss: BCE task term plus the sum of mean log-variances."""
    task = bce_with_logits(logit, label).mean()
    if u_list:
        reg = u_list[0].mean()
        for u in u_list[1:]:
            reg = reg + u.mean()
    else:
        reg = Tensor(0.0)
    return LossBreakdown(task, reg, task + reg * reg_coeff)


def batch_loss(result: ForwardResult, labels: np.ndarray, reg_coeff: float) -> LossBreakdown:
    """Batch mean of the per-frame loss; the regularizer covers participating observations."""
    task = bce_with_logits(result.logits, labels).mean()
    per_frame = None
    for k, feat in enumerate(result.features.values()):
        term = (feat.rho * result.avail[:, :, k]).sum(axis=1)
        per_frame = term if per_frame is None else per_frame + term
    reg = per_frame.mean()
    return LossBreakdown(task, reg, task + reg * reg_coeff)


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + math.cos(math.pi * epoch / config.epochs))


def make_optimizer(model: CollabModel, config: TrainConfig) -> Adam:
    return Adam(model.parameters(), betas=(config.beta1, config.beta2), eps=config.adam_eps)


def train_step(batch: FrameArrays, model: CollabModel, opt: Adam, lr: float,
               rng: np.random.Generator, config: TrainConfig, frame_ids=None) -> LossBreakdown:
    opt.zero_grad()
    with Tape() as tape:
        result = model.forward(batch, train=True, rng=rng)
        parts = batch_loss(result, batch.labels, config.reg_coeff)
        if not np.isfinite(parts.total.item()):
            per_frame = bce_with_logits(result.logits, batch.labels).data
            bad = int(np.flatnonzero(~np.isfinite(per_frame))[0]) if not np.all(np.isfinite(per_frame)) else 0
            where = frame_ids[bad] if frame_ids is not None else bad
            raise TrainingDiverged(f"non-finite loss at frame {where} (task={parts.task.item()}, "
                                   f"reg={parts.reg.item()})")
        tape.backward(parts.total)
    opt.step(lr)
    return parts


@dataclass
class EpochLog:
    epoch: int
    lr: float
    task: float
    reg: float
    total: float


def fit(model: CollabModel, data: FrameArrays, config: TrainConfig, seed: int) -> list[EpochLog]:
    """Train in place; returns per-epoch mean loss terms."""
    rng = np.random.default_rng([seed, 0x7EA1])
    opt = make_optimizer(model, config)
    history = []
    n = len(data)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        order = rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            parts = train_step(data.take(idx), model, opt, lr, rng, config, frame_ids=idx)
            sums += parts.values()
            steps += 1
        t, r, tot = sums / steps
        history.append(EpochLog(epoch, lr, t, r, tot))
        log.debug("epoch %d lr %.2e task %.4f reg %.4f total %.4f", epoch, lr, t, r, tot)
    return history


@dataclass
class Metrics:
    adr: float | None
    eir: float
    ps_kb: float
    n_frames: int
    n_hazard: int


def detection_rates(labels, preds) -> tuple[float | None, float]:
    labels = np.asarray(labels).astype(int)
    preds = np.asarray(preds).astype(int)
    pos = labels == 1
    adr = float(np.mean(preds[pos] == 1)) if pos.any() else None
    eir = float(np.mean(preds == labels))
    return adr, eir


def evaluate(model: CollabModel, data: FrameArrays, request_overhead: bool = False,
             return_logs: bool = False):
    """Evaluation with noise off; the ego predicts brake when sigmoid(logit) >= 0.5."""
    logits, logs, _ = model.infer(data, request_overhead=request_overhead)
    preds = (logits >= 0.0).astype(int)
    adr, eir = detection_rates(data.labels, preds)
    metrics = Metrics(adr, eir, package_size(logs), len(data), int(np.sum(data.labels == 1)))
    return (metrics, logs) if return_logs else metrics


@dataclass
class Summary:
    mean: float
    std: float
    n: int


def summarize(values: Sequence[float | None]) -> Summary:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return Summary(float("nan"), float("nan"), 0)
    return Summary(float(vals.mean()), float(vals.std()), int(vals.size))


def summarize_metrics(metrics: Sequence[Metrics]) -> dict[str, Summary]:
    return {
        "adr": summarize([m.adr for m in metrics]),
        "eir": summarize([m.eir for m in metrics]),
        "ps_kb": summarize([m.ps_kb for m in metrics]),
    }


def make_variant(tag: str, model: CollabModel) -> CollabModel:
    """Copy of ``model`` (weights included) running as variant ``tag``."""
    variant_spec(tag)
    return model.with_variant(tag)


def uncertainty_separation(model: CollabModel, data: FrameArrays) -> dict[str, tuple[float, float]]:
    """Mean token on corrupted vs clean observations, per modality (uses hidden metadata)."""
    feats = model.encode(data)
    out = {}
    for k, m in enumerate(model.modalities):
        rho = feats[m].rho.data
        present = data.corruption[:, :, k] != -2
        corrupted = present & (data.corruption[:, :, k] >= 0)
        clean = present & (data.corruption[:, :, k] == -1)
        out[m] = (float(rho[corrupted].mean()), float(rho[clean].mean()))
    return out


ALL_VARIANTS = tuple(VARIANTS)
