"""Pretraining loop: warmup-cosine learning rate, per-step two-term update, EMA stepping and gap telemetry."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .augment import AugmentParams, cifar_pair
from .data import DatasetHandle, batches, batches_per_epoch
from .momentum import MomentumSchedule, TeacherState, beta_at, ema_update, init_teacher, teacher_forward
from .nn import Encoder, EncoderSpec, build_encoder, encode
from .objectives import BatchEmbeddings, ObjectiveConfig, total_loss
from .optim import OptimizerState, lars_step, sgd_step

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.3
    eta_lars: float = 0.02
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 100
    warmup_epochs: int = 10
    beta_base: float = 0.996
    beta_mode: str = "cosine_ramp"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seed: int = 0
    intra_toggle_period: Optional[int] = None
    optimizer: str = "lars"
    momentum: float = 0.9
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    augment: Tuple[AugmentParams, AugmentParams] = field(default_factory=cifar_pair)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.optimizer not in ("lars", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.intra_toggle_period is not None and self.intra_toggle_period < 1:
            raise ValueError("intra_toggle_period must be positive")
        MomentumSchedule(self.beta_base, 1, mode=self.beta_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.to_dict()
        d["encoder"] = self.encoder.to_dict()
        d["augment"] = [a.to_dict() for a in self.augment]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "objective" in d:
            d["objective"] = ObjectiveConfig(**d["objective"])
        if "encoder" in d:
            d["encoder"] = EncoderSpec(**d["encoder"])
        if "augment" in d:
            d["augment"] = tuple(AugmentParams(**a) for a in d["augment"])
        return cls(**d)


@dataclass
class GapRecord:
    step: int
    intra_gap: float
    sim_pct: float
    inter_loss: float
    intra_loss: float
    beta: float
    lr: float
    intra_active: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    student: Encoder
    teacher: TeacherState
    opt: OptimizerState
    step: int = 0


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to ``cfg.lr`` then cosine decay to 0 at ``epochs * steps_per_epoch``."""
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    if step < warmup:
        return cfg.lr * step / warmup
    progress = (step - warmup) / max(total - warmup, 1)
    return cfg.lr * (math.cos(math.pi * min(progress, 1.0)) + 1.0) / 2.0


def intra_is_active(cfg: TrainConfig, step: int) -> bool:
    """On/off phases of equal length ``intra_toggle_period``, starting with an on phase."""
    period = cfg.intra_toggle_period
    return period is None or (step // period) % 2 == 0


def _cos_gap(q: T.Tensor, qm: T.Tensor) -> float:
    a = q.data.astype(np.float64)
    b = qm.data.astype(np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    # clipped so rounding with identical nets cannot report a negative gap
    return float(np.mean(np.clip(2.0 - 2.0 * (a * b).sum(axis=1), 0.0, 4.0)))


def train_step(
    state: TrainState,
    views: Tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    steps_per_epoch: int,
) -> GapRecord:
    """One optimisation step; returns the telemetry for this step and advances ``state.step``."""
    step = state.step
    student, teacher = state.student, state.teacher
    total_steps = cfg.epochs * steps_per_epoch
    x1, x2 = views

    _, z1, p1 = encode(student, x1, "train")
    _, z2, p2 = encode(student, x2, "train")
    _, z1m, p1m = teacher_forward(teacher, x1, "train")
    _, z2m, p2m = teacher_forward(teacher, x2, "train")
    be = BatchEmbeddings(p1, p2, z1, z2, p1m, p2m, z1m, z2m)

    active = intra_is_active(cfg, step)
    loss, parts = total_loss(be, cfg.objective, intra_active=active)
    if not math.isfinite(loss.item()):
        raise TrainingDivergedError(f"non-finite loss at step {step}: {parts}")

    student.zero_grad()
    T.backward(loss)
    lr = lr_at(cfg, step, steps_per_epoch)
    if cfg.optimizer == "lars":
        lars_step(student.parameters(), state.opt, lr, cfg.eta_lars, cfg.weight_decay, cfg.momentum)
    else:
        sgd_step(student.parameters(), state.opt, lr, cfg.momentum, cfg.weight_decay)

    sched = MomentumSchedule(cfg.beta_base, total_steps, mode=cfg.beta_mode)
    beta = beta_at(sched, step)
    ema_update(teacher, student, beta, step)

    gap = 0.5 * (_cos_gap(p1, p1m) + _cos_gap(p2, p2m))
    state.step += 1
    return GapRecord(
        step=step,
        intra_gap=gap,
        sim_pct=(1.0 - gap / 2.0) * 100.0,
        inter_loss=parts["inter"],
        intra_loss=parts["intra"],
        beta=beta,
        lr=lr,
        intra_active=active,
    )


def init_state(cfg: TrainConfig) -> TrainState:
    student = build_encoder(cfg.encoder, cfg.seed)
    return TrainState(student, init_teacher(student), OptimizerState())


def epoch_seed(cfg: TrainConfig, epoch: int) -> int:
    return int(np.random.SeedSequence([int(cfg.seed), int(epoch), 0xE70C]).generate_state(1)[0])


def pretrain(
    cfg: TrainConfig,
    dataset: DatasetHandle,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[GapRecord, TrainState], None]] = None,
) -> Tuple[TrainState, List[GapRecord]]:
    """Run (or continue) pretraining on ``dataset`` without labels.

    ``state`` resumes from a saved :class:`TrainState`; ``stop_at`` ends the
    run early after that many total steps (used to cut a run for checkpointing).
    """
    if tuple(cfg.encoder.input_shape[1:]) != (cfg.augment[0].crop_size,) * 2:
        raise ValueError("encoder input size must equal the augmentation crop size")
    spe = batches_per_epoch(len(dataset), cfg.batch_size)
    total = cfg.epochs * spe
    end = total if stop_at is None else min(stop_at, total)
    state = state or init_state(cfg)
    records: List[GapRecord] = []
    while state.step < end:
        epoch, offset = divmod(state.step, spe)
        for views in batches(dataset, cfg.batch_size, epoch_seed(cfg, epoch), cfg.augment, start=offset):
            rec = train_step(state, views, cfg, spe)
            records.append(rec)
            if on_step is not None:
                on_step(rec, state)
            if rec.step % max(spe, 1) == 0:
                logger.info(
                    "step %d inter %.4f intra %.4f gap %.4f lr %.4f beta %.5f",
                    rec.step, rec.inter_loss, rec.intra_loss, rec.intra_gap, rec.lr, rec.beta,
                )
            if state.step >= end:
                break
    return state, records


def with_objective(cfg: TrainConfig, inter: str, intra: str) -> TrainConfig:
    return replace(cfg, objective=replace(cfg.objective, inter=inter, intra=intra))
