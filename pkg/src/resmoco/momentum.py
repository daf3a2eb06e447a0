"""EMA teacher: initialisation, the ``xi <- beta*xi + (1-beta)*theta`` update and the beta schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .nn import Encoder, check_same_spec, clone_encoder, encode
from .tensor import Tensor


@dataclass
class TeacherState:
    encoder: Encoder
    step_of_last_update: int = -1


@dataclass(frozen=True)
class MomentumSchedule:
    """Cosine ramp of the EMA coefficient from ``beta_base`` to ``beta_final``.

    ``mode='fixed'`` keeps beta at ``beta_base`` for the whole run.
    """

    beta_base: float = 0.996
    total_steps: int = 1
    beta_final: float = 1.0
    mode: str = "cosine_ramp"

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_base <= 1.0:
            raise ValueError(f"beta_base must lie in (0, 1], got {self.beta_base}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.mode not in ("cosine_ramp", "fixed"):
            raise ValueError(f"unknown beta mode {self.mode!r}")


def beta_at(sched: MomentumSchedule, t: int) -> float:
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    if sched.mode == "fixed":
        return sched.beta_base
    ramp = (math.cos(math.pi * t / sched.total_steps) + 1.0) / 2.0
    return sched.beta_final - (sched.beta_final - sched.beta_base) * ramp


def init_teacher(student: Encoder) -> TeacherState:
    enc = clone_encoder(student)
    enc.set_requires_grad(False)
    return TeacherState(enc)


def ema_update(teacher: TeacherState, student: Encoder, beta: float, step: int = -1) -> None:
    """Move every teacher array (weights and running statistics) towards the student's."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    check_same_spec(teacher.encoder, student)
    if beta != 1.0:
        theta = dict(student.state_items())
        for name, xi in teacher.encoder.state_items():
            xi *= beta
            xi += (1.0 - beta) * theta[name]
    teacher.step_of_last_update = step


def teacher_forward(teacher: TeacherState, x, mode: str = "train") -> Tuple[Tensor, Tensor, Tensor]:
    """Forward pass of the teacher; nothing is recorded for backprop and running stats stay put."""
    with T.no_grad():
        h, z, p = encode(teacher.encoder, x, mode, update_stats=False)
    return T.detach(h), T.detach(z), T.detach(p)


def max_param_distance(a: Encoder, b: Encoder) -> float:
    """L-infinity distance over all parameters and running statistics."""
    theta = dict(b.state_items())
    return max(float(np.max(np.abs(arr - theta[name]))) for name, arr in a.state_items())
