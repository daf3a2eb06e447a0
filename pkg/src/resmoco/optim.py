"""LARS and heavy-ball SGD over an encoder's parameter registry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .nn import ParamTensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def buffer_for(self, p: ParamTensor) -> np.ndarray:
        buf = self.buffers.get(p.name)
        if buf is None:
            buf = self.buffers[p.name] = np.zeros_like(p.value.data)
        return buf


def _check_finite(params: Iterable[ParamTensor]) -> None:
    for p in params:
        if p.value.grad is not None and not np.isfinite(p.value.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in {p.name}")


def lars_trust(w: np.ndarray, g: np.ndarray, eta: float, weight_decay: float) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(g))
    if w_norm > 0 and g_norm > 0:
        return eta * w_norm / (g_norm + weight_decay * w_norm)
    return 1.0


def lars_step(
    params: Iterable[ParamTensor],
    state: OptimizerState,
    lr: float,
    eta: float = 0.02,
    weight_decay: float = 1e-6,
    momentum: float = 0.9,
) -> None:
    """One LARS update; parameters flagged ``exclude_from_adaptation`` get plain momentum SGD without decay."""
    params = list(params)
    _check_finite(params)
    for p in params:
        w, g = p.value.data, p.grad
        if p.exclude_from_adaptation:
            d = g
        else:
            d = (g + weight_decay * w) * lars_trust(w, g, eta, weight_decay)
        buf = state.buffer_for(p)
        buf *= momentum
        buf += d
        w -= lr * buf
    state.step += 1


def sgd_step(
    params: Iterable[ParamTensor],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    params = list(params)
    _check_finite(params)
    for p in params:
        w, g = p.value.data, p.grad
        d = g if p.no_weight_decay or weight_decay == 0 else g + weight_decay * w
        buf = state.buffer_for(p)
        buf *= momentum
        buf += d
        w -= lr * buf
    state.step += 1
