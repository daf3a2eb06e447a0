"""Inter-view and intra-view losses for momentum-based SSL.

Naming follows the encoder heads: ``p`` is the predictor output, ``z`` the
projector output, a trailing ``m`` marks the momentum (teacher) branch and the
digit is the augmented view.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

INTER_KINDS = ("infonce_ema", "infonce_noema", "byol", "simsiam", "none")
INTRA_KINDS = ("none", "cosine", "ce", "mse")


@dataclass(frozen=True)
class ObjectiveConfig:
    inter: str = "infonce_ema"
    intra: str = "cosine"
    tau: float = 0.2
    tau_s: float = 4.0
    intra_weight: float = 1.0
    # compare the student predictor with the teacher *projector* instead of the teacher predictor
    intra_asymmetric: bool = False

    def __post_init__(self) -> None:
        if self.inter not in INTER_KINDS:
            raise ValueError(f"inter must be one of {INTER_KINDS}, got {self.inter!r}")
        if self.intra not in INTRA_KINDS:
            raise ValueError(f"intra must be one of {INTRA_KINDS}, got {self.intra!r}")
        if not self.tau > 0 or not self.tau_s > 0:
            raise ValueError("temperatures must be positive")
        if self.inter == "none" and self.intra == "none":
            raise ValueError("at least one of inter/intra must be active")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchEmbeddings:
    p1: Tensor
    p2: Tensor
    z1: Tensor
    z2: Tensor
    p1m: Optional[Tensor] = None
    p2m: Optional[Tensor] = None
    z1m: Optional[Tensor] = None
    z2m: Optional[Tensor] = None

    def swapped(self) -> "BatchEmbeddings":
        """The same batch with the view labels 1 and 2 exchanged."""
        return BatchEmbeddings(self.p2, self.p1, self.z2, self.z1, self.p2m, self.p1m, self.z2m, self.z1m)


def _need(t: Optional[Tensor], what: str) -> Tensor:
    if t is None:
        raise ValueError(f"objective needs {what} but it was not provided")
    return t


def infonce(q: Tensor, k: Tensor, tau: float = 0.2) -> Tensor:
    """InfoNCE with in-batch negatives: row i of ``k`` is the positive for row i of ``q``."""
    if q.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    if q.shape != k.shape:
        raise T.ShapeError(f"query {q.shape} and key {k.shape} differ")
    qn = T.l2_normalize(q, axis=1)
    kn = T.l2_normalize(k, axis=1)
    logp = T.log_softmax_t(qn @ kn.T, axis=1, temperature=tau)
    idx = np.arange(q.shape[0])
    return -logp[idx, idx].mean()


def cosine_distance(q: Tensor, k: Tensor) -> Tensor:
    """Batch mean of ``||q/|q| - k/|k|||^2 = 2 - 2 cos(q, k)``; lies in [0, 4]."""
    qn = T.l2_normalize(q, axis=1)
    kn = T.l2_normalize(k, axis=1)
    return 2.0 - 2.0 * (qn * kn).sum(axis=1).mean()


def inter_moco(be: BatchEmbeddings, tau: float = 0.2) -> Tensor:
    z1m, z2m = _need(be.z1m, "teacher projections"), _need(be.z2m, "teacher projections")
    return 0.5 * (infonce(be.p1, T.detach(z2m), tau) + infonce(be.p2, T.detach(z1m), tau))


def cl_no_ema(be: BatchEmbeddings, tau: float = 0.2) -> Tensor:
    """Contrastive loss whose keys come from the student itself behind a stop-gradient."""
    return 0.5 * (infonce(be.p1, T.detach(be.z2), tau) + infonce(be.p2, T.detach(be.z1), tau))


def byol_inter(be: BatchEmbeddings) -> Tensor:
    z1m, z2m = _need(be.z1m, "teacher projections"), _need(be.z2m, "teacher projections")
    return 0.5 * (cosine_distance(be.p1, T.detach(z2m)) + cosine_distance(be.p2, T.detach(z1m)))


def simsiam_inter(be: BatchEmbeddings) -> Tensor:
    return 0.5 * (cosine_distance(be.p1, T.detach(be.z2)) + cosine_distance(be.p2, T.detach(be.z1)))


def intra_gap_cosine(q: Tensor, q_m: Tensor) -> Tensor:
    return cosine_distance(q, T.detach(q_m))


def intra_gap_ce(q: Tensor, q_m: Tensor, tau_s: float = 4.0) -> Tensor:
    """Cross-entropy ``-P(q) . log P(q_m)`` between temperature softmaxes, batch mean.

    Inputs are raw (not l2-normalised); only the student side ``q`` carries gradient.
    """
    p_student = T.softmax_t(q, axis=1, temperature=tau_s)
    logp_teacher = T.log_softmax_t(T.detach(q_m), axis=1, temperature=tau_s)
    return -(p_student * logp_teacher).sum(axis=1).mean()


def intra_gap_mse(q: Tensor, q_m: Tensor, tau_s: float = 4.0) -> Tensor:
    """Batch mean of ``0.5 * ||P(q) - P(q_m)||^2``; lies in [0, 1]."""
    diff = T.softmax_t(q, axis=1, temperature=tau_s) - T.softmax_t(T.detach(q_m), axis=1, temperature=tau_s)
    return 0.5 * (diff * diff).sum(axis=1).mean()


def intra_distance(kind: str, q: Tensor, q_m: Tensor, tau_s: float = 4.0) -> Tensor:
    if kind == "cosine":
        return intra_gap_cosine(q, q_m)
    if kind == "ce":
        return intra_gap_ce(q, q_m, tau_s)
    if kind == "mse":
        return intra_gap_mse(q, q_m, tau_s)
    raise ValueError(f"no intra distance for {kind!r}")


def intra_m(be: BatchEmbeddings, cfg: ObjectiveConfig) -> Tensor:
    """Symmetrised same-view gap between student and teacher outputs."""
    if cfg.intra == "none":
        raise ValueError("intra_m called with intra='none'")
    if cfg.intra_asymmetric:
        t1, t2 = _need(be.z1m, "teacher projections"), _need(be.z2m, "teacher projections")
    else:
        t1, t2 = _need(be.p1m, "teacher predictions"), _need(be.p2m, "teacher predictions")
    return 0.5 * (
        intra_distance(cfg.intra, be.p1, t1, cfg.tau_s) + intra_distance(cfg.intra, be.p2, t2, cfg.tau_s)
    )


def inter_term(be: BatchEmbeddings, cfg: ObjectiveConfig) -> Optional[Tensor]:
    if cfg.inter == "infonce_ema":
        return inter_moco(be, cfg.tau)
    if cfg.inter == "infonce_noema":
        return cl_no_ema(be, cfg.tau)
    if cfg.inter == "byol":
        return byol_inter(be)
    if cfg.inter == "simsiam":
        return simsiam_inter(be)
    return None


def total_loss(
    be: BatchEmbeddings, cfg: ObjectiveConfig, intra_active: bool = True
) -> Tuple[Tensor, Dict[str, float]]:
    """``inter + intra_weight * intra`` plus the two terms as floats for telemetry.

    ``intra_active=False`` zeroes the intra term (used by the on/off toggle ablation).
    """
    inter = inter_term(be, cfg)
    intra = intra_m(be, cfg) if cfg.intra != "none" and intra_active else None
    parts = {
        "inter": inter.item() if inter is not None else 0.0,
        "intra": intra.item() if intra is not None else 0.0,
    }
    if inter is None and intra is None:
        raise ValueError("objective has no active term at this step")
    if intra is None:
        return inter, parts
    if inter is None:
        return cfg.intra_weight * intra, parts
    return inter + cfg.intra_weight * intra, parts
