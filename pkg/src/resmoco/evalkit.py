"""Frozen-feature evaluation: linear probe (top-1/top-5) and cosine KNN-1."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .data import DatasetHandle, eval_arrays
from .nn import Encoder, backbone
from .tensor import Tensor


class ModeError(RuntimeError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.features) != len(self.labels):
            raise ValueError("feature and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EvalReport:
    top1: Optional[float]
    top5: Optional[float]
    knn1: Optional[float]
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def extract_features(
    encoder: Encoder, dataset: DatasetHandle, mode: str = "eval", batch_size: int = 256
) -> FeatureBank:
    """Backbone outputs for every sample (no projector/predictor), in dataset order."""
    if mode != "eval":
        raise ModeError("features must be extracted with the encoder in eval mode")
    x, labels = eval_arrays(dataset, encoder.spec.input_shape[1])
    feats = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            feats.append(backbone(encoder, Tensor(x[i : i + batch_size]), "eval").data.astype(np.float64))
    return FeatureBank(np.concatenate(feats), labels, dataset.split)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Percentage of rows whose label is among the ``k`` largest logits (ties favour lower class index)."""
    logits = np.asarray(logits)
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds the {logits.shape[1]} classes")
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (ranked == np.asarray(labels)[:, None]).any(axis=1)
    return 100.0 * float(hits.mean())


def knn1(train: FeatureBank, test: FeatureBank, chunk: int = 1024) -> float:
    """Cosine nearest-neighbour accuracy; ties go to the lowest train index."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("KNN needs non-empty banks")

    def unit(a: np.ndarray) -> np.ndarray:
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)

    tr = unit(np.asarray(train.features, dtype=np.float64))
    te = unit(np.asarray(test.features, dtype=np.float64))
    correct = 0
    for i in range(0, len(te), chunk):
        nn_idx = np.argmax(te[i : i + chunk] @ tr.T, axis=1)
        correct += int((train.labels[nn_idx] == test.labels[i : i + chunk]).sum())
    return 100.0 * correct / len(te)


def linear_probe(
    train: FeatureBank,
    test: FeatureBank,
    epochs: int = 100,
    lr: float = 0.1,
    batch_size: int = 256,
    momentum: float = 0.9,
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> Tuple[float, float]:
    """Softmax regression on frozen features, trained with momentum SGD and a cosine schedule.

    Features are standardised with the train-bank statistics before fitting.
    Returns test ``(top1, top5)``; top-5 becomes top-C when there are fewer
    than five classes.
    """
    c = num_classes or int(max(train.labels.max(), test.labels.max())) + 1
    if test.labels.max() >= c or train.labels.max() >= c:
        raise ValueError("train and test banks disagree on the class count")
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("feature widths differ")
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0) + 1e-6
    xtr = ((train.features - mu) / sd).astype(np.float32)
    xte = ((test.features - mu) / sd).astype(np.float32)

    rng = np.random.default_rng(seed)
    w = Tensor(np.zeros((xtr.shape[1], c), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
    bufs = [np.zeros_like(w.data), np.zeros_like(b.data)]
    n = len(xtr)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            logits = Tensor(xtr[idx]) @ w + b
            logp = T.log_softmax_t(logits, axis=1)
            loss = -logp[np.arange(len(idx)), train.labels[idx]].mean()
            w.grad = b.grad = None
            T.backward(loss)
            cur = lr * (math.cos(math.pi * step / total) + 1) / 2
            for param, buf in zip((w, b), bufs):
                buf *= momentum
                buf += param.grad
                param.data -= cur * buf
            step += 1
    logits = xte @ w.data + b.data
    return topk_accuracy(logits, test.labels, 1), topk_accuracy(logits, test.labels, min(5, c))


def evaluate(
    encoder: Encoder,
    train_ds: DatasetHandle,
    test_ds: DatasetHandle,
    probe: bool = True,
    knn: bool = True,
    probe_epochs: int = 100,
    probe_lr: float = 0.1,
    seed: int = 0,
    fingerprint: str = "",
) -> EvalReport:
    tr = extract_features(encoder, train_ds)
    te = extract_features(encoder, test_ds)
    top1 = top5 = None
    if probe:
        top1, top5 = linear_probe(tr, te, probe_epochs, probe_lr, seed=seed, num_classes=train_ds.class_count)
    return EvalReport(top1, top5, knn1(tr, te) if knn else None, fingerprint)
