"""Backbones, projector/predictor heads and the named-parameter registry."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MODES = ("train", "eval")


class SpecMismatchError(ValueError):
    """Two encoders that must share an architecture do not."""


@dataclass(frozen=True)
class EncoderSpec:
    backbone_kind: str = "smallconv"
    backbone_widths: Tuple[int, ...] = (32, 64, 128)
    projector_hidden: int = 512
    projector_out: int = 256
    predictor_hidden: int = 512
    use_predictor: bool = True
    input_shape: Tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.backbone_kind not in ("mlp", "smallconv"):
            raise ValueError(f"unknown backbone kind {self.backbone_kind!r}")
        if not self.backbone_widths or min(self.backbone_widths) < 1:
            raise ValueError("backbone widths must be positive")
        if self.projector_hidden < 1 or self.predictor_hidden < 1:
            raise ValueError("head widths must be positive")
        if self.projector_out < 2:
            raise ValueError("projector output must have at least 2 dimensions")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (channels, height, width)")

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class ParamTensor:
    name: str
    value: Tensor
    exclude_from_adaptation: bool = False
    no_weight_decay: bool = False

    @property
    def grad(self) -> np.ndarray:
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g


@dataclass
class Encoder:
    """Backbone ``f``, projector ``g`` and predictor ``q`` sharing one registry."""

    spec: EncoderSpec
    params: Dict[str, ParamTensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def _add(self, name: str, data: np.ndarray, norm_or_bias: bool = False) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = Tensor(data.astype(np.float32), requires_grad=True, name=name)
        self.params[name] = ParamTensor(name, value, norm_or_bias, norm_or_bias)

    def w(self, name: str) -> Tensor:
        return self.params[name].value

    def parameters(self) -> List[ParamTensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.grad = None

    def state_items(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Every array that defines the network: parameters then running statistics."""
        for name, p in self.params.items():
            yield name, p.value.data
        yield from self.buffers.items()

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in self.state_items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.value.requires_grad = flag


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_bn(enc: Encoder, prefix: str, width: int) -> None:
    enc._add(f"{prefix}.weight", np.ones(width), norm_or_bias=True)
    enc._add(f"{prefix}.bias", np.zeros(width), norm_or_bias=True)
    enc.buffers[f"{prefix}.running_mean"] = np.zeros(width, dtype=np.float32)
    enc.buffers[f"{prefix}.running_var"] = np.ones(width, dtype=np.float32)


def _add_linear(enc: Encoder, rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int) -> None:
    enc._add(f"{prefix}.weight", _he_uniform(rng, (fan_in, fan_out), fan_in))
    enc._add(f"{prefix}.bias", np.zeros(fan_out), norm_or_bias=True)


def _add_head(enc: Encoder, rng: np.random.Generator, prefix: str, d_in: int, hidden: int, d_out: int) -> None:
    _add_linear(enc, rng, f"{prefix}.fc0", d_in, hidden)
    _add_bn(enc, f"{prefix}.bn0", hidden)
    _add_linear(enc, rng, f"{prefix}.fc1", hidden, d_out)


def build_encoder(spec: EncoderSpec, seed: int) -> Encoder:
    """Deterministically initialise an encoder (He-uniform weights, zero biases, unit BN scale)."""
    rng = np.random.default_rng(seed)
    enc = Encoder(spec)
    c, h, w = spec.input_shape
    if spec.backbone_kind == "smallconv":
        cin = c
        for i, width in enumerate(spec.backbone_widths):
            enc._add(f"backbone.conv{i}.weight", _he_uniform(rng, (width, cin, 3, 3), cin * 9))
            _add_bn(enc, f"backbone.bn{i}", width)
            cin = width
    else:
        cin = c * h * w
        for i, width in enumerate(spec.backbone_widths):
            _add_linear(enc, rng, f"backbone.fc{i}", cin, width)
            _add_bn(enc, f"backbone.bn{i}", width)
            cin = width
    _add_head(enc, rng, "projector", spec.feature_dim, spec.projector_hidden, spec.projector_out)
    if spec.use_predictor:
        _add_head(enc, rng, "predictor", spec.projector_out, spec.predictor_hidden, spec.projector_out)
    return enc


def batchnorm(
    enc: Encoder, prefix: str, x: Tensor, mode: str, update_stats: bool = True
) -> Tensor:
    """Batch normalisation for NC or NCHW inputs using the encoder's state under ``prefix``.

    Train mode normalises with batch moments and (when ``update_stats``) moves the
    running estimates by ``BN_MOMENTUM``; eval mode uses the running estimates only.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rm = enc.buffers[f"{prefix}.running_mean"]
    rv = enc.buffers[f"{prefix}.running_var"]
    gamma, beta = enc.w(f"{prefix}.weight"), enc.w(f"{prefix}.bias")
    if mode == "eval":
        out, _ = T.batch_norm(x, gamma, beta, stats=(rm, rv), eps=BN_EPS)
        return out
    out, (mean, var) = T.batch_norm(x, gamma, beta, eps=BN_EPS)
    if update_stats:
        n = x.size // x.shape[1]
        unbiased = var * (n / (n - 1))
        rm *= 1 - BN_MOMENTUM
        rm += BN_MOMENTUM * mean.astype(rm.dtype)
        rv *= 1 - BN_MOMENTUM
        rv += BN_MOMENTUM * unbiased.astype(rv.dtype)
    return out


def _linear(enc: Encoder, prefix: str, x: Tensor) -> Tensor:
    return x @ enc.w(f"{prefix}.weight") + enc.w(f"{prefix}.bias")


def _head(enc: Encoder, prefix: str, x: Tensor, mode: str, update_stats: bool) -> Tensor:
    hid = batchnorm(enc, f"{prefix}.bn0", _linear(enc, f"{prefix}.fc0", x), mode, update_stats)
    return _linear(enc, f"{prefix}.fc1", T.relu(hid))


def backbone(enc: Encoder, x: Tensor, mode: str, update_stats: bool = True) -> Tensor:
    spec = enc.spec
    if tuple(x.shape[1:]) != spec.input_shape:
        raise T.ShapeError(f"encoder expects inputs of shape (N, {spec.input_shape}), got {x.shape}")
    if spec.backbone_kind == "smallconv":
        for i in range(len(spec.backbone_widths)):
            x = T.conv2d(x, enc.w(f"backbone.conv{i}.weight"), stride=2, pad=1)
            x = T.relu(batchnorm(enc, f"backbone.bn{i}", x, mode, update_stats))
        return x.mean(axis=(2, 3))
    x = x.reshape(x.shape[0], -1)
    for i in range(len(spec.backbone_widths)):
        x = T.relu(batchnorm(enc, f"backbone.bn{i}", _linear(enc, f"backbone.fc{i}", x), mode, update_stats))
    return x


def encode(
    enc: Encoder, x, mode: str = "train", update_stats: bool = True
) -> Tuple[Tensor, Tensor, Tensor]:
    """Return ``(h, z, p)``: backbone features, projection and prediction (all unnormalised).

    Without a predictor ``p`` is ``z`` itself.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    h = backbone(enc, x, mode, update_stats)
    z = _head(enc, "projector", h, mode, update_stats)
    p = _head(enc, "predictor", z, mode, update_stats) if enc.spec.use_predictor else z
    return h, z, p


def check_same_spec(a: Encoder, b: Encoder) -> None:
    if a.spec != b.spec:
        raise SpecMismatchError(f"encoder specs differ: {a.spec} vs {b.spec}")


def copy_parameters(src: Encoder, dst: Encoder) -> None:
    """Copy every parameter and running statistic of ``src`` into ``dst`` (bitwise)."""
    check_same_spec(src, dst)
    for name, p in src.params.items():
        dst.params[name].value.data[...] = p.value.data
        dst.params[name].value.grad = None
    for name, buf in src.buffers.items():
        dst.buffers[name][...] = buf


def clone_encoder(src: Encoder, seed: Optional[int] = None) -> Encoder:
    dst = build_encoder(src.spec, 0 if seed is None else seed)
    copy_parameters(src, dst)
    return dst
