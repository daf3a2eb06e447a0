"""Datasets (CIFAR binary batches, synthetic colour-stripe images) and deterministic batching."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from .augment import AugmentParams, center_view, hsv_to_rgb, make_views_batch

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
SYNTH_MAGIC = b"RMDS1\n"


class DatasetError(Exception):
    kind = "dataset_error"


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    kind = "dataset_not_found"


class TruncatedRecordError(DatasetError):
    kind = "truncated_record"


class LabelRangeError(DatasetError):
    kind = "label_out_of_range"


@dataclass
class DatasetHandle:
    """Images as an ``N x H x W x 3`` uint8 array plus integer labels.

    Labels are only ever read by evaluation code.
    """

    kind: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    meta: dict = field(default_factory=dict)
    _stats: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[-1] != 3 or self.images.dtype != np.uint8:
            raise ValueError("images must be an N x H x W x 3 uint8 array")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelRangeError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def channel_stats(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        """Per-channel mean/std on the [0, 1] scale, computed once and cached."""
        if self._stats is None:
            x = self.images.reshape(-1, 3).astype(np.float64) / 255.0
            std = np.maximum(x.std(axis=0), 0.05)
            self._stats = (tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in std))
        return self._stats

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(self.images.tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# CIFAR binaries
# ---------------------------------------------------------------------------


def parse_cifar_records(raw: bytes, label_bytes: int, max_label: int) -> Tuple[np.ndarray, np.ndarray]:
    """Parse ``label_bytes`` label byte(s) + 3072 planar RGB bytes per record.

    With two label bytes (CIFAR-100: coarse, fine) the fine label is returned.
    """
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        raise TruncatedRecordError(f"{len(raw)} bytes is not a whole number of {rec}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    if labels.max() > max_label:
        bad = int(np.argmax(labels > max_label))
        raise LabelRangeError(f"record {bad} has label {labels[bad]} > {max_label}")
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _cifar_dir(root: Union[str, Path], marker: str) -> Path:
    root = Path(root)
    for cand in (root, *sorted(root.glob("cifar-*-binary")), *sorted(root.glob("cifar-*-batches-bin"))):
        if (cand / marker).is_file():
            return cand
    raise DatasetNotFoundError(f"no {marker} under {root}")


def _read_files(folder: Path, names: List[str]) -> bytes:
    chunks = []
    for name in names:
        path = folder / name
        if not path.is_file():
            raise DatasetNotFoundError(f"missing {path}")
        chunks.append(path.read_bytes())
    return b"".join(chunks)


def load_cifar10(root: Union[str, Path], split: str = "train") -> DatasetHandle:
    names = CIFAR10_TRAIN if split == "train" else CIFAR10_TEST
    folder = _cifar_dir(root, names[0])
    images, labels = parse_cifar_records(_read_files(folder, names), 1, 9)
    return DatasetHandle("cifar10", images, labels, 10, split)


def load_cifar100(root: Union[str, Path], split: str = "train") -> DatasetHandle:
    name = "train.bin" if split == "train" else "test.bin"
    folder = _cifar_dir(root, name)
    images, labels = parse_cifar_records(_read_files(folder, [name]), 2, 99)
    return DatasetHandle("cifar100", images, labels, 100, split)


def write_cifar_batch(path: Union[str, Path], images: np.ndarray, labels, coarse=None) -> None:
    """Write records in the CIFAR binary layout (used to build fixtures)."""
    planar = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.hstack(cols + [planar]).tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_blobs(
    classes: int = 4,
    per_class: int = 500,
    image_size: int = 16,
    separation: float = 1.0,
    noise: float = 0.05,
    seed: int = 0,
    split: str = "train",
) -> DatasetHandle:
    """Class-conditioned smooth colour-stripe images.

    Class ``c`` owns a hue (evenly spaced on the colour wheel) and a stripe
    orientation (horizontal for even ``c``, vertical for odd ``c``); both
    survive cropping and flipping.  Per-image nuisances are a random stripe
    phase and frequency, a random colour cast and pixel noise.  ``separation``
    scales the class colour against the nuisances.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    hues = np.arange(classes) / classes
    palette = hsv_to_rgb(np.stack([hues, np.full(classes, 0.8), np.full(classes, 0.9)], axis=1)) - 0.5

    grid = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    freq = rng.uniform(1.5, 2.5, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    cast = rng.normal(0, 0.08, (n, 3))
    coord = np.where((labels % 2 == 0)[:, None, None], yy[None], xx[None])
    stripes = np.sin(2 * np.pi * freq[:, None, None] * coord + phase[:, None, None])

    color = 0.25 * separation * palette[labels]
    img = 0.5 + color[:, None, None, :] + cast[:, None, None, :]
    img = img + 0.18 * stripes[..., None] * (0.5 + np.abs(palette[labels]))[:, None, None, :]
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    images = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    order = rng.permutation(n)
    meta = dict(
        classes=classes, per_class=per_class, image_size=image_size, separation=separation, noise=noise, seed=seed
    )
    return DatasetHandle("synthetic", images[order], labels[order], classes, split, meta)


def save_dataset(ds: DatasetHandle, path: Union[str, Path]) -> None:
    """Raw dump: magic, little-endian u32 header length, JSON header, int64 labels, pixel bytes."""
    n, h, w, _ = ds.images.shape
    header = json.dumps(
        dict(kind=ds.kind, split=ds.split, class_count=ds.class_count, n=n, h=h, w=w, meta=ds.meta), sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(ds.labels.astype("<i8").tobytes())
        fh.write(ds.images.tobytes())


def load_dataset(path: Union[str, Path]) -> DatasetHandle:
    raw = Path(path).read_bytes()
    if not raw.startswith(SYNTH_MAGIC):
        raise DatasetError(f"{path} is not a saved dataset")
    off = len(SYNTH_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    hdr = json.loads(raw[off : off + hlen])
    off += hlen
    n, h, w = hdr["n"], hdr["h"], hdr["w"]
    expected = off + 8 * n + n * h * w * 3
    if len(raw) != expected:
        raise TruncatedRecordError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    images = np.frombuffer(raw, dtype=np.uint8, offset=off + 8 * n).reshape(n, h, w, 3).copy()
    return DatasetHandle(hdr["kind"], images, labels, hdr["class_count"], hdr["split"], hdr["meta"])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def sample_seed(epoch_seed: int, index: int) -> int:
    """Augmentation seed for one sample; independent of where the sample lands in the epoch."""
    return int(np.random.SeedSequence([int(epoch_seed), int(index)]).generate_state(1, np.uint64)[0])


def epoch_order(n: int, epoch_seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(epoch_seed), 0x5EED])).permutation(n)


def batches_per_epoch(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def batches(
    ds: DatasetHandle,
    batch_size: int,
    epoch_seed: int,
    views: Optional[Tuple[AugmentParams, AugmentParams]] = None,
    drop_last: bool = True,
    start: int = 0,
) -> Iterator[tuple]:
    """Shuffled batches for one epoch.

    With ``views`` each batch is ``(x1, x2)`` of augmented float32 NCHW arrays
    and carries no labels.  Without, it is ``(x, labels)`` using the
    deterministic full-image view.  ``start`` skips that many batches.
    """
    if batch_size > len(ds):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(ds)}")
    mean, std = ds.channel_stats()
    order = epoch_order(len(ds), epoch_seed)
    nb = batches_per_epoch(len(ds), batch_size, drop_last)
    for b in range(start, nb):
        idx = order[b * batch_size : (b + 1) * batch_size]
        if views is None:
            size = ds.image_size
            x = np.stack([center_view(ds.images[i], size, mean, std) for i in idx])
            yield x, ds.labels[idx]
        else:
            seeds = [sample_seed(epoch_seed, i) for i in idx]
            yield tuple(make_views_batch(ds.images[idx], views[0], views[1], seeds, mean, std))


def eval_arrays(ds: DatasetHandle, size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Every sample's deterministic view, in dataset order."""
    mean, std = ds.channel_stats()
    size = size or ds.image_size
    return np.stack([center_view(img, size, mean, std) for img in ds.images]), ds.labels.copy()
