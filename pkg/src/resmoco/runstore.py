"""Run configuration files, manifests, binary checkpoints and the metrics JSONL stream."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import tomli_w

from . import __version__
from .data import DatasetHandle, load_cifar10, load_cifar100, load_dataset, synth_blobs
from .momentum import TeacherState
from .nn import build_encoder
from .optim import OptimizerState
from .trainer import GapRecord, TrainConfig, TrainState

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PathLike = Union[str, Path]

CKPT_MAGIC = b"RMCKPT1\n"
ENDIAN_TAG = b"<f4\x00"
GAP_COLUMNS = ("step", "intra_gap", "sim_pct", "inter_loss", "intra_loss", "beta", "lr")


class ConfigError(ValueError):
    kind = "bad_config"


class CheckpointError(Exception):
    kind = "checkpoint_corrupt"


class MetricsError(Exception):
    kind = "bad_metrics"

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSpec:
    """Where the images come from.

    ``kind`` is ``cifar10``, ``cifar100`` or ``synthetic``.  CIFAR reads the
    binary batches under ``root``; ``synthetic`` generates (or, with
    ``root`` set, loads a saved) colour-stripe dataset.
    """

    kind: str = "synthetic"
    root: Optional[str] = None
    classes: int = 4
    per_class: int = 500
    test_per_class: int = 125
    image_size: int = 16
    separation: float = 1.0
    noise: float = 0.05
    seed: int = 123
    test_seed: int = 456

    def __post_init__(self) -> None:
        if self.kind not in ("cifar10", "cifar100", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"train", "data"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
        try:
            return cls(TrainConfig.from_dict(d.get("train", {})), DataSpec(**d.get("data", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def dumps_config(cfg: RunConfig, fmt: str = "json") -> str:
    """Serialise to JSON or TOML.  TOML has no null, so unset optional fields are omitted."""
    d = cfg.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True) + "\n"
    if fmt == "toml":
        return tomli_w.dumps(_drop_none(d))
    raise ConfigError(f"unknown config format {fmt!r}")


def loads_config(text: str, fmt: str = "json") -> RunConfig:
    try:
        d = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {fmt} config: {exc}") from exc
    return RunConfig.from_dict(d)


def _fmt_for(path: Path) -> str:
    return "toml" if path.suffix.lower() == ".toml" else "json"


def load_config(path: PathLike) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return loads_config(path.read_text(), _fmt_for(path))


def save_config(cfg: RunConfig, path: PathLike) -> None:
    path = Path(path)
    path.write_text(dumps_config(cfg, _fmt_for(path)))


def open_datasets(spec: DataSpec) -> Tuple[DatasetHandle, DatasetHandle]:
    """``(train, test)`` handles for a data spec."""
    if spec.kind == "cifar10":
        return load_cifar10(spec.root or ".", "train"), load_cifar10(spec.root or ".", "test")
    if spec.kind == "cifar100":
        return load_cifar100(spec.root or ".", "train"), load_cifar100(spec.root or ".", "test")
    if spec.root:
        root = Path(spec.root)
        return load_dataset(root / "train.rmds"), load_dataset(root / "test.rmds")
    common = dict(classes=spec.classes, image_size=spec.image_size, separation=spec.separation, noise=spec.noise)
    return (
        synth_blobs(per_class=spec.per_class, seed=spec.seed, split="train", **common),
        synth_blobs(per_class=spec.test_per_class, seed=spec.test_seed, split="test", **common),
    )


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def make_run_id(config: dict, fingerprint: str) -> str:
    """Content hash of the config and the dataset; equal inputs give equal ids (and equal metrics files)."""
    blob = json.dumps(config, sort_keys=True).encode() + fingerprint.encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    config: dict
    code_version: str
    dataset_fingerprint: str
    created_at: str = ""

    @classmethod
    def create(cls, cfg: RunConfig, fingerprint: str) -> "RunManifest":
        d = cfg.to_dict()
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        return cls(make_run_id(d, fingerprint), d, __version__, fingerprint, stamp)

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: PathLike) -> None:
        """Write once; an existing manifest is never overwritten."""
        with open(path, "x") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path: PathLike) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout: 8-byte magic, 4-byte dtype tag ("<f4\0"), little-endian u64 header
# length, UTF-8 JSON header, blob.  The header lists every array as
# (name, shape, offset, nbytes) into the blob and carries the blob's sha256.


def _state_arrays(state: TrainState) -> Iterator[Tuple[str, np.ndarray]]:
    for name, arr in state.student.state_items():
        yield f"student/{name}", arr
    for name, arr in state.teacher.encoder.state_items():
        yield f"teacher/{name}", arr
    for name in sorted(state.opt.buffers):
        yield f"opt/{name}", state.opt.buffers[name]


def checkpoint_bytes(state: TrainState, manifest: RunManifest) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in _state_arrays(state):
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name} is {arr.dtype}, checkpoints hold float32 only")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "manifest": manifest.to_dict(),
        "step": state.step,
        "opt_step": state.opt.step,
        "teacher_last_update": state.teacher.step_of_last_update,
        "records": records,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + ENDIAN_TAG + struct.pack("<Q", len(hdr)) + hdr + blob


def save_checkpoint(path: PathLike, state: TrainState, manifest: RunManifest) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state, manifest))
    tmp.replace(path)


def _parse_checkpoint(raw: bytes) -> Tuple[dict, memoryview]:
    prefix = len(CKPT_MAGIC) + len(ENDIAN_TAG) + 8
    if len(raw) < prefix or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated prefix)")
    if raw[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 4] != ENDIAN_TAG:
        raise CheckpointError("unsupported float encoding tag")
    (hlen,) = struct.unpack_from("<Q", raw, prefix - 8)
    if prefix + hlen > len(raw):
        raise CheckpointError("header length runs past the end of the file")
    try:
        header = json.loads(raw[prefix : prefix + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    blob = memoryview(raw)[prefix + hlen :]
    if not isinstance(header, dict) or not isinstance(header.get("records"), list):
        raise CheckpointError("header lacks the array records")
    if len(blob) != header.get("blob_bytes"):
        raise CheckpointError(f"header says {header.get('blob_bytes')} blob bytes, file has {len(blob)}")
    if sum(r.get("nbytes", 0) for r in header["records"]) != len(blob):
        raise CheckpointError("record sizes do not add up to the blob size")
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CheckpointError("blob checksum mismatch")
    return header, blob


def read_manifest(path: PathLike) -> RunManifest:
    """Manifest embedded in a checkpoint."""
    header, _ = _parse_checkpoint(_read(path))
    return RunManifest(**header["manifest"])


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path: PathLike) -> Tuple[TrainState, RunManifest]:
    """Rebuild the full training state; every float comes back bit-for-bit."""
    header, blob = _parse_checkpoint(_read(path))
    manifest = RunManifest(**header["manifest"])
    cfg = manifest.run_config().train
    student = build_encoder(cfg.encoder, cfg.seed)
    teacher = build_encoder(cfg.encoder, cfg.seed)
    teacher.set_requires_grad(False)
    targets: Dict[str, np.ndarray] = {}
    targets.update({f"student/{n}": a for n, a in student.state_items()})
    targets.update({f"teacher/{n}": a for n, a in teacher.state_items()})
    opt = OptimizerState(step=header["opt_step"])

    seen = set()
    for rec in header["records"]:
        name, shape = rec["name"], tuple(rec["shape"])
        if rec["nbytes"] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: {rec['nbytes']} bytes cannot hold shape {shape}")
        arr = np.frombuffer(blob, dtype="<f4", count=rec["nbytes"] // 4, offset=rec["offset"]).reshape(shape)
        if name.startswith("opt/"):
            opt.buffers[name[4:]] = arr.astype(np.float32)
        elif name in targets:
            if targets[name].shape != shape:
                raise CheckpointError(f"{name}: shape {shape} does not match the architecture")
            targets[name][...] = arr
        else:
            raise CheckpointError(f"unexpected array {name}")
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    state = TrainState(student, TeacherState(teacher, header["teacher_last_update"]), opt, header["step"])
    return state, manifest


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    """Append-only JSONL: one ``step`` record per train step plus an ``epoch`` summary per finished epoch.

    Reopening for a resumed run drops records at or after the resume step, so
    a crash between checkpoint and metrics flush never leaves duplicates.
    """

    def __init__(self, path: PathLike, run_id: str, steps_per_epoch: int, resume_step: int = 0) -> None:
        self.path = Path(path)
        self.run_id = run_id
        self.spe = steps_per_epoch
        self._epoch: List[GapRecord] = []
        kept: List[str] = []
        if resume_step > 0 and self.path.exists():
            for rec in iter_metrics(self.path):
                last = rec["step"] if rec["type"] == "step" else rec["last_step"]
                if last < resume_step:
                    kept.append(json.dumps(rec, sort_keys=True))
                    if rec["type"] == "step" and rec["step"] >= (resume_step // self.spe) * self.spe:
                        self._epoch.append(GapRecord(**{k: rec[k] for k in GapRecord.__dataclass_fields__}))
        self.path.write_text("".join(line + "\n" for line in kept))
        self._fh = open(self.path, "a")

    def write(self, rec: GapRecord) -> None:
        self._line({"type": "step", "run_id": self.run_id, **rec.to_dict()})
        self._epoch.append(rec)
        if (rec.step + 1) % self.spe == 0:
            recs, self._epoch = self._epoch, []
            self._line(
                {
                    "type": "epoch",
                    "run_id": self.run_id,
                    "epoch": rec.step // self.spe,
                    "last_step": rec.step,
                    "mean_intra_gap": float(np.mean([r.intra_gap for r in recs])),
                    "mean_sim_pct": float(np.mean([r.sim_pct for r in recs])),
                    "mean_inter_loss": float(np.mean([r.inter_loss for r in recs])),
                    "mean_intra_loss": float(np.mean([r.intra_loss for r in recs])),
                }
            )

    def _line(self, d: dict) -> None:
        self._fh.write(json.dumps(d, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_metrics(path: PathLike) -> Iterator[dict]:
    """Parse a metrics file, naming the first bad line."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(rec, dict) or rec.get("type") not in ("step", "epoch"):
                raise MetricsError("record lacks a step/epoch type", lineno)
            if rec["type"] == "step":
                missing = [c for c in GAP_COLUMNS if c not in rec]
                if missing:
                    raise MetricsError(f"step record lacks {missing}", lineno)
            yield rec


def read_step_records(path: PathLike) -> List[dict]:
    """Step records in file order; steps must increase strictly with no holes."""
    path = Path(path)
    if not path.is_file():
        raise MetricsError(f"metrics file {path} not found")
    recs = [r for r in iter_metrics(path) if r["type"] == "step"]
    if not recs:
        raise MetricsError(f"{path} holds no step records")
    for prev, cur in zip(recs, recs[1:]):
        if cur["step"] != prev["step"] + 1:
            raise MetricsError(f"step {cur['step']} follows step {prev['step']}")
    return recs


def tail(records: List, fraction: float = 0.25) -> List:
    """The final ``fraction`` of records (at least one)."""
    return records[len(records) - max(1, int(len(records) * fraction)) :]


def gap_summary(records: List[dict]) -> dict:
    end = tail(records)
    return {
        "run_id": records[0].get("run_id", ""),
        "records": len(records),
        "tail_records": len(end),
        "tail_start_step": end[0]["step"],
        "tail_mean_intra_gap": float(np.mean([r["intra_gap"] for r in end])),
        "tail_mean_sim_pct": float(np.mean([r["sim_pct"] for r in end])),
    }


def write_gap_csv(records: List[dict], path: PathLike) -> None:
    """One row per step record; the trailing ``run_id`` column ties the file to its run."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GAP_COLUMNS + ("run_id",))
        for r in records:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in GAP_COLUMNS] + [r.get("run_id", "")])
