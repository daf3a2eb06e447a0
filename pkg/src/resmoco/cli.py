"""Command-line entry points: ``pretrain``, ``probe``, ``knn``, ``gapreport`` and ``gradcheck``.

Exit codes: 0 ok, 1 usage/config error, 2 dataset, 3 checkpoint, 4 metrics,
5 gradient check.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .data import DatasetError, batches_per_epoch
from .evalkit import evaluate
from .gradcheck import run_suite
from .objectives import ObjectiveConfig
from .runstore import (
    CheckpointError,
    ConfigError,
    MetricsError,
    MetricsWriter,
    RunConfig,
    RunManifest,
    gap_summary,
    load_checkpoint,
    load_config,
    open_datasets,
    read_step_records,
    save_checkpoint,
    save_config,
    write_gap_csv,
)
from .trainer import pretrain

EXIT_OK, EXIT_USAGE, EXIT_DATASET, EXIT_CHECKPOINT, EXIT_METRICS, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra) -> None:
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the dataset code
    def error(self, message: str) -> None:
        raise CliError(EXIT_USAGE, "usage", message)


def parse_objective(text: str) -> dict:
    """``inter=infonce_ema,intra=cosine`` -> ``{"inter": ..., "intra": ...}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, value = part.partition("=")
        if not sep or key not in ("inter", "intra"):
            raise CliError(EXIT_USAGE, "usage", f"bad --objective item {part!r}; expected inter=X or intra=Y")
        out[key] = value
    return out


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train, data = cfg.train, cfg.data
    if args.dataset:
        data = replace(data, kind=args.dataset, root=args.data_root)
    elif args.data_root:
        data = replace(data, root=args.data_root)
    changes = {}
    if args.objective:
        changes["objective"] = ObjectiveConfig(**{**train.objective.to_dict(), **parse_objective(args.objective)})
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("beta", "beta_base"), ("beta_mode", "beta_mode")):
        if getattr(args, flag) is not None:
            changes[key] = getattr(args, flag)
    if args.intra_toggle is not None:
        changes["intra_toggle_period"] = args.intra_toggle or None
    return RunConfig(replace(train, **changes), data)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(EXIT_USAGE, "output_exists", f"{out} is not empty; pass --force to reuse it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    if args.resume:
        state, manifest = load_checkpoint(args.resume)
        cfg = manifest.run_config()
        on_disk = out / "manifest.json"
        if on_disk.exists() and RunManifest.read(on_disk).run_id != manifest.run_id:
            raise CliError(EXIT_USAGE, "output_exists", f"{out} belongs to a different run")
        train_ds, _ = open_datasets(cfg.data)
        if train_ds.fingerprint() != manifest.dataset_fingerprint:
            raise CliError(EXIT_DATASET, "dataset_mismatch", "dataset differs from the one the run started on")
        out.mkdir(parents=True, exist_ok=True)
        if not on_disk.exists():
            manifest.write(on_disk)
    else:
        cfg = _run_config(args)
        train_ds, _ = open_datasets(cfg.data)
        _prepare_out(out, args.force)
        manifest = RunManifest.create(cfg, train_ds.fingerprint())
        manifest.write(out / "manifest.json")
        save_config(cfg, out / "config.json")
        state = None

    tcfg = cfg.train
    spe = batches_per_epoch(len(train_ds), tcfg.batch_size)
    every = args.checkpoint_every * spe if args.checkpoint_every else 0
    start = state.step if state is not None else 0

    with MetricsWriter(out / "metrics.jsonl", manifest.run_id, spe, resume_step=start) as metrics:

        def on_step(rec, st) -> None:
            metrics.write(rec)
            if every and st.step % every == 0:
                save_checkpoint(out / f"step_{st.step:07d}.ckpt", st, manifest)

        state, _ = pretrain(tcfg, train_ds, state=state, stop_at=args.stop_at, on_step=on_step)
    save_checkpoint(out / "last.ckpt", state, manifest)
    _emit({"run_id": manifest.run_id, "step": state.step, "out": str(out), "checkpoint": str(out / "last.ckpt")})
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _eval(args, probe: bool) -> int:
    state, manifest = load_checkpoint(args.checkpoint)
    data = manifest.run_config().data
    if args.dataset:
        data = replace(data, kind=args.dataset, root=args.data_root)
    elif args.data_root:
        data = replace(data, root=args.data_root)
    train_ds, test_ds = open_datasets(data)
    report = evaluate(
        state.student,
        train_ds,
        test_ds,
        probe=probe,
        knn=not probe,
        probe_epochs=getattr(args, "probe_epochs", 0),
        probe_lr=getattr(args, "probe_lr", 0.0),
        seed=args.seed,
        fingerprint=f"{manifest.run_id}@{state.step}:{test_ds.fingerprint()}",
    )
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    return _eval(args, probe=True)


def cmd_knn(args) -> int:
    return _eval(args, probe=False)


# ---------------------------------------------------------------------------
# gap report and gradient check
# ---------------------------------------------------------------------------


def cmd_gapreport(args) -> int:
    records = read_step_records(args.metrics)
    if args.out:
        write_gap_csv(records, args.out)
    summary = gap_summary(records)
    if args.baseline:
        base = gap_summary(read_step_records(args.baseline))
        summary["baseline_tail_mean_intra_gap"] = base["tail_mean_intra_gap"]
        summary["gap_ratio"] = summary["tail_mean_intra_gap"] / base["tail_mean_intra_gap"]
    _emit(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(seed=args.seed)
    width = max(len(n) for n in reports)
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:<{width}}  {rep.max_rel_error:.3e}  {status}")
    failed = [n for n, r in reports.items() if not r.passed]
    if failed:
        raise CliError(EXIT_GRADCHECK, "gradcheck_failed", f"{len(failed)} op(s) exceed tolerance", ops=failed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resmoco", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pt = sub.add_parser("pretrain", help="self-supervised pretraining")
    pt.add_argument("--config", help="TOML or JSON run config")
    pt.add_argument("--dataset", choices=("cifar10", "cifar100", "synthetic"))
    pt.add_argument("--data-root")
    pt.add_argument("--objective", help="e.g. inter=infonce_ema,intra=cosine")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--beta", type=float, help="base EMA coefficient")
    pt.add_argument("--beta-mode", choices=("cosine_ramp", "fixed"))
    pt.add_argument("--intra-toggle", type=int, help="on/off period in steps (0 disables)")
    pt.add_argument("--out", required=True)
    pt.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    pt.add_argument("--resume", help="continue from this checkpoint")
    pt.add_argument("--stop-at", type=int, help="stop after this many total steps")
    pt.add_argument("--checkpoint-every", type=int, default=10, help="epochs between checkpoints (0: final only)")
    pt.set_defaults(func=cmd_pretrain)

    for name, func in (("probe", cmd_probe), ("knn", cmd_knn)):
        ev = sub.add_parser(name, help=f"{name} evaluation of a checkpoint")
        ev.add_argument("--checkpoint", required=True)
        ev.add_argument("--dataset", choices=("cifar10", "cifar100", "synthetic"))
        ev.add_argument("--data-root")
        ev.add_argument("--seed", type=int, default=0)
        if name == "probe":
            ev.add_argument("--probe-epochs", type=int, default=100)
            ev.add_argument("--probe-lr", type=float, default=0.1)
        ev.set_defaults(func=func)

    gr = sub.add_parser("gapreport", help="CSV and tail summary of a metrics file")
    gr.add_argument("--metrics", required=True)
    gr.add_argument("--out", help="CSV destination")
    gr.add_argument("--baseline", help="metrics of a run to compare against")
    gr.set_defaults(func=cmd_gapreport)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


_ERROR_CODES = (
    (DatasetError, EXIT_DATASET),
    (CheckpointError, EXIT_CHECKPOINT),
    (MetricsError, EXIT_METRICS),
    (ConfigError, EXIT_USAGE),
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), "exit_code": exc.code, **exc.extra}
    except (DatasetError, CheckpointError, MetricsError, ValueError, ArithmeticError) as exc:
        code = next((c for cls, c in _ERROR_CODES if isinstance(exc, cls)), EXIT_USAGE)
        err = {"error": getattr(exc, "kind", type(exc).__name__), "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return err["exit_code"]


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
