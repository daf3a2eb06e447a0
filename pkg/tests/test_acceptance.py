"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 4 to 7 share one set of 500-step runs on the fixed synthetic
dataset; the module fixture trains them once.  Expect several minutes on one
CPU.  Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from resmoco import cli
from resmoco import tensor as T
from resmoco.augment import cifar_pair
from resmoco.data import (
    LabelRangeError,
    TruncatedRecordError,
    load_cifar10,
    load_cifar100,
    parse_cifar_records,
    write_cifar_batch,
)
from resmoco.evalkit import extract_features, knn1
from resmoco.gradcheck import run_suite
from resmoco.momentum import ema_update, init_teacher
from resmoco.nn import EncoderSpec, build_encoder
from resmoco.objectives import (
    INTER_KINDS,
    BatchEmbeddings,
    ObjectiveConfig,
    infonce,
    intra_gap_cosine,
    total_loss,
)
from resmoco.runstore import DataSpec, RunConfig, checkpoint_bytes, load_checkpoint, open_datasets, save_config, tail
from resmoco.trainer import TrainConfig, pretrain

SEEDS = (0, 1, 2)
STEPS = 500
BATCH = 80
# 2000 images / 80 per batch = 25 steps per epoch, 20 epochs = 500 steps
PROTOCOL = TrainConfig(
    batch_size=BATCH,
    epochs=20,
    warmup_epochs=2,
    lr=0.1,
    beta_base=0.996,
    beta_mode="cosine_ramp",
    encoder=EncoderSpec("smallconv", (16, 32, 64), 256, 128, 256, True, (3, 16, 16)),
    augment=cifar_pair(16),
)
DATA = DataSpec(kind="synthetic", classes=4, per_class=500, test_per_class=125, image_size=16)


def protocol(seed: int, intra: str, **kw) -> TrainConfig:
    return replace(PROTOCOL, seed=seed, objective=ObjectiveConfig("infonce_ema", intra), **kw)


@pytest.fixture(scope="module")
def datasets():
    train, test = open_datasets(DATA)
    assert len(train) == 2000 and train.image_size == 16 and train.class_count == 4
    return train, test


@pytest.fixture(scope="module")
def paired_runs(datasets):
    """Baseline (intra none) and Res (intra cosine) runs for every seed."""
    train, test = datasets
    runs, train_seconds, eval_seconds = {}, 0.0, 0.0
    for seed in SEEDS:
        for intra in ("none", "cosine"):
            t0 = time.perf_counter()
            state, recs = pretrain(protocol(seed, intra), train)
            t1 = time.perf_counter()
            acc = knn1(extract_features(state.student, train), extract_features(state.student, test))
            eval_seconds += time.perf_counter() - t1
            train_seconds += t1 - t0
            assert len(recs) == STEPS
            runs[seed, intra] = (recs, acc)
    return runs, train_seconds, eval_seconds


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_gradient_oracle(criterion):
    t0 = time.perf_counter()
    reports = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(reports.items(), key=lambda kv: kv[1].max_rel_error)
    failed = [n for n, r in reports.items() if not r.passed]
    ok = not failed and worst[1].max_rel_error <= 1e-4 and elapsed <= 120
    assert "res_moco_objective" in reports
    assert criterion(
        1, ok, f"{len(reports)} checks, worst {worst[0]} {worst[1].max_rel_error:.2e}, failed {failed}, {elapsed:.1f}s"
    )


# -- 2 ------------------------------------------------------------------------

SMALL = EncoderSpec("smallconv", (4, 8), 16, 8, 16, True, (3, 8, 8))


def _as_float64(enc):
    for p in enc.params.values():
        p.value.data = p.value.data.astype(np.float64)
    for k in list(enc.buffers):
        enc.buffers[k] = enc.buffers[k].astype(np.float64)
    return enc


def _distance(teacher, theta) -> float:
    return math.sqrt(sum(float(np.sum((xi - theta[k]) ** 2)) for k, xi in teacher.encoder.state_items()))


def _ema_law_error(beta: float, checkpoints, zero_student: bool) -> float:
    """Worst relative error of ``||xi_n - theta|| = beta^n ||xi_0 - theta||`` over the checkpoints."""
    student = _as_float64(build_encoder(SMALL, 0))
    if zero_student:
        for _, arr in student.state_items():
            arr[...] = 0.0
    teacher = init_teacher(build_encoder(SMALL, 1))
    _as_float64(teacher.encoder)
    frozen = student.checksum()
    theta = {k: v.copy() for k, v in student.state_items()}
    d0 = _distance(teacher, theta)
    worst = 0.0
    for n in range(1, max(checkpoints) + 1):
        ema_update(teacher, student, beta, step=n)
        if n in checkpoints:
            expect = beta**n * d0
            worst = max(worst, abs(_distance(teacher, theta) - expect) / expect)
    assert student.checksum() == frozen
    return worst


def test_criterion_2_ema_law(criterion):
    parts, worst = [], 0.0
    for beta in (0.9, 0.99, 0.996):
        # around a zero student the recursion is exact enough to follow all 1000 steps
        err0 = _ema_law_error(beta, {1, 10, 100, 1000}, zero_student=True)
        # around a random student the gap must stay well above float64 spacing of the weights
        n_max = min(1000, int(math.log(1e-8) / math.log(beta)))
        err1 = _ema_law_error(beta, {1, 10, n_max}, zero_student=False)
        worst = max(worst, err0, err1)
        parts.append(f"beta {beta}: {max(err0, err1):.1e} (random student to n={n_max})")
    assert criterion(2, worst <= 1e-5, "; ".join(parts))


# -- 3 ------------------------------------------------------------------------


def _symmetry_errors(rng):
    b, d = 6, 5
    be = BatchEmbeddings(*(T.Tensor(rng.standard_normal((b, d))) for _ in range(8)))
    worst = 0.0
    for inter in INTER_KINDS:
        for intra in ("none", "cosine", "ce", "mse"):
            if inter == "none" and intra == "none":
                continue
            for asym in (False, True):
                cfg = ObjectiveConfig(inter, intra, intra_asymmetric=asym)
                a, _ = total_loss(be, cfg)
                s, _ = total_loss(be.swapped(), cfg)
                worst = max(worst, abs(a.item() - s.item()))
    return worst


def test_criterion_3_loss_identities(criterion):
    with T.precision(np.float64):
        uniform = {b: infonce(T.Tensor(np.ones((b, 3))), T.Tensor(np.ones((b, 3)))).item() for b in (2, 8, 64)}
        uni_err = max(abs(v - math.log(b)) for b, v in uniform.items())
        e = np.eye(3)
        q = T.Tensor(np.stack([e[0], e[0], e[0]]))
        gaps = [intra_gap_cosine(q, T.Tensor(np.stack([k] * 3))).item() for k in (e[0], e[1], -e[0])]
        swap = _symmetry_errors(np.random.default_rng(0))
    ok = uni_err <= 1e-6 and gaps == [0.0, 2.0, 4.0] and swap <= 1e-9
    assert criterion(3, ok, f"|infonce - ln B| {uni_err:.1e}; cosine gaps {gaps}; view-swap {swap:.1e}")


# -- 4, 5, 6 ------------------------------------------------------------------


def _tail_gap(recs):
    return float(np.mean([r.intra_gap for r in tail(recs)]))


def test_criterion_4_gap_reduction(paired_runs, criterion):
    runs, train_seconds, _ = paired_runs
    ratios = {s: _tail_gap(runs[s, "cosine"][0]) / _tail_gap(runs[s, "none"][0]) for s in SEEDS}
    ok = all(r <= 0.5 for r in ratios.values()) and train_seconds <= 15 * 60
    shown = ", ".join(f"seed {s} {r:.3f}" for s, r in ratios.items())
    assert criterion(4, ok, f"tail gap ratio Res/baseline {shown}; {train_seconds / 60:.1f} min")


def test_criterion_5_downstream_direction(paired_runs, criterion):
    runs, train_seconds, eval_seconds = paired_runs
    chance = 100.0 / DATA.classes
    accs = {s: (runs[s, "cosine"][1], runs[s, "none"][1]) for s in SEEDS}
    wins = sum(res >= base for res, base in accs.values())
    floor_ok = all(min(pair) >= chance + 20 for pair in accs.values())
    minutes = (train_seconds + eval_seconds) / 60
    ok = wins >= 2 and floor_ok and minutes <= 20
    shown = ", ".join(f"seed {s} {r:.1f} vs {b:.1f}" for s, (r, b) in accs.items())
    assert criterion(5, ok, f"KNN-1 Res vs baseline {shown}; Res >= baseline in {wins}/3; {minutes:.1f} min")


def test_criterion_6_similarity_monitoring(paired_runs, criterion):
    runs, *_ = paired_runs
    fractions = {}
    for s in SEEDS:
        res, base = tail(runs[s, "cosine"][0]), tail(runs[s, "none"][0])
        assert [r.step for r in res] == [r.step for r in base]
        fractions[s] = float(np.mean([r.sim_pct > b.sim_pct for r, b in zip(res, base)]))
    ok = all(f >= 0.8 for f in fractions.values())
    shown = ", ".join(f"seed {s} {f:.2f}" for s, f in fractions.items())
    assert criterion(6, ok, f"fraction of tail steps with higher sim_pct {shown}")


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_distance_matrix(paired_runs, datasets, criterion):
    runs, *_ = paired_runs
    train, _ = datasets
    results = {"cosine": runs[0, "cosine"][0]}
    for intra in ("ce", "mse"):
        results[intra] = pretrain(protocol(0, intra), train)[1]
    ok, parts = True, []
    for intra, recs in results.items():
        finite = all(math.isfinite(r.inter_loss) and math.isfinite(r.intra_loss) for r in recs)
        start = recs[0].intra_loss
        end = float(np.mean([r.intra_loss for r in tail(recs)]))
        ok &= finite and len(recs) == STEPS and end < start
        parts.append(f"{intra} step0 {start:.4g} -> tail {end:.4g}{'' if finite else ' (non-finite)'}")
    assert criterion(7, ok, "; ".join(parts))


# -- 8 ------------------------------------------------------------------------

TOGGLE = 100


def _toggle_pairs(recs):
    """(on-phase mean gap, following off-phase mean gap) for each full on/off pair."""
    gaps = np.array([r.intra_gap for r in recs])
    pairs = []
    for start in range(0, len(gaps) - 2 * TOGGLE + 1, 2 * TOGGLE):
        assert all(r.intra_active for r in recs[start : start + TOGGLE])
        assert not any(r.intra_active for r in recs[start + TOGGLE : start + 2 * TOGGLE])
        pairs.append((gaps[start : start + TOGGLE].mean(), gaps[start + TOGGLE : start + 2 * TOGGLE].mean()))
    return pairs


def test_criterion_8_intra_toggle(datasets, criterion):
    train, _ = datasets
    passed, parts = 0, []
    for s in SEEDS:
        recs = pretrain(protocol(s, "cosine", intra_toggle_period=TOGGLE), train)[1]
        pairs = _toggle_pairs(recs)
        rises = sum(off > on for on, off in pairs)
        passed += rises * 2 > len(pairs)
        parts.append(f"seed {s} " + " ".join(f"{on:.3f}->{off:.3f}" for on, off in pairs))
    assert criterion(8, passed >= 2, f"{passed}/3 seeds rise in off-phases; " + "; ".join(parts))


# -- 9 ------------------------------------------------------------------------


def _same_state(a, b) -> bool:
    # manifests carry a creation time, so re-serialise both states under one manifest
    sa, ma = load_checkpoint(a)
    sb, mb = load_checkpoint(b)
    return ma.run_id == mb.run_id and checkpoint_bytes(sa, ma) == checkpoint_bytes(sb, ma)


def test_criterion_9_determinism_and_persistence(tmp_path, capsys, criterion):
    cfg = RunConfig(
        TrainConfig(lr=0.3, batch_size=16, epochs=6, warmup_epochs=1, encoder=SMALL, augment=cifar_pair(8)),
        DataSpec(per_class=16, test_per_class=4, image_size=8, seed=3),
    )
    save_config(cfg, tmp_path / "run.json")
    common = ["pretrain", "--config", str(tmp_path / "run.json"), "--checkpoint-every", "0"]
    codes = [cli.main(common + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    codes.append(cli.main(common + ["--out", str(tmp_path / "c"), "--stop-at", "12"]))
    codes.append(cli.main(["pretrain", "--resume", str(tmp_path / "c" / "last.ckpt"), "--out", str(tmp_path / "c")]))
    capsys.readouterr()
    metrics = {n: (tmp_path / n / "metrics.jsonl").read_bytes() for n in "abc"}
    same = metrics["a"] == metrics["b"]
    resumed = metrics["a"] == metrics["c"]
    ckpt = _same_state(tmp_path / "a" / "last.ckpt", tmp_path / "c" / "last.ckpt")
    ok = codes == [0] * 4 and same and resumed and ckpt
    assert criterion(
        9, ok, f"repeat metrics identical {same}; resumed at step 12/24 metrics {resumed}, checkpoint {ckpt}"
    )


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_cifar_ingestion(tmp_path, criterion):
    rng = np.random.default_rng(0)
    checks = []

    c10 = tmp_path / "c10"
    c10.mkdir()
    imgs, labels = [], []
    for i in range(1, 6):
        x, y = rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8), rng.integers(0, 10, 3)
        write_cifar_batch(c10 / f"data_batch_{i}.bin", x, y)
        imgs.append(x)
        labels.append(y)
        checks.append((c10 / f"data_batch_{i}.bin").stat().st_size == 3 * 3073)
    write_cifar_batch(c10 / "test_batch.bin", imgs[0], labels[0])
    ds = load_cifar10(c10)
    checks.append(np.array_equal(ds.images, np.concatenate(imgs)) and np.array_equal(ds.labels, np.concatenate(labels)))
    checks.append(len(load_cifar10(c10, "test")) == 3)

    c100 = tmp_path / "c100"
    c100.mkdir()
    x = rng.integers(0, 256, (4, 32, 32, 3), dtype=np.uint8)
    write_cifar_batch(c100 / "train.bin", x, [0, 99, 5, 42], coarse=[0, 19, 1, 8])
    write_cifar_batch(c100 / "test.bin", x[:2], [1, 2], coarse=[0, 0])
    checks.append((c100 / "train.bin").stat().st_size == 4 * 3074)
    ds100 = load_cifar100(c100)
    checks.append(ds100.labels.tolist() == [0, 99, 5, 42] and np.array_equal(ds100.images, x))

    raw10 = (c10 / "data_batch_1.bin").read_bytes()
    bad = bytearray(raw10)
    bad[3073] = 10
    for raw, label_bytes, max_label, err in (
        (raw10[:-1], 1, 9, TruncatedRecordError),
        (raw10 + b"\0" * 3072, 1, 9, TruncatedRecordError),
        (bytes(bad), 1, 9, LabelRangeError),
        ((c100 / "train.bin").read_bytes(), 1, 9, TruncatedRecordError),
        ((c100 / "train.bin").read_bytes(), 2, 40, LabelRangeError),
    ):
        try:
            parse_cifar_records(raw, label_bytes, max_label)
            checks.append(False)
        except err:
            checks.append(True)

    real = os.environ.get("RESMOCO_CIFAR10_ROOT")
    note = "synthesized batches"
    if real:
        train = load_cifar10(real)
        checks.append(len(train) == 50000 and train.labels.max() == 9)
        note += f" and real CIFAR-10 at {real}"
    assert criterion(10, all(checks), f"{sum(checks)}/{len(checks)} checks on {note}")
