"""
Configs, checkpoints and metrics on disk
----------------------------------------

The command line writes every run into one directory: a write-once
manifest, the resolved config, a JSONL metrics stream and checkpoints.  This
script drives it through ``resmoco.cli.main`` so it needs no shell, then
interrupts and resumes a run and checks that nothing changed.
"""

import json
import tempfile
from pathlib import Path

from resmoco.augment import cifar_pair
from resmoco.cli import main
from resmoco.nn import EncoderSpec
from resmoco.runstore import DataSpec, RunConfig, gap_summary, load_checkpoint, read_step_records, save_config
from resmoco.trainer import TrainConfig

work = Path(tempfile.mkdtemp(prefix="resmoco-"))

config = RunConfig(
    TrainConfig(
        lr=0.3,
        batch_size=16,
        epochs=4,
        warmup_epochs=1,
        encoder=EncoderSpec("smallconv", (4, 8), 16, 8, 16, True, (3, 8, 8)),
        augment=cifar_pair(8),
    ),
    DataSpec(per_class=16, test_per_class=8, image_size=8),
)
save_config(config, work / "run.toml")
print((work / "run.toml").read_text())

# %%
# One uninterrupted run, and one stopped at step 7 and resumed from its checkpoint.

main(["pretrain", "--config", str(work / "run.toml"), "--out", str(work / "full")])
main(["pretrain", "--config", str(work / "run.toml"), "--out", str(work / "split"), "--stop-at", "7"])
main(["pretrain", "--resume", str(work / "split" / "last.ckpt"), "--out", str(work / "split")])

same = (work / "full" / "metrics.jsonl").read_bytes() == (work / "split" / "metrics.jsonl").read_bytes()
print("metrics identical after resume:", same)

# %%
# Checkpoints restore the full training state, including the teacher.

state, manifest = load_checkpoint(work / "full" / "last.ckpt")
print("run", manifest.run_id, "step", state.step, "teacher last updated at", state.teacher.step_of_last_update)

# %%
# The gap report reads the metrics back.  ``resmoco gapreport`` prints the same summary.

print(json.dumps(gap_summary(read_step_records(work / "full" / "metrics.jsonl")), indent=2))
main(["knn", "--checkpoint", str(work / "full" / "last.ckpt")])
