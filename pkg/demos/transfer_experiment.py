"""One seed of the paired baseline/MTUT experiment at the default configuration.

Both modes share the 30 classification-only epochs. The MTUT tail then co-
trains a and b for 15 epochs, while the baseline tail keeps training b on
its own. About 100 s on one core.

    python3 demos/transfer_experiment.py [seed] [workdir]
"""

import sys
import tempfile
from pathlib import Path

from mtut.data import DatasetSpec, generate_dataset, load_split
from mtut.evaluation import evaluate, summarize
from mtut.training import TrainConfig, TrainingDivergedError, load_checkpoint, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
work = Path(sys.argv[2] if len(sys.argv) > 2 else tempfile.mkdtemp(prefix="mtut-pair-"))

generate_dataset(DatasetSpec(seed=seed), work / "ds")
arrays, labels, ids = load_split(work / "ds" / "test.jsonl")


def accuracy(ckpt):
    nets, _, _ = load_checkpoint(ckpt)
    names = [n.modality for n in nets]
    return summarize(evaluate(nets, arrays, labels, ids, True), names, True)["accuracy"]


train(TrainConfig(seed=seed, ssa_epochs=0), work / "ds", work / "pre")
pre = work / "pre" / "checkpoints" / "pretrain"
print("after pretraining:", accuracy(pre))

try:
    train(TrainConfig(seed=seed), work / "ds", work / "mtut", resume_from=pre)
    print("mtut:", accuracy(work / "mtut" / "checkpoints" / "final"))
except TrainingDivergedError as exc:
    print("mtut diverged:", exc)

train(TrainConfig(seed=seed, mode="baseline", modalities=["b"]), work / "ds", work / "base",
      resume_from=pre)
print("baseline b:", accuracy(work / "base" / "checkpoints" / "final")["b"])
