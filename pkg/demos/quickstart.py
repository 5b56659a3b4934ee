"""A small end-to-end tour: data, co-training, evaluation and a correlation dump.

Everything runs at reduced scale (4 classes, 8^3 clips, narrow networks) so
it finishes in a few seconds.

    python3 demos/quickstart.py [workdir]
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from mtut.alignment import correlation_matrix, normalize_feature_map
from mtut.data import DatasetSpec, generate_dataset, load_split
from mtut.evaluation import evaluate, summarize
from mtut.network import network_forward
from mtut.training import TrainConfig, load_checkpoint, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mtut-"))

# two modalities rendered from the same trajectories; b is noisy
spec = DatasetSpec(classes=4, train_count=64, test_count=32, extents=(8, 8, 8), seed=1)
generate_dataset(spec, work / "ds")
print("dataset:", json.loads((work / "ds" / "dataset.json").read_text())["classes"], "classes")

# same seed for both modes, so they share the pretrain phase exactly
for mode in ("baseline", "mtut"):
    cfg = TrainConfig(mode=mode, widths=(4, 6, 8), pretrain_epochs=10, ssa_epochs=5, seed=1)
    train(cfg, work / "ds", work / mode)
    last = json.loads((work / mode / "metrics.jsonl").read_text().splitlines()[-1])
    print(f"{mode:8s} final epoch cls loss", {m: round(v, 3) for m, v in last["cls_loss"].items()},
          "gates", {p: round(v, 3) for p, v in last["rho_mean"].items()})

arrays, labels, ids = load_split(work / "ds" / "test.jsonl")
for mode in ("baseline", "mtut"):
    nets, _, _ = load_checkpoint(work / mode / "checkpoints" / "final")
    acc = summarize(evaluate(nets, arrays, labels, ids, True), ["a", "b"], True)["accuracy"]
    print(f"{mode:8s} test accuracy", acc)

# how similar are the two networks' correlation structures on one clip?
nets, _, _ = load_checkpoint(work / "mtut" / "checkpoints" / "final")
corr = {}
for net in nets:
    _, align, _ = network_forward(net, arrays[net.modality][:1])
    corr[net.modality] = correlation_matrix(normalize_feature_map(align[0]))
gap = np.linalg.norm(corr["a"] - corr["b"]) ** 2
print(f"squared Frobenius gap between corr_a and corr_b on {ids[0]}: {gap:.3f}")
print("outputs in", work)
