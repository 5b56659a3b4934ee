"""Unimodal and fused prediction, accuracy and confusion matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .network import ModalityNetwork, network_forward, softmax

__all__ = [
    "FUSED",
    "PredictionRecord",
    "predict",
    "fuse_average",
    "evaluate",
    "accuracy",
    "confusion_matrix",
    "write_confusion_csv",
    "read_confusion_csv",
    "channel_mean_map",
    "dump_alignment_features",
    "summarize",
]

FUSED = "fused"


@dataclass
class PredictionRecord:
    clip_id: str
    label: int
    probs: dict[str, np.ndarray]
    fused: Optional[np.ndarray] = None

    def vector(self, source: str) -> np.ndarray:
        if source == FUSED:
            if self.fused is None:
                raise KeyError(f"{self.clip_id}: no fused prediction")
            return self.fused
        return self.probs[source]


def predict(net: ModalityNetwork, x, batch_size: int = 32) -> np.ndarray:
    """Softmax probabilities for one clip ``(W, H, T, C)`` or a batch of clips."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 4
    if single:
        x = x[None]
    out = []
    for start in range(0, len(x), batch_size):
        logits, _, _ = network_forward(net, x[start:start + batch_size])
        out.append(softmax(logits))
    probs = np.concatenate(out)
    return probs[0] if single else probs


def fuse_average(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Per-class arithmetic mean of probability vectors."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        raise ValueError("fuse_average needs at least one vector")
    if len({v.shape for v in vectors}) != 1:
        raise ValueError(f"vector shapes differ: {[v.shape for v in vectors]}")
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total += v
    return total / len(vectors)


def evaluate(networks: Sequence[ModalityNetwork], arrays: dict[str, np.ndarray], labels,
             ids: Sequence[str], fusion: bool = True) -> list[PredictionRecord]:
    """Run every network on its own modality; optionally fuse by averaging."""
    probs = {net.modality: predict(net, arrays[net.modality]) for net in networks}
    records = []
    for i, clip_id in enumerate(ids):
        per = {m: p[i] for m, p in probs.items()}
        fused = fuse_average(list(per.values())) if fusion else None
        records.append(PredictionRecord(clip_id, int(labels[i]), per, fused))
    return records


def _argmax(v: np.ndarray) -> int:
    # numpy returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(v))


def accuracy(records: Sequence[PredictionRecord], source: str) -> float:
    if not records:
        raise ValueError("accuracy of an empty record set")
    hits = sum(_argmax(r.vector(source)) == r.label for r in records)
    return hits / len(records)


def confusion_matrix(records: Sequence[PredictionRecord], source: str,
                     classes: Optional[int] = None) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    if not records:
        raise ValueError("confusion matrix of an empty record set")
    k = classes or len(records[0].vector(source))
    cm = np.zeros((k, k), dtype=np.int64)
    for r in records:
        cm[r.label, _argmax(r.vector(source))] += 1
    return cm


def write_confusion_csv(cm: np.ndarray, path) -> Path:
    path = Path(path)
    path.write_text("".join(",".join(str(int(v)) for v in row) + "\n" for row in cm))
    return path


def read_confusion_csv(path) -> np.ndarray:
    rows = Path(path).read_text().split()
    return np.array([[int(v) for v in row.split(",")] for row in rows], dtype=np.int64)


def channel_mean_map(net: ModalityNetwork, clip) -> np.ndarray:
    """Alignment-layer activations of one clip averaged over channels: ``(W, H, T)``."""
    _, align, _ = network_forward(net, np.asarray(clip, dtype=np.float64)[None])
    return align[0].mean(axis=-1)


def dump_alignment_features(net: ModalityNetwork, clip, path) -> Path:
    """Write the channel-mean map as T blocks of W rows, blocks separated by a blank line."""
    fmap = channel_mean_map(net, clip)
    blocks = []
    for t in range(fmap.shape[2]):
        blocks.append("\n".join(",".join(repr(float(v)) for v in row)
                                for row in fmap[:, :, t]))
    path = Path(path)
    try:
        path.write_text("\n\n".join(blocks) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write feature dump {path}: {exc}") from exc
    return path


def summarize(records: Sequence[PredictionRecord], modalities: Sequence[str],
              fusion: bool) -> dict:
    acc = {m: accuracy(records, m) for m in modalities}
    if fusion:
        acc[FUSED] = accuracy(records, FUSED)
    return {"accuracy": acc, "count": len(records)}


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return path
