"""Two-phase co-training of one network per modality.

Phase one trains every network on its own classification loss. Phase two
adds, for each ordered pair (m, n), the gated alignment loss pulling network
m's correlation structure toward network n's. Gates come from the current
mini-batch losses and are treated as constants, and the target correlation
matrix never receives gradient, so a network only learns from peers that are
currently doing better than it.
"""

from __future__ import annotations

import json
import math
import shutil
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import alignment
from .alignment import LossBreakdown, SsaTerm, focal_rho, total_objective
from .data import batch_iter, decode_tensor, encode_tensor, load_split
from .network import (LayerSpec, ModalityNetwork, init_network, mini_gesture_net,
                      network_backward, network_forward, softmax_xent_batch)
from .numerics import RngStream, ShapeError

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "StepResult",
    "CheckpointError",
    "TrainingDivergedError",
    "new_optimizer_state",
    "sgd_momentum_step",
    "lr_schedule_update",
    "reset_plateau",
    "check_alignment_compat",
    "cotrain_step",
    "build_networks",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

MODES = ("mtut", "baseline")


@dataclass
class TrainConfig:
    lam: float = 0.05
    beta: float = 2.0
    pretrain_epochs: int = 30
    ssa_epochs: int = 15
    base_lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    mode: str = "mtut"
    plateau_patience: int = 5
    plateau_delta: float = 1e-3
    max_lr_drops: int = 2
    modalities: Optional[list[str]] = None
    widths: tuple[int, ...] = (8, 16, 32)
    eps_std: float = alignment.DEFAULT_EPS[0]
    eps_norm: float = alignment.DEFAULT_EPS[1]
    threads: int = 1
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.modalities is not None:
            self.modalities = list(self.modalities)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        for name in ("beta", "base_lr", "batch_size", "plateau_patience", "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        for name in ("pretrain_epochs", "ssa_epochs", "max_lr_drops"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")

    @property
    def eps(self) -> tuple[float, float]:
        return (self.eps_std, self.eps_norm)

    @property
    def ssa_active(self) -> bool:
        return self.mode == "mtut"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    velocity: list[dict[str, np.ndarray]]
    lr: float
    drops: int = 0
    best: float = math.inf
    since: int = 0


@dataclass
class StepResult:
    breakdowns: dict[str, LossBreakdown]
    gates: dict[tuple[str, str], float] = field(default_factory=dict)
    violations: int = 0
    batch_size: int = 0


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """A classification loss became non-finite; parameters are no longer usable."""


def new_optimizer_state(net: ModalityNetwork, lr: float) -> OptimizerState:
    return OptimizerState([{k: np.zeros_like(v) for k, v in p.items()} for p in net.params], lr)


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float, mu: float):
    """In place: ``v = mu*v + g`` then ``p = p - lr*v`` for every tensor."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("params, grads and velocity have different layer counts")
    for p, g, v in zip(params, grads, state.velocity):
        if p.keys() != g.keys():
            raise ShapeError("gradient keys do not match parameter keys")
        for k in p:
            if p[k].shape != g[k].shape or v[k].shape != p[k].shape:
                raise ShapeError(f"shape mismatch for {k}: {p[k].shape} vs {g[k].shape}")
            v[k] *= mu
            v[k] += g[k]
            p[k] -= lr * v[k]
    return params, state


def clip_grad_norm(grads, max_norm: float):
    """Scale a network's gradients so their joint l2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float(np.vdot(g[k], g[k])) for g in grads for k in sorted(g)))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return [{k: v * scale for k, v in g.items()} for g in grads]


def lr_schedule_update(state: OptimizerState, epoch_loss: float, patience: int = 5,
                       delta: float = 1e-3, max_drops: int = 2) -> OptimizerState:
    """Divide the learning rate by ten once the loss stops improving.

    An epoch counts as an improvement when it beats the best loss so far by
    more than ``delta``. After ``patience`` epochs without one, the rate drops
    (at most ``max_drops`` times) and the tracker restarts from this epoch.
    """
    if epoch_loss < state.best - delta:
        state.best = epoch_loss
        state.since = 0
        return state
    state.since += 1
    if state.since >= patience and state.drops < max_drops:
        state.lr /= 10.0
        state.drops += 1
        state.best = epoch_loss
        state.since = 0
    return state


def reset_plateau(state: OptimizerState) -> None:
    state.best = math.inf
    state.since = 0


def check_alignment_compat(networks: Sequence[ModalityNetwork]) -> None:
    extents = {net.modality: net.align_extents()[:3] for net in networks}
    if len(set(extents.values())) > 1:
        raise ShapeError(f"alignment layers disagree on (W, H, T): {extents}")


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def cotrain_step(networks: Sequence[ModalityNetwork], states: Sequence[OptimizerState],
                 inputs: dict[str, np.ndarray], labels: np.ndarray, cfg: TrainConfig,
                 phase: str = "ssa") -> StepResult:
    """One synchronous update of every network on a shared mini-batch.

    All forward passes, gates and gradients are computed against the
    pre-step parameters before any network is updated.
    """
    if phase not in ("pretrain", "ssa"):
        raise ValueError(f"unknown phase {phase!r}")
    n = len(labels)
    names = [net.modality for net in networks]

    def fwd(net):
        logits, align, cache = network_forward(net, inputs[net.modality])
        losses, d_logits = softmax_xent_batch(logits, labels)
        return align, cache, float(losses.mean()), d_logits

    outs = dict(zip(names, _pmap(fwd, list(networks), cfg.threads)))
    cls = {m: outs[m][2] for m in names}
    bad = [m for m in names if not math.isfinite(cls[m])]
    if bad:
        raise TrainingDivergedError(f"non-finite classification loss for {bad}")
    d_align: dict[str, Optional[np.ndarray]] = {m: None for m in names}
    terms: dict[str, list[SsaTerm]] = {m: [] for m in names}
    gates = {}
    use_ssa = phase == "ssa" and cfg.ssa_active and len(names) > 1
    if use_ssa:
        for m in names:
            for other in names:
                if other == m:
                    continue
                gate = focal_rho(cls[m], cls[other], cfg.beta)
                gates[(m, other)] = gate.rho
                if gate.rho == 0.0:
                    terms[m].append(SsaTerm(other, gate, 0.0))
                    continue
                values, grads = alignment.ssa_loss_and_grad_batch(
                    outs[m][0], outs[other][0], gate.rho, cfg.eps, need_grad=cfg.lam > 0
                )
                terms[m].append(SsaTerm(other, gate, float(values.mean())))
                if cfg.lam > 0:
                    contrib = (cfg.lam / n) * grads
                    d_align[m] = contrib if d_align[m] is None else d_align[m] + contrib

    violations = 0
    if use_ssa:
        best = min(cls.values())
        leaders = [m for m in names if cls[m] == best]
        if len(leaders) == 1:
            g = d_align[leaders[0]]
            if g is not None and np.any(g != 0.0):
                violations += 1

    def bwd(net):
        _, cache, _, d_logits = outs[net.modality]
        return network_backward(net, cache, d_logits, d_align[net.modality])

    all_grads = _pmap(bwd, list(networks), cfg.threads)
    if cfg.grad_clip is not None:
        all_grads = [clip_grad_norm(g, cfg.grad_clip) for g in all_grads]
    for net, state, grads in zip(networks, states, all_grads):
        sgd_momentum_step(net.params, grads, state, state.lr, cfg.momentum)

    breakdowns = {m: total_objective(cls[m], terms[m], cfg.lam) for m in names}
    return StepResult(breakdowns, gates, violations, n)


def _modality_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def build_networks(cfg: TrainConfig, modalities: Sequence[str], input_extents: dict,
                   classes: int) -> list[ModalityNetwork]:
    """One freshly initialized network per modality; init depends only on seed and name."""
    root = RngStream(cfg.seed)
    nets = []
    for m in modalities:
        ext = tuple(input_extents[m])
        layers = mini_gesture_net(ext[3], classes, cfg.widths)
        nets.append(init_network(layers, root.spawn(_modality_key(m)), m, ext))
    check_alignment_compat(nets)
    return nets


def _epoch_rng(seed: int, epoch: int) -> RngStream:
    return RngStream(seed ^ 0x5DEECE66D).spawn(epoch)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def _run_epoch(networks, states, arrays, labels, cfg, epoch, phase):
    names = [net.modality for net in networks]
    acc_cls = {m: 0.0 for m in names}
    acc_total = {m: 0.0 for m in names}
    acc_rho: dict[str, float] = {}
    acc_ssa: dict[str, float] = {}
    violations = 0
    seen = 0
    for idx in batch_iter(range(len(labels)), cfg.batch_size, _epoch_rng(cfg.seed, epoch),
                          shuffle=True):
        idx = np.asarray(idx)
        inputs = {m: arrays[m][idx] for m in names}
        try:
            res = cotrain_step(networks, states, inputs, labels[idx], cfg, phase)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"epoch {epoch} ({phase}): {exc}") from None
        k = res.batch_size
        seen += k
        violations += res.violations
        for m, bd in res.breakdowns.items():
            acc_cls[m] += k * bd.cls_loss
            acc_total[m] += k * bd.total
            for term in bd.ssa_terms:
                key = f"{m},{term.other}"
                acc_rho[key] = acc_rho.get(key, 0.0) + k * term.gate.rho
                acc_ssa[key] = acc_ssa.get(key, 0.0) + k * term.value
    return {
        "epoch": epoch,
        "phase": phase,
        "cls_loss": {m: v / seen for m, v in acc_cls.items()},
        "total_loss": {m: v / seen for m, v in acc_total.items()},
        "rho_mean": {p: v / seen for p, v in acc_rho.items()},
        "ssa_loss_mean": {p: v / seen for p, v in acc_ssa.items()},
        "lr": {net.modality: st.lr for net, st in zip(networks, states)},
        "one_way_violations": violations,
    }


def train(cfg: TrainConfig, dataset_dir, out_dir, resume_from=None, log=None) -> Path:
    """Run both phases and write checkpoints plus ``metrics.jsonl`` to ``out_dir``.

    Checkpoints land in ``checkpoints/pretrain`` and ``checkpoints/final``.
    ``resume_from`` (a checkpoint directory) continues a run after the epoch
    stored there, reproducing the unbroken run exactly. ``cfg.mode`` may
    differ from the resumed run's mode.
    """
    cfg.validate()
    dataset_dir, out = Path(dataset_dir), Path(out_dir)
    manifest = dataset_dir / "train.jsonl"
    if not manifest.is_file():
        raise FileNotFoundError(f"no training manifest at {manifest}")
    arrays, labels, _ = load_split(manifest, cfg.modalities)
    names = list(arrays)
    classes = _classes_of(dataset_dir, labels)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump_json({"train": cfg.to_dict()}) + "\n")

    metrics_path = out / "metrics.jsonl"
    if resume_from is not None:
        networks, states, meta = load_checkpoint(resume_from)
        have = [n.modality for n in networks]
        if not set(names) <= set(have):
            raise CheckpointError(f"checkpoint modalities {have} do not cover {names}")
        # networks train independently of absent peers only without alignment
        if set(names) != set(have) and cfg.mode == "mtut" and len(have) > 1:
            raise CheckpointError("a subset of a checkpoint can only resume in baseline mode")
        keep = [have.index(m) for m in names]
        networks = [networks[i] for i in keep]
        states = [states[i] for i in keep]
        start = meta["epoch"] + 1
        src_metrics = Path(resume_from).parent.parent / "metrics.jsonl"
        kept = []
        if src_metrics.is_file():
            for ln in src_metrics.read_text().splitlines():
                rec = json.loads(ln)
                if rec["epoch"] > meta["epoch"]:
                    continue
                if set(names) != set(have):
                    ln = _dump_json(_restrict_record(rec, names))
                kept.append(ln)
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
        src_pre = Path(resume_from).parent / "pretrain"
        dst_pre = out / "checkpoints" / "pretrain"
        if meta["epoch"] >= cfg.pretrain_epochs and src_pre.is_dir() and \
                src_pre.resolve() != dst_pre.resolve():
            shutil.copytree(src_pre, dst_pre, dirs_exist_ok=True)
    else:
        extents = {m: arrays[m].shape[1:] for m in names}
        networks = build_networks(cfg, names, extents, classes)
        states = [new_optimizer_state(net, cfg.base_lr) for net in networks]
        start = 1
        metrics_path.write_text("")

    total = cfg.pretrain_epochs + cfg.ssa_epochs
    with metrics_path.open("a") as fh:
        for epoch in range(start, total + 1):
            phase = "pretrain" if epoch <= cfg.pretrain_epochs else "ssa"
            if epoch == cfg.pretrain_epochs + 1:
                for st in states:
                    reset_plateau(st)
            rec = _run_epoch(networks, states, arrays, labels, cfg, epoch, phase)
            for net, st in zip(networks, states):
                lr_schedule_update(st, rec["total_loss"][net.modality], cfg.plateau_patience,
                                   cfg.plateau_delta, cfg.max_lr_drops)
            fh.write(_dump_json(rec) + "\n")
            fh.flush()
            if log is not None:
                log(rec)
            if epoch == cfg.pretrain_epochs:
                save_checkpoint(networks, states, out / "checkpoints" / "pretrain",
                                epoch=epoch, config=cfg)
    save_checkpoint(networks, states, out / "checkpoints" / "final", epoch=total, config=cfg)
    return out


def _restrict_record(rec: dict, names) -> dict:
    """Metrics record reduced to the given modalities (pair keys need both ends)."""
    out = dict(rec)
    for key in ("cls_loss", "total_loss", "lr"):
        out[key] = {m: v for m, v in rec[key].items() if m in names}
    for key in ("rho_mean", "ssa_loss_mean"):
        out[key] = {p: v for p, v in rec[key].items()
                    if all(m in names for m in p.split(","))}
    return out


def _classes_of(dataset_dir: Path, labels) -> int:
    spec = dataset_dir / "dataset.json"
    if spec.is_file():
        return int(json.loads(spec.read_text())["classes"])
    return int(labels.max()) + 1


# -- checkpoints ------------------------------------------------------------

def _float_or_none(x: float):
    return None if math.isinf(x) else x


def save_checkpoint(networks: Sequence[ModalityNetwork], states: Sequence[OptimizerState],
                    path, epoch: int = 0, config: Optional[TrainConfig] = None) -> Path:
    """One sub-directory per network (tensor files + ``index.json``), plus a set index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for net, st in zip(networks, states):
        d = path / net.modality
        d.mkdir(exist_ok=True)
        params = []
        for i, (p, v) in enumerate(zip(net.params, st.velocity)):
            entry = {}
            for k in sorted(p):
                fname, vname = f"layer{i}_{k}.mtut", f"layer{i}_{k}_velocity.mtut"
                (d / fname).write_bytes(encode_tensor(p[k], 2))
                (d / vname).write_bytes(encode_tensor(v[k], 2))
                entry[k] = {"file": fname, "velocity": vname, "shape": list(p[k].shape)}
            params.append(entry)
        index = {
            "modality": net.modality,
            "align_index": net.align_index,
            "input_extents": list(net.input_extents),
            "layers": [ls.to_dict() for ls in net.layers],
            "params": params,
            "optimizer": {"lr": st.lr, "drops": st.drops,
                          "best": _float_or_none(st.best), "since": st.since},
        }
        (d / "index.json").write_text(_dump_json(index) + "\n")
    top = {"epoch": epoch, "networks": [net.modality for net in networks]}
    if config is not None:
        top["config"] = config.to_dict()
    (path / "index.json").write_text(_dump_json(top) + "\n")
    return path


def _load_network(d: Path):
    try:
        index = json.loads((d / "index.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{d}: unreadable index: {exc}") from exc
    layers = [LayerSpec.from_dict(x) for x in index["layers"]]
    if len(index["params"]) != len(layers):
        raise CheckpointError(f"{d}: {len(index['params'])} param entries for {len(layers)} layers")
    # derive expected shapes from layer arithmetic
    ref = init_network(layers, RngStream(0), index["modality"], tuple(index["input_extents"]),
                       index["align_index"])
    params, velocity = [], []
    for i, entry in enumerate(index["params"]):
        p, v = {}, {}
        if set(entry) != set(ref.params[i]):
            raise CheckpointError(f"{d}: layer {i} has parameters {sorted(entry)}")
        for k, e in entry.items():
            want = ref.params[i][k].shape
            if tuple(e["shape"]) != want:
                raise CheckpointError(f"{d}: layer {i} {k} shape {e['shape']} != {list(want)}")
            p[k] = decode_tensor((d / e["file"]).read_bytes(), str(d / e["file"]))
            v[k] = decode_tensor((d / e["velocity"]).read_bytes(), str(d / e["velocity"]))
            if p[k].shape != want or v[k].shape != want:
                raise CheckpointError(f"{d}: layer {i} {k} file shape does not match index")
        params.append(p)
        velocity.append(v)
    net = ModalityNetwork(index["modality"], layers, params, index["align_index"],
                          tuple(index["input_extents"]))
    opt = index["optimizer"]
    best = math.inf if opt["best"] is None else opt["best"]
    return net, OptimizerState(velocity, opt["lr"], opt["drops"], best, opt["since"])


def load_checkpoint(path):
    """Return ``(networks, states, meta)``; ``meta`` is the set-level index."""
    path = Path(path)
    try:
        meta = json.loads((path / "index.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint index: {exc}") from exc
    networks, states = [], []
    for m in meta["networks"]:
        net, st = _load_network(path / m)
        if net.modality != m:
            raise CheckpointError(f"{path / m}: index names modality {net.modality!r}")
        networks.append(net)
        states.append(st)
    check_alignment_compat(networks)
    return networks, states, meta
