"""Command-line entry point: ``mtut {gen,train,eval,gradcheck,corr-dump}``.

Configuration layers as defaults < ``--config`` JSON file < dotted flags such
as ``--train.lam 0.1`` or ``--dataset.seed 3``. The JSON document has the
sections ``dataset`` and ``train``; the effective document is echoed as
``config.json`` into every output directory.

Exit codes: 0 success, 1 training diverged, 2 validation, 3 I/O,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import alignment, evaluation, gradcheck
from .data import DatasetSpec, generate_dataset, load_manifest, load_split, read_tensor_file
from .training import (CheckpointError, TrainConfig, TrainingDivergedError, load_checkpoint,
                       train)

EXIT_OK, EXIT_DIVERGED, EXIT_VALIDATION, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3, 4
SECTIONS = ("dataset", "train")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _parse_overrides(extra: Sequence[str]) -> dict:
    """``--section.key value`` pairs into ``{section: {key: value}}``."""
    out: dict = {s: {} for s in SECTIONS}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise CliError(f"unrecognized argument {flag!r}", EXIT_VALIDATION)
        key = flag[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise CliError(f"flag {flag} needs a value", EXIT_VALIDATION)
            raw = extra[i + 1]
            i += 2
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise CliError(f"unknown config section in {flag!r}", EXIT_VALIDATION)
        out[section][name] = _parse_value(raw)
    return out


def load_config(path: Optional[str], overrides: dict) -> tuple[DatasetSpec, TrainConfig]:
    doc: dict = {s: {} for s in SECTIONS}
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except ValueError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_VALIDATION) from exc
        if not isinstance(loaded, dict) or set(loaded) - set(SECTIONS):
            raise CliError(f"config {path}: top-level keys must be among {SECTIONS}",
                           EXIT_VALIDATION)
        for s in SECTIONS:
            doc[s].update(loaded.get(s, {}))
    for s in SECTIONS:
        doc[s].update(overrides.get(s, {}))
    try:
        return DatasetSpec.from_dict(doc["dataset"]), TrainConfig.from_dict(doc["train"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_VALIDATION) from exc


def config_document(spec: DatasetSpec, cfg: TrainConfig) -> dict:
    return {"dataset": spec.to_dict(), "train": cfg.to_dict()}


def _echo(doc: dict, out_dir: Path) -> None:
    (out_dir / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} not found: {p}", EXIT_VALIDATION)
    return p


def _make_out(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from exc
    return p


# -- commands ---------------------------------------------------------------

def cmd_gen(args, overrides) -> int:
    if args.seed is not None:
        overrides["dataset"]["seed"] = args.seed
    spec, cfg = load_config(args.config, overrides)
    out = _make_out(args.out)
    generate_dataset(spec, out)
    _echo(config_document(spec, cfg), out)
    print(f"wrote {spec.train_count} train and {spec.test_count} test clips "
          f"({len(spec.modalities)} modalities) to {out}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    if args.seed is not None:
        overrides["train"]["seed"] = args.seed
    if args.mode is not None:
        overrides["train"]["mode"] = args.mode
    if args.threads is not None:
        overrides["train"]["threads"] = args.threads
    data = _require_dir(args.data, "dataset directory")
    if not (data / "train.jsonl").is_file():
        raise CliError(f"dataset directory {data} has no train.jsonl", EXIT_VALIDATION)
    ds_echo = data / "config.json"
    if not args.config and ds_echo.is_file():
        # inherit the dataset section so the echo is complete
        try:
            overrides["dataset"] = {**json.loads(ds_echo.read_text()).get("dataset", {}),
                                    **overrides["dataset"]}
        except ValueError:
            pass
    spec, cfg = load_config(args.config, overrides)
    out = _make_out(args.out)

    def log(rec):
        if not args.quiet:
            cls = " ".join(f"{m}={v:.4f}" for m, v in rec["cls_loss"].items())
            print(f"epoch {rec['epoch']:3d} {rec['phase']:8s} cls {cls}", flush=True)

    train(cfg, data, out, resume_from=args.resume, log=log)
    _echo(config_document(spec, cfg), out)
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    data = _require_dir(args.data, "dataset directory")
    ckpt = _require_dir(args.ckpt, "checkpoint directory")
    networks, _, meta = load_checkpoint(ckpt)
    names = [n.modality for n in networks]
    arrays, labels, ids = load_split(data / "test.jsonl", names)
    fusion = args.fusion == "avg"
    records = evaluation.evaluate(networks, arrays, labels, ids, fusion)
    summary = evaluation.summarize(records, names, fusion)
    out = _make_out(args.out or str(ckpt / "eval"))
    classes = networks[0].classes
    sources = names + ([evaluation.FUSED] if fusion else [])
    for src in sources:
        cm = evaluation.confusion_matrix(records, src, classes)
        evaluation.write_confusion_csv(cm, out / f"confusion_{src}.csv")
    evaluation.write_summary(summary, out / "summary.json")
    _echo({"eval": {"data": str(data), "ckpt": str(ckpt), "fusion": args.fusion},
           "train": meta.get("config")}, out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def run_gradcheck(seed: int) -> list:
    return gradcheck.run_suite(seed)


def cmd_gradcheck(args, overrides) -> int:
    results = run_gradcheck(args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:14s} worst_rel_err={r.worst:.3e} tol={r.tol:.0e} {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_corr_dump(args, overrides) -> int:
    data = _require_dir(args.data, "dataset directory")
    ckpt = _require_dir(args.ckpt, "checkpoint directory")
    networks, _, _ = load_checkpoint(ckpt)
    clip = None
    for split in ("train.jsonl", "test.jsonl"):
        for rec in load_manifest(data / split):
            if rec.id == args.clip:
                clip = rec
    if clip is None:
        raise CliError(f"clip {args.clip!r} not found in {data}", EXIT_VALIDATION)
    out = _make_out(args.out)
    for net in networks:
        x = read_tensor_file(clip.paths[net.modality])
        corr = corr_for_clip(net, x)
        alignment.write_correlation_csv(corr, out / f"corr_{net.modality}.csv")
        evaluation.dump_alignment_features(net, x, out / f"align_{net.modality}.csv")
    print(f"wrote {len(networks)} correlation matrices for {clip.id} to {out}")
    return EXIT_OK


def corr_for_clip(net, clip) -> np.ndarray:
    from .network import network_forward

    _, align, _ = network_forward(net, np.asarray(clip, dtype=np.float64)[None])
    return alignment.correlation_matrix(alignment.normalize_feature_map(align[0]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtut", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic gesture dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train one network per modality")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("mtut", "baseline"))
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--fusion", choices=("none", "avg"), default="avg")
    e.add_argument("--out", help="output directory (default: CKPT/eval)")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("corr-dump", help="dump correlation matrices for one clip")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--clip", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(fn=cmd_corr_dump)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        overrides = _parse_overrides(extra)
        if args.command not in ("gen", "train") and any(overrides.values()):
            raise CliError(f"{args.command} takes no config overrides", EXIT_VALIDATION)
        return args.fn(args, overrides)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
