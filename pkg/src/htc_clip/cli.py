"""Command-line entry points: gen, train, eval, predict, gradcheck, ablate."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import ablation, plotting
from .checkpoint import from_model, load_checkpoint, save_checkpoint
from .config import PRESETS, TrainConfig, resolve_config
from .corpus import (
    build_vocab,
    dataset_stats,
    gen_synthetic,
    load_dataset,
    make_sample,
    read_records,
    write_records,
)
from .errors import HTCError, IncompatibleCheckpoint, NonFiniteGradient, NonFiniteLoss
from .evaluation import evaluate, predict_proba
from .model import HTCCLIP
from .taxonomy import load_taxonomy
from .training import gradcheck_setup, model_grad_check, train

logger = logging.getLogger("htc_clip")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4


class InvalidArgs(HTCError, ValueError):
    pass


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run record: command, config, input and artifact digests, timings."""

    def __init__(self, command: str, argv: list[str], out: Path):
        self.out = out
        self.data = {"command": command, "argv": argv, "config": None, "seed": None,
                     "inputs": {}, "artifacts": {}, "timings": {}}
        self._t0 = time.perf_counter()

    def input(self, path) -> None:
        if path:
            self.data["inputs"][str(path)] = sha256(path)

    def artifact(self, path) -> Path:
        self.data["artifacts"][str(path)] = sha256(path)
        return Path(path)

    def write(self) -> Path:
        self.data["timings"]["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, *names):
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise InvalidArgs(f"--{name.replace('_', '-')} is required")
        if not Path(value).is_file():
            raise InvalidArgs(f"--{name.replace('_', '-')}: no such file {value}")


def _config(args) -> TrainConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threshold", None) is not None:
        overrides["decision_threshold"] = args.threshold
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InvalidArgs(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return resolve_config(args.preset, args.config, overrides)


def cmd_gen(args) -> int:
    if args.n_samples < 1 or args.parents < 1 or args.children < 1 or args.noise_tokens < 0:
        raise InvalidArgs("parents, children and n-samples must be >= 1")
    out = _out_dir(args)
    manifest = Manifest("gen", sys.argv[1:], out)
    seed = 7 if args.seed is None else args.seed
    taxonomy, records = gen_synthetic(args.parents, args.children, args.n_samples, seed, args.noise_tokens)
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    n_train = int(round(0.8 * len(records)))
    n_val = int(round(0.1 * len(records)))
    splits = {
        "train": [records[i] for i in order[:n_train]],
        "val": [records[i] for i in order[n_train:n_train + n_val]],
        "test": [records[i] for i in order[n_train + n_val:]],
    }
    (out / "taxonomy.tsv").write_text(taxonomy, encoding="utf-8")
    manifest.artifact(out / "taxonomy.tsv")
    for name, recs in splits.items():
        write_records(out / f"{name}.jsonl", recs)
        manifest.artifact(out / f"{name}.jsonl")
    h = load_taxonomy(out / "taxonomy.tsv")
    avg = float(np.mean([len(r["labels"]) for r in records]))
    manifest.data["seed"] = seed
    manifest.data["config"] = {"parents": args.parents, "children": args.children,
                               "n_samples": args.n_samples, "noise_tokens": args.noise_tokens}
    manifest.data["stats"] = {"num_labels": h.size, "depth": h.depth, "avg_labels_per_sample": avg,
                              **{k: len(v) for k, v in splits.items()}}
    manifest.write()
    print("\t".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def _train_inputs(args, cfg: TrainConfig):
    _require(args, "taxonomy", "train", "val")
    h = load_taxonomy(args.taxonomy)
    texts = [text for text, _ in read_records(args.train)]
    vocab = build_vocab(texts, min_freq=cfg.min_freq)
    cfg = replace(cfg, encoder=replace(cfg.encoder, vocab_size=len(vocab)))
    data = {name: load_dataset(getattr(args, name), h, vocab, cfg.encoder.max_len)
            for name in ("train", "val", "test") if getattr(args, name, None)}
    return h, vocab, cfg, data


def cmd_train(args) -> int:
    cfg = _config(args)
    h, vocab, cfg, data = _train_inputs(args, cfg)
    out = _out_dir(args)
    manifest = Manifest("train", sys.argv[1:], out)
    for name in ("config", "taxonomy", "train", "val", "test"):
        manifest.input(getattr(args, name, None))
    manifest.data["config"] = cfg.to_dict()
    manifest.data["seed"] = cfg.seed
    manifest.data["stats"] = dataset_stats(h, data)

    model = HTCCLIP.build(cfg, h)
    t0 = time.perf_counter()
    result = train(model, data["train"], data["val"], cfg)
    manifest.data["timings"]["train_seconds"] = round(time.perf_counter() - t0, 3)

    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.htc"
    meta = {"best_epoch": result.best_epoch, "best_val_macro_f1": result.best_macro_f1,
            "epochs_run": result.epochs_run}
    save_checkpoint(ckpt_path, from_model(model, vocab, meta, result.best_state))
    manifest.artifact(ckpt_path)
    hist_path = out / "history.jsonl"
    write_records(hist_path, result.history)
    manifest.artifact(hist_path)
    manifest.artifact(plotting.plot_history(result.history, out / "history.png"))
    if "test" in data:
        report = evaluate(model, data["test"], cfg.decision_threshold)
        _write_report(report, out, "test", manifest)
    manifest.data["best_epoch"] = result.best_epoch
    manifest.write()
    print(f"best_epoch={result.best_epoch}\tbest_val_macro_f1={result.best_macro_f1:.4f}"
          f"\tepochs={result.epochs_run}\tcheckpoint={ckpt_path}")
    return EXIT_OK


def _write_report(report, out: Path, split: str, manifest: Manifest) -> None:
    (out / f"report_{split}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / f"report_{split}.txt").write_text(report.to_text(), encoding="utf-8")
    manifest.artifact(out / f"report_{split}.json")
    manifest.artifact(out / f"report_{split}.txt")
    manifest.artifact(plotting.plot_report(report, out / f"report_{split}.png"))


def _load_ckpt(args):
    _require(args, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "taxonomy", None):
        ckpt.check_compatible(load_taxonomy(args.taxonomy))
    return ckpt


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args)
    path = getattr(args, args.split)
    if path is None:
        raise InvalidArgs(f"--{args.split} is required for --split {args.split}")
    _require(args, args.split)
    out = _out_dir(args)
    manifest = Manifest("eval", sys.argv[1:], out)
    manifest.input(args.checkpoint)
    manifest.input(path)
    threshold = ckpt.config.decision_threshold if args.threshold is None else args.threshold
    samples = load_dataset(path, ckpt.hierarchy, ckpt.vocab, ckpt.config.encoder.max_len)
    model = ckpt.build_model()
    report = evaluate(model, samples, threshold, args.mode)
    _write_report(report, out, args.split, manifest)
    manifest.data["config"] = ckpt.config.to_dict()
    manifest.data["seed"] = ckpt.config.seed
    manifest.write()
    print(f"micro_f1={report.micro_f1:.6f}\tmacro_f1={report.macro_f1:.6f}\tn={report.n_samples}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args)
    _require(args, "input")
    out = _out_dir(args)
    manifest = Manifest("predict", sys.argv[1:], out)
    manifest.input(args.checkpoint)
    manifest.input(args.input)
    threshold = ckpt.config.decision_threshold if args.threshold is None else args.threshold
    with open(args.input, encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh]
    model = ckpt.build_model()
    h = ckpt.hierarchy
    samples = [make_sample(h, ckpt.vocab, t, [], ckpt.config.encoder.max_len) for t in texts]
    probs = predict_proba(model, samples)
    path = out / "predictions.jsonl"
    records = []
    for text, row in zip(texts, probs):
        chosen = [h.labels[j] for j in np.flatnonzero(row > threshold)]
        records.append({"text": text, "labels": chosen,
                        "probs": {name: round(float(p), 6) for name, p in zip(h.labels, row)}})
    write_records(path, records)
    manifest.artifact(path)
    manifest.data["config"] = {"threshold": threshold}
    manifest.write()
    for rec in records:
        print("\t".join(rec["labels"]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not args.eps > 0:
        raise InvalidArgs("--eps must be > 0")
    if args.n_samples < 1:
        raise InvalidArgs("--n-samples must be >= 1")
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    model, ids, targets = gradcheck_setup(seed)
    result = model_grad_check(model, ids, targets, args.eps, args.n_samples, seed)
    elapsed = time.perf_counter() - t0
    passed = result.passed(GRADCHECK_TOL)
    record = {"max_rel_error": result.max_rel_error, "n_checked": result.n_checked,
              "per_group": result.per_group, "worst": list(result.worst or ()),
              "eps": args.eps, "seed": seed, "passed": passed, "seconds": round(elapsed, 3)}
    if args.out:
        out = _out_dir(args)
        manifest = Manifest("gradcheck", sys.argv[1:], out)
        (out / "gradcheck.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
        manifest.artifact(out / "gradcheck.json")
        manifest.data["seed"] = seed
        manifest.write()
    print(f"max_rel_error={result.max_rel_error:.3e}\tn={result.n_checked}\t{'PASS' if passed else 'FAIL'}")
    for group, err in sorted(result.per_group.items()):
        print(f"  {group:<18}{err:.3e}")
    if not passed:
        raise NonFiniteGradient(f"max relative error {result.max_rel_error:.3e} >= {GRADCHECK_TOL}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    h, _, cfg, data = _train_inputs(args, cfg)
    out = _out_dir(args)
    manifest = Manifest("ablate", sys.argv[1:], out)
    for name in ("config", "taxonomy", "train", "val"):
        manifest.input(getattr(args, name, None))
    seeds = args.seeds or [cfg.seed]
    variants = ablation.VARIANTS
    if args.tables:
        variants = tuple(v for v in variants if v.table in args.tables)
    rows = ablation.run_ablation(h, cfg, data["train"], data["val"], seeds, variants)
    (out / "ablation.tsv").write_text(ablation.format_rows(rows), encoding="utf-8")
    (out / "ablation.json").write_text(ablation.rows_to_json(rows) + "\n", encoding="utf-8")
    manifest.artifact(out / "ablation.tsv")
    manifest.artifact(out / "ablation.json")
    manifest.artifact(plotting.plot_ablation(rows, out / "ablation.png"))
    manifest.data["config"] = cfg.to_dict()
    manifest.data["seed"] = seeds
    manifest.write()
    sys.stdout.write(ablation.format_rows(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--taxonomy")
    common.add_argument("--train")
    common.add_argument("--val")
    common.add_argument("--test")
    common.add_argument("--checkpoint")
    common.add_argument("--seed", type=int)
    common.add_argument("--threshold", type=float)
    common.add_argument("--out", default=".")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="htc-clip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic taxonomy and dataset splits")
    p.add_argument("--parents", type=int, default=4)
    p.add_argument("--children", type=int, default=3)
    p.add_argument("--n-samples", type=int, default=2500)
    p.add_argument("--noise-tokens", type=int, default=6)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train and keep the best validation checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--mode", choices=("max", "avg", "linear", "hierarchy"), default=None,
                   help="inference rule; default is the checkpoint's own")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="label raw text lines")
    p.add_argument("--input", help="text file, one input per line")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the training objective")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--n-samples", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck, out=None)

    p = sub.add_parser("ablate", parents=[common], help="train the ablation variants")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--tables", nargs="+", choices=("loss_terms", "classifiers", "pooling"))
    p.set_defaults(func=cmd_ablate)
    return parser


def _set_threads() -> None:
    threads = os.environ.get("HTC_CLIP_THREADS")
    if threads:
        n = int(threads)
        torch.set_num_threads(max(1, n))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        return args.func(args)
    except (NonFiniteLoss, NonFiniteGradient) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IncompatibleCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (HTCError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
