"""``voxda`` command line: gen-data, train, eval, embed.

Every command accepts ``--config FILE``, a JSON object whose keys are the
command's option names (underscored).  Explicit flags override file values,
unknown keys are rejected, and relative paths in the file are resolved against
the file's directory.  An optional top-level ``"command"`` key must name the
command being run.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics as M
from .data import PROFILES, DatasetError, GenConfig, build_dataset, read_dataset
from .model import LATENT_ACTIVATIONS, CheckpointError, NetworkConfig, load_checkpoint
from .trainer import (LOG_COLUMNS, METHODS, TrainConfig, check_compatible, evaluate, method_weights,
                      predict_latent, train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# option names holding paths; resolved relative to a config file
PATH_KEYS = {"out", "data", "checkpoint", "svg"}


class UsageError(Exception):
    """Bad flags, config values, or inputs that do not exist."""


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Opt:
    """One option: flag spelling plus its default (kept out of argparse so files can fill gaps)."""

    def __init__(self, flag: str, default=None, **kw):
        self.flag = flag
        self.dest = flag.lstrip("-").replace("-", "_")
        self.default = default
        self.kw = kw


GEN_OPTS = [
    _Opt("--out", help="output dataset directory (required)"),
    _Opt("--seed", 0, type=int, help="generation seed (default 0)"),
    _Opt("--classes", 6, type=int, help="number of shape classes, 1-6 (default 6)"),
    _Opt("--instances", 10, type=int, help="instances per class (default 10)"),
    _Opt("--views", 8, type=int, help="views per instance: 1, 2, 4 or 8 (default 8)"),
    _Opt("--target-profile", "lab", choices=sorted(p for p in PROFILES if p != "source"),
         help="target-domain corruption profile (default lab)"),
    _Opt("--voxel-size", 16, type=int, help="voxel grid edge V (default 16)"),
    _Opt("--image-size", 32, type=int, help="image edge in pixels (default 32)"),
    _Opt("--test-fraction", 0.2, type=float, help="fraction of instances held out for test (default 0.2)"),
]

TRAIN_OPTS = [
    _Opt("--data", help="dataset directory (required)"),
    _Opt("--out", help="output directory for checkpoint and logs (required)"),
    _Opt("--method", "dann+class", help=f"loss preset: {' | '.join(METHODS)} (default dann+class)"),
    _Opt("--epochs", 30, type=int, help="training epochs (default 30)"),
    _Opt("--batch-size", 32, type=int, help="images per step, even (default 32)"),
    _Opt("--lr", 1e-3, type=float, help="Adam learning rate (default 1e-3)"),
    _Opt("--seed", 0, type=int, help="initialization and shuffling seed (default 0)"),
    _Opt("--w-domain", None, type=float, help="override the domain-loss weight"),
    _Opt("--w-class", None, type=float, help="override the voxel-class loss weight"),
    _Opt("--w-coral", None, type=float, help="override the CORAL weight"),
    _Opt("--w-mmd", None, type=float, help="override the MMD weight"),
    _Opt("--grl-lambda", 1.0, type=float, help="maximum gradient-reversal strength (default 1.0)"),
    _Opt("--grl-mode", "ramp", choices=["ramp", "constant"], help="GRL schedule (default ramp)"),
    _Opt("--latent-dim", 128, type=int, help="latent width d (default 128)"),
    _Opt("--latent-activation", NetworkConfig.latent_activation, choices=list(LATENT_ACTIVATIONS),
         help=f"latent bounding (default {NetworkConfig.latent_activation})"),
    _Opt("--no-refiner", False, action="store_true", help="disable the refiner stage"),
    _Opt("--eval-every", 1, type=int, help="evaluate and checkpoint every N epochs (default 1)"),
    _Opt("--threshold", M.DEFAULT_THRESHOLD, type=float, help="IoU threshold (default 0.4)"),
]

EVAL_OPTS = [
    _Opt("--checkpoint", help="checkpoint file (required)"),
    _Opt("--data", help="dataset directory (required)"),
    _Opt("--out", "iou_report.csv", help="report path (default iou_report.csv)"),
    _Opt("--threshold", M.DEFAULT_THRESHOLD, type=float, help="IoU threshold (default 0.4)"),
    _Opt("--split", "test", choices=["train", "test"], help="dataset split (default test)"),
    _Opt("--domain", "both", choices=["source", "target", "both"], help="domain(s) to evaluate (default both)"),
    _Opt("--method", None, help="label for the method column (default: read from train_config.json "
                                "next to the checkpoint, else 'model')"),
]

EMBED_OPTS = [
    _Opt("--checkpoint", help="checkpoint file (required)"),
    _Opt("--data", help="dataset directory (required)"),
    _Opt("--out", help="embedding CSV path (required)"),
    _Opt("--svg", None, help="also write an SVG scatter plot here"),
    _Opt("--samples", 200, type=int, help="points to embed, split evenly between domains (default 200)"),
    _Opt("--split", "test", choices=["train", "test"], help="dataset split (default test)"),
    _Opt("--seed", 0, type=int, help="sampling seed (default 0)"),
]

COMMANDS = {
    "gen-data": (GEN_OPTS, "generate the synthetic multiview, two-domain dataset"),
    "train": (TRAIN_OPTS, "train a reconstruction network"),
    "eval": (EVAL_OPTS, "per-class IoU report for a checkpoint"),
    "embed": (EMBED_OPTS, "2-D PCA embedding of source and target latents"),
}
REQUIRED = {"gen-data": ["out"], "train": ["data", "out"], "eval": ["checkpoint", "data"],
            "embed": ["checkpoint", "data", "out"]}
WRITES_DIR = {"gen-data", "train"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxda", description="Single-view voxel reconstruction "
                                     "with unsupervised domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (opts, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file with option values; flags override it")
        if name in WRITES_DIR:
            p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        for o in opts:
            # None default: lets us tell "flag given" apart from "not given"
            p.add_argument(o.flag, dest=o.dest, default=None, **o.kw)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults < config file < flags."""
    opts = COMMANDS[command][0]
    values = {o.dest: o.default for o in opts}
    if args.config:
        cfg_path = Path(args.config)
        try:
            loaded = json.loads(cfg_path.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {cfg_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {cfg_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {cfg_path} must hold a JSON object")
        loaded = dict(loaded)
        cmd = loaded.pop("command", command)
        if cmd != command:
            raise UsageError(f"config file is for command {cmd!r}, not {command!r}")
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            if key in PATH_KEYS and isinstance(value, str):
                value = str((cfg_path.parent / value))
            values[key] = value
    for o in opts:
        given = getattr(args, o.dest)
        if given is not None and not (o.kw.get("action") == "store_true" and given is False):
            values[o.dest] = given
    missing = [k for k in REQUIRED[command] if values.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return values


def _check_out_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to write into it)")


def _dataset(path):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"data directory not found: {p}")
    if not (p / "manifest.json").is_file():
        raise UsageError(f"{p} is not a dataset directory (no manifest.json)")
    return read_dataset(p)


def _checkpoint_path(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(v: dict, force: bool) -> int:
    try:
        cfg = GenConfig(classes=v["classes"], instances=v["instances"], views=v["views"],
                        target_profile=v["target_profile"], voxel_size=v["voxel_size"],
                        image_size=v["image_size"], seed=v["seed"], test_fraction=v["test_fraction"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(v["out"])
    _check_out_dir(out, force)
    manifest = build_dataset(cfg, out)
    print(f"wrote {len(manifest['records'])} records to {out}")
    return EXIT_OK


def train_config_from_options(v: dict) -> TrainConfig:
    if v["method"] not in METHODS:
        raise UsageError(f"unknown method {v['method']!r}; choose from {', '.join(METHODS)}")
    try:
        weights = method_weights(v["method"], v["grl_lambda"], w_domain=v["w_domain"], w_class=v["w_class"],
                                 w_coral=v["w_coral"], w_mmd=v["w_mmd"])
        network = NetworkConfig(latent_dim=v["latent_dim"], refiner_enabled=not v["no_refiner"],
                                latent_activation=v["latent_activation"])
        return TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"], method=v["method"],
                           weights=weights, grl_mode=v["grl_mode"], seed=v["seed"], eval_every=v["eval_every"],
                           threshold=v["threshold"], network=network, data_dir=str(v["data"]),
                           out_dir=str(v["out"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(v: dict, force: bool) -> int:
    cfg = train_config_from_options(v)
    ds = _dataset(cfg.data_dir)
    _check_out_dir(Path(cfg.out_dir), force)
    if ds.num_classes < 2:
        raise UsageError("training needs a dataset with at least 2 classes")
    cfg = replace(cfg, network=replace(cfg.network, num_classes=ds.num_classes,
                                       voxel_size=ds.manifest["voxel_size"],
                                       image_size=ds.manifest["image_size"]))
    _, log = train(cfg)
    last = dict(zip(LOG_COLUMNS, log.records[-1].row()))
    print(" ".join(f"{k}={last[k]}" for k in ("epoch", "iou_source", "iou_target", "domain_acc")))
    return EXIT_OK


def _method_label(checkpoint: Path, given: Optional[str]) -> str:
    if given:
        return given
    cfg_file = checkpoint.parent / "train_config.json"
    try:
        return json.loads(cfg_file.read_text())["method"]
    except (OSError, ValueError, KeyError, TypeError):
        return "model"


def cmd_eval(v: dict) -> int:
    ckpt = _checkpoint_path(v["checkpoint"])
    ds = _dataset(v["data"])
    try:
        eval_cfg = M.EvalConfig(threshold=v["threshold"], split=v["split"], domain=v["domain"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = evaluate(ckpt, ds, eval_cfg, _method_label(ckpt, v["method"]))
    text = M.reports_to_csv(res.reports)
    out = Path(v["out"])
    out.write_text(text)
    for line in text.splitlines():
        if line.startswith("overall,"):
            print(line)
    return EXIT_OK


def cmd_embed(v: dict) -> int:
    n = v["samples"]
    if n < 3:
        raise UsageError(f"embedding needs at least 3 samples, got {n}")
    ckpt = _checkpoint_path(v["checkpoint"])
    ds = _dataset(v["data"])
    config, params = load_checkpoint(ckpt)
    check_compatible(config, ds)
    rng = np.random.default_rng(v["seed"])
    feats: List[np.ndarray] = []
    domains: List[str] = []
    classes: List[str] = []
    for domain, k in (("source", n // 2), ("target", n - n // 2)):
        split = ds.arrays(v["split"], domain)
        if k > len(split):
            raise UsageError(f"asked for {k} {domain} samples but the {v['split']} split has {len(split)}")
        idx = np.sort(rng.choice(len(split), size=k, replace=False))
        feats.append(predict_latent(params, config, split.images[idx]))
        domains += [domain] * k
        classes += [ds.class_names[c] for c in split.labels[idx]]
    coords, _, _ = M.pca_embed(np.concatenate(feats).astype(np.float64))
    Path(v["out"]).write_text(M.embedding_csv(coords, domains, classes))
    if v["svg"]:
        Path(v["svg"]).write_text(M.embedding_svg(coords, domains))
    print(f"embedded {n} points ({n // 2} source, {n - n // 2} target)")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_options(args.command, args)
        if args.command == "gen-data":
            return cmd_gen_data(values, args.force)
        if args.command == "train":
            return cmd_train(values, args.force)
        if args.command == "eval":
            return cmd_eval(values)
        return cmd_embed(values)
    except UsageError as exc:
        print(f"voxda {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"voxda {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"voxda {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # incompatible checkpoint/dataset pairs and other bad inputs
        print(f"voxda {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
