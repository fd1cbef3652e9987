"""Command-line driver: dataset synthesis, denoiser pretraining, training and evaluation.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
training error. Relative output paths resolve under ``$GALTRAJ_OUT_ROOT``
(default: the working directory).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import pandas as pd

from . import config as cfgmod
from .diffusion import TrajectoryDenoiser
from .exceptions import ConfigurationError, DataError, GALTrajError
from .io import config_hash, load_dataset, save_dataset
from .loop import METHODS, run_method, save_history
from .metrics import read_error_table, summarize, write_error_table
from .predictor import TrajectoryPredictor
from .world import synthesize_dataset

log = logging.getLogger("galtraj")

OUT_ROOT_ENV = "GALTRAJ_OUT_ROOT"
SPLITS = ("train", "val")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "."))


def resolve(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else out_root() / path


def _config(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    return cfgmod.apply_overrides(cfg, {"seed": args.seed})


def _dataset_file(path, split: str) -> Path:
    path = resolve(path)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    return path


def _write_metadata(out_dir: Path, command: str, cfg: dict) -> None:
    # wall-clock lives only here so every other output stays byte-identical across reruns
    meta = {"command": command, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config_hash": config_hash(cfg)}
    (out_dir / f"{command}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# ---------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    cfg = _config(args)
    out = resolve(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        dcfg = cfgmod.dataset_config(cfg, split)
        seed = cfgmod.split_seed(cfg, split)
        scenarios = synthesize_dataset(dcfg, seed)
        save_dataset(scenarios, out / f"{split}.jsonl", seed=seed, config=cfg["dataset"])
        log.info("wrote %d %s scenarios to %s", len(scenarios), split, out / f"{split}.jsonl")
    cfgmod.dump_config(cfg, out / "config.yaml")
    _write_metadata(out, "dataset", cfg)
    return 0


def cmd_pretrain_denoiser(args) -> int:
    cfg = _config(args)
    scenarios = load_dataset(_dataset_file(args.dataset, "train"))
    ckpt = resolve(args.out or "denoiser.pt")
    if args.resume and ckpt.exists():
        model = TrajectoryDenoiser.load(ckpt)
        model.set_params(n_epochs=int(cfg["denoiser"]["n_epochs"]))
        log.info("resuming denoiser from epoch %d", model.epoch_)
        model.fit(scenarios, resume=True)
    else:
        model = cfgmod.make_denoiser(cfg).fit(scenarios)
    model.save(ckpt)
    curve = ckpt.with_name(ckpt.stem + "_loss.csv")
    pd.DataFrame(model.loss_curve_, columns=["epoch", "train_loss", "val_loss"]).to_csv(curve, index=False)
    _write_metadata(ckpt.parent, "pretrain-denoiser", cfg)
    log.info("denoiser saved to %s (epoch %d)", ckpt, model.epoch_)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    method = args.method
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    run = cfgmod.run_config(cfg)
    denoiser = None
    if method in ("naive", "galtraj"):
        if not args.denoiser:
            raise ConfigurationError(f"method {method!r} needs --denoiser")
        denoiser = TrajectoryDenoiser.load(resolve(args.denoiser))
    train = load_dataset(_dataset_file(args.dataset, "train"))
    evals = load_dataset(_dataset_file(args.dataset, args.split))
    out = resolve(args.out or f"runs/{method}_seed{run.seed}")
    out.mkdir(parents=True, exist_ok=True)
    model, history = run_method(method, run, train, denoiser, val=evals)
    model.save(out / "predictor.pt")
    reference = history["reference"]
    reference.save(out / "reference.pt")
    write_error_table(reference.error_table(evals, model="reference", split=args.split),
                      out / "reference_errors.csv")
    save_history(history, out / "history.json")
    _write_metadata(out, "train", cfg)
    log.info("trained %s; outputs in %s", method, out)
    return 0


def cmd_eval(args) -> int:
    from .plots import plot_curves, plot_error_histogram

    cfg = _config(args)
    ev = cfg["eval"]
    if not args.reference_table:
        raise ConfigurationError("eval needs --reference-table")
    reference = read_error_table(resolve(args.reference_table))
    scenarios = load_dataset(_dataset_file(args.dataset, args.split))
    out = resolve(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    rows, tables, histories = [], {}, {}
    for ckpt in args.checkpoints:
        ckpt = resolve(ckpt)
        name = _model_name(ckpt)
        if name in tables:
            raise ConfigurationError(f"duplicate model name {name!r}; give checkpoints distinct run directories")
        table = TrajectoryPredictor.load(ckpt).error_table(scenarios, model=name, split=args.split)
        write_error_table(table, out / f"errors_{name}.csv")
        row = summarize(table, reference, top_ks=ev["top_ks"], var_alpha=ev["var_alpha"],
                        fpr_thresholds=ev["fpr_thresholds"])
        rows.append({"model": name, **row})
        tables[name] = table
        hist = ckpt.parent / "history.json"
        if hist.exists():
            histories[name] = json.loads(hist.read_text())
    metrics = pd.DataFrame(rows, columns=metric_columns(ev))
    metrics.to_csv(out / "metrics.csv", index=False, float_format="%.6f")
    plot_error_histogram(tables, out / "error_histogram.png")
    if histories:
        plot_curves(histories, out / "metric_curves.png")
    _write_metadata(out, "eval", cfg)
    print(metrics.to_string(index=False))
    return 0


def metric_columns(ev: dict) -> list:
    return (["model"] + [f"top{k}" for k in ev["top_ks"]] + [f"var{ev['var_alpha']}"]
            + [f"fpr{float(t):g}" for t in ev["fpr_thresholds"]] + ["minade6", "minfde6"])


def _model_name(ckpt: Path) -> str:
    if ckpt.stem in ("predictor", "reference"):
        return ckpt.parent.name if ckpt.stem == "predictor" else f"{ckpt.parent.name}_reference"
    return ckpt.stem


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="galtraj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML run config; defaults apply to missing keys")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help=f"output path, relative to ${OUT_ROOT_ENV}")

    p = sub.add_parser("dataset", help="synthesize train/val scenario files")
    common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("pretrain-denoiser", help="train the trajectory denoiser")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory or train file")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    p.set_defaults(func=cmd_pretrain_denoiser)

    p = sub.add_parser("train", help="train a predictor with one method")
    common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--denoiser", default=None, help="denoiser checkpoint (naive and galtraj)")
    p.add_argument("--split", choices=SPLITS, default="val", help="split for the reference table and per-epoch snapshots")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="long-tail metrics for predictor checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--reference-table", default=None, help="frozen reference error table (CSV)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except GALTrajError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
