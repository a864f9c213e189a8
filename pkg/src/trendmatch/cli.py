"""Command-line entry point: ``trendmatch {generate,train,predict,eval,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DimensionError, DivergenceError, GenerationError
from .optim import Adam
from .synthdata import (SceneSpec, generate_many, make_splits, read_dataset, read_manifest, save_trend_png,
                        split_indices, write_dataset)
from .train import ablate, evaluate, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _load_spec(path):
    if path is None:
        return SceneSpec()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scene spec {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("scene spec must be a JSON object")
    return SceneSpec.from_dict(raw)


def _select(data_dir, split, include_trend):
    """Read the pairs of one manifest split (``auto`` falls back to everything)."""
    if not Path(data_dir).is_dir():
        raise DataError(f"dataset directory {data_dir} does not exist")
    manifest = read_manifest(data_dir)
    count = len([f for f in os.listdir(Path(data_dir) / "t1") if f.endswith(".png")]) if (Path(data_dir) / "t1").is_dir() else 0
    if split == "auto":
        idx = split_indices(manifest, "test", count)
        split = "test" if idx else "all"
    idx = split_indices(manifest, split, count)
    return read_dataset(data_dir, include_trend=include_trend, indices=idx)


# -- commands ---------------------------------------------------------------

def cmd_generate(args):
    spec = _load_spec(args.spec)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    splits = make_splits(args.count, args.val_fraction, args.test_fraction)
    pairs = generate_many(spec, args.count, args.seed)
    write_dataset(pairs, args.out, spec, args.seed, splits)
    print(f"wrote {args.count} pairs to {args.out} (train/val/test = "
          f"{splits['train'][1]}/{splits['val'][1] - splits['val'][0]}/{splits['test'][1] - splits['test'][0]})")


def cmd_train(args):
    config = load_config(args.config)
    model = optimizer = None
    start = 0
    if args.resume:
        model, ckpt = load_checkpoint(args.resume)
        if ckpt.net_config != config.net:
            raise ConfigError("checkpoint network config differs from --config")
        optimizer = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.eps)
        state = ckpt.adam_state(model)
        if state is not None:
            optimizer.load_state_dict(state)
        start = ckpt.epoch
    # trend labels are never loaded for training or validation
    train_pairs = _select(args.data, "train", include_trend=False)
    val_pairs = _select(args.data, "val", include_trend=False) if not args.no_val else []
    if not train_pairs:
        raise DataError(f"no training pairs found in {args.data}")
    res = train(config, train_pairs, val_pairs or None, args.out, model, optimizer, start_epoch=start, log=print)
    best = "" if res.best_val_f is None else f", best val change F {100 * res.best_val_f:.2f} at epoch {res.best_epoch}"
    print(f"finished at epoch {res.epoch}{best}; checkpoints in {args.out}")


def _run_settings(args, ckpt):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig(net=ckpt.net_config, tau=ckpt.net_config.tau)
    if cfg.net != ckpt.net_config:
        raise ConfigError("checkpoint network config differs from --config")
    over = {}
    if args.metric:
        over["gcd_metric"] = args.metric
    if args.threshold is not None:
        over["threshold"] = args.threshold
    return replace(cfg, **over) if over else cfg


def cmd_predict(args):
    model, ckpt = load_checkpoint(args.ckpt)
    cfg = _run_settings(args, ckpt)
    pairs = _select(args.data, args.split, include_trend=False)
    preds = predict(model, pairs, cfg.tau, cfg.threshold, cfg.gcd_metric, cfg.bg_index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(preds):
        Image.fromarray(p.change * np.uint8(255), mode="L").save(out / f"change_{i:04d}.png")
        save_trend_png(out / f"trend_{i:04d}.png", p.trend)
        for tag, bg in (("bg1", p.bg1), ("bg2", p.bg2)):
            Image.fromarray(np.clip(np.rint(bg * 255), 0, 255).astype(np.uint8), mode="L").save(out / f"{tag}_{i:04d}.png")
    print(f"wrote predictions for {len(preds)} pairs to {out}")


def cmd_eval(args):
    model, ckpt = load_checkpoint(args.ckpt)
    cfg = _run_settings(args, ckpt)
    pairs = _select(args.data, args.split, include_trend=True)
    if not pairs:
        raise DataError(f"no pairs to evaluate in {args.data}")
    report = evaluate(model, pairs, cfg)
    print(report.to_text())
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    if args.json:
        Path(args.json).write_text(payload + "\n")
    else:
        print(payload)


def cmd_ablate(args):
    config = load_config(args.config)
    train_pairs = _select(args.data, "train", include_trend=False)
    test_pairs = _select(args.data, args.split, include_trend=False)
    if not train_pairs or not test_pairs:
        raise DataError("ablation needs non-empty train and evaluation splits")
    report = ablate(config, train_pairs, test_pairs, log=print)
    print(report.to_text())
    payload = json.dumps(report.table(), indent=2, sort_keys=True)
    if args.json:
        Path(args.json).write_text(payload + "\n")
    else:
        print(payload)


# -- parser -----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="trendmatch", description="Weakly supervised trend change detection.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic bi-temporal dataset")
    g.add_argument("--spec", help="scene spec JSON (defaults built in)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.0)
    g.add_argument("--test-fraction", type=float, default=0.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train from change labels only")
    t.add_argument("--config", help="run config JSON (defaults built in)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="directory for train_log.csv, best.tcdw, final.tcdw")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-val", action="store_true", help="skip validation even if the manifest has a val split")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("predict", cmd_predict, "write change/trend/background maps"),
                               ("eval", cmd_eval, "score a checkpoint against trend labels")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--config", help="run config JSON; defaults follow the checkpoint")
        p.add_argument("--split", default="auto", choices=("auto", "all", "train", "val", "test"))
        p.add_argument("--metric", choices=("softmatch", "cosine", "euclidean"))
        p.add_argument("--threshold", type=float)
        if name == "predict":
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--json", help="write the JSON report here instead of stdout")
        p.set_defaults(func=fn)

    a = sub.add_parser("ablate", help="compare GCD distances under one protocol")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="auto", choices=("auto", "all", "val", "test"))
    a.add_argument("--json")
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
