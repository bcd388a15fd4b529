"""Command line entrypoint: gen-data / train / eval-retrieval / eval-caption /
retrieve / caption."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import evalkit, synthdata
from .errors import ChangeCapError, ConfigurationError
from .model import ModelConfig, load_checkpoint
from .objective import BagOfWordsSimilarity, LossConfig
from .trainer import TrainConfig, train


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    with p.open(encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigurationError("config file must contain a mapping")
    return data


def _merge(defaults: dict, file_cfg: dict, args: argparse.Namespace, keys) -> dict:
    """defaults < config file < explicit flags (flags use default=None)."""
    cfg = dict(defaults)
    for k in keys:
        if k in file_cfg:
            cfg[k] = file_cfg[k]
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            cfg[k] = v
    return cfg


GEN_DEFAULTS = {
    "num_items": 512,
    "seed": 0,
    "image_size": 64,
    "no_change_fraction": 0.5,
    "duplicate_rate": 0.1,
    "train_fraction": 0.8,
    "val_fraction": 0.1,
}

TRAIN_DEFAULTS = {
    "seed": 0,
    "epochs": 50,
    "batch_size": 32,
    "lr": 1e-4,
    "warmup_fraction": 0.05,
    "tau": 0.01,
    "theta": None,
    "fn_mode": "none",
    "contrastive_weight": 1.0,
    "hard_negatives": "off",
    "backbone_finetune": "full",
    "dim": 128,
    "num_heads": 4,
    "max_len": 40,
    "vocab_min_freq": 5,
}


def cmd_gen_data(args):
    cfg = _merge(GEN_DEFAULTS, _load_config_file(args.config), args, GEN_DEFAULTS)
    gen_cfg = synthdata.GeneratorConfig(
        image_size=int(cfg["image_size"]),
        no_change_fraction=float(cfg["no_change_fraction"]),
        duplicate_rate=float(cfg["duplicate_rate"]),
    )
    items, dup_groups = synthdata.generate_dataset(int(cfg["num_items"]), int(cfg["seed"]), gen_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(items)
    n_train = int(round(cfg["train_fraction"] * n))
    n_val = int(round(cfg["val_fraction"] * n))
    splits = {
        "train": items[:n_train],
        "val": items[n_train : n_train + n_val],
        "test": items[n_train + n_val :],
    }
    for split, split_items in splits.items():
        synthdata.export_dataset(split_items, out, split)
    (out / "duplicate_groups.json").write_text(json.dumps(dup_groups))
    (out / "gen_config.json").write_text(json.dumps(cfg, indent=2))
    print(f"wrote {n} items to {out} (train {n_train}, val {n_val}, test {n - n_train - n_val})")
    return 0


def _build_train_config(args) -> TrainConfig:
    cfg = _merge(TRAIN_DEFAULTS, _load_config_file(args.config), args, TRAIN_DEFAULTS)
    fn_mode = cfg["fn_mode"]
    theta = cfg["theta"]
    if fn_mode != "none" and theta is None:
        raise ConfigurationError(f"--fn-mode {fn_mode} requires an explicit --theta")
    if theta is None:
        theta = 1.0
    hn = cfg["hard_negatives"]
    hard_negatives = 0 if str(hn) == "off" else int(hn)
    loss = LossConfig(
        tau=float(cfg["tau"]),
        theta=float(theta),
        fn_mode=fn_mode,
        contrastive_weight=float(cfg["contrastive_weight"]),
    )
    image_size = getattr(args, "image_size", None)
    model = ModelConfig(
        image_size=int(image_size) if image_size else 64,
        dim=int(cfg["dim"]),
        num_heads=int(cfg["num_heads"]),
        max_len=int(cfg["max_len"]),
        backbone_finetune=cfg["backbone_finetune"],
    )
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        target_lr=float(cfg["lr"]),
        warmup_fraction=float(cfg["warmup_fraction"]),
        seed=int(cfg["seed"]),
        hard_negatives=hard_negatives,
        vocab_min_freq=int(cfg["vocab_min_freq"]),
        loss=loss,
        model=model,
    )


def cmd_train(args):
    config = _build_train_config(args)
    data = Path(args.data)
    gen_cfg_path = data / "gen_config.json"
    if gen_cfg_path.exists() and getattr(args, "image_size", None) is None:
        image_size = json.loads(gen_cfg_path.read_text())["image_size"]
        config = TrainConfig(
            **{**asdict(config), "loss": config.loss,
               "model": ModelConfig(**{**asdict(config.model), "image_size": image_size})}
        )
    train_items = synthdata.load_items(data, "train")
    val_items = synthdata.load_items(data, "val")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = asdict(config)
    (run_dir / "config.json").write_text(json.dumps(echo, indent=2, default=str))
    result = train(config, train_items, val_items, run_dir=run_dir)
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_eval_context(args):
    model, vocab = load_checkpoint(args.checkpoint)
    items = synthdata.load_items(Path(args.data), args.split)
    provider = BagOfWordsSimilarity([c for it in items for c in it.captions])
    return model, vocab, items, provider


def _parse_ks(arg):
    return tuple(int(x) for x in str(arg).split(","))


def cmd_eval_retrieval(args):
    model, vocab, items, provider = _load_eval_context(args)
    report = evalkit.evaluate_retrieval(
        model, items, vocab, provider, theta=args.theta, ks=_parse_ks(args.k)
    )
    text = str(report)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_eval_caption(args):
    model, vocab, items, _ = _load_eval_context(args)
    report = evalkit.evaluate_captioning(model, items, vocab)
    text = str(report)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_retrieve(args):
    model, vocab = load_checkpoint(args.checkpoint)
    items = synthdata.load_items(Path(args.data), args.split)
    e = evalkit.embed_pairs(model, items)
    s = evalkit.embed_captions(model, vocab, [args.query])
    sims = (s @ e.T).cpu().numpy()[0]
    pair_ids = np.asarray([it.pair_id for it in items])
    order = np.lexsort((pair_ids, -sims))[: args.k]
    for j in order:
        print(f"{int(pair_ids[j])}\t{sims[j]:.4f}")
    return 0


def _load_image(path, image_size):
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"image not found: {p}")
    img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
    if img.shape[0] != image_size or img.shape[1] != image_size:
        raise ConfigurationError(
            f"image {p} is {img.shape[1]}x{img.shape[0]}, model expects {image_size}x{image_size}"
        )
    return img


def cmd_caption(args):
    model, vocab = load_checkpoint(args.checkpoint)
    size = model.model_config.image_size
    before = _load_image(args.before, size)
    after = _load_image(args.after, size)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        e_cap, _ = model.encoder(
            torch.as_tensor(before[None], dtype=dtype), torch.as_tensor(after[None], dtype=dtype)
        )
        ids = model.decoder.generate(e_cap)
    print(vocab.decode(ids[0]))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="changecap")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--num-items", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--no-change-fraction", type=float)
    g.add_argument("--duplicate-rate", type=float)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--val-fraction", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-fraction", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--theta", type=float)
    t.add_argument("--lambda", dest="contrastive_weight", type=float)
    t.add_argument("--fn-mode", choices=["none", "fne", "fna"])
    t.add_argument("--hard-negatives", help="per-anchor count, or 'off'")
    t.add_argument("--backbone-finetune", choices=["frozen", "last2", "full"])
    t.add_argument("--dim", type=int)
    t.add_argument("--num-heads", type=int)
    t.add_argument("--max-len", type=int)
    t.add_argument("--image-size", type=int)
    t.add_argument("--vocab-min-freq", type=int)
    t.set_defaults(func=cmd_train)

    er = sub.add_parser("eval-retrieval", help="retrieval metrics on a split")
    er.add_argument("--checkpoint", required=True)
    er.add_argument("--data", required=True)
    er.add_argument("--split", default="test")
    er.add_argument("--theta", type=float, default=1.0)
    er.add_argument("--k", default="1,5")
    er.add_argument("--out")
    er.set_defaults(func=cmd_eval_retrieval)

    ec = sub.add_parser("eval-caption", help="caption metrics on a split")
    ec.add_argument("--checkpoint", required=True)
    ec.add_argument("--data", required=True)
    ec.add_argument("--split", default="test")
    ec.add_argument("--out")
    ec.set_defaults(func=cmd_eval_caption)

    r = sub.add_parser("retrieve", help="rank image pairs for a text query")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--query", required=True)
    r.add_argument("--k", type=int, default=5)
    r.set_defaults(func=cmd_retrieve)

    c = sub.add_parser("caption", help="caption a before/after image pair")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--before", required=True)
    c.add_argument("--after", required=True)
    c.set_defaults(func=cmd_caption)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChangeCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
