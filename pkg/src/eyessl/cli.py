"""Command-line entry points: train, evaluate, predict, gen-synthetic, report.

Every run writes a self-contained directory (resolved config, split
manifest, per-epoch history, best checkpoint) named by config hash and
seed, so any experiment can be reproduced or re-reported later from the
directory alone.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .core import (
    ConfigError,
    DataError,
    DatasetPool,
    EyeSSLError,
    LabelMask,
    ParameterError,
    RandomStream,
    TrainConfig,
    ValidationError,
    load_config,
)
from .data import SplitSpec, make_split, write_manifest
from .engine import train
from .evaluation import CLASS_NAMES, evaluate, overlay_masks, render_report
from .network import load_checkpoint, predict_probs

log = logging.getLogger(__name__)

ENV_OUT = "EYESSL_OUT"


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = list(args.set or [])
    if getattr(args, "method", None):
        overrides.append(f"method={args.method}")
    if getattr(args, "k", None) is not None:
        overrides.append(f"k={args.k}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "data_root", None):
        overrides.append(f"data_root={args.data_root}")
    if getattr(args, "out", None):
        overrides.append(f"out_root={args.out}")
    return cfg.with_overrides(overrides)


def _out_root(cfg: TrainConfig) -> Path:
    return Path(cfg.out_root or os.environ.get(ENV_OUT, "runs"))


def _load_datasets(cfg: TrainConfig):
    """Train pool + validation set, synthetic or ingested per the config."""
    if cfg.data_root == "synthetic":
        rng = RandomStream(cfg.seed).child("data")
        train_items = data_mod.generate_synthetic(
            cfg.synth_train, rng.child("train"), size=cfg.input_hw,
            n_subjects=cfg.synth_subjects, prefix="s",
        )
        val_items = data_mod.generate_synthetic(
            max(1, cfg.synth_val), rng.child("val"), size=cfg.input_hw,
            n_subjects=max(1, cfg.synth_subjects // 2), prefix="v",
        )
        pool = DatasetPool(labeled=train_items, unlabeled=[])
        return pool, val_items
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise ConfigError(f"data_root does not exist: {root} (set data_root or --data-root)")
    return data_mod.ingest(root, hw=cfg.input_hw, num_classes=cfg.num_classes)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    pool_all, val_items = _load_datasets(cfg)
    if not val_items:
        raise ConfigError("training needs a validation set (validation/ subtree or synthetic data)")
    spec = SplitSpec(
        k=cfg.k, mode=cfg.split_mode, subject=cfg.split_subject,
        seed=cfg.seed, unlabeled_cap=cfg.unlabeled_cap,
    )
    pool = make_split(pool_all, spec)

    run_dir = _out_root(cfg) / f"{cfg.hash()[:12]}-s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.txt")
    write_manifest(run_dir / "manifest.json", spec, pool)
    log.info("run directory: %s (k=%d, m=%d, method=%s)", run_dir, pool.k, pool.m, cfg.method)

    model, history = train(pool, val_items, cfg, run_dir=run_dir)
    best = max(h["val_miou"] for h in history)
    print(f"run {run_dir}")
    print(f"best validation mIoU: {100.0 * best:.2f}")
    return 0


def _load_run(run_dir: Path):
    cfg_path = run_dir / "config.txt"
    ckpt_path = run_dir / "best.ckpt"
    if not cfg_path.exists() or not ckpt_path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (missing config.txt or best.ckpt)")
    cfg = load_config(cfg_path)
    model, payload = load_checkpoint(ckpt_path, config=cfg)
    return cfg, model, payload


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    cfg, model, _ = _load_run(run_dir)
    if args.data_root:
        cfg = cfg.with_overrides([f"data_root={args.data_root}"])
    _, val_items = _load_datasets(cfg)
    if not val_items:
        raise ConfigError("no labeled validation data to evaluate on")
    report = evaluate(model, val_items, batch_size=cfg.eval_batch, per_image=cfg.miou_per_image)
    print(f"images: {report.n_images}")
    for name, v in zip(CLASS_NAMES, report.per_class):
        print(f"iou[{name}]: {'undefined' if math.isnan(v) else f'{100.0 * v:.2f}'}")
    print(f"mean IoU: {100.0 * report.mean:.2f}")
    return 0


def cmd_predict(args) -> int:
    run_dir = Path(args.run)
    cfg, model, _ = _load_run(run_dir)
    if args.data_root:
        cfg = cfg.with_overrides([f"data_root={args.data_root}"])
    _, val_items = _load_datasets(cfg)
    out_dir = Path(args.out) if args.out else run_dir / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    items = val_items[: args.limit] if args.limit else val_items
    from PIL import Image

    for img, _ in items:
        probs = predict_probs(model, img.pixels[None], batch_size=1)[0]
        mask = probs.argmax(axis=0).astype(np.uint8)
        Image.fromarray(mask).save(out_dir / f"{img.frame_id}_mask.png")
        overlay_masks(img, LabelMask(mask.astype(np.int64), cfg.num_classes),
                      out_dir / f"{img.frame_id}_overlay.png")
    print(f"wrote {2 * len(items)} files to {out_dir}")
    return 0


def cmd_gen_synthetic(args) -> int:
    rng = RandomStream(args.seed).child("data")
    size = tuple(int(x) for x in args.size.split("x"))
    if len(size) != 2:
        raise ConfigError(f"--size must look like HxW, got {args.size!r}")
    out = Path(args.out)
    train_items = data_mod.generate_synthetic(
        args.n, rng.child("train"), size=size, n_subjects=args.subjects, prefix="s"
    )
    data_mod.export_dataset(train_items, out / "train")
    if args.val:
        val_items = data_mod.generate_synthetic(
            args.val, rng.child("val"), size=size,
            n_subjects=max(1, args.subjects // 2), prefix="v",
        )
        data_mod.export_dataset(val_items, out / "validation")
    print(f"wrote {args.n} train + {args.val} validation frames to {out}")
    return 0


def _summarize_run(run_dir: Path) -> dict:
    cfg_path = run_dir / "config.txt"
    hist_path = run_dir / "history.jsonl"
    if not hist_path.exists():
        raise ConfigError(f"{run_dir} has no history.jsonl")
    cfg = load_config(cfg_path) if cfg_path.exists() else TrainConfig()
    records = []
    for line in hist_path.read_text().splitlines():
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed history line in {hist_path}: {exc}") from exc
    if not records:
        raise DataError(f"empty history in {hist_path}")
    best = max(records, key=lambda r: r["val_miou"])
    return {
        "method": cfg.method,
        "k_labeled": cfg.k,
        "subject_mode": cfg.split_mode,
        "seed": cfg.seed,
        "miou": best["val_miou"],
        "per_class": best.get("val_per_class"),
    }


def cmd_report(args) -> int:
    summaries = [_summarize_run(Path(d)) for d in args.run_dirs]
    out_dir = Path(args.out) if args.out else Path(args.run_dirs[0]) / "report"
    written = render_report(summaries, out_dir)
    for path in written:
        print(f"wrote {path}")
    print((out_dir / "report_table.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eyessl",
        description="Semi-supervised eye segmentation: train, evaluate, and report experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key: value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable; unknown keys fail")

    p_train = sub.add_parser("train", help="train one model and write a run directory")
    add_common(p_train)
    p_train.add_argument("--method", choices=("SL", "SSL_D", "SSL_SS"))
    p_train.add_argument("--k", type=int, help="labeled-set size")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--data-root", help="dataset root, or 'synthetic'")
    p_train.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./runs)")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a run's best checkpoint")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--data-root")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="emit class masks and overlays")
    p_pred.add_argument("--run", required=True)
    p_pred.add_argument("--out")
    p_pred.add_argument("--data-root")
    p_pred.add_argument("--limit", type=int, default=0)
    p_pred.set_defaults(fn=cmd_predict)

    p_gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--n", type=int, default=64)
    p_gen.add_argument("--val", type=int, default=16)
    p_gen.add_argument("--subjects", type=int, default=8)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--size", default="64x96")
    p_gen.set_defaults(fn=cmd_gen_synthetic)

    p_rep = sub.add_parser("report", help="comparison tables across run directories")
    p_rep.add_argument("run_dirs", nargs="+")
    p_rep.add_argument("--out")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("EYESSL_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError, ParameterError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EyeSSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
