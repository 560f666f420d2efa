"""Command-line entry point: train, eval, grad-check, dump-corr, make-data."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import pnm
from .config import ConfigError, RunConfig, load_config, parse_config
from .distillation import EmptyForegroundError, reorganize_correlation
from .episodes import (
    AllBackground, GroundTruthOracle, SplitSpec, evaluate_episodes, generate_class_bank, sample_episodes,
)
from .model import FewShotSegmenter

SEED_ENV = "HDM_SEED"
DUMP_STREAM = 4
EXPORT_STREAM = 0

log = logging.getLogger("hdmnet")


def resolve_seed(flag: int | None) -> int:
    """Explicit flag, else $HDM_SEED, else 0."""
    if flag is not None:
        return flag
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {raw!r}")


def _has_key(text: str, key: str) -> bool:
    for line in text.splitlines():
        body = line.split("#", 1)[0]
        if "=" in body and body.split("=", 1)[0].strip() == key:
            return True
    return False


def read_run_config(path: str | Path) -> RunConfig:
    """Load a config file; a file without ``seed`` takes it from $HDM_SEED."""
    text = Path(path).read_text(encoding="utf-8")
    cfg = parse_config(text)
    if not _has_key(text, "seed"):
        cfg = dataclasses.replace(cfg, seed=resolve_seed(None))
    return cfg


def checkpoint_config(ckpt: str | Path) -> RunConfig:
    """The config saved next to a checkpoint, or defaults if there is none."""
    side = Path(str(ckpt) + ".cfg")
    return load_config(side) if side.exists() else RunConfig()


def load_model(ckpt: str | Path, cfg: RunConfig) -> FewShotSegmenter:
    return FewShotSegmenter.load(
        ckpt,
        heads=cfg.stage.heads,
        positional_encoding=cfg.stage.positional_encoding,
        token_norm=cfg.stage.token_norm,
        corr_temperature=cfg.corr_temperature,
        distill_temperature=cfg.distill_temperature,
    )


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import train

    cfg = read_run_config(args.config)
    t0 = time.perf_counter()
    result = train(cfg)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"final step {last[0]} loss {last[1]:.6f} ce {last[2]:.6f} kl {last[3]:.6f}")
    if result.train_report is not None:
        print(f"train mIoU {result.train_report.miou:.6f}")
    print(f"checkpoint {cfg.checkpoint}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    if args.oracle in ("gt", "background"):
        cfg = checkpoint_config(args.ckpt) if args.ckpt else RunConfig()
        model = GroundTruthOracle() if args.oracle == "gt" else AllBackground()
    else:
        if not args.ckpt:
            raise SystemExit("eval needs --ckpt unless --oracle is given")
        cfg = checkpoint_config(args.ckpt)
        model = load_model(args.ckpt, cfg)
    bank = generate_class_bank(cfg.n_classes, cfg.seed)
    split = SplitSpec(cfg.train_classes, cfg.test_classes)
    episodes = sample_episodes(bank, split.test, args.episodes, args.k, cfg.image_size, seed, stream=2)
    report = evaluate_episodes(model, episodes, args.k, seed)
    print(report.format())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, ep in enumerate(episodes):
            pnm.write_mask(out / f"pred_{i:04d}.pgm", model.predict(ep))
    return 0


def cmd_grad_check(args) -> int:
    from .gradient_suite import TOLERANCE, run

    seed = resolve_seed(args.seed)
    t0 = time.perf_counter()
    results = run(seed)
    for name, err in results:
        print(f"{name:24s} {err:.3e}")
    worst = max(err for _, err in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e}, {time.perf_counter() - t0:.1f}s)")
    return 0 if worst <= TOLERANCE else 1


def cmd_dump_corr(args) -> int:
    """Query image, masks and one heatmap per stage for a few test episodes."""
    seed = resolve_seed(args.seed)
    cfg = checkpoint_config(args.ckpt)
    model = load_model(args.ckpt, cfg)
    bank = generate_class_bank(cfg.n_classes, cfg.seed)
    episodes = sample_episodes(bank, cfg.test_classes, args.episodes, 1, cfg.image_size, seed, stream=DUMP_STREAM)
    out = Path(args.out)
    for i, ep in enumerate(episodes):
        d = out / f"episode_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        result = model.forward(ep.query_image, ep.support_images, ep.support_masks)
        pnm.write_ppm(d / "query.ppm", ep.query_image)
        pnm.write_mask(d / "query_mask.pgm", ep.query_mask)
        pnm.write_ppm(d / "support.ppm", ep.support_images[0])
        pnm.write_mask(d / "support_mask.pgm", ep.support_masks[0])
        pnm.write_mask(d / "prediction.pgm", result.mask)
        for m in result.matches:
            corr = m.correlation
            try:
                scores = reorganize_correlation(corr.raw, corr.support_fg).data.reshape(corr.query_hw)
            except EmptyForegroundError:
                scores = np.zeros(corr.query_hw)
            pnm.write_pgm(d / f"corr_stage{corr.stage}.pgm", pnm.heatmap_bytes(scores))
    print(f"wrote {len(episodes)} episode(s) to {out}")
    return 0


def cmd_make_data(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = load_config(args.config) if args.config else RunConfig()
    bank = generate_class_bank(cfg.n_classes, cfg.seed)
    classes = cfg.test_classes if args.split == "test" else cfg.train_classes
    episodes = sample_episodes(bank, classes, args.episodes, args.k, cfg.image_size, seed, stream=EXPORT_STREAM)
    out = Path(args.out)
    for i, ep in enumerate(episodes):
        d = out / f"episode_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        pnm.write_ppm(d / "query.ppm", ep.query_image)
        pnm.write_mask(d / "query_mask.pgm", ep.query_mask)
        for k, (img, mask) in enumerate(zip(ep.support_images, ep.support_masks)):
            pnm.write_ppm(d / f"support_{k}.ppm", img)
            pnm.write_mask(d / f"support_{k}_mask.pgm", mask)
        (d / "class.txt").write_text(f"{ep.class_id}\n", encoding="utf-8")
    print(f"wrote {len(episodes)} episode(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdmnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU on held-out-class episodes")
    p.add_argument("--ckpt")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    p.add_argument("--out", help="also write predicted masks (P5) here")
    p.add_argument("--oracle", choices=("gt", "background"), help="score a reference predictor instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the full pipeline")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-corr", help="write per-stage correlation heatmaps (P5)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dump_corr)

    p = sub.add_parser("make-data", help="export sample episodes as P6 images and P5 masks")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--config", help="take class bank and image size from this config")
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"hdmnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
