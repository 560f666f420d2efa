"""Objective, optimiser and the episodic training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, format_config
from .distillation import StageDistribution, distill_loss, gt_teacher
from .episodes import Episode, EvalReport, SplitSpec, evaluate_episodes, generate_class_bank, sample_episodes
from .model import FewShotSegmenter
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

POOL_STREAM = 1
FRESH_STREAM = 3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossParts:
    total: Tensor
    ce: Tensor
    kl: Tensor


def cross_entropy(logits: Tensor, mask) -> Tensor:
    """Mean per-pixel two-class cross-entropy; ``logits`` is [2 x H x W]."""
    m = np.asarray(mask)
    if logits.shape != (2, *m.shape):
        raise T.ShapeError(f"logits {logits.shape} do not match mask {m.shape}")
    onehot = np.stack([m == 0, m != 0]).astype(np.float64)
    picked = T.sum(T.mul(T.log_softmax(logits, axis=0), Tensor(onehot)))
    return T.scale(picked, -1.0 / m.size)


def total_loss(
    logits: Tensor, query_mask, stages: Sequence[StageDistribution | None], lambda_kl: float = 1.0
) -> LossParts:
    """Cross-entropy plus ``lambda_kl`` times the distillation loss."""
    ce = cross_entropy(logits, query_mask)
    last = stages[-1] if stages else None
    gt = gt_teacher(query_mask, last.hw) if last is not None else None
    kl = distill_loss(stages, gt)
    total = ce + T.scale(kl, lambda_kl) if lambda_kl else ce
    return LossParts(total, ce, kl)


def episode_loss(model: FewShotSegmenter, episode: Episode, lambda_kl: float) -> LossParts:
    out = model.forward(episode.query_image, episode.support_images, episode.support_masks)
    return total_loss(out.logits, episode.query_mask, model.stage_distributions(out), lambda_kl)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


class SGD:
    """Heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    model: FewShotSegmenter
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    train_report: EvalReport | None = None
    pool: list[Episode] = field(default_factory=list, repr=False)


def make_model(cfg: RunConfig) -> FewShotSegmenter:
    return FewShotSegmenter.initialize(
        cfg.stage, cfg.seed,
        corr_temperature=cfg.corr_temperature, distill_temperature=cfg.distill_temperature,
    )


def train_pool(cfg: RunConfig) -> list[Episode]:
    bank = generate_class_bank(cfg.n_classes, cfg.seed)
    return sample_episodes(
        bank, cfg.train_classes, cfg.train_episodes, cfg.shots, cfg.image_size, cfg.seed, stream=POOL_STREAM
    )


def train(cfg: RunConfig, checkpoint: str | Path | None = None, metrics_log: str | Path | None = None) -> TrainResult:
    """Train from ``cfg``; deterministic for a given seed.

    With ``train_episodes > 0`` steps cycle through a fixed pool of that many
    episodes (reshuffled every pass); with 0 every step draws fresh episodes.
    Pass ``checkpoint``/``metrics_log`` as ``""`` to skip writing them.
    """
    model = make_model(cfg)
    bank = generate_class_bank(cfg.n_classes, cfg.seed)
    split = SplitSpec(cfg.train_classes, cfg.test_classes)
    pool = train_pool(cfg) if cfg.train_episodes else []
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
    queue: list[int] = []
    opt = SGD(model.trainable(), cfg.momentum)
    result = TrainResult(model, pool=pool)

    for step in range(cfg.steps):
        if pool:
            batch = []
            for _ in range(cfg.batch):
                if not queue:
                    queue = list(order_rng.permutation(len(pool)))
                batch.append(pool[queue.pop()])
        else:
            batch = sample_episodes(
                bank, split.train, cfg.batch, cfg.shots, cfg.image_size, cfg.seed * 100003 + step, stream=FRESH_STREAM
            )
        opt.zero_grad()
        loss_sum = ce_sum = kl_sum = 0.0
        try:
            for ep in batch:
                parts = episode_loss(model, ep, cfg.lambda_kl)
                T.scale(parts.total, 1.0 / len(batch)).backward()
                loss_sum += parts.total.item()
                ce_sum += parts.ce.item()
                kl_sum += parts.kl.item()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: non-finite value in forward pass ({exc})") from exc
        n = len(batch)
        record = (step, loss_sum / n, ce_sum / n, kl_sum / n)
        if not all(math.isfinite(v) for v in record[1:]):
            raise TrainingDiverged(f"step {step}: loss became non-finite {record}")
        grads_ok = all(p.grad is None or np.isfinite(p.grad).all() for p in opt.params)
        if not grads_ok:
            raise TrainingDiverged(f"step {step}: non-finite gradient")
        opt.step(cosine_lr(cfg.lr, step, cfg.steps))
        result.history.append(record)
        if pool and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rep = evaluate_episodes(model, pool, cfg.shots, cfg.seed)
            log.info("step %d loss %.4f train mIoU %.4f", step + 1, record[1], rep.miou)

    if pool:
        result.train_report = evaluate_episodes(model, pool, cfg.shots, cfg.seed)

    ckpt = cfg.checkpoint if checkpoint is None else checkpoint
    if ckpt:
        model.save(ckpt)
        Path(str(ckpt) + ".cfg").write_text(format_config(cfg), encoding="utf-8")
    mlog = cfg.metrics_log if metrics_log is None else metrics_log
    if mlog:
        write_metrics(mlog, result.history)
    return result


def write_metrics(path: str | Path, history) -> None:
    lines = ["step,loss,ce,kl"] + [f"{s},{l:.10g},{c:.10g},{k:.10g}" for s, l, c, k in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
