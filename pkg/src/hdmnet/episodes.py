"""Procedurally generated few-shot episodes and foreground-IoU evaluation.

A class is a (shape family, texture) pair. Episodes draw one query and K
support instances of a single class, each rendered at a random position,
scale and rotation on a fresh grey noise background.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

FAMILIES = ("disk", "rectangle", "triangle", "ring", "cross", "bar")
MAX_RETRIES = 20


@dataclass(frozen=True)
class SyntheticClass:
    class_id: int
    family: str
    color: tuple[float, float, float]
    noise: float
    scale_range: tuple[float, float]  # object radius as a fraction of min(H, W)

    @property
    def texture(self) -> tuple:
        return (self.color, self.noise)


@dataclass
class Episode:
    query_image: np.ndarray  # [3 x H x W] in [0, 1]
    query_mask: np.ndarray  # [H x W] uint8
    support_images: list[np.ndarray]
    support_masks: list[np.ndarray]
    class_id: int

    @property
    def shots(self) -> int:
        return len(self.support_images)


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test classes overlap: {sorted(overlap)}")


def generate_class_bank(n_classes: int, seed: int) -> list[SyntheticClass]:
    """Deterministic bank of classes with distinct colours; families cycle through a seeded permutation."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    order = rng.permutation(len(FAMILIES))
    hue0 = rng.uniform()
    bank = []
    for i in range(n_classes):
        hue = (hue0 + i / n_classes + rng.uniform(-0.2, 0.2) / n_classes) % 1.0
        sat = rng.uniform(0.65, 1.0)
        val = rng.uniform(0.7, 1.0)
        color = tuple(float(c) for c in colorsys.hsv_to_rgb(hue, sat, val))
        lo = rng.uniform(0.25, 0.3)
        bank.append(SyntheticClass(
            class_id=i,
            family=FAMILIES[order[i % len(FAMILIES)]],
            color=color,
            noise=float(rng.uniform(0.02, 0.08)),
            scale_range=(float(lo), float(lo + 0.12)),
        ))
    return bank


def render_shape(family: str, h: int, w: int, cy: float, cx: float, radius: float, angle: float) -> np.ndarray:
    """Binary mask of one shape instance, sampled at pixel centres."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    r = radius
    if family == "disk":
        inside = u * u + v * v <= r * r
    elif family == "rectangle":
        inside = (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.6)
    elif family == "triangle":
        # equilateral, circumradius r
        inside = (v <= r / 2) & (np.sqrt(3) * u - v <= r) & (-np.sqrt(3) * u - v <= r)
    elif family == "ring":
        rho2 = u * u + v * v
        inside = (rho2 <= r * r) & (rho2 >= (0.45 * r) ** 2)
    elif family == "cross":
        arm = 0.4 * r
        inside = ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    elif family == "bar":
        inside = (np.abs(u) <= r) & (np.abs(v) <= 0.45 * r)
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return inside.astype(np.uint8)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # near-grey with a slight tint, plus per-pixel noise
    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=(3, 1, 1))
    return base + rng.normal(0.0, 0.05, size=(3, h, w))


def render_instance(cls: SyntheticClass, h: int, w: int, rng: np.random.Generator):
    side = min(h, w)
    for _ in range(MAX_RETRIES):
        radius = rng.uniform(*cls.scale_range) * side
        if 2 * radius >= side:
            continue
        cy = rng.uniform(radius, h - radius)
        cx = rng.uniform(radius, w - radius)
        mask = render_shape(cls.family, h, w, cy, cx, radius, rng.uniform(0, 2 * np.pi))
        if mask.any():
            break
    else:
        raise RuntimeError(f"could not place a {cls.family} in a {h}x{w} image")
    image = _background(rng, h, w)
    fg = np.asarray(cls.color)[:, None, None] + rng.normal(0.0, cls.noise, size=(3, h, w))
    image = np.where(mask[None].astype(bool), fg, image)
    return np.clip(image, 0.0, 1.0), mask


def sample_episode(cls: SyntheticClass, shots: int, h: int, w: int, rng: np.random.Generator) -> Episode:
    if shots < 1:
        raise ValueError("shots must be >= 1")
    query_image, query_mask = render_instance(cls, h, w, rng)
    support = [render_instance(cls, h, w, rng) for _ in range(shots)]
    return Episode(
        query_image, query_mask,
        [img for img, _ in support], [m for _, m in support],
        cls.class_id,
    )


def episode_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def sample_episodes(
    bank: Sequence[SyntheticClass], class_ids: Sequence[int], n: int, shots: int,
    size: int, seed: int, stream: int = 0,
) -> list[Episode]:
    """``n`` episodes, each with its own rng stream; the class is drawn uniformly from ``class_ids``."""
    if not class_ids:
        raise ValueError("no classes to sample from")
    lookup = {c.class_id: c for c in bank}
    out = []
    for i in range(n):
        rng = episode_rng(seed, i, stream)
        cid = class_ids[int(rng.integers(len(class_ids)))]
        out.append(sample_episode(lookup[cid], shots, size, size, rng))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def foreground_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def miou(predictions: Sequence, ground_truths: Sequence, class_ids: Sequence[int]) -> tuple[float, dict[int, float]]:
    """Mean over classes of the per-class mean foreground IoU."""
    if not (len(predictions) == len(ground_truths) == len(class_ids)):
        raise ValueError("predictions, ground truths and class ids must have equal length")
    if not predictions:
        raise ValueError("nothing to evaluate")
    per_class: dict[int, list[float]] = {}
    for p, g, c in zip(predictions, ground_truths, class_ids):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction {np.shape(p)} vs ground truth {np.shape(g)}")
        per_class.setdefault(int(c), []).append(foreground_iou(p, g))
    table = {c: float(np.mean(v)) for c, v in sorted(per_class.items())}
    return float(np.mean(list(table.values()))), table


class Predictor(Protocol):
    def predict(self, episode: Episode) -> np.ndarray: ...


class GroundTruthOracle:
    """Returns the query ground truth; the evaluation harness must score it 1.0."""

    def predict(self, episode: Episode) -> np.ndarray:
        return episode.query_mask.copy()


class AllBackground:
    def predict(self, episode: Episode) -> np.ndarray:
        return np.zeros_like(episode.query_mask)


@dataclass
class EvalReport:
    miou: float
    per_class: dict[int, float]
    episodes: int
    shots: int
    seed: int
    ious: list[float] = field(repr=False, default_factory=list)

    def format(self) -> str:
        lines = [f"mIoU {self.miou:.6f}", f"episodes {self.episodes}", f"shots {self.shots}", f"seed {self.seed}"]
        lines += [f"class {c} IoU {v:.6f}" for c, v in self.per_class.items()]
        return "\n".join(lines)


def evaluate_episodes(model: Predictor, episodes: Sequence[Episode], shots: int = 0, seed: int = 0) -> EvalReport:
    preds = [model.predict(ep) for ep in episodes]
    gts = [ep.query_mask for ep in episodes]
    ids = [ep.class_id for ep in episodes]
    score, table = miou(preds, gts, ids)
    return EvalReport(score, table, len(episodes), shots, seed, [foreground_iou(p, g) for p, g in zip(preds, gts)])


def evaluate(
    model: Predictor, bank: Sequence[SyntheticClass], split: SplitSpec, n_episodes: int,
    shots: int, seed: int, size: int = 64,
) -> EvalReport:
    """Score ``model`` on ``n_episodes`` test-class episodes drawn from ``seed``."""
    if not split.test:
        raise ValueError("split has no test classes")
    episodes = sample_episodes(bank, split.test, n_episodes, shots, size, seed, stream=2)
    return evaluate_episodes(model, episodes, shots, seed)
