"""Cross-stage correlation distillation.

Each stage's correlation map is averaged over support-foreground columns,
turned into a spatial distribution over query sites, and pulled toward the
next coarser stage's distribution by a KL term. The coarsest stage is
supervised by the query ground-truth mask instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STUDENT_FLOOR = 1e-12


class EmptyForegroundError(ValueError):
    """No support foreground survives at this stage's resolution."""


@dataclass
class StageDistribution:
    probs: Tensor  # [h*w], sums to one
    hw: tuple[int, int]
    temperature: float = 1.0

    def as_map(self) -> np.ndarray:
        return self.probs.data.reshape(self.hw)


def reorganize_correlation(corr: Tensor, support_fg) -> Tensor:
    """Mean of ``corr`` [n_q x n_s] over the foreground support columns -> [n_q]."""
    fg = np.asarray(support_fg, dtype=bool).reshape(-1)
    if fg.shape[0] != corr.shape[1]:
        raise T.ShapeError(f"{fg.shape[0]} mask flags for {corr.shape[1]} support columns")
    count = int(fg.sum())
    if count == 0:
        raise EmptyForegroundError("support mask has no foreground at this stage")
    weights = Tensor((fg / count).reshape(-1, 1))
    return T.reshape(corr @ weights, (corr.shape[0],))


def spatial_softmax(scores: Tensor, hw: tuple[int, int], temperature: float = 1.0) -> StageDistribution:
    if temperature <= 0:
        raise ValueError(f"distillation temperature must be positive, got {temperature}")
    return StageDistribution(T.softmax(T.scale(scores, 1.0 / temperature), axis=0), tuple(hw), temperature)


def resize_distribution(probs: np.ndarray, src_hw, dst_hw) -> np.ndarray:
    """Bilinear resize of a flattened distribution, renormalised to unit mass."""
    src_hw, dst_hw = tuple(src_hw), tuple(dst_hw)
    p = np.asarray(probs, dtype=np.float64).reshape(src_hw)
    if src_hw != dst_hw:
        p = T.bilinear_resize(Tensor(p[None]), *dst_hw).data[0]
    p = p.reshape(-1)
    return p / p.sum()


def kl_stage_loss(teacher: StageDistribution | np.ndarray, student: StageDistribution) -> Tensor:
    """KL(teacher || student); the teacher is a constant, resized to the student's grid.

    Zero-probability teacher entries contribute nothing; student
    probabilities are floored at 1e-12 inside the log.
    """
    if isinstance(teacher, StageDistribution):
        p_t = resize_distribution(teacher.probs.data, teacher.hw, student.hw)
    else:
        p_t = np.asarray(teacher, dtype=np.float64).reshape(-1)
    if p_t.shape != student.probs.shape:
        raise T.ShapeError(f"teacher {p_t.shape} vs student {student.probs.shape}")
    log_t = np.log(p_t, out=np.zeros_like(p_t), where=p_t > 0)
    entropy_term = float(np.dot(p_t, log_t))
    cross = T.sum(T.mul(Tensor(p_t), T.log(T.clamp_min(student.probs, STUDENT_FLOOR))))
    return T.clamp_min(T.scale(cross, -1.0) + entropy_term, 0.0)


def gt_teacher(query_mask, hw: tuple[int, int]) -> np.ndarray:
    """Area-average the query mask onto ``hw`` and normalise; empty masks give uniform."""
    m = np.asarray(query_mask, dtype=np.float64)
    h, w = hw
    if m.shape[0] % h or m.shape[1] % w:
        raise T.ShapeError(f"mask {m.shape} does not tile into {h}x{w} cells")
    cells = m.reshape(h, m.shape[0] // h, w, m.shape[1] // w).mean(axis=(1, 3)).reshape(-1)
    total = cells.sum()
    if total <= 0:
        return np.full(h * w, 1.0 / (h * w))
    return cells / total


def distill_loss(
    stages: Sequence[StageDistribution | None], gt: np.ndarray | None = None
) -> Tensor:
    """Adjacent-stage KL terms plus the ground-truth term at the coarsest stage.

    ``stages[0]`` is the finest stage. ``None`` marks a stage with no support
    foreground; every pair touching it is skipped. ``gt=None`` drops the
    ground-truth term.
    """
    terms = []
    for fine, coarse in zip(stages[:-1], stages[1:]):
        if fine is not None and coarse is not None:
            terms.append(kl_stage_loss(coarse, fine))
    if gt is not None and stages and stages[-1] is not None:
        terms.append(kl_stage_loss(gt, stages[-1]))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
