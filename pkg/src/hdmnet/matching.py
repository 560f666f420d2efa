"""Cosine-correlation matching between query and masked support features.

Per stage: mask and flatten the features, correlate projected rows by cosine
similarity scaled by ``1/t``, normalise each support column over the query
positions, and pull support values onto query positions. The prior mask is
concatenated as an extra channel before the output projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import Params
from .tensor import Tensor

DEFAULT_TEMPERATURE = 0.1


@dataclass
class CorrelationMap:
    raw: Tensor  # [h^q w^q x K h^s w^s], cosine / t
    stage: int
    temperature: float
    query_hw: tuple[int, int]
    support_fg: np.ndarray  # bool [K h^s w^s], support column is foreground


@dataclass
class StageMatch:
    correlation: CorrelationMap
    normalized: Tensor  # inverse softmax of the raw map
    features: Tensor  # X_l, [c x h^q x w^q]


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def check_binary(mask: np.ndarray) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("masks must contain only 0 and 1")


def resize_mask_nearest(mask, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize on half-pixel centres."""
    m = _as_array(mask)
    rows = np.minimum(((np.arange(h) + 0.5) * m.shape[0] / h).astype(np.intp), m.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * m.shape[1] / w).astype(np.intp), m.shape[1] - 1)
    return m[np.ix_(rows, cols)]


def mask_and_flatten(feat_q: Tensor, feat_s: Tensor, mask_s) -> tuple[Tensor, Tensor, np.ndarray]:
    """Returns query rows [hw x c], masked support rows [hw x c] and the support foreground flags."""
    m = _as_array(mask_s)
    check_binary(m)
    c, h, w = feat_s.shape
    small = resize_mask_nearest(m, h, w) > 0
    masked = T.hadamard(feat_s, Tensor(np.broadcast_to(small, (c, h, w)).astype(np.float64)))
    return T.flatten_sites(feat_q), T.flatten_sites(masked), small.reshape(-1)


def k_shot_merge(shots: Sequence[tuple[Tensor, np.ndarray]]) -> tuple[Tensor, np.ndarray]:
    """Concatenate K shots' support rows (and foreground flags) along the support axis."""
    if not shots:
        raise ValueError("need at least one support shot")
    shapes = {rows.shape for rows, _ in shots}
    if len(shapes) != 1:
        raise T.ShapeError(f"support shots differ in shape: {sorted(shapes)}")
    if len(shots) == 1:
        return shots[0]
    return T.concat([rows for rows, _ in shots], axis=0), np.concatenate([fg for _, fg in shots])


def correlation_map(
    rows_q: Tensor, rows_s: Tensor, wq: Tensor, wk: Tensor,
    t: float = DEFAULT_TEMPERATURE, stage: int = 1, query_hw=None, support_fg=None,
) -> CorrelationMap:
    """Cosine similarity of projected rows divided by ``t``; zero rows score 0."""
    if t <= 0:
        raise ValueError(f"correlation temperature must be positive, got {t}")
    q = T.l2_normalize_rows(T.linear(rows_q, wq))
    k = T.l2_normalize_rows(T.linear(rows_s, wk))
    cos = T.clip(q @ k.T, -1.0, 1.0)
    if support_fg is None:
        support_fg = np.ones(rows_s.shape[0], dtype=bool)
    if query_hw is None:
        query_hw = (rows_q.shape[0], 1)
    return CorrelationMap(T.scale(cos, 1.0 / t), stage, t, tuple(query_hw), np.asarray(support_fg, dtype=bool))


def inverse_softmax(corr) -> Tensor:
    """Softmax over the query axis: every support column sums to one."""
    raw = corr.raw if isinstance(corr, CorrelationMap) else corr
    return T.softmax(raw, axis=0)


def prior_mask(feat_q, feats_s: Sequence, masks_s: Sequence) -> np.ndarray:
    """Training-free foreground prior on the query grid.

    Each query site scores its best cosine match against all support
    foreground sites; scores are then min-max scaled to [0, 1]. No foreground,
    or a flat score map, gives all zeros.
    """
    fq = _as_array(feat_q)
    c, h, w = fq.shape
    fg_rows = []
    for fs, ms in zip(feats_s, masks_s):
        fs = _as_array(fs)
        m = resize_mask_nearest(_as_array(ms), fs.shape[1], fs.shape[2]).reshape(-1) > 0
        fg_rows.append(fs.reshape(c, -1).T[m])
    support = np.concatenate(fg_rows, axis=0) if fg_rows else np.zeros((0, c))
    if support.shape[0] == 0:
        return np.zeros((h, w))

    def unit(a):
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return np.divide(a, n, out=np.zeros_like(a), where=n > 0)

    sim = (unit(fq.reshape(c, -1).T) @ unit(support).T).max(axis=1)
    lo, hi = sim.min(), sim.max()
    if hi - lo <= 0:
        return np.zeros((h, w))
    return ((sim - lo) / (hi - lo)).reshape(h, w)


def match_features(
    corr_hat: Tensor, rows_s: Tensor, prior, wv: Tensor, wo: Tensor, query_hw: tuple[int, int]
) -> Tensor:
    """Aggregate projected support values onto query sites and fuse the prior.

    Row i of ``corr_hat`` is renormalised to sum to one before it weights the
    support values, so each query site receives a convex combination.
    """
    h, w = query_hw
    c = rows_s.shape[1]
    if wo.shape != (c, c + 1):
        raise T.ShapeError(f"output projection must be [{c} x {c + 1}], got {wo.shape}")
    values = T.linear(rows_s, wv)
    weights = corr_hat / T.sum(corr_hat, axis=1, keepdims=True)
    gathered = T.unflatten_sites(weights @ values, h, w)
    prior_t = prior if isinstance(prior, Tensor) else Tensor(_as_array(prior))
    if prior_t.ndim == 2:
        prior_t = T.reshape(prior_t, (1, *prior_t.shape))
    if prior_t.shape[1:] != (h, w):
        prior_t = T.bilinear_resize(prior_t, h, w)
    fused = T.concat_channel(gathered, prior_t)
    return T.unflatten_sites(T.linear(T.flatten_sites(fused), wo), h, w)


def match_stage(
    feat_q: Tensor, feats_s: Sequence[Tensor], masks_s: Sequence, prior,
    params: Params, stage: int, t: float = DEFAULT_TEMPERATURE,
) -> StageMatch:
    """Full matching for one stage (1-based ``stage``) over K support shots."""
    _, h, w = feat_q.shape
    shots = []
    rows_q = None
    for fs, ms in zip(feats_s, masks_s):
        rows_q, rows_s, fg = mask_and_flatten(feat_q, fs, ms)
        shots.append((rows_s, fg))
    if rows_q is None:
        raise ValueError("need at least one support shot")
    rows_s, fg = k_shot_merge(shots)
    p = f"match{stage}"
    corr = correlation_map(rows_q, rows_s, params[f"{p}.wq"], params[f"{p}.wk"], t, stage, (h, w), fg)
    corr_hat = inverse_softmax(corr)
    feats = match_features(corr_hat, rows_s, prior, params[f"{p}.wv"], params[f"{p}.wo"], (h, w))
    return StageMatch(corr, corr_hat, feats)
