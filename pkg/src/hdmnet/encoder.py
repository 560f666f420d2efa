"""Hierarchical feature pyramids from self-attention-only transformer blocks.

Query and support images go through the same weights independently; nothing
in this module ever sees both at once. Matching happens later, in
:mod:`hdmnet.matching`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import StageConfig
from .params import PATCH, Params
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    stages: list[Tensor]  # F_l as [c_l x h_l x w_l], l = 1..L
    backbone: Tensor  # frozen patch-embedding output, stage-1 resolution

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, l: int) -> Tensor:
        return self.stages[l]


def _patchify(image: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    gh, gw = h // PATCH, w // PATCH
    blocks = image.reshape(3, gh, PATCH, gw, PATCH).transpose(1, 3, 0, 2, 4)
    return blocks.reshape(gh * gw, 3 * PATCH * PATCH)


def toy_backbone(image, params: Params, stage: StageConfig) -> Tensor:
    """Fixed 8x8 patch embedding, [3 x H x W] -> [c_1 x H/8 x W/8]."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise T.ShapeError(f"expected a [3 x H x W] image, got {img.shape}")
    stage.check_image(img.shape[1], img.shape[2])
    patches = Tensor(_patchify(img))
    feats = T.linear(patches, params["backbone.embed"], params["backbone.bias"])
    return T.unflatten_sites(feats, img.shape[1] // PATCH, img.shape[2] // PATCH)


def sinusoidal_encoding(channels: int, h: int, w: int) -> np.ndarray:
    """[c x h x w] sin/cos waves; the first half of the channels encode rows, the rest columns."""
    pos = np.zeros((channels, h, w))
    half = max(channels // 2, 1)
    for k in range(channels):
        coord = np.arange(h)[:, None] if k < half else np.arange(w)[None, :]
        j = k % half
        freq = 1.0 / 10000 ** (2 * (j // 2) / half)
        wave = np.sin(coord * freq) if j % 2 == 0 else np.cos(coord * freq)
        pos[k] = np.broadcast_to(wave, (h, w))
    return pos


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v for [n x d] inputs."""
    d = q.shape[1]
    weights = T.softmax(T.scale(q @ k.T, 1.0 / np.sqrt(d)), axis=1)
    return weights @ v


def _mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    hidden = T.relu(T.linear(x, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]))
    return T.linear(hidden, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])


def self_attention_block(
    feat: Tensor, params: Params, prefix: str, heads: int = 1, token_norm: bool = True
) -> Tensor:
    """One transformer block over the spatial sites of ``feat`` [c x h x w].

    Q, K and V all come from ``feat`` itself. Attention and the per-token MLP
    are each added back residually.
    """
    c, h, w = feat.shape
    tokens = T.flatten_sites(feat)
    normed = T.standardize(tokens) if token_norm else tokens
    q = T.linear(normed, params[f"{prefix}.wq"])
    k = T.linear(normed, params[f"{prefix}.wk"])
    v = T.linear(normed, params[f"{prefix}.wv"])
    if heads == 1:
        attended = attention(q, k, v)
    else:
        d = c // heads
        parts = [
            attention(q[:, i * d:(i + 1) * d], k[:, i * d:(i + 1) * d], v[:, i * d:(i + 1) * d])
            for i in range(heads)
        ]
        attended = T.concat(parts, axis=1)
    y = tokens + attended
    z = y + _mlp(T.standardize(y) if token_norm else y, params, prefix)
    return T.unflatten_sites(z, h, w)


def downsample(feat: Tensor, params: Params, prefix: str) -> Tensor:
    """2x2 average pool, then a per-site linear map to the next stage's width."""
    pooled = T.avg_pool2(feat)
    _, h, w = pooled.shape
    out = T.linear(T.flatten_sites(pooled), params[f"{prefix}.w"], params[f"{prefix}.b"])
    return T.unflatten_sites(out, h, w)


def encode(image, params: Params, stage: StageConfig) -> FeaturePyramid:
    base = toy_backbone(image, params, stage)
    feat = base
    if stage.positional_encoding:
        feat = feat + Tensor(sinusoidal_encoding(*feat.shape))
    stages = []
    for l in range(1, stage.stages + 1):
        if l > 1:
            feat = downsample(feat, params, f"enc{l - 1}.down")
        for b in range(stage.blocks):
            feat = self_attention_block(feat, params, f"enc{l}.block{b}", stage.heads, stage.token_norm)
        stages.append(feat)
    return FeaturePyramid(stages=stages, backbone=base)


def build_pyramids(query_image, support_images: Sequence, params: Params, stage: StageConfig):
    """Encode the query and each support image separately with shared weights."""
    shapes = {np.shape(getattr(im, "data", im)) for im in [query_image, *support_images]}
    if len(shapes) != 1:
        raise T.ShapeError(f"query and support images must share one size, got {sorted(shapes)}")
    query = encode(query_image, params, stage)
    supports = [encode(im, params, stage) for im in support_images]
    return query, supports
