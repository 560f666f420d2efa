"""Coarse-to-fine fusion of matched features and the mask head."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .params import Params
from .tensor import Tensor


def _site_mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    _, h, w = x.shape
    rows = T.flatten_sites(x)
    hidden = T.relu(T.linear(rows, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]))
    out = T.linear(hidden, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])
    return T.unflatten_sites(out, h, w)


def lift(coarse: Tensor, params: Params, stage: int, hw: tuple[int, int]) -> Tensor:
    """Resize a stage-(l+1) map to stage l's grid and project its channels down to c_l."""
    up = T.bilinear_resize(coarse, *hw)
    rows = T.linear(T.flatten_sites(up), params[f"dec{stage}.proj.w"])
    return T.unflatten_sites(rows, *hw)


def fuse_stage(x: Tensor, coarser: Tensor | None, params: Params, stage: int) -> Tensor:
    """relu(mlp(x + up)) + up, with ``up`` the lifted coarser output (absent at the top stage)."""
    if coarser is None:
        return T.relu(_site_mlp(x, params, f"dec{stage}"))
    up = lift(coarser, params, stage, x.shape[1:])
    if up.shape != x.shape:
        raise T.ShapeError(f"stage {stage}: lifted {up.shape} vs matched {x.shape}")
    return T.relu(_site_mlp(x + up, params, f"dec{stage}")) + up


def decode(features: Sequence[Tensor], params: Params) -> Tensor:
    """Run the fusion from the coarsest stage down to stage 1 and return X'_1."""
    out = None
    for stage in range(len(features), 0, -1):
        out = fuse_stage(features[stage - 1], out, params, stage)
    return out


def predict_mask(fused: Tensor, params: Params, out_hw: tuple[int, int]) -> tuple[Tensor, np.ndarray]:
    """1x1 conv to background/foreground logits, bilinear upsample, argmax.

    Ties go to background.
    """
    _, h, w = fused.shape
    logits = T.linear(T.flatten_sites(fused), params["head.w"], params["head.b"])
    logits = T.bilinear_resize(T.unflatten_sites(logits, h, w), *out_hw)
    mask = (logits.data[1] > logits.data[0]).astype(np.uint8)
    return logits, mask
