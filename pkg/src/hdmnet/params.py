"""Named parameter collections and their seeded initialisation."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .config import StageConfig
from .tensor import Tensor

PATCH = 8
FROZEN_PREFIXES = ("backbone.",)

Params = dict[str, Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def patch_descriptors() -> np.ndarray:
    """Eight fixed linear read-outs of a [3 x 8 x 8] patch, one per row.

    Per-channel means and five luminance layout contrasts: top/bottom,
    left/right, checker, centre/surround and across the diagonal.
    """
    yy, xx = np.mgrid[0:PATCH, 0:PATCH]
    half = PATCH / 2
    rows = []
    for c in range(3):
        r = np.zeros((3, PATCH, PATCH))
        r[c] = 1.0 / PATCH**2
        rows.append(r)
    layouts = [
        yy < half,
        xx < half,
        (yy < half) == (xx < half),
        (np.abs(yy - (half - 0.5)) < half / 2) & (np.abs(xx - (half - 0.5)) < half / 2),
        yy > xx,
    ]
    for inside in layouts:
        pat = np.where(inside, 1.0, -1.0)
        pat = pat - pat.mean()
        pat = 2.0 * pat / np.abs(pat).sum()
        rows.append(np.broadcast_to(pat / 3.0, (3, PATCH, PATCH)))
    return np.stack([r.reshape(-1) for r in rows])


def backbone_embedding(c1: int, rng: np.random.Generator) -> np.ndarray:
    """Frozen patch embedding: the fixed descriptors mixed by a seeded orthogonal matrix."""
    basis = patch_descriptors()
    n = max(c1, len(basis))
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return q[:c1, : len(basis)] @ basis


def init_params(stage: StageConfig, seed: int) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, drawn in a fixed name order.

    The frozen backbone is the exception; see ``backbone_embedding``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}

    def add(name, shape, fan_in):
        shapes[name] = (shape, fan_in)

    c = stage.channels
    for l, cl in enumerate(c, start=1):
        for b in range(stage.blocks):
            pre = f"enc{l}.block{b}"
            for w in ("wq", "wk", "wv"):
                add(f"{pre}.{w}", (cl, cl), cl)
            add(f"{pre}.mlp1.w", (cl, cl), cl)
            add(f"{pre}.mlp1.b", (cl,), cl)
            add(f"{pre}.mlp2.w", (cl, cl), cl)
            add(f"{pre}.mlp2.b", (cl,), cl)
        if l < stage.stages:
            add(f"enc{l}.down.w", (c[l], cl), cl)
            add(f"enc{l}.down.b", (c[l],), cl)
    for l, cl in enumerate(c, start=1):
        for w in ("wq", "wk", "wv"):
            add(f"match{l}.{w}", (cl, cl), cl)
        add(f"match{l}.wo", (cl, cl + 1), cl + 1)
    for l, cl in enumerate(c, start=1):
        add(f"dec{l}.mlp1.w", (cl, cl), cl)
        add(f"dec{l}.mlp1.b", (cl,), cl)
        add(f"dec{l}.mlp2.w", (cl, cl), cl)
        add(f"dec{l}.mlp2.b", (cl,), cl)
        if l < stage.stages:
            add(f"dec{l}.proj.w", (cl, c[l]), c[l])
    add("head.w", (2, c[0]), c[0])
    add("head.b", (2,), c[0])

    params: Params = {"backbone.embed": Tensor(backbone_embedding(c[0], rng), name="backbone.embed")}
    for name, (shape, fan_in) in shapes.items():
        data = _uniform(rng, shape, fan_in)
        params[name] = Tensor(data, requires_grad=not is_frozen(name), name=name)
    # centres pixel intensities on 0.5: W(x - 0.5) = Wx + bias
    embed = params["backbone.embed"].data
    params["backbone.bias"] = Tensor(-0.5 * embed.sum(axis=1), name="backbone.bias")
    return params


def is_frozen(name: str) -> bool:
    return name.startswith(FROZEN_PREFIXES)


def trainable(params: Params) -> list[Tensor]:
    return [p for p in params.values() if p.requires_grad]


def state_dict(params: Params) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.items()}


def from_state(state: Mapping[str, np.ndarray]) -> Params:
    return {
        name: Tensor(np.array(arr, dtype=np.float64), requires_grad=not is_frozen(name), name=name)
        for name, arr in state.items()
    }


def stage_config_from_state(state: Mapping[str, np.ndarray], **overrides) -> StageConfig:
    """Recover stage count and channel widths from parameter shapes."""
    stages = sorted({int(k[5:].split(".")[0]) for k in state if k.startswith("match")})
    channels = tuple(state[f"match{l}.wq"].shape[0] for l in stages)
    blocks = len({k.split(".")[1] for k in state if k.startswith("enc1.block")})
    return StageConfig(stages=len(stages), channels=channels, blocks=blocks, **overrides)
