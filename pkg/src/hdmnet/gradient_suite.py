"""Finite-difference checks for every differentiable op and the full pipeline."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .config import StageConfig
from .decoder import fuse_stage
from .distillation import kl_stage_loss, spatial_softmax
from .encoder import self_attention_block
from .episodes import generate_class_bank, sample_episode
from .gradcheck import finite_diff_check
from .matching import correlation_map, inverse_softmax, match_features
from .model import FewShotSegmenter
from .tensor import Tensor
from .train import episode_loss

TOLERANCE = 1e-4

Case = tuple[str, Callable[[], Tensor], list[Tensor]]


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _probe(rng, out: Tensor) -> Tensor:
    return Tensor(rng.normal(size=out.shape))


def _weighted(build: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Scalarise ``build`` with a fixed random projection so every output entry matters."""
    w = _probe(rng, build())
    return lambda: T.sum(T.mul(build(), w))


def op_cases(seed: int) -> Iterator[Case]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    yield "matmul", _weighted(lambda: a @ b, rng), [a, b]
    x = _leaf(rng, 4, 6, scale=2.0)
    yield "softmax", _weighted(lambda: T.softmax(x, axis=0), rng), [x]
    yield "log_softmax", _weighted(lambda: T.log_softmax(x, axis=1), rng), [x]
    yield "l2_normalize_rows", _weighted(lambda: T.l2_normalize_rows(x), rng), [x]
    yield "standardize", _weighted(lambda: T.standardize(x), rng), [x]
    yield "exp_log", _weighted(lambda: T.log(T.exp(x) + 1.0), rng), [x]
    yield "div", _weighted(lambda: T.div(x, T.exp(x) + 1.0), rng), [x]
    w, bias = _leaf(rng, 3, 6), _leaf(rng, 3)
    yield "linear", _weighted(lambda: T.linear(x, w, bias), rng), [x, w, bias]
    m = Tensor((rng.uniform(size=(4, 6)) > 0.5).astype(float))
    yield "hadamard", _weighted(lambda: T.hadamard(x, m), rng), [x]
    img = _leaf(rng, 2, 6, 4)
    yield "bilinear_down", _weighted(lambda: T.bilinear_resize(img, 3, 2), rng), [img]
    yield "bilinear_up", _weighted(lambda: T.bilinear_resize(img, 9, 7), rng), [img]
    yield "avg_pool2", _weighted(lambda: T.avg_pool2(img), rng), [img]
    extra = _leaf(rng, 1, 6, 4)
    yield "concat_channel", _weighted(lambda: T.concat_channel(img, extra), rng), [img, extra]
    yield "flatten_sites", _weighted(lambda: T.unflatten_sites(T.flatten_sites(img) * 2.0, 6, 4), rng), [img]


def module_cases(seed: int) -> Iterator[Case]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    c = 4
    feat = _leaf(rng, c, 3, 3)
    blk = {f"b.{k}": _leaf(rng, c, c) for k in ("wq", "wk", "wv", "mlp1.w", "mlp2.w")}
    blk |= {"b.mlp1.b": _leaf(rng, c), "b.mlp2.b": _leaf(rng, c)}
    yield (
        "self_attention_block",
        _weighted(lambda: self_attention_block(feat, blk, "b", heads=2, token_norm=True), rng),
        [feat, *blk.values()],
    )

    rows_q, rows_s = _leaf(rng, 6, c), _leaf(rng, 5, c)
    wq, wk, wv = _leaf(rng, c, c), _leaf(rng, c, c), _leaf(rng, c, c)
    wo = _leaf(rng, c, c + 1)
    prior = rng.uniform(size=(2, 3))

    def matched():
        corr = correlation_map(rows_q, rows_s, wq, wk, 0.1)
        return match_features(inverse_softmax(corr), rows_s, prior, wv, wo, (2, 3))

    yield "correlation_and_match", _weighted(matched, rng), [rows_q, rows_s, wq, wk, wv, wo]

    s = _leaf(rng, 6)
    teacher = rng.dirichlet(np.ones(6))
    yield "kl_stage_loss", lambda: kl_stage_loss(teacher, spatial_softmax(s, (2, 3))), [s]

    x1, coarse = _leaf(rng, c, 4, 4), _leaf(rng, 6, 2, 2)
    dec = {f"dec1.{k}": _leaf(rng, c, c) for k in ("mlp1.w", "mlp2.w")}
    dec |= {"dec1.mlp1.b": _leaf(rng, c), "dec1.mlp2.b": _leaf(rng, c), "dec1.proj.w": _leaf(rng, c, 6)}
    yield "fuse_stage", _weighted(lambda: fuse_stage(x1, coarse, dec, 1), rng), [x1, coarse, *dec.values()]


def end_to_end_case(seed: int) -> Case:
    """Total loss on a 16x16, two-stage, 4/6-channel episode against every trainable parameter."""
    stage = StageConfig(stages=2, channels=(4, 6))
    model = FewShotSegmenter.initialize(stage, seed)
    bank = generate_class_bank(4, seed)
    episode = sample_episode(bank[0], 1, 16, 16, np.random.default_rng(np.random.SeedSequence([seed, 13])))
    return "end_to_end", lambda: episode_loss(model, episode, 1.0).total, model.trainable()


def run(seed: int = 0) -> list[tuple[str, float]]:
    """Max relative error per case, in a fixed order."""
    cases = [*op_cases(seed), *module_cases(seed), end_to_end_case(seed)]
    return [(name, finite_diff_check(f, params)) for name, f, params in cases]
