"""The assembled network: encoder, per-stage matching, decoder and head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import StageConfig
from .decoder import decode, predict_mask
from .distillation import EmptyForegroundError, StageDistribution, reorganize_correlation, spatial_softmax
from .encoder import FeaturePyramid, build_pyramids
from .matching import StageMatch, match_stage, prior_mask
from .params import Params, from_state, init_params, stage_config_from_state, state_dict, trainable
from .tensor import Tensor


@dataclass
class ForwardResult:
    logits: Tensor  # [2 x H x W]
    mask: np.ndarray  # [H x W] uint8
    matches: list[StageMatch]
    query: FeaturePyramid
    supports: list[FeaturePyramid]
    prior: np.ndarray


class FewShotSegmenter:
    def __init__(
        self, params: Params, stage: StageConfig,
        corr_temperature: float = 0.1, distill_temperature: float = 1.0,
    ):
        self.params = params
        self.stage = stage
        self.corr_temperature = corr_temperature
        self.distill_temperature = distill_temperature

    @classmethod
    def initialize(cls, stage: StageConfig | None = None, seed: int = 0, **kw) -> FewShotSegmenter:
        stage = stage or StageConfig()
        return cls(init_params(stage, seed), stage, **kw)

    @classmethod
    def load(cls, path, **kw) -> FewShotSegmenter:
        state = checkpoint.load(path)
        stage_kw = {k: kw.pop(k) for k in ("heads", "positional_encoding", "token_norm") if k in kw}
        return cls(from_state(state), stage_config_from_state(state, **stage_kw), **kw)

    def save(self, path) -> None:
        checkpoint.save(path, self.state_dict())

    def state_dict(self) -> dict[str, np.ndarray]:
        return state_dict(self.params)

    def trainable(self) -> list[Tensor]:
        return trainable(self.params)

    def forward(self, query_image, support_images: Sequence, support_masks: Sequence) -> ForwardResult:
        if len(support_images) != len(support_masks) or not support_images:
            raise ValueError("need one mask per support image and at least one shot")
        query, supports = build_pyramids(query_image, support_images, self.params, self.stage)
        prior = prior_mask(query.backbone.data, [s.backbone.data for s in supports], support_masks)
        matches = []
        for l in range(self.stage.stages):
            matches.append(match_stage(
                query.stages[l], [s.stages[l] for s in supports], support_masks,
                prior, self.params, l + 1, self.corr_temperature,
            ))
        fused = decode([m.features for m in matches], self.params)
        h, w = np.shape(getattr(query_image, "data", query_image))[1:]
        logits, mask = predict_mask(fused, self.params, (h, w))
        return ForwardResult(logits, mask, matches, query, supports, prior)

    def stage_distributions(self, result: ForwardResult) -> list[StageDistribution | None]:
        """Spatial distributions of the support-filtered correlation, finest stage first."""
        out = []
        for m in result.matches:
            try:
                scores = reorganize_correlation(m.correlation.raw, m.correlation.support_fg)
            except EmptyForegroundError:
                out.append(None)
                continue
            out.append(spatial_softmax(scores, m.correlation.query_hw, self.distill_temperature))
        return out

    def predict(self, episode) -> np.ndarray:
        return self.forward(episode.query_image, episode.support_images, episode.support_masks).mask
