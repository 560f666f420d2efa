# %% [markdown]
# One episode through the matcher by hand: encode both images, correlate the
# finest stage, normalise over the query axis, and look at what the
# distillation loss sees.

# %%
import numpy as np

from hdmnet.config import StageConfig
from hdmnet.distillation import gt_teacher, reorganize_correlation, spatial_softmax
from hdmnet.encoder import build_pyramids
from hdmnet.episodes import generate_class_bank, sample_episode
from hdmnet.matching import correlation_map, inverse_softmax, mask_and_flatten, prior_mask
from hdmnet.params import init_params

np.set_printoptions(precision=3, suppress=True)
stage = StageConfig()
params = init_params(stage, seed=0)
bank = generate_class_bank(8, seed=0)
episode = sample_episode(bank[6], 1, 64, 64, np.random.default_rng(1))
print(bank[6].family, "foreground pixels", episode.query_mask.sum())

# %% query and support never see each other inside the encoder
query, supports = build_pyramids(episode.query_image, episode.support_images, params, stage)
for l, f in enumerate(query.stages, start=1):
    print(f"stage {l}", f.shape)

# %% the prior needs no training: best cosine match to any support foreground cell
prior = prior_mask(query.backbone.data, [supports[0].backbone.data], episode.support_masks)
coverage = episode.query_mask.reshape(8, 8, 8, 8).mean(axis=(1, 3))
print("prior\n", prior)
print("corr(prior, true coverage) =", np.corrcoef(prior.ravel(), coverage.ravel())[0, 1])

# %% stage-1 correlation; background support rows are zero and score zero
rows_q, rows_s, fg = mask_and_flatten(query.stages[0], supports[0].stages[0], episode.support_masks[0])
corr = correlation_map(rows_q, rows_s, params["match1.wq"], params["match1.wk"], 0.1, 1, (8, 8), fg)
print("raw range", corr.raw.data.min(), corr.raw.data.max(), "| foreground columns", fg.sum())
col = inverse_softmax(corr).data.sum(axis=0)
print("columns sum to one:", np.allclose(col, 1.0))

# %% what the distillation sees at this stage, next to the ground-truth target
dist = spatial_softmax(reorganize_correlation(corr.raw, fg), (8, 8))
print("student map\n", dist.as_map())
print("ground-truth map\n", gt_teacher(episode.query_mask, (8, 8)).reshape(8, 8))
