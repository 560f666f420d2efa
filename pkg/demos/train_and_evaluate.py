# %% [markdown]
# Train the default tiny model, then compare it with its own initialisation
# on held-out classes. Takes well under a minute.

# %%
import time

from hdmnet.config import RunConfig
from hdmnet.episodes import SplitSpec, evaluate, generate_class_bank
from hdmnet.train import make_model, train

cfg = RunConfig(checkpoint="demo.ckpt", metrics_log="demo_metrics.csv")
t0 = time.perf_counter()
result = train(cfg)
print(f"trained {cfg.steps} steps in {time.perf_counter() - t0:.1f}s")

# %% loss curve, every 50 steps
for step, loss, ce, kl in result.history[::50]:
    print(f"step {step:3d}  loss {loss:.4f}  ce {ce:.4f}  kl {kl:.4f}")
print("train-split mIoU", round(result.train_report.miou, 4))

# %% unseen classes, same seed, trained against untrained
bank = generate_class_bank(cfg.n_classes, cfg.seed)
split = SplitSpec(cfg.train_classes, cfg.test_classes)
trained = evaluate(result.model, bank, split, 200, cfg.shots, cfg.seed, cfg.image_size)
untrained = evaluate(make_model(cfg), bank, split, 200, cfg.shots, cfg.seed, cfg.image_size)
print(trained.format())
print("untrained mIoU", round(untrained.miou, 4))

# %% five shots instead of one, same model
five = evaluate(result.model, bank, split, 200, 5, cfg.seed, cfg.image_size)
print("5-shot mIoU", round(five.miou, 4))
