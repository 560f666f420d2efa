"""Stage layout and run configuration, plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    """Pyramid layout: stage ``l`` (1-based) has ``channels[l-1]`` channels at H / 2**(l+2)."""

    stages: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    heads: int = 1
    blocks: int = 1
    positional_encoding: bool = False
    token_norm: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"need at least one stage, got {self.stages}")
        if len(self.channels) != self.stages:
            raise ConfigError(f"{self.stages} stages but {len(self.channels)} channel counts")
        if any(c < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be positive: {self.channels}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel counts must strictly increase per stage: {self.channels}")
        if self.heads < 1 or any(c % self.heads for c in self.channels):
            raise ConfigError(f"every channel count must divide into {self.heads} heads")
        if self.blocks < 1:
            raise ConfigError("blocks per stage must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages + 2)

    def check_image(self, height: int, width: int) -> None:
        d = self.divisor
        if height < d or width < d or height % d or width % d:
            raise ConfigError(
                f"image {height}x{width} incompatible with {self.stages} stages: "
                f"both sides must be positive multiples of 2**({self.stages}+2) = {d}"
            )

    def stage_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """[(c_l, h_l, w_l)] for l = 1..L."""
        self.check_image(height, width)
        return [
            (c, height // 2 ** (l + 2), width // 2 ** (l + 2))
            for l, c in enumerate(self.channels, start=1)
        ]


@dataclass(frozen=True)
class RunConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    image_size: int = 64
    shots: int = 1
    lambda_kl: float = 1.0
    corr_temperature: float = 0.1
    distill_temperature: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 300
    batch: int = 4
    seed: int = 0
    n_classes: int = 8
    train_classes: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    test_classes: tuple[int, ...] = (6, 7)
    train_episodes: int = 50
    eval_every: int = 50
    checkpoint: str = "hdmnet.ckpt"
    metrics_log: str = "metrics.csv"

    def __post_init__(self):
        self.stage.check_image(self.image_size, self.image_size)
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.lambda_kl < 0:
            raise ConfigError("lambda_kl must be >= 0")
        if self.corr_temperature <= 0 or self.distill_temperature <= 0:
            raise ConfigError("temperatures must be > 0")
        if self.steps < 0 or self.batch < 1 or self.train_episodes < 0:
            raise ConfigError("steps >= 0, batch >= 1 and train_episodes >= 0 required")
        if set(self.train_classes) & set(self.test_classes):
            raise ConfigError("train and test class sets overlap")
        if not self.test_classes or not self.train_classes:
            raise ConfigError("train and test class sets must both be non-empty")
        ids = set(self.train_classes) | set(self.test_classes)
        if min(ids) < 0 or max(ids) >= self.n_classes:
            raise ConfigError(f"class ids must lie in [0, {self.n_classes})")


_STAGE_KEYS = {f.name for f in dataclasses.fields(StageConfig)}
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"stage"}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(like, tuple):
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    stage_defaults, run_defaults = StageConfig(), RunConfig()
    stage_kw: dict = {}
    run_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            if key in _STAGE_KEYS:
                stage_kw[key] = _coerce(raw, getattr(stage_defaults, key))
            elif key in _RUN_KEYS:
                run_kw[key] = _coerce(raw, getattr(run_defaults, key))
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from exc
    if "stages" in stage_kw and "channels" not in stage_kw:
        raise ConfigError("'stages' given without matching 'channels'")
    return RunConfig(stage=StageConfig(**stage_kw), **run_kw)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(StageConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.stage, f.name))}")
    for f in dataclasses.fields(RunConfig):
        if f.name != "stage":
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
