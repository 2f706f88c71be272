"""Run configuration: nested YAML sections with documented defaults.

Every key has a default, unknown keys are rejected, and command-line flags
override file values. ``dump`` writes the effective configuration so that a
run can be repeated from the dumped file alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import AugmentConfig
from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .optim import ScheduleConfig

DEFAULT_CONFIG_TEXT = """\
# SmokeNet run configuration. Every key is optional; omitted keys keep the
# defaults shown here. Flags (--seed, --precision, --out, --checkpoint)
# override the file.

seed: 0
precision: 32            # 32 for speed, 64 for verification and bit-exact resume
out: runs/default

model:
  filters: [4, 8, 16, 32, 64, 128]
  in_channels: 3
  selected_kernels: [3x3, 3x3, 3x3]   # one of 1x3 3x1 1x5 5x1 3x3 3x5 5x3 5x5 per multiscale stage
  dilations: [2, 2, 2]
  decoder_depth: 6       # 6, or 3 for skip additions only at the three deepest stages
  aux_head: true
  conv_variant: multiscale        # or plain (ablation)
  attention_variant: multiview    # or spatial (ablation)

loss:
  kind: layer_wise       # or final_only
  alpha: 0.5             # BCE weight
  beta: 0.5              # Dice weight
  gamma: [0.5, 0.4, 0.3, 0.2, 0.1]   # aux mask weights, decoder stages 2..6
  dice_smoothing: 1.0
  final_weight: 1.0

schedule:
  # alternative setting: eta_min 1.0e-5 with total_epochs 50 (change both)
  eta_max: 0.001
  eta_min: 1.0e-6
  total_epochs: 100

optim:
  beta1: 0.9
  beta2: 0.999
  eps: 1.0e-8
  weight_decay: 1.0e-5

data:
  manifest: null         # JSON-lines manifest; required by train and eval
  train_split: train
  val_split: val         # skipped when the manifest has no such records
  test_split: test
  image_size: 256        # square side, divisible by 64
  batch_size: 8

train:
  epochs: 100            # must not exceed schedule.total_epochs
  max_steps: null        # optional cap on optimizer steps per run
  resume: false          # continue from <out>/last.ckpt when present

augment:
  hflip_p: 0.5
  vflip_p: 0.5
  rotation_p: 0.3
  rotation_range: 15.0
  brightness_p: 0.3
  brightness_range: [0.8, 1.2]
  fog_p: 0.3
  fog_density: [0.1, 0.5]
  fog_color: [0.9, 0.9, 0.9]
  blur_p: 0.3
  blur_lengths: [3, 5, 7]
  blur_angle_range: [0.0, 180.0]

eval:
  fps_iters: 10
  fps_warmup: 2
  threads: 1

infer:
  threshold: 0.5
  overlay_alpha: 0.5

preview:
  count: 4               # augmented copies per sample
  limit: 8               # samples taken from the manifest
"""


@dataclass(frozen=True)
class LossSection:
    kind: str = "layer_wise"
    alpha: float = 0.5
    beta: float = 0.5
    gamma: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2, 0.1)
    dice_smoothing: float = 1.0
    final_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("layer_wise", "final_only"):
            raise ConfigError(f"loss.kind must be layer_wise or final_only, got {self.kind!r}")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            gamma=tuple(self.gamma),
            dice_smoothing=self.dice_smoothing,
            final_weight=self.final_weight,
        )


@dataclass(frozen=True)
class OptimSection:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


@dataclass(frozen=True)
class DataSection:
    manifest: str | None = None
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"
    image_size: int = 256
    batch_size: int = 8

    def __post_init__(self):
        if self.image_size < 64 or self.image_size % 64:
            raise ConfigError(f"data.image_size must be a positive multiple of 64, got {self.image_size}")
        if self.batch_size < 1:
            raise ConfigError("data.batch_size must be >= 1")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 100
    max_steps: int | None = None
    resume: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("train.max_steps must be >= 1 when set")


@dataclass(frozen=True)
class EvalSection:
    fps_iters: int = 10
    fps_warmup: int = 2
    threads: int = 1


@dataclass(frozen=True)
class InferSection:
    threshold: float = 0.5
    overlay_alpha: float = 0.5


@dataclass(frozen=True)
class PreviewSection:
    count: int = 4
    limit: int = 8


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossSection,
    "schedule": ScheduleConfig,
    "optim": OptimSection,
    "data": DataSection,
    "train": TrainSection,
    "augment": AugmentConfig,
    "eval": EvalSection,
    "infer": InferSection,
    "preview": PreviewSection,
}


def _tuples(value):
    return tuple(_tuples(v) for v in value) if isinstance(value, list) else value


def _section(cls, raw, name: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    if cls is ModelConfig:
        known.discard("precision")  # set from the top-level key
    if cls is AugmentConfig:
        known.discard("seed")
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    try:
        return cls(**{k: _tuples(v) for k, v in raw.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: int = 32
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    infer: InferSection = field(default_factory=InferSection)
    preview: PreviewSection = field(default_factory=PreviewSection)

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        # keep the nested copies of seed/precision in step with the top level
        if self.model.precision != self.precision:
            object.__setattr__(self, "model", replace(self.model, precision=self.precision))
        if self.augment.seed != self.seed:
            object.__setattr__(self, "augment", replace(self.augment, seed=self.seed))
        if self.train.epochs > self.schedule.total_epochs:
            raise ConfigError(
                f"train.epochs ({self.train.epochs}) exceeds schedule.total_epochs ({self.schedule.total_epochs})"
            )

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        unknown = sorted(set(raw) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kwargs = {k: raw[k] for k in ("seed", "precision", "out") if k in raw}
        for name, section_cls in _SECTIONS.items():
            if name in raw:
                kwargs[name] = _section(section_cls, raw[name], name)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "precision": self.precision, "out": self.out}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            if name == "model":
                del section["precision"]
            elif name == "augment":
                del section["seed"]
            d[name] = _lists(section)
        return d

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply top-level overrides (``None`` values are ignored)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return RunConfig.from_dict({**self.to_dict(), **changes}) if changes else self


def _lists(value):
    if isinstance(value, dict):
        return {k: _lists(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_lists(v) for v in value]
    return value


def load(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)


def dump(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def defaults_text() -> str:
    return DEFAULT_CONFIG_TEXT
