"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import GlyphDatasetConfig
from .fusion import LossConfig
from .model import ModelConfig
from .mpsa import MpsaConfig
from .pipeline import TrainConfig
from .saccade import SamplerParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 0
    # dataset
    data_dir: str = ""
    data_seed: int = 0
    canvas: int = 256
    glyph: int = 16
    num_classes: int = 10
    fine_variants: int = 2
    train_per_class: int = 50
    test_per_class: int = 20
    val_per_class: int = 0
    clutter_density: float = 0.3
    clutter_contrast: float = 0.5
    background_noise: float = 0.0
    placement: str = "uniform"
    align: int = 4
    # model
    input_side: int = 64
    patch: int = 4
    channels: str = "16,32"
    parts: int = 8
    disable_position_bias: bool = False
    beta_temperature: float = 0.1
    mask_fraction: float = 0.25
    # training
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    warmup_epochs: int = 1
    weight_decay: float = 0.001
    momentum: float = 0.9
    optimizer: str = "adamw"
    label_smoothing: float = 0.1
    n_train: int = 4
    n_test: int = 4
    train_mode: str = "saccadic"
    patience: int = 10
    # losses
    lambda_per: float = 0.5
    lambda_fix: float = 0.5
    confidence: float = 0.1
    confidence_sign: str = "penalty"
    # sampler
    temperature: float = 0.1
    nms_sigma: float = 50.0
    nms_strength: float = 0.95
    squared_kernel: bool = False

    def __post_init__(self):
        # surface every sub-config's validation at construction time
        self.model_config()
        self.train_config()
        if not self.data_dir:
            self.dataset_config()

    # -- views ---------------------------------------------------------------------

    def channel_tuple(self) -> tuple[int, ...]:
        try:
            return tuple(int(c) for c in self.channels.split(","))
        except ValueError:
            raise ConfigError(f"channels must be a comma list of ints, got {self.channels!r}") from None

    def dataset_config(self) -> GlyphDatasetConfig:
        return GlyphDatasetConfig(
            canvas=self.canvas, glyph=self.glyph, num_classes=self.num_classes,
            fine_variants=self.fine_variants, train_per_class=self.train_per_class,
            test_per_class=self.test_per_class, val_per_class=self.val_per_class,
            clutter_density=self.clutter_density, clutter_contrast=self.clutter_contrast,
            background_noise=self.background_noise, placement=self.placement, align=self.align,
            seed=self.data_seed,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(channels=self.channel_tuple(), input_side=self.input_side, patch=self.patch),
            mpsa=MpsaConfig(parts=self.parts, disable_position_bias=self.disable_position_bias),
            num_classes=self.num_classes,
            source_side=self.canvas,
            beta_temperature=self.beta_temperature,
            mask_fraction=self.mask_fraction,
        )

    def sampler_params(self) -> SamplerParams:
        return SamplerParams(temperature=self.temperature, nms_sigma=self.nms_sigma,
                             nms_strength=self.nms_strength, squared_kernel=self.squared_kernel,
                             n=self.n_test, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay, momentum=self.momentum, optimizer=self.optimizer,
            label_smoothing=self.label_smoothing, n_train=self.n_train, n_test=self.n_test,
            sampler=self.sampler_params(),
            loss=LossConfig(self.lambda_per, self.lambda_fix, self.confidence, self.confidence_sign),
            train_mode=self.train_mode, patience=self.patience, seed=self.seed,
        )

    # -- (de)serialisation -----------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.to_dict().items())

    def write(self, path: str | Path):
        Path(path).write_text(self.dumps())

    def updated(self, values: dict) -> "RunConfig":
        return from_dict({**self.to_dict(), **values})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def from_dict(values: dict) -> RunConfig:
    typed = {k: coerce(k, v) for k, v in values.items()}
    try:
        return RunConfig(**typed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Keys are validated, not applied."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = coerce(key, value)
    return out


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    values = parse(Path(path).read_text()) if path else {}
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v)
    return from_dict(values)
