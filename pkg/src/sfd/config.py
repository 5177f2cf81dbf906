"""Run configuration: TOML file with one table per component.

Unknown keys are rejected with their dotted path so typos never silently
fall back to defaults. ``default_config_toml()`` renders the full schema
with defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .encoders import EncoderConfig
from .errors import ConfigError
from .feat_disc import FeatDConfig
from .generator import DegradationParams, GeneratorConfig


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1e-2
    perceptual: float = 1.0
    feat_adv: float = 5e-3
    text_adv: float = 5e-3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0", f"loss.{f.name}")
        if not any(getattr(self, f.name) > 0 for f in dataclasses.fields(self)):
            raise ConfigError("at least one loss weight must be positive", "loss")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pixel, self.perceptual, self.feat_adv, self.text_adv)


@dataclass(frozen=True)
class DataConfig:
    hr_dir: str = "corpus"
    patch_size: int = 64
    batch_size: int = 4
    flips: bool = True


@dataclass(frozen=True)
class DegradationConfig:
    mode: str = "bicubic_only"
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class PromptConfig:
    positive: str = "Good photo"
    negative: str = "Bad photo"
    parameterization: str = "feature"  # or "token"
    text_embedder: bool = True
    text_weights: str | None = None
    center_embeddings: bool = True


@dataclass(frozen=True)
class PerceptualConfig:
    source: str = "tiny_encoder"  # or "external_vgg"
    tap_layers: tuple[int, ...] | None = None
    vgg_weights: str | None = None

    def __post_init__(self):
        if self.source not in ("tiny_encoder", "external_vgg"):
            raise ConfigError(f"unknown perceptual source {self.source!r}", "perceptual.source")
        if self.tap_layers is not None:
            object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
            if not self.tap_layers:
                raise ConfigError("tap_layers must name at least one layer", "perceptual.tap_layers")
        if self.source == "external_vgg" and not self.vgg_weights:
            raise ConfigError("external_vgg needs vgg_weights", "perceptual.vgg_weights")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lr_d: float | None = None  # Feat-D lr; defaults to lr
    lr_lpp: float | None = None  # prompt-pair lr; defaults to lr_d

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0 or any(x is not None and x <= 0 for x in (self.lr_d, self.lr_lpp)):
            raise ConfigError("learning rates must be > 0", "optim.lr")


@dataclass(frozen=True)
class RunSettings:
    steps: int = 300
    seed: int = 0
    checkpoint_interval: int = 100
    pretrain_steps: int = 0
    output_dir: str = "runs/toy"
    deterministic: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("steps must be >= 0", "run.steps")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1", "run.checkpoint_interval")


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "degradation": DegradationConfig,
    "generator": GeneratorConfig,
    "encoder": EncoderConfig,
    "feat_d": FeatDConfig,
    "prompts": PromptConfig,
    "perceptual": PerceptualConfig,
    "loss": LossWeights,
    "optim": OptimConfig,
    "run": RunSettings,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    feat_d: FeatDConfig = field(default_factory=FeatDConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        p, s = self.data.patch_size, self.generator.scale
        if p % s:
            raise ConfigError(f"patch_size {p} not divisible by scale {s}", "data.patch_size")
        m = self.encoder.pyramid_strides[-1] * 2 ** (self.feat_d.num_upsampling_stages - 2)
        if p % m:
            raise ConfigError(f"patch_size {p} must be a multiple of {m} for this encoder/discriminator",
                              "data.patch_size")
        if self.data.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "data.batch_size")
        self.degradation_params(0)  # validates the degradation table

    def degradation_params(self, seed: int) -> DegradationParams:
        d = self.degradation
        return DegradationParams(d.mode, d.blur_sigma, d.noise_sigma, seed, self.generator.scale)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(run={"steps": 10})``."""
        changed = {k: dataclasses.replace(getattr(self, k), **v) for k, v in sections.items()}
        return dataclasses.replace(self, **changed)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: Path | None = None) -> "RunConfig":
        sections = {}
        for name, value in raw.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section {name!r}", name)
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be a table", name)
            sections[name] = _build_section(name, SECTIONS[name], value)
        cfg = cls(**sections)
        if base_dir is not None:
            cfg = _resolve_paths(cfg, Path(base_dir))
        return cfg


def _build_section(name: str, kind: type, values: dict[str, Any]):
    known = {f.name for f in dataclasses.fields(kind)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}", f"{name}.{key}")
    try:
        return kind(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value in section {name!r}: {e}", name) from None


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def rel(p):
        return p if p is None or Path(p).is_absolute() else str((base / p).resolve())

    return cfg.replace(
        data={"hr_dir": rel(cfg.data.hr_dir)},
        run={"output_dir": rel(cfg.run.output_dir)},
        encoder={"weights_path": rel(cfg.encoder.weights_path)},
        prompts={"text_weights": rel(cfg.prompts.text_weights)},
        perceptual={"vgg_weights": rel(cfg.perceptual.vgg_weights)},
    )


def load_run_config(path) -> RunConfig:
    """Parse a TOML run config; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return RunConfig.from_dict(raw, base_dir=path.parent)


def default_config_toml() -> str:
    lines = []
    for name, value in RunConfig().to_dict().items():
        lines.append(f"[{name}]")
        for k, v in value.items():
            if v is None:
                lines.append(f"# {k} =")
            else:
                lines.append(f"{k} = {json.dumps(list(v) if isinstance(v, tuple) else v)}")
        lines.append("")
    return "\n".join(lines)
