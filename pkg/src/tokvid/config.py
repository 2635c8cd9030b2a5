"""Run configuration: a TOML file mirroring the model, rope, train, sampler and data settings."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ardf import SamplerConfig, TrainConfig
from .errors import ConfigError
from .model import ModelConfig
from .rope import RopeConfig
from .sequence import text_vocab_size
from .synthdata import DIRECTIONS, SpecDistribution, visual_vocab_needed


@dataclass(frozen=True)
class ArchConfig:
    """Model shape; vocabulary sizes are derived from the data settings."""

    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 1
    head_dim: int = 64
    ffn_multiplier: float = 2.0
    rmsnorm_epsilon: float = 1e-5
    init_std: float = 0.02
    init_seed: int = 1


@dataclass(frozen=True)
class DataConfig:
    grid: tuple[int, int] = (8, 8)
    T: int = 7
    sprite: tuple[int, int] = (2, 2)
    directions: tuple[str, ...] = tuple(DIRECTIONS)
    fps: int = 8
    count: int = 400
    seed: int = 0

    def distribution(self) -> SpecDistribution:
        return SpecDistribution(grid=self.grid, T=self.T, sprite=self.sprite, directions=self.directions,
                                fps=self.fps)


@dataclass(frozen=True)
class RunConfig:
    model: ArchConfig = field(default_factory=ArchConfig)
    rope: RopeConfig = field(default_factory=lambda: RopeConfig(head_dim=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    checkpoint_every: int = 100
    eval_every: int = 100

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            n_layers=m.n_layers, hidden_size=m.hidden_size, n_heads=m.n_heads, head_dim=m.head_dim,
            ffn_multiplier=m.ffn_multiplier, text_vocab=text_vocab_size(),
            visual_vocab=visual_vocab_needed(self.data.sprite), rope=self.rope,
            rmsnorm_epsilon=m.rmsnorm_epsilon, init_std=m.init_std,
        )

    def to_dict(self) -> dict:
        def plain(v):
            if dataclasses.is_dataclass(v):
                return {f.name: plain(getattr(v, f.name)) for f in fields(v) if not f.name.startswith("_")}
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if hasattr(v, "value"):  # enums
                return v.value
            return v

        return plain(self)


_SECTIONS = {"model": ArchConfig, "rope": RopeConfig, "train": TrainConfig, "sampler": SamplerConfig,
             "data": DataConfig}
_TUPLE_KEYS = {"grid", "sprite", "directions", "ratios", "scales"}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls) if not f.name.startswith("_")}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}] settings: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    top_known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - top_known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        if name in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(_SECTIONS[name], value, name)
        else:
            kwargs[name] = value
    if "rope" not in kwargs:
        head_dim = kwargs.get("model", ArchConfig()).head_dim
        kwargs["rope"] = RopeConfig(head_dim=head_dim)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, *, mask_mode=None, rope=None, meta_group_channels=None, scales=None,
                   steps=None, seed=None, output_dir=None) -> RunConfig:
    """Apply command-line flags on top of a loaded config."""
    rope_kw = {}
    if rope is not None:
        rope_kw["variant"] = rope
    if meta_group_channels is not None:
        rope_kw["meta_group_channels"] = meta_group_channels
    if scales is not None:
        rope_kw["scales"] = tuple(scales)
    train_kw = {}
    if mask_mode is not None:
        train_kw["mask_mode"] = mask_mode
    if steps is not None:
        train_kw["steps"] = steps
    try:
        out = replace(cfg, rope=replace(cfg.rope, **rope_kw), train=replace(cfg.train, **train_kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if seed is not None:
        out = replace(out, seed=seed)
    if output_dir is not None:
        out = replace(out, output_dir=str(output_dir))
    return out


__all__ = ["ArchConfig", "DataConfig", "RunConfig", "config_from_dict", "load_config", "with_overrides"]
