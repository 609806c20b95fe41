"""Run configuration: nested dataclasses loaded from a YAML file with a strict schema.

Every key in the file must name a field below; unknown keys are rejected with
their dotted path. Example::

    data:
      n_sequences: 32
      degrade: {floor: 0.4}
    diffusion: {T: 100}
    train: {steps: 2000, batch_size: 8, seed: 0}
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .agcn import AGCNConfig
from .coarse import DegradeSpec
from .denoiser import PARAMETERIZATIONS, DenoiserConfig
from .synth import SynthSpec

ABLATIONS = ("none", "no-appearance", "no-motion")
DATA_ROOT_ENV = "FADM_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DegradeConfig:
    floor: float = 0.4
    gain: float = 1.2
    max_severity: float = 2.5
    blur_per_unit: float = 1.0
    warp_per_unit: float = 1.5
    color_per_unit: float = 0.06
    ghost_per_unit: float = 0.08
    warp_grid: int = 5


@dataclass
class DataConfig:
    resolution: int = 64
    exp_dim: int = 8
    pose_dim: int = 4
    n_sequences: int = 32
    seq_length: int = 16
    n_heldout: int = 4
    step_bound: float = 0.08
    background: str = "gradient"
    seed: int = 0
    degrade: DegradeConfig = field(default_factory=DegradeConfig)


@dataclass
class DiffusionConfig:
    kind: str = "linear"
    T: int = 100
    # DDPM's 1e-4..0.02 rescaled by 1000 / T so that alpha_bar_T is close to 0
    beta_start: float = 1e-3
    beta_end: float = 0.2
    sampler: str = "ancestral"
    ddim_steps: int = 20
    # clamp each step's implied clean image to [0, 1] before the posterior mean
    clip_denoised: bool = True


@dataclass
class ModelConfig:
    base_channels: int = 32
    channel_mults: list = field(default_factory=lambda: [1, 2, 2])
    denoiser_emb_dim: int = 64
    cond_channels: int = 16
    appearance_channels: int = 16
    motion_channels: int = 16
    hidden: int = 32
    mlp_hidden: int = 64
    emb_dim: int = 32
    appearance_factor: int = 4
    alpha: float = 0.3
    K: int = 3
    # "anchored": the U-Net predicts a correction to the coarse frame (see denoiser)
    parameterization: str = "anchored"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epochs: int = 10
    repeats: int = 1
    steps: Optional[int] = None
    batch_size: int = 8
    lambda_color: float = 1.0
    seed: int = 0
    ablation: str = "none"
    log_every: int = 1
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    n_pairs: int = 64
    sample_seed: int = 1234
    batch_size: int = 32


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        t, m, d = self.train, self.model, self.data
        if t.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if t.lambda_color < 0:
            raise ConfigError("train.lambda_color must be >= 0")
        if t.ablation not in ABLATIONS:
            raise ConfigError(f"train.ablation must be one of {ABLATIONS}, got {t.ablation!r}")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if m.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"model.parameterization must be one of {PARAMETERIZATIONS}, got {m.parameterization!r}")
        if m.K < 2:
            raise ConfigError("model.K must be >= 2")
        if d.resolution % 2 ** (len(m.channel_mults) - 1) or d.resolution % 2 ** (m.K - 1):
            raise ConfigError("data.resolution must be divisible by the U-Net and pyramid strides")
        if d.resolution % m.appearance_factor:
            raise ConfigError("data.resolution must be divisible by model.appearance_factor")
        if not 0 <= d.n_heldout < d.n_sequences:
            raise ConfigError("data.n_heldout must be in [0, n_sequences)")
        if d.seq_length < 2:
            raise ConfigError("data.seq_length must be >= 2")
        return self

    # -- derived component configs ----------------------------------------

    def denoiser_config(self) -> DenoiserConfig:
        m = self.model
        return DenoiserConfig(
            base_channels=m.base_channels, channel_mults=tuple(m.channel_mults),
            cond_channels=m.cond_channels, resolution=self.data.resolution, emb_dim=m.denoiser_emb_dim,
            parameterization=m.parameterization,
        )

    def agcn_config(self) -> AGCNConfig:
        m, d = self.model, self.data
        return AGCNConfig(
            exp_dim=d.exp_dim, pose_dim=d.pose_dim, appearance_channels=m.appearance_channels,
            motion_channels=m.motion_channels, cond_channels=m.cond_channels, hidden=m.hidden,
            mlp_hidden=m.mlp_hidden, emb_dim=m.emb_dim, resolution=d.resolution,
            appearance_factor=m.appearance_factor, alpha=m.alpha, K=m.K,
        )

    def synth_spec(self, identity_seed: int = 0) -> SynthSpec:
        d = self.data
        return SynthSpec(resolution=d.resolution, exp_dim=d.exp_dim, pose_dim=d.pose_dim,
                         identity_seed=identity_seed, background=d.background)

    def degrade_spec(self, seed: int = 0) -> DegradeSpec:
        return DegradeSpec(**asdict(self.data.degrade), seed=seed)

    def total_steps(self, n_pairs: int) -> int:
        t = self.train
        if t.steps is not None:
            return int(t.steps)
        per_epoch = max(1, (n_pairs * t.repeats) // t.batch_size)
        return per_epoch * t.epochs

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(f"unknown config key: {path}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        else:
            kwargs[key] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def from_dict(data: Optional[dict]) -> Config:
    return _build(Config, data or {}, "").validate()


def load_config(path: Optional[Path]) -> tuple[Config, dict]:
    """Return the parsed config and the raw mapping (to tell explicit keys from defaults)."""
    if path is None:
        return Config().validate(), {}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return from_dict(raw), raw


def dump_config(cfg: Config, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def explicit(raw: dict, dotted: str) -> bool:
    node = raw
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return True


def set_dotted(cfg: Config, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = getattr(node, p)
    setattr(node, leaf, value)


def get_dotted(cfg: Config, dotted: str):
    node = cfg
    for p in dotted.split("."):
        node = getattr(node, p)
    return node


def data_root(default: Optional[Path] = None) -> Optional[Path]:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else default
