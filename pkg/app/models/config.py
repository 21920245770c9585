from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

import math

from ..errors import ConfigError
from ..utils.tokenizer import VOCAB_SIZE

SHARE_STRATEGIES = ("none", "shallow", "deep", "uniform")
INJECT_MODES = ("none", "concat", "add")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters"""
    M: int = 12  # semantic layers
    L: int = 4  # spatial layers
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    n_geo_tokens: int = 64
    H: int = 32
    W: int = 32
    c_latent: int = 4
    T: int = 100
    lam: float = 0.5  # depth-loss weight; "lambda" in config files
    share_strategy: str = "uniform"
    inject_mode: str = "add"
    max_prompt_len: int = 56
    n_dit_blocks: int = 4
    d_dit: int = 64
    ffn_mult: int = 4
    head_channels: int = 32
    adapter_channels: int = 16
    codec_hidden: int = 128
    beta_start: float = 1e-4
    beta_end: float = 0.02
    depth_init: float = 6.0  # softplus output at initialisation, meters

    def __post_init__(self):
        if not (self.M > self.L >= 1):
            raise ConfigError(f"need M > L >= 1, got M={self.M}, L={self.L}")
        if self.d_model % self.n_heads or self.d_dit % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} / d_dit={self.d_dit} not divisible by n_heads={self.n_heads}")
        if self.H % 8 or self.W % 8:
            raise ConfigError(f"H={self.H}, W={self.W} must be multiples of 8")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.share_strategy not in SHARE_STRATEGIES:
            raise ConfigError(f"share_strategy '{self.share_strategy}' not in {SHARE_STRATEGIES}")
        if self.inject_mode not in INJECT_MODES:
            raise ConfigError(f"inject_mode '{self.inject_mode}' not in {INJECT_MODES}")
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.vocab_size < VOCAB_SIZE:
            raise ConfigError(f"vocab_size {self.vocab_size} smaller than the scene vocabulary ({VOCAB_SIZE})")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def h(self) -> int:
        return self.H // 8

    @property
    def w(self) -> int:
        return self.W // 8

    @property
    def grid(self) -> int:
        """Side of the geo token grid, or 0 when n_geo_tokens is not a perfect square."""
        side = math.isqrt(self.n_geo_tokens)
        return side if side * side == self.n_geo_tokens else 0

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model key 'model.{unknown[0]}'")
        return cls(**data)


PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "tiny": ModelConfig(
        M=3, L=2, d_model=8, n_heads=2, n_geo_tokens=4, H=8, W=8, c_latent=2, T=8,
        n_dit_blocks=1, d_dit=8, ffn_mult=2, head_channels=4, adapter_channels=2, codec_hidden=8,
    ),
    "full": ModelConfig(M=36, L=10),
}


@dataclass(frozen=True)
class TrainSettings:
    """Budgets and optimizer settings of one training run"""
    steps_s1: int = 500
    steps_s2: int = 1000
    phase_split: float = 0.5
    batch_size: int = 8
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    val_every: int = 50
    val_size: int = 64
    train_pool_size: Optional[int] = None
    semantic_prefit_steps: int = 300
    codec_prefit_steps: int = 600
    prefit_batch_size: int = 16
    task_mix: Optional[Dict[str, float]] = None  # None: each phase's own task weights
    verify_freeze: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.steps_s1 < 0 or self.steps_s2 < 0:
            raise ConfigError("step budgets must be >= 0")
        if not (0.0 <= self.phase_split <= 1.0):
            raise ConfigError(f"phase_split {self.phase_split} outside [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.val_every < 1 or self.val_size < 1:
            raise ConfigError("val_every and val_size must be >= 1")
        if self.task_mix is not None and abs(sum(self.task_mix.values()) - 1.0) > 1e-6:
            raise ConfigError(f"task_mix weights sum to {sum(self.task_mix.values())}, expected 1")

    def replace(self, **changes) -> "TrainSettings":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainSettings":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train key 'train.{unknown[0]}'")
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


@dataclass(frozen=True)
class ExperimentConfig:
    """A model configuration plus run metadata"""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    seeds: Tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    ablation_axis: Optional[str] = None
    ablation_values: Optional[List[Any]] = None
    score_scenes: int = 32
    checked: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.train.steps_s1 + self.train.steps_s2 <= 0:
            raise ConfigError("total step budget must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)
