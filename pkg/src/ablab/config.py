"""Run configuration: a single JSON document, validated on load."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


class RunMode(str, enum.Enum):
    TRAD_DDP = "TradDDP"
    AB_GROUPS = "AbGroups"
    AB_NO_GROUPS = "AbNoGroups"


def round_half_up(x: float) -> int:
    # 1e-9 guards products like 0.0333 * 1500 landing a hair under .5
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class AbHyperparams:
    total_training_steps: int = 1000
    warmup_steps_frac: float = 0.20
    num_ab_steps_frac: float = 0.0333
    full_rank_rebound_factor: float = 0.25
    lr_rebound_factor: float = 0.5
    sigma_cutoff: float = 0.1

    def __post_init__(self):
        if self.total_training_steps < 1:
            raise ConfigError("total_training_steps must be >= 1")
        for name in ("warmup_steps_frac", "num_ab_steps_frac", "full_rank_rebound_factor", "lr_rebound_factor"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.sigma_cutoff < 1.0:
            raise ConfigError("sigma_cutoff must lie in [0, 1)")

    def _count(self, value: float, allow_zero: bool = False) -> int:
        n = round_half_up(value)
        if allow_zero and value == 0:
            return 0
        return max(1, n)

    @property
    def warmup_steps(self) -> int:
        return self._count(self.warmup_steps_frac * self.total_training_steps, allow_zero=True)

    @property
    def num_ab_steps(self) -> int:
        return self._count(self.num_ab_steps_frac * self.total_training_steps)

    @property
    def full_rank_rebound_steps(self) -> int:
        return self._count(self.full_rank_rebound_factor * self.num_ab_steps)

    @property
    def lr_rebound_steps(self) -> int:
        return self._count(self.lr_rebound_factor * self.num_ab_steps)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    lr_warmup_steps: int = 0
    min_lr: float = 0.0

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def _default_model():
    return [
        {"type": "linear", "in": 32, "out": 256},
        {"type": "relu"},
        {"type": "linear", "in": 256, "out": 256},
        {"type": "relu"},
        {"type": "linear", "in": 256, "out": 4},
    ]


def _default_dataset():
    return {"kind": "teacher_student", "n_samples": 20000, "in_dim": 32, "classes": 4,
            "hidden": 64, "test_fraction": 0.2, "seed": 0}


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one training run.

    Exactly one of ``local_batch_size`` / ``global_batch_size`` is set; it also
    selects constant-local or constant-global semantics in a sweep.
    """

    mode: RunMode = RunMode.AB_GROUPS
    model: list = field(default_factory=_default_model)
    dataset: dict = field(default_factory=_default_dataset)
    seed: int = 0
    world_size: int = 4
    num_groups: int = 2
    local_batch_size: int | None = 32
    global_batch_size: int | None = None
    ab: AbHyperparams = field(default_factory=AbHyperparams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    precision: str = "float64"
    bytes_per_element: int | None = None
    eval_interval: int = 100
    output_dir: str | None = None
    workers_per_node: int = 1
    parallel: bool = False
    check_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", RunMode(self.mode))
        if (self.local_batch_size is None) == (self.global_batch_size is None):
            raise ConfigError("set exactly one of local_batch_size and global_batch_size")
        if self.world_size < 1:
            raise ConfigError("world_size must be >= 1")
        if self.global_batch_size is not None and self.global_batch_size % self.world_size:
            raise ConfigError(
                f"global_batch_size={self.global_batch_size} is not divisible by world_size={self.world_size}"
            )
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be 'float64' or 'float32'")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.dataset.get("kind") == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key in self.dataset and not Path(self.dataset[key]).exists():
                    raise ConfigError(f"dataset.{key}: {self.dataset[key]} does not exist")

    @property
    def local_batch(self) -> int:
        if self.local_batch_size is not None:
            return self.local_batch_size
        return self.global_batch_size // self.world_size

    @property
    def global_batch(self) -> int:
        return self.local_batch * self.world_size

    @property
    def bpe(self) -> int:
        if self.bytes_per_element is not None:
            return self.bytes_per_element
        return 4 if self.precision == "float32" else 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        try:
            if "ab" in d and isinstance(d["ab"], dict):
                d["ab"] = AbHyperparams(**d["ab"])
            if "optimizer" in d and isinstance(d["optimizer"], dict):
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            if "mode" in d:
                d["mode"] = RunMode(d["mode"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_json(text)

    def override(self, **changes) -> RunConfig:
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)
