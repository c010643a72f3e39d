"""Run and corpus configuration, with strict JSON round-tripping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..distill_losses import LossKind
from ..errors import ConfigError
from ..logits_codec import (
    StaticTemperature,
    TemperaturePolicy,
    TruncationSpec,
    temperature_policy_from_dict,
    temperature_policy_to_dict,
)
from ..schedulers import (
    AlphaSchedule,
    CosineLR,
    LRSchedule,
    StaticAlpha,
    alpha_schedule_from_dict,
    alpha_schedule_to_dict,
    lr_schedule_from_dict,
    lr_schedule_to_dict,
)
from ..tiny_lm import STUDENT_PRESET, TEACHER_PRESET, ModelConfig

MODES = ("offline", "online_early", "online_late")
LABEL_SOURCES = ("corpus", "teacher_argmax")
DESK_LR = CosineLR(lr_max=3e-3, lr_min=3e-4, warmup_ratio=0.01)


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 256
    transition_seed: int = 0
    sequence_count: int = 51200
    chunk_len: int = 32
    train_ratio: float = 0.9375
    heldout_ratio: float = 0.0625
    skew: float = 4.0
    rank: int = 8

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("corpus vocab_size must be >= 2")
        if self.chunk_len < 1 or self.sequence_count < 2:
            raise ConfigError("need chunk_len >= 1 and sequence_count >= 2")
        if self.train_ratio <= 0 or self.heldout_ratio <= 0:
            raise ConfigError("split ratios must be positive")
        if abs(self.train_ratio + self.heldout_ratio - 1.0) > 1e-9:
            raise ConfigError("train_ratio + heldout_ratio must equal 1")
        if self.skew < 0 or self.rank < 1:
            raise ConfigError("skew must be >= 0 and rank >= 1")

    @property
    def train_count(self) -> int:
        n = int(round(self.train_ratio * self.sequence_count))
        return min(max(n, 1), self.sequence_count - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        _reject_unknown(cls, d, "corpus")
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    teacher: ModelConfig = TEACHER_PRESET
    student: ModelConfig = STUDENT_PRESET
    loss: LossKind = LossKind.NLL
    truncation: TruncationSpec = TruncationSpec(0.95, 100)
    temperature: TemperaturePolicy = StaticTemperature(1.0)
    alpha: AlphaSchedule = StaticAlpha(0.9)
    lr: LRSchedule = DESK_LR
    batch_size: int = 16
    total_steps: int = 2000
    eval_every: int = 200
    checkpoint_every: int = 0
    mode: str = "offline"
    seed: int = 0
    teacher_steps: int = 3000
    teacher_lr: LRSchedule = DESK_LR
    window_steps: int = 500
    label_source: str = "corpus"
    dtype: str = "float64"

    def __post_init__(self) -> None:
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.label_source not in LABEL_SOURCES:
            raise ConfigError(f"label_source must be one of {LABEL_SOURCES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        for name in ("batch_size", "total_steps", "eval_every", "teacher_steps", "window_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables checkpoints)")
        if self.teacher.vocab_size != self.student.vocab_size:
            raise ConfigError("teacher and student vocabularies differ")
        if self.mode != "offline" and self.window_steps > self.teacher_steps:
            raise ConfigError("window_steps exceeds teacher_steps")

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "loss": self.loss.value,
            "truncation": asdict(self.truncation),
            "temperature": temperature_policy_to_dict(self.temperature),
            "alpha": alpha_schedule_to_dict(self.alpha),
            "lr": lr_schedule_to_dict(self.lr),
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "mode": self.mode,
            "seed": self.seed,
            "teacher_steps": self.teacher_steps,
            "teacher_lr": lr_schedule_to_dict(self.teacher_lr),
            "window_steps": self.window_steps,
            "label_source": self.label_source,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(cls, d, "run")
        kw = dict(d)
        try:
            if "teacher" in kw:
                kw["teacher"] = ModelConfig.from_dict(kw["teacher"])
            if "student" in kw:
                kw["student"] = ModelConfig.from_dict(kw["student"])
            if "truncation" in kw:
                _reject_unknown(TruncationSpec, kw["truncation"], "truncation")
                kw["truncation"] = TruncationSpec(**kw["truncation"])
            if "temperature" in kw:
                kw["temperature"] = temperature_policy_from_dict(kw["temperature"])
            if "alpha" in kw:
                kw["alpha"] = alpha_schedule_from_dict(kw["alpha"])
            for key in ("lr", "teacher_lr"):
                if key in kw:
                    kw[key] = lr_schedule_from_dict(kw[key])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    """sha1 of the canonical JSON encoding, git-style hex."""
    return hashlib.sha1(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _reject_unknown(cls, d: dict, what: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{what} config must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


@dataclass(frozen=True)
class OnlineOverride:
    """Tuned point for non-converged teacher logits: small alpha, top-0.95-50."""

    alpha: AlphaSchedule = field(default_factory=lambda: StaticAlpha(0.1))
    truncation: TruncationSpec = TruncationSpec(0.95, 50)

    def apply(self, run: RunConfig) -> RunConfig:
        return replace(run, alpha=self.alpha, truncation=self.truncation)
