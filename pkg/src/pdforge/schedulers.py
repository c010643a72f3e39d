"""Stateless step-indexed schedules for the KD mixing weight and the learning rate.

Every schedule is a pure function of ``(step, total_steps)`` so a resumed run
sees exactly the values the uninterrupted run would have seen.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Union

from .errors import InvalidParameterError, ScheduleRangeError


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _cosine_weight(u: float) -> float:
    """0 at u=0, 1 at u=1, half-cosine in between."""
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    return (1.0 - math.cos(math.pi * u)) / 2.0


def _lerp(a: float, b: float, w: float) -> float:
    # endpoint-exact: w=0 gives a, w=1 gives b
    return (1.0 - w) * a + w * b


def _check_step(step: int, total_steps: int) -> None:
    if total_steps < 1:
        raise ScheduleRangeError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ScheduleRangeError(f"step {step} outside [0, {total_steps}]")


def _check_ratios(warmup_ratio: float, decay_ratio: float) -> None:
    if not (0.0 < warmup_ratio < 1.0 and 0.0 < decay_ratio < 1.0):
        raise InvalidParameterError("warmup and decay ratios must lie in (0, 1)")
    if warmup_ratio + decay_ratio >= 1.0:
        raise InvalidParameterError("warmup_ratio + decay_ratio must be < 1")


def wsd_windows(total_steps: int, warmup_ratio: float, decay_ratio: float) -> tuple[int, int]:
    """``(W, D)``: warmup is ``[0, W)``, plateau ``[W, D)``, decay ``[D, total]``."""
    warm = _round_half_up(warmup_ratio * total_steps)
    decay_start = total_steps - _round_half_up(decay_ratio * total_steps)
    return warm, max(decay_start, warm)


def _wsd_shape(step: int, total: int, high: float, low: float, warmup_ratio: float, decay_ratio: float) -> float:
    warm, decay_start = wsd_windows(total, warmup_ratio, decay_ratio)
    if step < warm:
        return high * step / warm
    if step < decay_start:
        return high
    if decay_start == total:
        return low
    return _lerp(high, low, _cosine_weight((step - decay_start) / (total - decay_start)))


@dataclass(frozen=True)
class StaticAlpha:
    alpha: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameterError(f"static alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class LinearInc:
    pass


@dataclass(frozen=True)
class LinearDec:
    pass


@dataclass(frozen=True)
class Period:
    high: float = 0.9
    every: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.high <= 1.0:
            raise InvalidParameterError("period high value must lie in [0, 1]")
        if int(self.every) != self.every or self.every < 1:
            raise InvalidParameterError("period length must be a positive integer")


@dataclass(frozen=True)
class WSDAlpha:
    peak: float = 1.0
    warmup_ratio: float = 0.10
    decay_ratio: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 < self.peak <= 1.0:
            raise InvalidParameterError("WSD peak must lie in (0, 1]")
        _check_ratios(self.warmup_ratio, self.decay_ratio)


@dataclass(frozen=True)
class WSDBeta(WSDAlpha):
    """WSD shape applied to the LM-loss weight ``1 - alpha``."""


AlphaSchedule = Union[StaticAlpha, LinearInc, LinearDec, Period, WSDAlpha, WSDBeta]


def alpha_at(schedule: AlphaSchedule, step: int, total_steps: int) -> float:
    _check_step(step, total_steps)
    if isinstance(schedule, StaticAlpha):
        return float(schedule.alpha)
    if isinstance(schedule, LinearInc):
        return step / total_steps
    if isinstance(schedule, LinearDec):
        return 1.0 - step / total_steps
    if isinstance(schedule, Period):
        return float(schedule.high) if step % schedule.every == schedule.every - 1 else 0.0
    if isinstance(schedule, WSDBeta):
        beta = _wsd_shape(step, total_steps, schedule.peak, 0.0, schedule.warmup_ratio, schedule.decay_ratio)
        return 1.0 - beta
    if isinstance(schedule, WSDAlpha):
        return _wsd_shape(step, total_steps, schedule.peak, 0.0, schedule.warmup_ratio, schedule.decay_ratio)
    raise InvalidParameterError(f"unknown alpha schedule {schedule!r}")


@dataclass(frozen=True)
class CosineLR:
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    warmup_ratio: float = 0.01

    def __post_init__(self) -> None:
        if not self.lr_max > self.lr_min > 0.0:
            raise InvalidParameterError("need lr_max > lr_min > 0")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise InvalidParameterError("warmup_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class WSDLR:
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    warmup_ratio: float = 0.10
    decay_ratio: float = 0.01

    def __post_init__(self) -> None:
        if not self.lr_max > self.lr_min > 0.0:
            raise InvalidParameterError("need lr_max > lr_min > 0")
        _check_ratios(self.warmup_ratio, self.decay_ratio)


LRSchedule = Union[CosineLR, WSDLR]


def lr_at(schedule: LRSchedule, step: int, total_steps: int) -> float:
    _check_step(step, total_steps)
    if isinstance(schedule, CosineLR):
        warm = _round_half_up(schedule.warmup_ratio * total_steps)
        if step < warm:
            return schedule.lr_max * step / warm
        if warm == total_steps:
            return schedule.lr_min
        w = _cosine_weight((step - warm) / (total_steps - warm))
        return _lerp(schedule.lr_max, schedule.lr_min, w)
    if isinstance(schedule, WSDLR):
        return _wsd_shape(
            step, total_steps, schedule.lr_max, schedule.lr_min, schedule.warmup_ratio, schedule.decay_ratio
        )
    raise InvalidParameterError(f"unknown lr schedule {schedule!r}")


_ALPHA_KINDS = {
    "static": StaticAlpha,
    "linear_inc": LinearInc,
    "linear_dec": LinearDec,
    "period": Period,
    "wsd_alpha": WSDAlpha,
    "wsd_beta": WSDBeta,
}
_LR_KINDS = {"cosine": CosineLR, "wsd_lr": WSDLR}


def _to_dict(schedule, kinds: dict) -> dict:
    for name, cls in kinds.items():
        if type(schedule) is cls:
            return {"kind": name, **asdict(schedule)}
    raise InvalidParameterError(f"unknown schedule {schedule!r}")


def _from_dict(d: dict, kinds: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in kinds:
        raise InvalidParameterError(f"unknown schedule kind {kind!r}; choose from {sorted(kinds)}")
    try:
        return kinds[kind](**d)
    except TypeError as exc:
        raise InvalidParameterError(f"bad fields for schedule {kind!r}: {exc}") from None


def alpha_schedule_to_dict(schedule: AlphaSchedule) -> dict:
    return _to_dict(schedule, _ALPHA_KINDS)


def alpha_schedule_from_dict(d: dict) -> AlphaSchedule:
    return _from_dict(d, _ALPHA_KINDS)


def lr_schedule_to_dict(schedule: LRSchedule) -> dict:
    return _to_dict(schedule, _LR_KINDS)


def lr_schedule_from_dict(d: dict) -> LRSchedule:
    return _from_dict(d, _LR_KINDS)
