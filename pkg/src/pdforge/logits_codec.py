"""Teacher logits processing: temperature softmax, top-p-k truncation,
adaptive temperature, and storage arithmetic.

All arithmetic is float64. A processed teacher distribution is kept as a
:class:`SparseTeacherDistribution`: the surviving token ids in ascending
order plus their renormalized probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, ValidationError

# Loosest sum tolerance a valid distribution may carry (float32 storage round trip).
STORED_SUM_TOL = 1e-4
ADASD_FLOOR = 1e-3

ArrayLike = Union[np.ndarray, Sequence[float]]


def _as_logits(logits: ArrayLike) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise InvalidInputError(f"expected a non-empty 1-D logit vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain non-finite entries")
    return z


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not (tau > 0.0 and math.isfinite(tau)):
        raise InvalidParameterError(f"temperature must be a positive finite number, got {tau}")
    return tau


@dataclass(frozen=True, eq=False)
class SparseTeacherDistribution:
    """Truncated teacher distribution over ``kept_ids`` (strictly increasing)."""

    kept_ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.kept_ids, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if ids.ndim != 1 or probs.shape != ids.shape or ids.size == 0:
            raise ValidationError("kept_ids and probs must be equal-length non-empty vectors")
        if ids[0] < 0 or np.any(np.diff(ids) <= 0):
            raise ValidationError("kept_ids must be non-negative and strictly increasing")
        if not np.all(np.isfinite(probs)) or np.any(probs <= 0.0):
            raise ValidationError("probs must be finite and strictly positive")
        if abs(probs.sum() - 1.0) > STORED_SUM_TOL:
            raise ValidationError(f"probs sum to {probs.sum()!r}, expected 1")
        ids.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "kept_ids", ids)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return int(self.kept_ids.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseTeacherDistribution):
            return NotImplemented
        return np.array_equal(self.kept_ids, other.kept_ids) and np.array_equal(self.probs, other.probs)

    def check_vocab(self, vocab_size: int) -> None:
        if self.kept_ids[-1] >= vocab_size:
            raise ValidationError(f"kept id {int(self.kept_ids[-1])} outside vocabulary of {vocab_size}")

    def dense(self, vocab_size: int) -> np.ndarray:
        self.check_vocab(vocab_size)
        out = np.zeros(vocab_size)
        out[self.kept_ids] = self.probs
        return out


@dataclass(frozen=True)
class TruncationSpec:
    p: float = 0.95
    k: int = 100

    def __post_init__(self) -> None:
        if not (0.0 < self.p <= 1.0):
            raise InvalidParameterError(f"top-p threshold must lie in (0, 1], got {self.p}")
        if int(self.k) != self.k or self.k < 1:
            raise InvalidParameterError(f"top-k must be a positive integer, got {self.k}")


@dataclass(frozen=True)
class StaticTemperature:
    tau: float = 1.0

    def __post_init__(self) -> None:
        _check_tau(self.tau)


@dataclass(frozen=True)
class AdaSD:
    """Temperature = standard deviation of the kept log-probabilities."""


@dataclass(frozen=True)
class AdaH:
    """Entropy-driven temperature: sharper teacher rows get a higher temperature."""

    tau_max: float = 2.0
    tau_min: float = 0.1
    h_max: float = 4.8

    def __post_init__(self) -> None:
        if not (self.tau_max > self.tau_min > 0.0):
            raise InvalidParameterError("AdaH needs tau_max > tau_min > 0")
        if not self.h_max > 0.0:
            raise InvalidParameterError("AdaH needs h_max > 0")


TemperaturePolicy = Union[StaticTemperature, AdaSD, AdaH]


def softmax_with_temperature(logits: ArrayLike, tau: float = 1.0) -> np.ndarray:
    z = _as_logits(logits)
    tau = _check_tau(tau)
    x = z / tau
    e = np.exp(x - x.max())
    return e / e.sum()


def _kept_count(probs: np.ndarray, order: np.ndarray, spec: TruncationSpec) -> int:
    cum = np.cumsum(probs[order])
    # first position where the running mass reaches p; the crossing token is kept
    n_p = int(np.searchsorted(cum, spec.p, side="left")) + 1
    return min(n_p, probs.size, int(spec.k))


def truncate_top_p_k(logits: ArrayLike, spec: TruncationSpec) -> SparseTeacherDistribution:
    z = _as_logits(logits)
    if z.size < 2:
        raise InvalidInputError("a dense logit vector needs a vocabulary of at least 2")
    probs = softmax_with_temperature(z, 1.0)
    # stable sort on -p: ties resolve to the lower token id
    order = np.argsort(-probs, kind="stable")
    n = _kept_count(probs, order, spec)
    kept = np.sort(order[:n])
    return SparseTeacherDistribution(kept, softmax_with_temperature(z[kept], 1.0))


def entropy(dist: SparseTeacherDistribution) -> float:
    q = dist.probs
    return float(max(0.0, -np.sum(q * np.log(q))))


def resolve_temperature(policy: TemperaturePolicy, dist: SparseTeacherDistribution) -> float:
    if isinstance(policy, StaticTemperature):
        return float(policy.tau)
    if isinstance(policy, AdaH):
        h = min(max(entropy(dist), 0.0), policy.h_max)
        tau = policy.tau_max - (policy.tau_max - policy.tau_min) * h / policy.h_max
        return float(min(max(tau, policy.tau_min), policy.tau_max))
    if isinstance(policy, AdaSD):
        return max(float(np.std(np.log(dist.probs))), ADASD_FLOOR)
    raise InvalidParameterError(f"unknown temperature policy {policy!r}")


def apply_temperature(dist: SparseTeacherDistribution, tau: float) -> SparseTeacherDistribution:
    tau = _check_tau(tau)
    if tau == 1.0:
        return dist
    x = np.log(dist.probs) / tau
    e = np.exp(x - x.max())
    return SparseTeacherDistribution(dist.kept_ids, e / e.sum())


def process_logits(
    logits: ArrayLike, spec: TruncationSpec, policy: TemperaturePolicy = StaticTemperature(1.0)
) -> SparseTeacherDistribution:
    dist = truncate_top_p_k(logits, spec)
    return apply_temperature(dist, resolve_temperature(policy, dist))


def process_logits_rows(
    logits: np.ndarray, spec: TruncationSpec, policy: TemperaturePolicy = StaticTemperature(1.0)
) -> list[SparseTeacherDistribution]:
    """Row-wise :func:`process_logits` over a ``(..., V)`` array, flattened in C order."""
    rows = np.asarray(logits, dtype=np.float64)
    rows = rows.reshape(-1, rows.shape[-1])
    return [process_logits(row, spec, policy) for row in rows]


@dataclass(frozen=True)
class StorageEstimate:
    dense_bytes: float
    sparse_bytes: float
    reduction_factor: float


def estimate_storage(
    vocab_size: int,
    token_count: float,
    avg_kept_entries: float = 0.0,
    bytes_per_entry: int = 8,
    dense_bytes: int = 4,
) -> StorageEstimate:
    """Disk footprint of dense logits (``dense_bytes`` per value) versus sparse (id, prob) entries.

    ``reduction_factor`` is ``math.inf`` when the sparse size is zero.
    """
    if vocab_size < 0 or token_count < 0 or avg_kept_entries < 0 or bytes_per_entry <= 0 or dense_bytes <= 0:
        raise InvalidParameterError("storage inputs must be non-negative (byte widths positive)")
    dense = float(vocab_size) * float(dense_bytes) * float(token_count)
    sparse = float(avg_kept_entries) * float(bytes_per_entry) * float(token_count)
    reduction = dense / sparse if sparse > 0 else math.inf
    return StorageEstimate(dense, sparse, reduction)


def temperature_policy_to_dict(policy: TemperaturePolicy) -> dict:
    if isinstance(policy, StaticTemperature):
        return {"kind": "static", "tau": policy.tau}
    if isinstance(policy, AdaSD):
        return {"kind": "ada_sd"}
    if isinstance(policy, AdaH):
        return {"kind": "ada_h", "tau_max": policy.tau_max, "tau_min": policy.tau_min, "h_max": policy.h_max}
    raise InvalidParameterError(f"unknown temperature policy {policy!r}")


def temperature_policy_from_dict(d: dict) -> TemperaturePolicy:
    d = dict(d)
    kind = d.pop("kind", "static")
    try:
        if kind == "static":
            return StaticTemperature(**d)
        if kind == "ada_sd":
            return AdaSD(**d)
        if kind == "ada_h":
            return AdaH(**d)
    except TypeError as exc:
        raise InvalidParameterError(f"bad temperature policy fields: {exc}") from None
    raise InvalidParameterError(f"unknown temperature policy kind {kind!r}")
