"""LM and distillation losses with analytic gradients w.r.t. student logits.

Student logits have shape ``(..., V)``; every position is a token and all
losses are means over tokens. Teacher targets arrive either as a list of
:class:`SparseTeacherDistribution` (one per position, C order) or already
packed into a :class:`PackedTeacher`. Kernels run in float64 regardless of
the model's dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import ShapeError, ValidationError
from .logits_codec import SparseTeacherDistribution


class LossKind(str, Enum):
    NLL = "nll"
    KLD = "kld"
    MSE = "mse"


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass
class PackedTeacher:
    """Teacher rows padded to a common width; padding has ``mask == False`` and prob 0."""

    ids: np.ndarray  # (N, K) int64
    probs: np.ndarray  # (N, K) float64
    mask: np.ndarray  # (N, K) bool

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[np.ndarray, np.ndarray]]) -> "PackedTeacher":
        n = len(rows)
        width = max((len(ids) for ids, _ in rows), default=1)
        ids = np.zeros((n, width), dtype=np.int64)
        probs = np.zeros((n, width), dtype=np.float64)
        mask = np.zeros((n, width), dtype=bool)
        for r, (row_ids, row_probs) in enumerate(rows):
            m = len(row_ids)
            ids[r, :m] = row_ids
            probs[r, :m] = row_probs
            mask[r, :m] = True
        return cls(ids, probs, mask)

    @classmethod
    def from_distributions(cls, dists: Sequence[SparseTeacherDistribution]) -> "PackedTeacher":
        return cls.from_rows([(d.kept_ids, d.probs) for d in dists])

    def argmax_ids(self) -> np.ndarray:
        masked = np.where(self.mask, self.probs, -1.0)
        return self.ids[np.arange(self.n), np.argmax(masked, axis=1)]


TeacherInput = Union[PackedTeacher, Sequence[SparseTeacherDistribution]]


def _flat_logits(student_logits) -> tuple[np.ndarray, tuple[int, ...]]:
    s = np.asarray(student_logits, dtype=np.float64)
    if s.ndim < 1 or s.shape[-1] < 1 or s.size == 0:
        raise ShapeError(f"student logits must be (..., V) and non-empty, got {s.shape}")
    if s.ndim == 1:
        s = s[None, :]
    return s.reshape(-1, s.shape[-1]), s.shape


def _log_softmax(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _pack(teacher: TeacherInput, n: int, vocab: int) -> PackedTeacher:
    packed = teacher if isinstance(teacher, PackedTeacher) else PackedTeacher.from_distributions(teacher)
    if packed.n != n:
        raise ShapeError(f"{packed.n} teacher rows for {n} student positions")
    if np.any(packed.ids[packed.mask] >= vocab) or np.any(packed.ids < 0):
        raise ValidationError(f"teacher kept id outside student vocabulary of {vocab}")
    return packed


def _scatter(packed: PackedTeacher, n: int, vocab: int) -> np.ndarray:
    dense = np.zeros((n, vocab))
    rows = np.broadcast_to(np.arange(n)[:, None], packed.ids.shape)
    # padding rows point at id 0 with weight 0; add.at keeps duplicates harmless
    np.add.at(dense, (rows[packed.mask], packed.ids[packed.mask]), packed.probs[packed.mask])
    return dense


def _gather(x: np.ndarray, packed: PackedTeacher) -> np.ndarray:
    return np.take_along_axis(x, packed.ids, axis=1)


def lm_loss(student_logits, targets) -> LossOutput:
    s, shape = _flat_logits(student_logits)
    n, vocab = s.shape
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ShapeError(f"{y.size} targets for {n} positions")
    if np.any(y < 0) or np.any(y >= vocab):
        raise ValidationError(f"target id outside vocabulary of {vocab}")
    logp = _log_softmax(s)
    value = -logp[np.arange(n), y].sum() / n
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return LossOutput(float(value), grad.reshape(shape))


def _soft_ce_parts(student_logits, teacher: TeacherInput):
    s, shape = _flat_logits(student_logits)
    n, vocab = s.shape
    packed = _pack(teacher, n, vocab)
    logp = _log_softmax(s)
    cross = -(packed.probs * _gather(logp, packed)).sum() / n
    grad = (np.exp(logp) - _scatter(packed, n, vocab)) / n
    return packed, float(cross), grad.reshape(shape)


def kd_soft_ce(student_logits, teacher: TeacherInput) -> LossOutput:
    """Soft cross-entropy ``-sum_i q_i log p_i`` over the teacher's kept ids."""
    _, value, grad = _soft_ce_parts(student_logits, teacher)
    return LossOutput(value, grad)


def kd_kld(student_logits, teacher: TeacherInput) -> LossOutput:
    packed, cross, grad = _soft_ce_parts(student_logits, teacher)
    q = np.where(packed.mask, packed.probs, 1.0)
    neg_entropy = (np.where(packed.mask, packed.probs * np.log(q), 0.0)).sum() / packed.n
    return LossOutput(float(cross + neg_entropy), grad)


def kd_mse(student_logits, teacher: TeacherInput) -> LossOutput:
    """Squared error between student and teacher probabilities on the kept support only."""
    s, shape = _flat_logits(student_logits)
    n, vocab = s.shape
    packed = _pack(teacher, n, vocab)
    p = np.exp(_log_softmax(s))
    resid = np.where(packed.mask, _gather(p, packed) - packed.probs, 0.0)
    value = (resid**2).sum() / n
    r = np.zeros((n, vocab))
    rows = np.broadcast_to(np.arange(n)[:, None], packed.ids.shape)
    r[rows[packed.mask], packed.ids[packed.mask]] = resid[packed.mask]
    grad = 2.0 * p * (r - (r * p).sum(axis=1, keepdims=True)) / n
    return LossOutput(float(value), grad.reshape(shape))


KD_LOSSES = {LossKind.NLL: kd_soft_ce, LossKind.KLD: kd_kld, LossKind.MSE: kd_mse}


def kd_loss(kind: LossKind | str, student_logits, teacher: TeacherInput) -> LossOutput:
    return KD_LOSSES[LossKind(kind)](student_logits, teacher)


def combined_loss(alpha: float, lm: LossOutput, kd: LossOutput) -> LossOutput:
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if lm.grad.shape != kd.grad.shape:
        raise ShapeError(f"gradient shapes differ: {lm.grad.shape} vs {kd.grad.shape}")
    if alpha == 0.0:
        return LossOutput(lm.value, lm.grad.copy())
    if alpha == 1.0:
        return LossOutput(kd.value, kd.grad.copy())
    return LossOutput((1.0 - alpha) * lm.value + alpha * kd.value, (1.0 - alpha) * lm.grad + alpha * kd.grad)
