"""Teacher training, offline/online logits capture, student distillation, evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from ..distill_losses import LossKind, PackedTeacher, combined_loss, kd_loss, lm_loss
from ..errors import StorageError, TrainingDivergenceError, ValidationError
from ..logits_codec import (
    SparseTeacherDistribution,
    StaticTemperature,
    TemperaturePolicy,
    TruncationSpec,
    apply_temperature,
    process_logits_rows,
    resolve_temperature,
    temperature_policy_to_dict,
)
from ..logits_store import ShardHeader, ShardReader, ShardStats, ShardWriter, shard_stats
from ..schedulers import StaticAlpha, alpha_at, lr_at
from ..tiny_lm import ModelConfig, ModelState, adam_step, backward, forward, init_model, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .corpus import Corpus
from .report import EvalRecord, RunReport, make_record

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
ONLINE_DIR = "online"
MANIFEST = "manifest.json"
ADAPTIVE_TEMPERATURE_SENTINEL = 0.0


# ---- data order ----------------------------------------------------------


class DataOrder:
    """Seeded per-epoch permutations; the batch for any step is computable without state."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        if n_items < 1:
            raise ValidationError("no training sequences")
        self.n_items, self.batch_size, self.seed = n_items, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n_items)
        return self._perms[epoch]

    def batch(self, step: int) -> np.ndarray:
        pos = step * self.batch_size + np.arange(self.batch_size)
        epochs, offsets = np.divmod(pos, self.n_items)
        return np.array([self._perm(int(e))[o] for e, o in zip(epochs, offsets)], dtype=np.int64)


# ---- teacher sources -------------------------------------------------------


class TeacherSource(Protocol):
    def rows(self, items: np.ndarray, inputs: np.ndarray) -> PackedTeacher: ...

    def describe(self) -> dict: ...


class LiveTeacher:
    """Teacher distributions computed on the fly from a frozen teacher state."""

    def __init__(self, teacher: ModelState, spec: TruncationSpec, policy: TemperaturePolicy):
        self.teacher, self.spec, self.policy = teacher, spec, policy

    def check(self, vocab_size: int, chunk_len: int) -> None:
        if self.teacher.config.vocab_size != vocab_size:
            raise ValidationError("live teacher vocabulary differs from the student's")

    def rows(self, items: np.ndarray, inputs: np.ndarray) -> PackedTeacher:
        logits, _ = forward(self.teacher, inputs)
        return PackedTeacher.from_distributions(process_logits_rows(logits, self.spec, self.policy))

    def describe(self) -> dict:
        return {"kind": "live", "truncation": vars(self.spec), "temperature": temperature_policy_to_dict(self.policy)}


class ShardTeacher:
    """Teacher distributions read from a logits shard.

    ``records[item]`` maps a training item to its shard record (identity by default).
    The shard is expected to hold tau=1 distributions; the run's temperature policy is
    applied on read. A shard dumped at a static tau is accepted only by a run using that tau.
    """

    def __init__(self, reader: ShardReader, policy: TemperaturePolicy, records: Optional[np.ndarray] = None):
        self.reader, self.policy = reader, policy
        self.records = np.arange(len(reader)) if records is None else np.asarray(records, dtype=np.int64)
        base = reader.header.base_temperature
        if base == 1.0:
            self._apply = not (isinstance(policy, StaticTemperature) and policy.tau == 1.0)
        elif isinstance(policy, StaticTemperature) and np.float32(policy.tau) == np.float32(base):
            self._apply = False
        else:
            raise ValidationError(
                f"shard was written with base temperature {base}; it can only serve tau=1 re-temperaturing "
                f"or the same static temperature, not {policy}"
            )

    def check(self, vocab_size: int, chunk_len: int) -> None:
        h = self.reader.header
        if h.vocab_size != vocab_size:
            raise ValidationError(f"shard vocabulary {h.vocab_size} differs from model vocabulary {vocab_size}")
        if h.chunk_len != chunk_len:
            raise ValidationError(f"shard chunk_len {h.chunk_len} differs from corpus chunk_len {chunk_len}")

    def rows(self, items: np.ndarray, inputs: np.ndarray) -> PackedTeacher:
        rows = []
        for item in items:
            for ids, probs in self.reader.read_arrays(int(self.records[item])):
                probs = probs.astype(np.float64)
                if self._apply:
                    dist = SparseTeacherDistribution(ids, probs)
                    dist = apply_temperature(dist, resolve_temperature(self.policy, dist))
                    ids, probs = dist.kept_ids, dist.probs
                rows.append((ids, probs))
        return PackedTeacher.from_rows(rows)

    def describe(self) -> dict:
        h = self.reader.header
        return {
            "kind": "shard",
            "shard": self.reader.path.name,
            "sequence_count": h.sequence_count,
            "trunc_p": float(h.trunc_p),
            "trunc_k": h.trunc_k,
            "base_temperature": float(h.base_temperature),
            "temperature": temperature_policy_to_dict(self.policy),
        }


# ---- evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    cross_entropy: float
    perplexity: float


def evaluate(model: ModelState, heldout: np.ndarray, batch_size: int = 64) -> EvalResult:
    """Mean next-token cross-entropy (nats/token) over held-out sequences."""
    seqs = np.asarray(heldout)
    if seqs.ndim != 2 or seqs.shape[0] == 0 or seqs.shape[1] < 2:
        raise ValidationError("held-out split is empty")
    total, count = 0.0, 0
    for start in range(0, seqs.shape[0], batch_size):
        chunk = seqs[start : start + batch_size]
        logits, _ = forward(model, chunk[:, :-1])
        n = chunk[:, 1:].size
        total += lm_loss(logits, chunk[:, 1:]).value * n
        count += n
    ce = total / count
    return EvalResult(ce, math.exp(ce))


# ---- core loop ---------------------------------------------------------------

CaptureFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def _save_progress(run_dir: Path, state: ModelState, records: list[EvalRecord]) -> Path:
    ckpt_dir = run_dir / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"step_{state.step:06d}.pdck"
    save_checkpoint(state, path)
    path.with_suffix(".records.json").write_text(
        json.dumps([vars(r) for r in records], sort_keys=True, indent=1) + "\n"
    )
    return path


def _load_progress(path: Path, config: ModelConfig) -> tuple[ModelState, list[EvalRecord]]:
    state = load_checkpoint(path, expected_config=config)
    try:
        raw = json.loads(Path(path).with_suffix(".records.json").read_text())
    except OSError as exc:
        raise StorageError(f"missing eval records next to checkpoint {path}: {exc}") from exc
    return state, [EvalRecord(**r) for r in raw]


def train_loop(
    state: ModelState,
    items: np.ndarray,
    heldout: np.ndarray,
    run: RunConfig,
    *,
    total_steps: int,
    lr_schedule,
    alpha_schedule,
    run_dir: Optional[Path] = None,
    teacher: Optional[TeacherSource] = None,
    capture: Optional[CaptureFn] = None,
    records: Optional[list[EvalRecord]] = None,
    stop_at: Optional[int] = None,
) -> list[EvalRecord]:
    """Advance ``state`` from ``state.step`` to ``stop_at`` (default ``total_steps``).

    Each step minimises ``(1 - alpha_t) * LM + alpha_t * KD`` with Adam at ``lr_t``.
    """
    records = list(records or [])
    order = DataOrder(items.shape[0], run.batch_size, run.seed)
    stop = total_steps if stop_at is None else min(stop_at, total_steps)
    for step in range(state.step, stop):
        alpha = alpha_at(alpha_schedule, step, total_steps)
        lr = lr_at(lr_schedule, step, total_steps)
        batch_items = order.batch(step)
        seqs = items[batch_items]
        inputs, targets = seqs[:, :-1], seqs[:, 1:]
        logits, cache = forward(state, inputs)
        if capture is not None:
            capture(step, batch_items, inputs, logits)
        need_teacher = alpha > 0.0 or run.label_source == "teacher_argmax"
        packed = teacher.rows(batch_items, inputs) if (need_teacher and teacher is not None) else None
        if need_teacher and packed is None:
            raise ValidationError("this run needs teacher logits but no teacher source was given")
        if run.label_source == "teacher_argmax":
            targets = packed.argmax_ids().reshape(targets.shape)
        out = lm_loss(logits, targets)
        if alpha > 0.0:
            out = combined_loss(alpha, out, kd_loss(run.loss, logits, packed))
        if not math.isfinite(out.value):
            raise TrainingDivergenceError(f"non-finite loss at step {step}", step=step)
        adam_step(state, backward(state, cache, out.grad), lr)
        done = step + 1
        if done % run.eval_every == 0 or done == total_steps:
            ev = evaluate(state, heldout)
            records.append(make_record(done, out.value, ev.cross_entropy, alpha, lr))
            log.info("step %d loss %.4f held-out ce %.4f", done, out.value, ev.cross_entropy)
        if run_dir is not None and run.checkpoint_every and done % run.checkpoint_every == 0:
            _save_progress(run_dir, state, records)
    return records


def _report(run: RunConfig, corpus: Corpus, role: str, records: list[EvalRecord], extra: dict) -> RunReport:
    config = {"run": run.to_dict(), "corpus": corpus.spec.to_dict(), "role": role}
    summary = {
        "role": role,
        "final_step": records[-1].step if records else 0,
        "final_held_out_ce": records[-1].held_out_ce if records else None,
        "final_perplexity": records[-1].perplexity if records else None,
        "corpus_entropy_rate": corpus.entropy_rate,
        "data_order": {"scheme": "per-epoch seeded permutation", "seed": run.seed},
        **extra,
    }
    return RunReport(records, summary, config, config_hash(config))


def _check_lengths(model: ModelConfig, corpus: Corpus) -> None:
    if model.max_seq_len < corpus.spec.chunk_len:
        raise ValidationError(f"max_seq_len {model.max_seq_len} is shorter than chunk_len {corpus.spec.chunk_len}")
    if model.vocab_size != corpus.spec.vocab_size:
        raise ValidationError("model vocabulary differs from corpus vocabulary")


# ---- public pipelines ----------------------------------------------------------


def train_teacher(
    run: RunConfig,
    corpus: Corpus,
    run_dir: Optional[str | Path] = None,
    *,
    capture: Optional[CaptureFn] = None,
    resume_from: Optional[str | Path] = None,
    stop_at: Optional[int] = None,
) -> tuple[ModelState, RunReport]:
    """Plain LM pre-training of the teacher for ``run.teacher_steps`` steps."""
    _check_lengths(run.teacher, corpus)
    lm_run = run.with_overrides(label_source="corpus")
    records: list[EvalRecord] = []
    if resume_from is not None:
        state, records = _load_progress(Path(resume_from), run.teacher)
    else:
        state = init_model(run.teacher, run.dtype)
    rd = Path(run_dir) if run_dir is not None else None
    records = train_loop(
        state, corpus.train, corpus.heldout, lm_run,
        total_steps=run.teacher_steps, lr_schedule=run.teacher_lr, alpha_schedule=StaticAlpha(0.0),
        run_dir=rd, capture=capture, records=records, stop_at=stop_at,
    )
    report = _report(run, corpus, "teacher", records, {})
    if rd is not None:
        save_checkpoint(state, _ensure(rd) / "teacher.pdck")
        report.save(rd)
    return state, report


def train_student(
    run: RunConfig,
    corpus: Corpus,
    source: Optional[TeacherSource] = None,
    run_dir: Optional[str | Path] = None,
    *,
    items: Optional[np.ndarray] = None,
    resume_from: Optional[str | Path] = None,
    stop_at: Optional[int] = None,
) -> tuple[ModelState, RunReport]:
    """Distil the student against ``source`` under the run's loss and schedules."""
    _check_lengths(run.student, corpus)
    if source is not None:
        source.check(run.student.vocab_size, corpus.spec.chunk_len)
    train_items = corpus.train if items is None else items
    records: list[EvalRecord] = []
    if resume_from is not None:
        state, records = _load_progress(Path(resume_from), run.student)
    else:
        state = init_model(run.student, run.dtype)
    rd = Path(run_dir) if run_dir is not None else None
    records = train_loop(
        state, train_items, corpus.heldout, run,
        total_steps=run.total_steps, lr_schedule=run.lr, alpha_schedule=run.alpha,
        run_dir=rd, teacher=source, records=records, stop_at=stop_at,
    )
    extra = {"teacher_source": source.describe() if source is not None else None, "num_items": int(train_items.shape[0])}
    report = _report(run, corpus, "student", records, extra)
    if rd is not None:
        save_checkpoint(state, _ensure(rd) / "student.pdck")
        report.save(rd)
    return state, report


def _ensure(d: Path) -> Path:
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {d}: {exc}") from exc
    return d


def _base_temperature(policy: TemperaturePolicy) -> float:
    if isinstance(policy, StaticTemperature):
        return float(policy.tau)
    return ADAPTIVE_TEMPERATURE_SENTINEL


def dump_offline_logits(
    teacher: ModelState,
    sequences: np.ndarray,
    spec: TruncationSpec,
    policy: TemperaturePolicy,
    out: str | Path,
    batch_size: int = 16,
) -> ShardStats:
    """Write one processed teacher distribution per input position, one record per sequence."""
    seqs = np.asarray(sequences)
    chunk_len = seqs.shape[1] - 1
    header = ShardHeader(teacher.config.vocab_size, chunk_len, spec.p, spec.k, _base_temperature(policy))
    with ShardWriter(out, header) as writer:
        for start in range(0, seqs.shape[0], batch_size):
            inputs = seqs[start : start + batch_size, :-1]
            logits, _ = forward(teacher, inputs)
            dists = process_logits_rows(logits, spec, policy)
            for r in range(inputs.shape[0]):
                writer.append_sequence(dists[r * chunk_len : (r + 1) * chunk_len])
    with ShardReader(out) as reader:
        return shard_stats(reader)


class OnlineCapture:
    """Writes the teacher's own training-step logits into per-window shards."""

    def __init__(self, out_dir: Path, run: RunConfig, chunk_len: int):
        self.out_dir = _ensure(out_dir)
        self.run, self.chunk_len = run, chunk_len
        self.windows: list[dict] = []
        self._writer: Optional[ShardWriter] = None
        self._window = -1

    def _open(self, window: int) -> None:
        self.close()
        name = f"window_{window:04d}.pdlg"
        header = ShardHeader(self.run.teacher.vocab_size, self.chunk_len, self.run.truncation.p, self.run.truncation.k, 1.0)
        self._writer = ShardWriter(self.out_dir / name, header)
        start = window * self.run.window_steps
        end = min(start + self.run.window_steps, self.run.teacher_steps)
        self.windows.append({"index": window, "step_start": start, "step_end": end, "shard": name, "sequence_ids": []})
        self._window = window

    def __call__(self, step: int, items: np.ndarray, inputs: np.ndarray, logits: np.ndarray) -> None:
        window = step // self.run.window_steps
        if window != self._window:
            self._open(window)
        dists = process_logits_rows(logits, self.run.truncation, StaticTemperature(1.0))
        for r, item in enumerate(items):
            self._writer.append_sequence(dists[r * self.chunk_len : (r + 1) * self.chunk_len])
            self.windows[-1]["sequence_ids"].append(int(item))

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None

    def write_manifest(self) -> Path:
        self.close()
        path = self.out_dir / MANIFEST
        path.write_text(json.dumps({"windows": self.windows}, indent=1, sort_keys=True) + "\n")
        return path


def load_manifest(online_dir: str | Path) -> list[dict]:
    path = Path(online_dir) / MANIFEST
    try:
        return json.loads(path.read_text())["windows"]
    except OSError as exc:
        raise StorageError(f"cannot read online manifest {path}: {exc}") from exc


def select_window(windows: list[dict], mode: str) -> dict:
    if mode == "online_early":
        return windows[0]
    if mode == "online_late":
        return windows[-1]
    raise ValidationError(f"mode {mode!r} is not an online mode")


def run_online_pipeline(run: RunConfig, corpus: Corpus, run_dir: str | Path) -> RunReport:
    """Train the teacher while capturing logits, then distil the student from one window."""
    if run.mode not in ("online_early", "online_late"):
        raise ValidationError("run_online_pipeline needs mode online_early or online_late")
    rd = _ensure(Path(run_dir))
    capture = OnlineCapture(rd / ONLINE_DIR, run, corpus.spec.chunk_len)
    try:
        train_teacher(run, corpus, rd / "teacher", capture=capture)
    finally:
        capture.close()
    capture.write_manifest()
    window = select_window(capture.windows, run.mode)
    reader = ShardReader(rd / ONLINE_DIR / window["shard"])
    try:
        seq_ids = np.asarray(window["sequence_ids"], dtype=np.int64)
        source = ShardTeacher(reader, run.temperature)
        _, report = train_student(run, corpus, source, None, items=corpus.train[seq_ids])
    finally:
        reader.close()
    report.summary["online_window"] = {k: window[k] for k in ("index", "step_start", "step_end", "shard")}
    report.save(rd)
    return report


def teacher_stats(reader: ShardReader) -> dict:
    return vars(shard_stats(reader))
