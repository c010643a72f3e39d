"""Synthetic pre-training corpus from a seeded order-2 Markov chain.

Next-token logits for context ``(a, b)`` are ``skew * (A[a] + B[b]) @ W.T``
with rank-``r`` factors, so a small transformer can represent the chain
exactly while the entropy rate stays computable in closed form.

Corpus files: ``"PDCO" | vocab u32 | token_count u64 | entropy_rate f64 |
token_count x u32``, all little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CorruptionError, StorageError, ValidationError
from .config import CorpusSpec

CORPUS_MAGIC = b"PDCO"
CORPUS_HEADER = struct.Struct("<4sIQd")
TRAIN_FILE = "train.pdco"
HELDOUT_FILE = "heldout.pdco"
SPEC_FILE = "corpus.json"


class MarkovChain:
    def __init__(self, vocab_size: int, seed: int, skew: float, rank: int):
        rng = np.random.default_rng([seed, 0])
        self.vocab_size = vocab_size
        a = rng.standard_normal((vocab_size, rank))
        b = rng.standard_normal((vocab_size, rank))
        w = rng.standard_normal((vocab_size, rank))
        scale = skew / math.sqrt(2.0 * rank)
        self._a, self._b, self._w = a * scale, b * scale, w
        self._pi: np.ndarray | None = None

    def logits(self, prev2: np.ndarray, prev1: np.ndarray) -> np.ndarray:
        return (self._a[prev2] + self._b[prev1]) @ self._w.T

    def log_probs(self, prev2: np.ndarray, prev1: np.ndarray) -> np.ndarray:
        z = self.logits(prev2, prev1)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def transition_table(self) -> np.ndarray:
        """``P[a, b, c]`` for every context; ``V**3`` floats."""
        v = self.vocab_size
        table = np.empty((v, v, v))
        for a in range(v):
            table[a] = np.exp(self.log_probs(np.full(v, a), np.arange(v)))
        return table

    def stationary_pairs(self, table: np.ndarray | None = None, tol: float = 1e-14, max_iter: int = 20000) -> np.ndarray:
        """Stationary distribution over ``(x_{t-1}, x_t)`` pairs by power iteration."""
        if self._pi is not None:
            return self._pi
        table = self.transition_table() if table is None else table
        v = self.vocab_size
        pi = np.full((v, v), 1.0 / (v * v))
        for _ in range(max_iter):
            nxt = np.einsum("ab,abc->bc", pi, table)
            nxt /= nxt.sum()
            done = np.abs(nxt - pi).sum() < tol
            pi = nxt
            if done:
                break
        self._pi = pi
        return pi

    def entropy_rate(self) -> float:
        """Stationary per-token entropy in nats."""
        table = self.transition_table()
        pi = self.stationary_pairs(table)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(table > 0, table * np.log(table), 0.0).sum(axis=2)
        return float((pi * h).sum())

    def sample(self, n_seq: int, length: int, rng: np.random.Generator) -> np.ndarray:
        """``n_seq`` independent stationary sequences of ``length`` tokens."""
        v = self.vocab_size
        pi = self.stationary_pairs()
        out = np.empty((n_seq, length), dtype=np.int64)
        start = rng.choice(v * v, size=n_seq, p=pi.reshape(-1) / pi.sum())
        first, second = np.divmod(start, v)
        out[:, 0] = first
        if length > 1:
            out[:, 1] = second
        for t in range(2, length):
            cdf = np.cumsum(np.exp(self.log_probs(out[:, t - 2], out[:, t - 1])), axis=1)
            u = rng.random(n_seq) * cdf[:, -1]
            out[:, t] = np.minimum((cdf < u[:, None]).sum(axis=1), v - 1)
        return out

    def empirical_entropy(self, sequences: np.ndarray) -> float:
        """Mean ``-log P(x_t | x_{t-2}, x_{t-1})`` over positions ``t >= 2``."""
        seq = np.asarray(sequences)
        lp = self.log_probs(seq[:, :-2].reshape(-1), seq[:, 1:-1].reshape(-1))
        return float(-lp[np.arange(lp.shape[0]), seq[:, 2:].reshape(-1)].mean())


def chain_for(spec: CorpusSpec) -> MarkovChain:
    return MarkovChain(spec.vocab_size, spec.transition_seed, spec.skew, spec.rank)


@dataclass
class Corpus:
    spec: CorpusSpec
    entropy_rate: float
    train: np.ndarray  # (n_train, chunk_len + 1)
    heldout: np.ndarray  # (n_heldout, chunk_len + 1)


def write_token_file(path: Path, tokens: np.ndarray, vocab_size: int, entropy_rate: float) -> None:
    flat = np.ascontiguousarray(tokens, dtype="<u4").reshape(-1)
    try:
        with open(path, "wb") as fh:
            fh.write(CORPUS_HEADER.pack(CORPUS_MAGIC, vocab_size, flat.size, entropy_rate))
            fh.write(flat.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write corpus file {path}: {exc}") from exc


def read_token_file(path: Path) -> tuple[int, float, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read corpus file {path}: {exc}") from exc
    if len(raw) < CORPUS_HEADER.size:
        raise CorruptionError(f"{path}: truncated corpus header")
    magic, vocab, count, rate = CORPUS_HEADER.unpack_from(raw)
    if magic != CORPUS_MAGIC:
        raise CorruptionError(f"{path}: bad corpus magic {magic!r}")
    if len(raw) != CORPUS_HEADER.size + 4 * count:
        raise CorruptionError(f"{path}: expected {count} tokens")
    tokens = np.frombuffer(raw, dtype="<u4", offset=CORPUS_HEADER.size).astype(np.int64)
    if tokens.size and tokens.max() >= vocab:
        raise CorruptionError(f"{path}: token id outside vocabulary")
    return vocab, rate, tokens


def generate(spec: CorpusSpec) -> Corpus:
    chain = chain_for(spec)
    rate = chain.entropy_rate()
    rng = np.random.default_rng([spec.transition_seed, 1])
    seqs = chain.sample(spec.sequence_count, spec.chunk_len + 1, rng)
    n_train = spec.train_count
    return Corpus(spec, rate, seqs[:n_train], seqs[n_train:])


def gen_corpus(spec: CorpusSpec, out_dir: str | Path) -> Corpus:
    """Generate and write ``train.pdco``, ``heldout.pdco`` and ``corpus.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create corpus directory {out}: {exc}") from exc
    corpus = generate(spec)
    write_token_file(out / TRAIN_FILE, corpus.train, spec.vocab_size, corpus.entropy_rate)
    write_token_file(out / HELDOUT_FILE, corpus.heldout, spec.vocab_size, corpus.entropy_rate)
    meta = {"spec": spec.to_dict(), "entropy_rate": corpus.entropy_rate}
    (out / SPEC_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return corpus


def load_corpus(corpus_dir: str | Path) -> Corpus:
    d = Path(corpus_dir)
    try:
        meta = json.loads((d / SPEC_FILE).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {d / SPEC_FILE}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{d / SPEC_FILE}: {exc}") from exc
    spec = CorpusSpec.from_dict(meta["spec"])
    width = spec.chunk_len + 1
    parts = []
    for name in (TRAIN_FILE, HELDOUT_FILE):
        vocab, rate, tokens = read_token_file(d / name)
        if vocab != spec.vocab_size or tokens.size % width:
            raise ValidationError(f"{d / name} does not match corpus.json")
        parts.append(tokens.reshape(-1, width))
    return Corpus(spec, rate, parts[0], parts[1])
