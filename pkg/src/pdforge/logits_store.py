"""Sharded on-disk store for sequence-aligned sparse teacher distributions.

Layout of ``<stem>.pdlg`` (little-endian throughout)::

    header   magic "PDLG" | version u32 | vocab u32 | chunk_len u32 |
             trunc_p f32 | trunc_k u32 | base_temperature f32 | sequence_count u64
    record*  chunk_len x (entry_count u16, entry_count x (token_id u32, prob f32))
             crc32 u32 over the record body

``<stem>.pdlg.idx`` holds one u64 byte offset per record.
"""

from __future__ import annotations

import math
import mmap
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptionError, ShapeError, ShardIndexError, StorageError, ValidationError
from .logits_codec import SparseTeacherDistribution

MAGIC = b"PDLG"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIfIfQ")
HEADER_SIZE = HEADER.size
_COUNT_OFFSET = HEADER_SIZE - 8
ENTRY_DTYPE = np.dtype([("id", "<u4"), ("prob", "<f4")])
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
MAX_ENTRIES = 0xFFFF


@dataclass(frozen=True)
class ShardHeader:
    vocab_size: int
    chunk_len: int
    trunc_p: float = 0.95
    trunc_k: int = 100
    base_temperature: float = 1.0
    sequence_count: int = 0
    format_version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.format_version != FORMAT_VERSION:
            raise ValidationError(f"unsupported shard format version {self.format_version}")
        if self.chunk_len < 1:
            raise ValidationError("chunk_len must be >= 1")
        if self.vocab_size < 1 or self.vocab_size > 0xFFFFFFFF:
            raise ValidationError(f"bad vocab_size {self.vocab_size}")
        if not (1 <= self.trunc_k <= MAX_ENTRIES):
            raise ValidationError(f"trunc_k must be in [1, {MAX_ENTRIES}]")
        if not (0.0 < self.trunc_p <= 1.0):
            raise ValidationError("trunc_p must be in (0, 1]")
        # 0.0 marks a dump made under an adaptive temperature policy
        if not (self.base_temperature >= 0 and math.isfinite(self.base_temperature)):
            raise ValidationError("base_temperature must be positive, or 0 for adaptive dumps")

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC,
            self.format_version,
            self.vocab_size,
            self.chunk_len,
            self.trunc_p,
            self.trunc_k,
            self.base_temperature,
            self.sequence_count,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "ShardHeader":
        if len(raw) < HEADER_SIZE:
            raise CorruptionError("shard shorter than its header")
        magic, version, vocab, chunk_len, p, k, tau, count = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise CorruptionError(f"bad shard magic {magic!r}")
        header = cls(vocab, chunk_len, p, k, tau, count, version)
        try:
            header.validate()
        except ValidationError as exc:
            raise CorruptionError(f"invalid shard header: {exc}") from None
        return header


def index_path(path: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(path)}.idx")


def encode_sequence(distributions: Sequence[SparseTeacherDistribution]) -> bytes:
    """Record bytes (body + crc32) for one sequence."""
    parts = []
    for dist in distributions:
        entries = np.empty(len(dist), dtype=ENTRY_DTYPE)
        entries["id"] = dist.kept_ids
        entries["prob"] = dist.probs
        parts.append(_U16.pack(len(dist)))
        parts.append(entries.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode_body(body: bytes | memoryview, chunk_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a verified record body into per-position ``(ids, probs32)`` arrays."""
    out = []
    pos = 0
    for _ in range(chunk_len):
        if pos + 2 > len(body):
            raise CorruptionError("record body truncated")
        (count,) = _U16.unpack_from(body, pos)
        pos += 2
        end = pos + count * ENTRY_DTYPE.itemsize
        if count == 0 or end > len(body):
            raise CorruptionError("record body has an invalid entry count")
        entries = np.frombuffer(body, dtype=ENTRY_DTYPE, count=count, offset=pos)
        out.append((entries["id"].astype(np.int64), entries["prob"].copy()))
        pos = end
    if pos != len(body):
        raise CorruptionError("record body has trailing bytes")
    return out


class ShardWriter:
    """Streaming writer. Use as a context manager or call :meth:`close`."""

    def __init__(self, path: str | os.PathLike, header: ShardHeader):
        header = ShardHeader(
            header.vocab_size,
            header.chunk_len,
            header.trunc_p,
            header.trunc_k,
            header.base_temperature,
            0,
            header.format_version,
        )
        header.validate()
        self.path = Path(path)
        self.header = header
        self._count = 0
        try:
            self._fh = open(self.path, "wb")
            self._idx = open(index_path(self.path), "wb")
            self._fh.write(header.pack())
        except OSError as exc:
            raise StorageError(f"cannot open shard for writing at {self.path}: {exc}") from exc
        self._offset = HEADER_SIZE

    @property
    def sequence_count(self) -> int:
        return self._count

    def _validate(self, distributions: Sequence[SparseTeacherDistribution]) -> None:
        if len(distributions) != self.header.chunk_len:
            raise ShapeError(f"expected {self.header.chunk_len} distributions, got {len(distributions)}")
        for t, dist in enumerate(distributions):
            if not isinstance(dist, SparseTeacherDistribution):
                raise ValidationError(f"position {t}: not a SparseTeacherDistribution")
            if len(dist) > self.header.trunc_k:
                raise ValidationError(f"position {t}: {len(dist)} entries exceed trunc_k={self.header.trunc_k}")
            dist.check_vocab(self.header.vocab_size)

    def append_sequence(self, distributions: Sequence[SparseTeacherDistribution]) -> int:
        self._validate(distributions)
        record = encode_sequence(distributions)
        try:
            self._fh.write(record)
            self._idx.write(struct.pack("<Q", self._offset))
        except OSError as exc:
            raise StorageError(f"write failed on {self.path}: {exc}") from exc
        self._offset += len(record)
        self._count += 1
        return self._count - 1

    def close(self) -> None:
        if self._fh.closed:
            return
        try:
            self._fh.seek(_COUNT_OFFSET)
            self._fh.write(struct.pack("<Q", self._count))
        finally:
            self._fh.close()
            self._idx.close()

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_writer(path: str | os.PathLike, header: ShardHeader) -> ShardWriter:
    return ShardWriter(path, header)


@dataclass(frozen=True)
class ShardStats:
    sequence_count: int
    total_tokens: int
    avg_kept_entries: float
    bytes_per_token: float


class ShardReader:
    """Random-access reader over a memory-mapped shard. Read-only, shareable."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            with open(self.path, "rb") as fh:
                self._size = os.fstat(fh.fileno()).st_size
                self._buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if self._size else b""
            idx_raw = index_path(self.path).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot open shard {self.path}: {exc}") from exc
        self.header = ShardHeader.unpack(self._buf[:HEADER_SIZE])
        if len(idx_raw) % 8:
            raise CorruptionError(f"index file for {self.path} is not a whole number of u64 offsets")
        self.offsets = np.frombuffer(idx_raw, dtype="<u8").astype(np.int64)
        if self.offsets.size != self.header.sequence_count:
            raise CorruptionError(
                f"header says {self.header.sequence_count} sequences, index has {self.offsets.size}"
            )
        if self.offsets.size:
            if self.offsets[0] != HEADER_SIZE or np.any(np.diff(self.offsets) <= 0) or self.offsets[-1] >= self._size:
                raise CorruptionError(f"index offsets for {self.path} are inconsistent")
        self._ends = np.append(self.offsets[1:], self._size)

    def __len__(self) -> int:
        return int(self.offsets.size)

    def close(self) -> None:
        if isinstance(self._buf, mmap.mmap):
            self._buf.close()

    def __enter__(self) -> "ShardReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _body(self, i: int) -> bytes:
        if not 0 <= i < len(self):
            raise ShardIndexError(f"sequence index {i} out of range [0, {len(self)})")
        start, end = int(self.offsets[i]), int(self._ends[i])
        if end - start < 4:
            raise CorruptionError(f"sequence {i}: record too short", i)
        # slicing the mmap copies, so no buffer export outlives the call and close() stays safe
        record = self._buf[start:end]
        body, (crc,) = record[:-4], _U32.unpack(record[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptionError(f"crc mismatch in sequence {i} of {self.path}", i)
        return body

    def read_arrays(self, i: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-position ``(ids int64, probs float32)`` for sequence ``i``, crc-checked."""
        try:
            return decode_body(self._body(i), self.header.chunk_len)
        except CorruptionError as exc:
            if exc.sequence_index is None:
                raise CorruptionError(f"sequence {i}: {exc}", i) from None
            raise

    def read_sequence(self, i: int) -> list[SparseTeacherDistribution]:
        out = []
        for t, (ids, probs) in enumerate(self.read_arrays(i)):
            try:
                out.append(SparseTeacherDistribution(ids, probs.astype(np.float64)))
            except ValidationError as exc:
                raise CorruptionError(f"sequence {i}, position {t}: {exc}", i) from None
        return out

    def __iter__(self) -> Iterable[list[SparseTeacherDistribution]]:
        for i in range(len(self)):
            yield self.read_sequence(i)

    def entry_counts(self, i: int) -> np.ndarray:
        return np.array([ids.size for ids, _ in self.read_arrays(i)], dtype=np.int64)

    def verify(self) -> None:
        """Full structural and crc check of every record; raises on the first failure."""
        for i in range(len(self)):
            self.read_sequence(i)


def open_reader(path: str | os.PathLike) -> ShardReader:
    return ShardReader(path)


def read_sequence(reader: ShardReader, i: int) -> list[SparseTeacherDistribution]:
    return reader.read_sequence(i)


def append_sequence(writer: ShardWriter, distributions: Sequence[SparseTeacherDistribution]) -> int:
    return writer.append_sequence(distributions)


def shard_stats(reader: ShardReader) -> ShardStats:
    n = len(reader)
    tokens = n * reader.header.chunk_len
    if tokens == 0:
        return ShardStats(n, 0, 0.0, 0.0)
    entries = sum(int(reader.entry_counts(i).sum()) for i in range(n))
    payload = reader._size - HEADER_SIZE
    return ShardStats(n, tokens, entries / tokens, payload / tokens)


def record_size(entry_counts: Iterable[int]) -> int:
    """Exact byte size of a record whose positions keep ``entry_counts`` entries."""
    return sum(2 + ENTRY_DTYPE.itemsize * int(c) for c in entry_counts) + 4
