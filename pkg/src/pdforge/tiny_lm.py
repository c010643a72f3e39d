"""Small decoder-only transformer in numpy with hand-written reverse mode.

Block: pre-RMSNorm, grouped-query causal attention with rotary position
embeddings, residual, pre-RMSNorm, two-matrix tanh-GELU FFN, residual.
A final RMSNorm feeds the output head (or the transposed embedding when
``tie_embeddings`` is set). No biases, no dropout.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError, TrainingDivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
NORM_EPS = 1e-6
INIT_STD = 0.02
ROPE_BASE = 10000.0
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_size: int = 64
    ffn_hidden_size: int = 128
    num_layers: int = 2
    num_attention_heads: int = 4
    num_query_groups: int = 2
    tie_embeddings: bool = False
    max_seq_len: int = 64
    init_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "hidden_size", "ffn_hidden_size", "num_layers",
                     "num_attention_heads", "num_query_groups", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_size % self.num_attention_heads:
            raise ConfigError("hidden_size must be divisible by num_attention_heads")
        if self.num_attention_heads % self.num_query_groups:
            raise ConfigError("num_attention_heads must be divisible by num_query_groups")
        if self.head_dim % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    @property
    def kv_dim(self) -> int:
        return self.num_query_groups * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TEACHER_PRESET = ModelConfig(vocab_size=256, hidden_size=128, ffn_hidden_size=256, num_layers=4,
                             num_attention_heads=4, num_query_groups=2)
STUDENT_PRESET = ModelConfig(vocab_size=256, hidden_size=64, ffn_hidden_size=128, num_layers=2,
                             num_attention_heads=4, num_query_groups=2)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in the fixed declaration order."""
    h, f, v = config.hidden_size, config.ffn_hidden_size, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, h)}
    for i in range(config.num_layers):
        shapes[f"layers.{i}.attn_norm"] = (h,)
        shapes[f"layers.{i}.wq"] = (h, h)
        shapes[f"layers.{i}.wk"] = (h, config.kv_dim)
        shapes[f"layers.{i}.wv"] = (h, config.kv_dim)
        shapes[f"layers.{i}.wo"] = (h, h)
        shapes[f"layers.{i}.ffn_norm"] = (h,)
        shapes[f"layers.{i}.w1"] = (h, f)
        shapes[f"layers.{i}.w2"] = (f, h)
    shapes["final_norm"] = (h,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (h, v)
    return shapes


def num_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    dtype: str = "float64"

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: a.copy() for k, a in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
            self.dtype,
        )

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def head_weight(self) -> np.ndarray:
        return self.params["tok_emb"].T if self.config.tie_embeddings else self.params["lm_head"]


def init_model(config: ModelConfig, dtype: str = "float64") -> ModelState:
    if dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {dtype}")
    rng = np.random.default_rng(config.init_seed)
    out_std = INIT_STD / math.sqrt(2 * config.num_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".wo", ".w2")):
            params[name] = rng.normal(0.0, out_std, shape).astype(dtype)
        else:
            params[name] = rng.normal(0.0, INIT_STD, shape).astype(dtype)
    zeros = {k: np.zeros_like(a) for k, a in params.items()}
    return ModelState(config, params, zeros, {k: a.copy() for k, a in zeros.items()}, 0, dtype)


# ---- primitives ---------------------------------------------------------


def _rope_tables(seq_len: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rmsnorm(x: np.ndarray, w: np.ndarray):
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    n = x / rms
    return n * w, (n, rms)


def _rmsnorm_back(dy: np.ndarray, w: np.ndarray, cache):
    n, rms = cache
    dw = (dy * n).reshape(-1, n.shape[-1]).sum(axis=0)
    dn = dy * w
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / rms
    return dx, dw


def _gelu(u: np.ndarray):
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * d


def _mm_w(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def _grad_w(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---- forward / backward ---------------------------------------------------


@dataclass
class ForwardCache:
    tokens: np.ndarray
    layers: list = field(default_factory=list)
    final: tuple | None = None
    xf: np.ndarray | None = None
    rope: tuple | None = None


def _check_tokens(state: ModelState, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ShapeError(f"token batch must be (batch, seq_len), got {tokens.shape}")
    if tokens.shape[1] > state.config.max_seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {state.config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= state.config.vocab_size:
        raise ShapeError("token id outside vocabulary")
    return tokens.astype(np.int64)


def forward(state: ModelState, tokens) -> tuple[np.ndarray, ForwardCache]:
    """Logits of shape ``(batch, seq_len, vocab)`` plus the activations needed by :func:`backward`."""
    cfg, p = state.config, state.params
    tokens = _check_tokens(state, tokens)
    b, t = tokens.shape
    nh, g, hd = cfg.num_attention_heads, cfg.num_query_groups, cfg.head_dim
    rep = nh // g
    cos, sin = _rope_tables(t, hd, state.dtype)
    scale = 1.0 / math.sqrt(hd)
    causal = np.tril(np.ones((t, t), dtype=bool))
    cache = ForwardCache(tokens, rope=(cos, sin))

    x = p["tok_emb"][tokens]
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        h, n1 = _rmsnorm(x, p[pre + "attn_norm"])
        q = _mm_w(h, p[pre + "wq"]).reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
        k = _mm_w(h, p[pre + "wk"]).reshape(b, t, g, hd).transpose(0, 2, 1, 3)
        v = _mm_w(h, p[pre + "wv"]).reshape(b, t, g, hd).transpose(0, 2, 1, 3)
        qr, kr = _rope(q, cos, sin), _rope(k, cos, sin)
        kx, vx = np.repeat(kr, rep, axis=1), np.repeat(v, rep, axis=1)
        scores = np.where(causal, (qr @ kx.transpose(0, 1, 3, 2)) * scale, -np.inf)
        att = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att /= att.sum(axis=-1, keepdims=True)
        o = (att @ vx).transpose(0, 2, 1, 3).reshape(b, t, nh * hd)
        x = x + _mm_w(o, p[pre + "wo"])
        h2, n2 = _rmsnorm(x, p[pre + "ffn_norm"])
        u = _mm_w(h2, p[pre + "w1"])
        a, tanh_u = _gelu(u)
        x = x + _mm_w(a, p[pre + "w2"])
        cache.layers.append((h, n1, qr, kx, vx, att, o, h2, n2, u, a, tanh_u))
    xf, cache.final = _rmsnorm(x, p["final_norm"])
    cache.xf = xf
    return _mm_w(xf, state.head_weight()), cache


def backward(state: ModelState, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of ``sum(dlogits * logits)`` for every parameter."""
    cfg, p = state.config, state.params
    b, t = cache.tokens.shape
    if dlogits.shape != (b, t, cfg.vocab_size):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match logits {(b, t, cfg.vocab_size)}")
    dlogits = dlogits.astype(state.dtype, copy=False)
    nh, g, hd = cfg.num_attention_heads, cfg.num_query_groups, cfg.head_dim
    rep = nh // g
    cos, sin = cache.rope
    scale = 1.0 / math.sqrt(hd)
    grads = {}

    head_grad = _grad_w(cache.xf, dlogits)
    dxf = _mm_w(dlogits, state.head_weight().T)
    dx, grads["final_norm"] = _rmsnorm_back(dxf, p["final_norm"], cache.final)

    for i in reversed(range(cfg.num_layers)):
        pre = f"layers.{i}."
        h, n1, qr, kx, vx, att, o, h2, n2, u, a, tanh_u = cache.layers[i]
        # FFN
        grads[pre + "w2"] = _grad_w(a, dx)
        du = _gelu_back(_mm_w(dx, p[pre + "w2"].T), u, tanh_u)
        grads[pre + "w1"] = _grad_w(h2, du)
        dh2 = _mm_w(du, p[pre + "w1"].T)
        dres, grads[pre + "ffn_norm"] = _rmsnorm_back(dh2, p[pre + "ffn_norm"], n2)
        dx = dx + dres
        # attention
        grads[pre + "wo"] = _grad_w(o, dx)
        do = _mm_w(dx, p[pre + "wo"].T).reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
        datt = do @ vx.transpose(0, 1, 3, 2)
        dvx = att.transpose(0, 1, 3, 2) @ do
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dqr = dscores @ kx
        dkx = dscores.transpose(0, 1, 3, 2) @ qr
        dk = _rope(dkx.reshape(b, g, rep, t, hd).sum(axis=2), cos, sin, inverse=True)
        dv = dvx.reshape(b, g, rep, t, hd).sum(axis=2)
        dq = _rope(dqr, cos, sin, inverse=True)
        dq = dq.transpose(0, 2, 1, 3).reshape(b, t, nh * hd)
        dk = dk.transpose(0, 2, 1, 3).reshape(b, t, g * hd)
        dv = dv.transpose(0, 2, 1, 3).reshape(b, t, g * hd)
        grads[pre + "wq"] = _grad_w(h, dq)
        grads[pre + "wk"] = _grad_w(h, dk)
        grads[pre + "wv"] = _grad_w(h, dv)
        dh = _mm_w(dq, p[pre + "wq"].T) + _mm_w(dk, p[pre + "wk"].T) + _mm_w(dv, p[pre + "wv"].T)
        dres, grads[pre + "attn_norm"] = _rmsnorm_back(dh, p[pre + "attn_norm"], n1)
        dx = dx + dres

    demb = np.zeros_like(p["tok_emb"])
    np.add.at(demb, cache.tokens.reshape(-1), dx.reshape(-1, cfg.hidden_size))
    if cfg.tie_embeddings:
        demb += head_grad.T
    else:
        grads["lm_head"] = head_grad
    grads["tok_emb"] = demb
    return {name: grads[name] for name in p}


def adam_step(state: ModelState, grads: dict[str, np.ndarray], lr: float) -> ModelState:
    """One in-place Adam update (betas 0.9/0.95, eps 1e-8, bias-corrected); returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", step=state.step, tensor=name)
    t = state.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, param in state.params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        param -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    state.step = t
    return state


# ---- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"PDCK"
CKPT_VERSION = 1


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """``PDCK | version u32 | meta_len u32 | meta JSON | step u64 | f64 tensors | crc32``.

    Tensors are written as params, first moments, second moments, each in
    :func:`param_shapes` order.
    """
    meta = json.dumps({"config": state.config.to_dict(), "dtype": state.dtype}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<Q", state.step)]
    for group in (state.params, state.m, state.v):
        for name in param_shapes(state.config):
            parts.append(np.ascontiguousarray(group[name], dtype="<f8").tobytes())
    blob = b"".join(parts)
    try:
        Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> ModelState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint {path} failed its crc check")
    version, meta_len = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(body[12 : 12 + meta_len])
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected_config}")
    dtype = meta["dtype"]
    pos = 12 + meta_len
    (step,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    shapes = param_shapes(config)
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            if pos + 8 * count > len(body):
                raise CheckpointError(f"checkpoint {path} is truncated")
            group[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(dtype)
            pos += 8 * count
        groups.append(group)
    if pos != len(body):
        raise CheckpointError(f"checkpoint {path} has {len(body) - pos} unexpected trailing bytes")
    return ModelState(config, groups[0], groups[1], groups[2], int(step), dtype)
