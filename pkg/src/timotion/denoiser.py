"""The two-person denoiser: conditioning, stacked interaction blocks, checkpoints.

The network predicts the clean sample x0 for both persons from their noisy
versions, the diffusion step and a bag of text tokens.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, FormatError, UsageError
from .lpa import Fuse, LpaBlock, LpaConfig
from .mixing import AttentionBlock, MixingConfig, RwkvBlock, SeparateBlock
from .nn import Embedding, Linear, Module, parameter
from .temporal import (
    causal_interleave,
    role_evolving_concat,
    split_and_merge,
    split_causal,
    symmetric_interleave,
)

TEMPORAL_SCHEMES = ("res", "cii", "separate")


@dataclass(frozen=True)
class DenoiserConfig:
    n_joints: int = 5
    width: int = 64
    n_blocks: int = 2
    backend: str = "rwkv"
    heads: int = 4
    mixing_layers: int = 1
    ff_mult: int = 2
    temporal: str = "res"
    use_lpa: bool = True
    lpa_kernels: tuple[int, int] = (3, 1)
    norm: str = "adaln"
    vocab_size: int = 32
    max_len: int = 64
    cfg_dropout: float = 0.1
    guidance: float = 3.5

    def __post_init__(self):
        object.__setattr__(self, "lpa_kernels", tuple(self.lpa_kernels))
        for name in ("n_joints", "width", "heads", "mixing_layers", "ff_mult", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ConfigurationError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.temporal not in TEMPORAL_SCHEMES:
            raise ConfigurationError(f"temporal must be one of {TEMPORAL_SCHEMES}, got {self.temporal!r}")
        if self.temporal == "separate" and self.backend != "attention":
            raise ConfigurationError("separate modeling is only defined for the attention backend")
        if not 0.0 <= self.cfg_dropout < 1.0:
            raise ConfigurationError(f"cfg_dropout must lie in [0, 1), got {self.cfg_dropout}")
        if self.guidance < 0:
            raise ConfigurationError(f"guidance must be >= 0, got {self.guidance}")
        MixingConfig(self.backend, self.mixing_width, self.heads, self.mixing_layers, self.ff_mult)
        LpaConfig(self.lpa_kernels, self.norm)

    @property
    def frame_dim(self) -> int:
        return 12 * self.n_joints + 4

    @property
    def mixing_width(self) -> int:
        return 2 * self.width if self.temporal == "res" else self.width

    @property
    def mixing(self) -> MixingConfig:
        return MixingConfig(self.backend, self.mixing_width, self.heads, self.mixing_layers, self.ff_mult)

    @property
    def lpa(self) -> LpaConfig:
        return LpaConfig(self.lpa_kernels, self.norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lpa_kernels"] = list(self.lpa_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# conditioning


def timestep_sinusoid(t, dim: int) -> np.ndarray:
    """Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with geometric w_i."""
    t = np.asarray(t, dtype=np.float64)
    half = (dim + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (2 * half,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out[..., :dim]


@dataclass
class ConditionEmbedding:
    time: Tensor
    text: Tensor
    null: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def e(self) -> Tensor:
        return self.time + self.text


def _as_token_batch(tokens, batch: int | None) -> list[list[int]]:
    if tokens is None:
        return [[] for _ in range(batch or 1)]
    tokens = list(tokens)
    if not tokens or not isinstance(tokens[0], (list, tuple, np.ndarray)):
        tokens = [tokens] * (batch or 1)
    return [[int(tok) for tok in seq] for seq in tokens]


class TextEncoder(Module):
    """Mean of learned token embeddings; the null condition maps to zero."""

    def __init__(self, vocab_size: int, width: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.table = Embedding(vocab_size, width, rng)

    def pooling(self, tokens: Sequence[Sequence[int]], null) -> np.ndarray:
        pool = np.zeros((len(tokens), self.vocab_size))
        for i, seq in enumerate(tokens):
            for tok in seq:
                if not 0 <= tok < self.vocab_size:
                    raise UsageError(f"token id {tok} outside vocabulary of size {self.vocab_size}")
            if seq and not null[i]:
                np.add.at(pool[i], list(seq), 1.0 / len(seq))
        return pool

    def __call__(self, tokens, null) -> Tensor:
        return ad.matmul(self.pooling(tokens, null), self.table.weight)


class TimestepEncoder(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.width = width
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, t) -> Tensor:
        return self.fc2(ad.silu(self.fc1(timestep_sinusoid(t, self.width))))


# ---------------------------------------------------------------------------
# blocks


class TimotionBlock(Module):
    """Global interaction branch over the interleaved pair plus the local LPA branch."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.temporal = config.temporal
        self.use_lpa = config.use_lpa
        c, d = config.width, config.mixing_width
        if config.temporal == "separate":
            self.mixers = [SeparateBlock(c, config.heads, c, rng, config.ff_mult) for _ in range(config.mixing_layers)]
        elif config.backend == "attention":
            self.mixers = [AttentionBlock(d, config.heads, c, rng, config.ff_mult) for _ in range(config.mixing_layers)]
        else:
            self.mixers = [RwkvBlock(d, c, rng, config.ff_mult) for _ in range(config.mixing_layers)]
        if config.use_lpa:
            self.lpa = LpaBlock(c, c, rng, config.lpa)
            self.fuse = Fuse(c, rng)

    def global_branch(self, x_a: Tensor, x_b: Tensor, e: Tensor, pos: Tensor | None) -> tuple[Tensor, Tensor]:
        n = x_a.shape[-2]
        if self.temporal == "separate":
            if pos is not None:
                p = pos[: 2 * n : 2]
                x_a, x_b = x_a + p, x_b + p
            for mixer in self.mixers:
                x_a, x_b = mixer(x_a, x_b, e)
            return x_a, x_b
        if self.temporal == "res":
            x = role_evolving_concat(causal_interleave(x_a, x_b), symmetric_interleave(x_a, x_b))
        else:
            x = causal_interleave(x_a, x_b).frames
        if pos is not None:
            x = x + pos[: 2 * n]
        for mixer in self.mixers:
            x = mixer(x, e)
        return split_and_merge(x) if self.temporal == "res" else split_causal(x)

    def __call__(self, x_a, x_b, e, pos: Tensor | None = None) -> tuple[Tensor, Tensor]:
        x_a, x_b = ad.as_tensor(x_a), ad.as_tensor(x_b)
        if x_a.shape != x_b.shape:
            raise DimensionError(f"persons must have equal shapes, got {x_a.shape} and {x_b.shape}")
        y_a, y_b = self.global_branch(x_a, x_b, e, pos)
        if not self.use_lpa:
            return y_a, y_b
        return self.fuse(y_a, self.lpa(x_a, e)), self.fuse(y_b, self.lpa(x_b, e))


class Denoiser(Module):
    """x0-predictor for a pair of noisy motion sequences."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        c, f = config.width, config.frame_dim
        self.time_embed = TimestepEncoder(c, rng)
        self.text_embed = TextEncoder(config.vocab_size, c, rng)
        self.in_proj = Linear(f, c, rng)
        # position table covers the interleaved length; role is encoded by parity
        self.pos = parameter(rng.normal(0.0, 0.02, (2 * config.max_len, config.mixing_width if config.temporal != "separate" else c)))
        self.blocks = [TimotionBlock(config, rng) for _ in range(config.n_blocks)]
        self.out_proj = Linear(c, f, rng, zero=True)

    def embed_condition(self, t, tokens=None, null=None) -> ConditionEmbedding:
        t = np.atleast_1d(np.asarray(t))
        batch = t.shape[0]
        token_batch = _as_token_batch(tokens, batch)
        if len(token_batch) != batch:
            if batch == 1:
                batch = len(token_batch)
                t = np.repeat(t, batch)
            else:
                raise DimensionError(f"{len(token_batch)} token lists for {batch} timesteps")
        null = np.zeros(batch, dtype=bool) if null is None else np.broadcast_to(np.asarray(null, dtype=bool), (batch,))
        return ConditionEmbedding(self.time_embed(t), self.text_embed(token_batch, null), np.array(null))

    def __call__(self, x_a, x_b, t, tokens=None, null=None, return_features: bool = False):
        x_a, x_b = ad.as_tensor(x_a), ad.as_tensor(x_b)
        cfg = self.config
        if x_a.shape != x_b.shape:
            raise DimensionError(f"persons must have equal shapes, got {x_a.shape} and {x_b.shape}")
        if x_a.shape[-1] != cfg.frame_dim:
            raise DimensionError(f"frame width {x_a.shape[-1]} does not match config frame_dim {cfg.frame_dim}")
        squeeze = x_a.ndim == 2
        if squeeze:
            x_a = ad.reshape(x_a, (1,) + x_a.shape)
            x_b = ad.reshape(x_b, (1,) + x_b.shape)
        if x_a.ndim != 3:
            raise DimensionError(f"expected (L, F) or (B, L, F) inputs, got {x_a.shape}")
        batch, length = x_a.shape[0], x_a.shape[1]
        if length > cfg.max_len:
            raise DimensionError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        t = np.broadcast_to(np.asarray(t), (batch,))
        tokens = _as_token_batch(tokens, batch)
        e = self.embed_condition(t, tokens, null).e
        h_a, h_b = self.in_proj(x_a), self.in_proj(x_b)
        for block in self.blocks:
            h_a, h_b = block(h_a, h_b, e, self.pos)
        out_a, out_b = self.out_proj(h_a), self.out_proj(h_b)
        if squeeze:
            out_a, out_b, h_a, h_b = out_a[0], out_b[0], h_a[0], h_b[0]
        if return_features:
            return out_a, out_b, (h_a, h_b)
        return out_a, out_b

    def predict_x0(self, x_a, x_b, t, tokens=None, null=None) -> tuple[np.ndarray, np.ndarray]:
        """Gradient-free forward returning plain arrays."""
        with ad.no_grad():
            a, b = self(x_a, x_b, t, tokens, null)
        return a.data, b.data


def count_parameters(config: DenoiserConfig) -> int:
    return Denoiser(config, np.random.default_rng(0)).num_parameters()


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TIMC"
CKPT_VERSION = 1


def save_checkpoint(path, model: Denoiser, step: int = 0) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<Q", step)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[Denoiser, int]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, cfg_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    try:
        config = DenoiserConfig.from_dict(json.loads(r.take(cfg_len, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config: {exc}", at) from exc
    (step,) = r.unpack("<Q", "step")
    (count,) = r.unpack("<I", "parameter count")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode()
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * size, name), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after parameter table", r.pos)
    model = Denoiser(config, np.random.default_rng(0))
    try:
        model.load_state_dict(state)
    except (ConfigurationError, DimensionError) as exc:
        raise FormatError(f"parameter table does not match config: {exc}") from exc
    return model, int(step)
