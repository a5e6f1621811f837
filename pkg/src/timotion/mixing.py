"""Interaction-mixing backends: self-attention and the RWKV recurrence.

Both consume a (B, N, D) sequence and a (B, E) condition and return (B, N, D).
Unbatched (N, D) inputs with an (E,) condition are accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .nn import AdaLN, Linear, Module, parameter

P0_SENTINEL = -1e30


@dataclass(frozen=True)
class MixingConfig:
    backend: str = "rwkv"
    width: int = 128
    heads: int = 4
    layers: int = 1
    ff_mult: int = 2

    def __post_init__(self):
        if self.backend not in ("attention", "rwkv"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.backend == "attention" and self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by {self.heads} heads")


def _batched(x, e):
    x, e = ad.as_tensor(x), ad.as_tensor(e)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), ad.reshape(e, (1,) + e.shape), True
    return x, e, False


def _check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in input of shape {t.shape}")


# ---------------------------------------------------------------------------
# attention


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V per head; inputs (B, N, D)."""
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads

    def split_heads(t, n):
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split_heads(q, nq), split_heads(k, nk), split_heads(v, nk)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
    out = ad.matmul(ad.softmax(scores, axis=-1), vh)
    return ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, nq, d))


class Attention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(width, width, rng)
        # a key bias only shifts each query's scores uniformly, so it has no effect
        self.k = Linear(width, width, rng, bias=False)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        return self.out(multihead_attention(self.q(x), self.k(context), self.v(context), self.heads))


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(width, hidden, rng)
        self.down = Linear(hidden, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.relu(self.up(x)))


class AttentionBlock(Module):
    """Pre-norm bidirectional self-attention + feed-forward, AdaLN-conditioned."""

    def __init__(self, width: int, heads: int, cond_dim: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm1 = AdaLN(width, cond_dim, rng)
        self.attn = Attention(width, heads, rng)
        self.norm2 = AdaLN(width, cond_dim, rng)
        self.ff = FeedForward(width, ff_mult * width, rng)

    def __call__(self, x, e) -> Tensor:
        x, e, squeeze = _batched(x, e)
        _check_finite(x, e)
        x = x + self.attn(self.norm1(x, e))
        x = x + self.ff(self.norm2(x, e))
        return x[0] if squeeze else x


class SeparateBlock(Module):
    """Per-person self-attention then cross-attention to the other person.

    Weights are shared between the two persons. This is the separate-modeling
    baseline the interleaved scheme is compared against.
    """

    def __init__(self, width: int, heads: int, cond_dim: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm1 = AdaLN(width, cond_dim, rng)
        self.self_attn = Attention(width, heads, rng)
        self.norm2 = AdaLN(width, cond_dim, rng)
        self.cross_attn = Attention(width, heads, rng)
        self.norm3 = AdaLN(width, cond_dim, rng)
        self.ff = FeedForward(width, ff_mult * width, rng)

    def __call__(self, x_a, x_b, e) -> tuple[Tensor, Tensor]:
        x_a, e, squeeze = _batched(x_a, e)
        x_b = ad.reshape(ad.as_tensor(x_b), x_a.shape)
        x_a = x_a + self.self_attn(self.norm1(x_a, e))
        x_b = x_b + self.self_attn(self.norm1(x_b, e))
        n_a, n_b = self.norm2(x_a, e), self.norm2(x_b, e)
        x_a, x_b = x_a + self.cross_attn(n_a, n_b), x_b + self.cross_attn(n_b, n_a)
        x_a = x_a + self.ff(self.norm3(x_a, e))
        x_b = x_b + self.ff(self.norm3(x_b, e))
        if squeeze:
            return x_a[0], x_b[0]
        return x_a, x_b


# ---------------------------------------------------------------------------
# RWKV


@dataclass
class RwkvState:
    """Running WKV accumulators for one sequence (any leading shape)."""

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray
    prev_x: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape) -> "RwkvState":
        return cls(np.zeros(shape), np.zeros(shape), np.full(shape, P0_SENTINEL))

    def step(self, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Consume one (k_t, v_t) and return h_t."""
        p = np.maximum(self.p, k)
        decay = np.exp(self.p - p)
        gain = np.exp(k - p)
        self.a = decay * self.a + gain * v
        self.b = decay * self.b + gain
        self.p = p
        return self.a / self.b


def wkv_recurrence(k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable running softmax-weighted mean of v keyed by k, along axis -2.

    Returns (h, p, b): the outputs plus the running max exponent and the
    rescaled denominator at each step, which the backward pass reuses.
    """
    n = k.shape[-2]
    state = RwkvState.zeros(k.shape[:-2] + k.shape[-1:])
    h = np.empty_like(v)
    ps = np.empty_like(k)
    bs = np.empty_like(k)
    for t in range(n):
        h[..., t, :] = state.step(k[..., t, :], v[..., t, :])
        ps[..., t, :] = state.p
        bs[..., t, :] = state.b
    return h, ps, bs


def wkv_bruteforce(k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """h_t = sum_{i<=t} e^{k_i} v_i / sum_{i<=t} e^{k_i}, evaluated directly."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = k.shape[-2]
    h = np.empty_like(v)
    for t in range(n):
        kk = k[..., : t + 1, :]
        m = kk.max(axis=-2, keepdims=True)
        w = np.exp(kk - m)
        h[..., t, :] = (w * v[..., : t + 1, :]).sum(axis=-2) / w.sum(axis=-2)
    return h


def wkv(k, v) -> Tensor:
    """Differentiable WKV over axis -2 (see :func:`wkv_recurrence`)."""
    k, v = ad.as_tensor(k), ad.as_tensor(v)
    h, p, b = wkv_recurrence(k.data, v.data)
    kd, vd = k.data, v.data
    n = kd.shape[-2]

    def vjp(g):
        # R_i = sum_{t>=i} g_t e^{p_i - p_t} / b_t, Q_i likewise with g_t * h_t
        r = np.empty_like(g)
        q = np.empty_like(g)
        r_next = np.zeros(g.shape[:-2] + g.shape[-1:])
        q_next = np.zeros_like(r_next)
        for i in range(n - 1, -1, -1):
            gi = g[..., i, :] / b[..., i, :]
            if i < n - 1:
                decay = np.exp(p[..., i, :] - p[..., i + 1, :])
                r_next = gi + decay * r_next
                q_next = gi * h[..., i, :] + decay * q_next
            else:
                r_next = gi
                q_next = gi * h[..., i, :]
            r[..., i, :] = r_next
            q[..., i, :] = q_next
        w = np.exp(kd - p)
        return w * (vd * r - q), w * r

    return make_wkv(h, k, v, vjp)


def make_wkv(h, k, v, vjp) -> Tensor:
    return ad.make_op(h, (k, v), vjp)


def token_shift(x: Tensor, mu: Tensor) -> Tensor:
    """mu * x_t + (1 - mu) * x_{t-1} with x_0 = 0."""
    prev = ad.shift_rows(x)
    return prev + mu * (x - prev)


class TimeMixing(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.mu_q = parameter(np.full(width, 0.5))
        self.mu_k = parameter(np.full(width, 0.5))
        self.mu_v = parameter(np.full(width, 0.5))
        self.w_q = Linear(width, width, rng, bias=False)
        self.w_k = Linear(width, width, rng, bias=False)
        self.w_v = Linear(width, width, rng, bias=False)
        self.w_o = Linear(width, width, rng, bias=False)

    def projections(self, x) -> tuple[Tensor, Tensor, Tensor]:
        x = ad.as_tensor(x)
        q = self.w_q(token_shift(x, self.mu_q))
        k = self.w_k(token_shift(x, self.mu_k))
        v = self.w_v(token_shift(x, self.mu_v))
        return q, k, v

    def __call__(self, x) -> Tensor:
        q, k, v = self.projections(x)
        return self.w_o(ad.sigmoid(q) * wkv(k, v))


class ChannelMixing(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.mu_r = parameter(np.full(width, 0.5))
        self.mu_z = parameter(np.full(width, 0.5))
        self.w_r = Linear(width, width, rng, bias=False)
        self.w_z = Linear(width, hidden, rng, bias=False)
        self.w_v = Linear(hidden, width, rng, bias=False)

    def __call__(self, o) -> Tensor:
        o = ad.as_tensor(o)
        r = self.w_r(token_shift(o, self.mu_r))
        z = self.w_z(token_shift(o, self.mu_z))
        return ad.sigmoid(r) * self.w_v(ad.square(ad.relu(z)))


def rwkv_time_mixing(x, mixer: TimeMixing) -> Tensor:
    return mixer(x)


def rwkv_channel_mixing(o, mixer: ChannelMixing) -> Tensor:
    return mixer(o)


class RwkvBlock(Module):
    """One time-mixing and one channel-mixing residual sub-block, AdaLN-conditioned."""

    def __init__(self, width: int, cond_dim: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm1 = AdaLN(width, cond_dim, rng)
        self.time = TimeMixing(width, rng)
        self.norm2 = AdaLN(width, cond_dim, rng)
        self.channel = ChannelMixing(width, ff_mult * width, rng)

    def __call__(self, x, e) -> Tensor:
        x, e, squeeze = _batched(x, e)
        _check_finite(x, e)
        x = x + self.time(self.norm1(x, e))
        x = x + self.channel(self.norm2(x, e))
        return x[0] if squeeze else x


class InteractionMixing(Module):
    """A stack of ``config.layers`` blocks of the chosen backend."""

    def __init__(self, config: MixingConfig, cond_dim: int, rng: np.random.Generator):
        self.config = config
        if config.backend == "attention":
            self.blocks = [AttentionBlock(config.width, config.heads, cond_dim, rng, config.ff_mult) for _ in range(config.layers)]
        else:
            self.blocks = [RwkvBlock(config.width, cond_dim, rng, config.ff_mult) for _ in range(config.layers)]

    def __call__(self, x, e) -> Tensor:
        for block in self.blocks:
            x = block(x, e)
        return x
