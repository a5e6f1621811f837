"""Parameter containers and the small set of layers the denoiser is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Walks its attributes in definition order to find parameters."""

    training = True
    _buffers: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise ConfigurationError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} vs model {p.data.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.normal(0.0, 1.0, (n_in, n_out)) * scale)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, (n, dim)))


def _cond_axes(e: Tensor, dim: int) -> Tensor:
    # (..., dim) -> (..., 1, dim) so it broadcasts over the row axis of x
    return ad.reshape(e, e.shape[:-1] + (1, dim))


class AdaLN(Module):
    """Layer norm whose scale ``1 + s(e)`` and shift ``b(e)`` come from a condition.

    ``s`` and ``b`` are zero-initialised, so a fresh layer is a plain layer norm.
    """

    def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.scale = Linear(cond_dim, dim, rng, zero=True)
        self.shift = Linear(cond_dim, dim, rng, zero=True)

    def __call__(self, x, e) -> Tensor:
        x, e = ad.as_tensor(x), ad.as_tensor(e)
        normed = ad.layer_norm(x, self.eps)
        s = _cond_axes(self.scale(e), self.dim)
        b = _cond_axes(self.shift(e), self.dim)
        return normed * (s + 1.0) + b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x, e=None) -> Tensor:
        return ad.layer_norm(x, self.eps) * self.gamma + self.beta


class BatchNorm(Module):
    """Normalises each channel over every leading axis.

    Training mode uses batch statistics and updates the running estimates;
    evaluation mode uses the running estimates.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x, e=None) -> Tensor:
        x = ad.as_tensor(x)
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = ad.mean(x, axes, keepdims=True)
            xc = x - mu
            var = ad.mean(ad.square(xc), axes, keepdims=True)
            if ad.is_grad_enabled():
                m = self.momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
                self.running_var[...] = (1 - m) * self.running_var + m * var.data.reshape(-1)
            normed = xc / ad.sqrt(var + self.eps)
        else:
            normed = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed * self.gamma + self.beta


def make_norm(kind: str, dim: int, cond_dim: int, rng: np.random.Generator) -> Module:
    if kind == "adaln":
        return AdaLN(dim, cond_dim, rng)
    if kind == "ln":
        return LayerNorm(dim)
    if kind == "bn":
        return BatchNorm(dim)
    raise ConfigurationError(f"unknown normalization {kind!r}; expected adaln, ln or bn")


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, zero: bool = False):
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd and >= 1, got {kernel}")
        scale = 0.0 if zero else 1.0 / np.sqrt(kernel * c_in)
        self.weight = parameter(rng.normal(0.0, 1.0, (kernel, c_in, c_out)) * scale)
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 2e-5):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
