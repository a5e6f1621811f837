"""Localized pattern amplification: a per-person convolutional residual branch.

The branch sees each person on its own, with weights shared between the two,
and is fused with the global (interaction) branch by a linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import AdaLN, Conv1d, Linear, Module, make_norm

__all__ = ["AdaLN", "LpaConfig", "LpaBlock", "Fuse", "adaln", "lpa_block", "fuse"]


@dataclass(frozen=True)
class LpaConfig:
    kernels: tuple[int, int] = (3, 1)
    norm: str = "adaln"

    def __post_init__(self):
        if len(self.kernels) != 2:
            raise ConfigurationError(f"expected two kernel sizes, got {self.kernels}")
        for k in self.kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernel sizes must be odd and >= 1, got {self.kernels}")
        if self.norm not in ("adaln", "ln", "bn"):
            raise ConfigurationError(f"unknown normalization {self.norm!r}")


class LpaBlock(Module):
    """y = x + Conv_k2(norm(Conv_k1(norm(x, e)), e))."""

    def __init__(self, width: int, cond_dim: int, rng: np.random.Generator, config: LpaConfig = LpaConfig()):
        k1, k2 = config.kernels
        self.norm1 = make_norm(config.norm, width, cond_dim, rng)
        self.conv1 = Conv1d(width, width, k1, rng)
        self.norm2 = make_norm(config.norm, width, cond_dim, rng)
        self.conv2 = Conv1d(width, width, k2, rng)

    def __call__(self, x, e) -> Tensor:
        x = ad.as_tensor(x)
        h = self.conv1(self.norm1(x, e))
        return x + self.conv2(self.norm2(h, e))


class Fuse(Module):
    """Linear 2C -> C over the channel concatenation [y_g, y_l]."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.proj = Linear(2 * width, width, rng)

    def __call__(self, y_g, y_l) -> Tensor:
        return self.proj(ad.concat([y_g, y_l], axis=-1))


def adaln(x, e, norm: AdaLN) -> Tensor:
    return norm(x, e)


def lpa_block(x, e, block: LpaBlock) -> Tensor:
    return block(x, e)


def fuse(y_g, y_l, fuser: Fuse) -> Tensor:
    return fuser(y_g, y_l)
