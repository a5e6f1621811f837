"""Causal interleaving of two motion sequences and the role-evolving scan.

Rows are the time axis (-2) and channels the last axis; any leading axes are
treated as batch. Row ``j`` (1-based) of a causal sequence holds person a's
frame ``ceil(j / 2)`` when ``j`` is odd and person b's frame ``j / 2`` when it
is even; the symmetric sequence swaps the two persons.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

PERSON_A = 0
PERSON_B = 1


@dataclass(frozen=True)
class CausalSequence:
    """Interleaved frames plus, per row, which person and frame it came from.

    ``source`` is 1-based, matching the ceil-division indexing of the rows.
    """

    frames: Tensor
    person: np.ndarray
    source: np.ndarray

    @property
    def length(self) -> int:
        return self.frames.shape[-2] // 2


@lru_cache(maxsize=256)
def provenance(length: int, first: int = PERSON_A) -> tuple[np.ndarray, np.ndarray]:
    j = np.arange(1, 2 * length + 1)
    second = PERSON_B if first == PERSON_A else PERSON_A
    person = np.where(j % 2 == 1, first, second)
    source = (j + 1) // 2
    # cached, so shared between sequences
    person.flags.writeable = False
    source.flags.writeable = False
    return person, source


def _check_pair(x_a: Tensor, x_b: Tensor) -> None:
    if x_a.shape != x_b.shape:
        raise DimensionError(f"persons must have equal shapes, got {x_a.shape} and {x_b.shape}")
    if x_a.ndim < 2:
        raise DimensionError(f"sequences need shape (..., L, C), got {x_a.shape}")


def _interleave(first: Tensor, second: Tensor) -> Tensor:
    shape = first.shape[:-2] + (2 * first.shape[-2], first.shape[-1])
    out = np.empty(shape, dtype=np.result_type(first.data, second.data))
    out[..., 0::2, :] = first.data
    out[..., 1::2, :] = second.data
    return ad.make_op(out, (first, second), lambda g: (g[..., 0::2, :], g[..., 1::2, :]))


def causal_interleave(x_a, x_b) -> CausalSequence:
    """[a1, b1, a2, b2, ...] along the row axis."""
    x_a, x_b = ad.as_tensor(x_a), ad.as_tensor(x_b)
    _check_pair(x_a, x_b)
    person, source = provenance(x_a.shape[-2], PERSON_A)
    return CausalSequence(_interleave(x_a, x_b), person, source)


def symmetric_interleave(x_a, x_b) -> CausalSequence:
    """[b1, a1, b2, a2, ...]; equals ``causal_interleave(x_b, x_a)``."""
    x_a, x_b = ad.as_tensor(x_a), ad.as_tensor(x_b)
    _check_pair(x_a, x_b)
    person, source = provenance(x_a.shape[-2], PERSON_B)
    return CausalSequence(_interleave(x_b, x_a), person, source)


def deinterleave(seq: CausalSequence) -> tuple[Tensor, Tensor]:
    """Split into (leading person, following person) via the provenance tags.

    For a causal sequence that is (x_a, x_b); for a symmetric one, (x_b, x_a).
    """
    frames = seq.frames
    lead = seq.person[0]
    last = np.iinfo(np.int64).max
    order_1 = np.argsort(np.where(seq.person == lead, seq.source, last), kind="stable")
    order_2 = np.argsort(np.where(seq.person != lead, seq.source, last), kind="stable")
    n = seq.length
    return ad.take(frames, order_1[:n], axis=-2), ad.take(frames, order_2[:n], axis=-2)


def _frames(x) -> Tensor:
    return x.frames if isinstance(x, CausalSequence) else ad.as_tensor(x)


def role_evolving_concat(x_cii, x_sym_cii) -> Tensor:
    """Channel concatenation, causal sequence first: (2L, C) + (2L, C) -> (2L, 2C)."""
    a, b = _frames(x_cii), _frames(x_sym_cii)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"row extents differ: {a.shape} vs {b.shape}")
    return ad.concat([a, b], axis=-1)


def split_and_merge(y) -> tuple[Tensor, Tensor]:
    """Split a (2L, 2C) mixing output back into per-person (L, C) embeddings.

    The causal half gives a on odd rows and b on even rows; the symmetric half
    the reverse. Each person's two copies are summed.
    """
    y = ad.as_tensor(y)
    rows, chans = y.shape[-2], y.shape[-1]
    if rows % 2 or chans % 2:
        raise DimensionError(f"split_and_merge needs even rows and channels, got {y.shape}")
    c = chans // 2
    d = y.data

    def merged(r1, r2):
        # r1: row parity in the causal half, r2: in the symmetric half
        def vjp(g):
            full = np.zeros_like(d)
            full[..., r1::2, :c] = g
            full[..., r2::2, c:] = g
            return (full,)

        return ad.make_op(d[..., r1::2, :c] + d[..., r2::2, c:], (y,), vjp)

    return merged(0, 1), merged(1, 0)


def split_causal(y) -> tuple[Tensor, Tensor]:
    """Per-person rows of a plain causal (2L, C) output (no symmetric branch)."""
    y = ad.as_tensor(y)
    if y.shape[-2] % 2:
        raise DimensionError(f"split_causal needs an even row count, got {y.shape}")
    lead = (slice(None),) * (y.ndim - 2)
    return y[lead + (slice(0, None, 2), slice(None))], y[lead + (slice(1, None, 2), slice(None))]
