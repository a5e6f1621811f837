"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable computation in the package is built from the operations
in this module. A :class:`Tensor` produced by an operation remembers its
parents and a vector-Jacobian product closure; :func:`backward` replays those
closures in reverse topological order, so each recorded node is visited once.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one shape must be a trailing suffix of the other (bias over leading axes), or
both have the same rank and every mismatched extent is 1 on one side
(explicit ``keepdims``-style shapes). Anything else raises
:class:`~timotion.errors.DimensionError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording; results carry no graph."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if 0 in arr.shape:
            raise DimensionError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a forward result and its VJP closure as a recorded node.

    ``vjp(g)`` must return one gradient (or ``None``) per parent, each shaped
    like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf."""
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_topological(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


def gradients(output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradients of a scalar ``output`` w.r.t. ``leaves``."""
    for leaf in leaves:
        leaf.grad = None
    backward(output)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------------------
# broadcasting helpers


def _fits(small: tuple, big: tuple) -> bool:
    if len(small) < len(big):
        return big[len(big) - len(small):] == small
    if len(small) == len(big):
        return all(s == b or s == 1 for s, b in zip(small, big))
    return False


def _result_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if _fits(sb, sa):
        return sa
    if _fits(sa, sb):
        return sb
    raise DimensionError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    return make_op(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_op(xhat, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")
    if b.ndim == 2 and a.ndim < 2:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (as_tensor(weight).shape[1],))
        return out if bias is None else add(out, bias)
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]
    if np.ndim(out) == 0:
        out = np.asarray(out, dtype=np.float64)
    advanced = _is_advanced(idx)

    def vjp(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_op(out, (a,), vjp)


def take(a, indices, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = (slice(None),) * axis + (np.asarray(indices),)
    return getitem(a, idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise UsageError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split: sizes {tuple(sizes)} do not cover extent {a.shape[ax]} of shape {a.shape}")
    out, start = [], 0
    for s in sizes:
        idx = (slice(None),) * ax + (slice(start, start + s),)
        out.append(getitem(a, idx))
        start += s
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise DimensionError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    ax = axis % (ts[0].ndim + 1)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return make_op(np.stack([t.data for t in ts], axis=ax), ts, vjp)


def shift_rows(a, axis: int = -2) -> Tensor:
    """Delay by one step along ``axis``: row t receives row t-1, row 0 is zero."""
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    src = (slice(None),) * ax + (slice(0, n - 1),)
    dst = (slice(None),) * ax + (slice(1, n),)
    out = np.zeros_like(a.data)
    out[dst] = a.data[src]

    def vjp(g):
        full = np.zeros_like(g)
        full[src] = g[dst]
        return (full,)

    return make_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution and losses


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-length 1-D convolution along axis -2 with zero padding.

    ``x`` is ``(..., L, C_in)``, ``weight`` is ``(k, C_in, C_out)`` with odd k.
    Output row t sees input rows t - k//2 .. t + k//2.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3:
        raise DimensionError(f"conv1d: kernel shape {weight.shape} must be (k, C_in, C_out)")
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise DimensionError(f"conv1d: kernel size {k} must be odd for same padding")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d: input shape {x.shape} and kernel shape {weight.shape} do not conform")
    L = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    cols = np.stack([xp[..., i:i + L, :] for i in range(k)], axis=-2).reshape(x.shape[:-1] + (k * cin,))
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv1d: bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(x.shape[:-1] + (k, cin))
            gxp = np.zeros(xp.shape)
            for i in range(k):
                gxp[..., i:i + L, :] += gcols[..., i, :]
            gx = gxp[..., pad:pad + L, :]
        if weight.requires_grad:
            gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, parents, vjp)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# finite-difference checking


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


def check_arrays(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` closes over ``leaves`` (tensors with ``requires_grad``); their
    ``.data`` is perturbed in place and restored.
    """
    if not 0 < eps <= 1e-2:
        raise UsageError(f"eps must lie in (0, 1e-2], got {eps}")
    analytic = gradients(loss_fn(), leaves)
    worst = 0.0
    with no_grad():
        for leaf, an in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _check_finite(float(loss_fn().data), "loss")
                flat[i] = orig - eps
                fm = _check_finite(float(loss_fn().data), "loss")
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                a = _check_finite(float(an_flat[i]), "gradient")
                err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
                worst = max(worst, err)
    return worst


def grad_check(fn: Callable[..., Tensor], point, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).

    ``fn`` maps one tensor per entry of ``point`` (an array or a sequence of
    arrays) to a scalar tensor.
    """
    arrays = [point] if isinstance(point, np.ndarray) or np.isscalar(point) else list(point)
    leaves = [Tensor(np.array(p, dtype=np.float64, copy=True), requires_grad=True) for p in arrays]
    for leaf in leaves:
        if not np.all(np.isfinite(leaf.data)):
            raise NumericError("grad_check point contains non-finite values")
    return check_arrays(lambda: fn(*leaves), leaves, eps)
