"""Registered finite-difference gradient checks for primitives, blocks and losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .data import generate_synthetic_pair, minimal_skeleton
from .denoiser import DenoiserConfig, TimotionBlock
from .lpa import Fuse, LpaBlock
from .mixing import AttentionBlock, ChannelMixing, RwkvBlock, SeparateBlock, TimeMixing, wkv
from .nn import AdaLN, Module
from .seeding import stream
from .temporal import causal_interleave, role_evolving_concat, split_and_merge, symmetric_interleave

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass(frozen=True)
class GradCheck:
    name: str
    tolerance: float
    run: Callable[[np.random.Generator], float]


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


def _weighted(out, w):
    """Random linear functional of the output, so no gradient is trivially symmetric."""
    return ad.sum_(out * w)


def _perturb(module: Module, rng, scale: float = 0.3) -> Module:
    # zero-initialised layers would otherwise leave some paths without gradient
    for p in module.parameters():
        p.data += rng.normal(0.0, scale, p.shape)
    return module


def _module_check(module: Module, inputs: list[np.ndarray], call, rng) -> float:
    leaves = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = call(*leaves)
    outs = out if isinstance(out, tuple) else (out,)
    ws = [rng.normal(size=o.shape) for o in outs]

    def loss():
        res = call(*leaves)
        res = res if isinstance(res, tuple) else (res,)
        total = _weighted(res[0], ws[0])
        for r, w in zip(res[1:], ws[1:]):
            total = total + _weighted(r, w)
        return total

    return ad.check_arrays(loss, leaves + module.parameters())


def _primitive(fn, *shapes, positive: bool = False):
    def run(rng):
        point = [_u(rng, *s) for s in shapes]
        if positive:
            point = [np.abs(p) + 0.5 for p in point]
        w = rng.normal(size=np.shape(fn(*[ad.Tensor(p) for p in point]).data))
        return ad.grad_check(lambda *xs: _weighted(fn(*xs), w), point)

    return run


def _primitive_checks() -> list[GradCheck]:
    items = {
        "matmul": _primitive(ad.matmul, (3, 4), (4, 2)),
        "add": _primitive(ad.add, (3, 4), (3, 4)),
        "add_bias": _primitive(ad.add, (3, 4), (4,)),
        "mul": _primitive(ad.mul, (3, 4), (3, 4)),
        "concat": _primitive(lambda a, b: ad.concat([a, b], axis=-1), (3, 2), (3, 3)),
        "split": _primitive(lambda a: ad.split(a, [2, 3], axis=-1)[1] * 2.0 + ad.split(a, [2, 3], axis=-1)[0][..., :1], (3, 5)),
        "exp": _primitive(ad.exp, (3, 4)),
        "max": _primitive(lambda a: ad.max_(a, axis=-1), (3, 4)),
        "softmax": _primitive(lambda a: ad.softmax(a, axis=-1), (3, 4)),
        "sigmoid": _primitive(ad.sigmoid, (3, 4)),
        "relu": _primitive(ad.relu, (3, 4)),
        "square": _primitive(ad.square, (3, 4)),
        "layer_norm": _primitive(ad.layer_norm, (3, 4)),
        "conv1d_k3": _primitive(lambda x, w, b: ad.conv1d(x, w, b), (5, 2), (3, 2, 3), (3,)),
        "linear": _primitive(lambda x, w, b: ad.linear(x, w, b), (3, 4), (4, 2), (2,)),
        "mse": _primitive(lambda a, b: ad.mse(a, b) * 1.0, (3, 4), (3, 4)),
        "sqrt": _primitive(ad.sqrt, (3, 4), positive=True),
        "log": _primitive(ad.log, (3, 4), positive=True),
        "div": _primitive(ad.div, (3, 4), (3, 4), positive=True),
    }
    return [GradCheck(f"primitive/{k}", PRIMITIVE_TOL, v) for k, v in items.items()]


def _temporal(rng):
    def f(a, b):
        y = role_evolving_concat(causal_interleave(a, b), symmetric_interleave(a, b))
        y_a, y_b = split_and_merge(ad.square(y))
        return ad.concat([y_a, y_b], axis=-1)

    w = rng.normal(size=(3, 4))
    return ad.grad_check(lambda a, b: _weighted(f(a, b), w), [_u(rng, 3, 2), _u(rng, 3, 2)])


def _wkv(rng):
    w = rng.normal(size=(6, 3))
    return ad.grad_check(lambda k, v: _weighted(wkv(k, v), w), [_u(rng, 6, 3), _u(rng, 6, 3)])


def _blocks() -> list[GradCheck]:
    def adaln(rng):
        m = _perturb(AdaLN(4, 3, rng), rng)
        return _module_check(m, [_u(rng, 4, 4), _u(rng, 3)], m, rng)

    def time_mixing(rng):
        m = _perturb(TimeMixing(4, rng), rng)
        return _module_check(m, [_u(rng, 4, 4)], m, rng)

    def channel_mixing(rng):
        m = _perturb(ChannelMixing(4, 8, rng), rng)
        return _module_check(m, [_u(rng, 4, 4)], m, rng)

    def rwkv_block(rng):
        m = _perturb(RwkvBlock(4, 3, rng), rng)
        return _module_check(m, [_u(rng, 4, 4), _u(rng, 3)], m, rng)

    def attention_block(rng):
        m = _perturb(AttentionBlock(4, 2, 3, rng), rng)
        return _module_check(m, [_u(rng, 4, 4), _u(rng, 3)], m, rng)

    def separate_block(rng):
        m = _perturb(SeparateBlock(4, 2, 3, rng), rng)
        return _module_check(m, [_u(rng, 2, 4), _u(rng, 2, 4), _u(rng, 3)], m, rng)

    def lpa_block(rng):
        m = _perturb(LpaBlock(4, 3, rng), rng)
        return _module_check(m, [_u(rng, 4, 4), _u(rng, 3)], m, rng)

    def fuse(rng):
        m = _perturb(Fuse(4, rng), rng)
        return _module_check(m, [_u(rng, 4, 4), _u(rng, 4, 4)], m, rng)

    def timotion_block(backend):
        def run(rng):
            cfg = DenoiserConfig(width=4, heads=2, backend=backend, n_blocks=1, max_len=2)
            m = _perturb(TimotionBlock(cfg, rng), rng)
            return _module_check(m, [_u(rng, 2, 4), _u(rng, 2, 4), _u(rng, 4)], m, rng)

        return run

    return [
        GradCheck("temporal/interleave_split_merge", 1e-9, _temporal),
        GradCheck("mixing/wkv", PRIMITIVE_TOL, _wkv),
        GradCheck("lpa/adaln", PRIMITIVE_TOL, adaln),
        GradCheck("mixing/time_mixing", BLOCK_TOL, time_mixing),
        GradCheck("mixing/channel_mixing", BLOCK_TOL, channel_mixing),
        GradCheck("mixing/rwkv_block", BLOCK_TOL, rwkv_block),
        GradCheck("mixing/attention_block", BLOCK_TOL, attention_block),
        GradCheck("mixing/separate_block", BLOCK_TOL, separate_block),
        GradCheck("lpa/lpa_block", BLOCK_TOL, lpa_block),
        GradCheck("lpa/fuse", BLOCK_TOL, fuse),
        GradCheck("denoiser/timotion_block_rwkv", BLOCK_TOL, timotion_block("rwkv")),
        GradCheck("denoiser/timotion_block_attention", BLOCK_TOL, timotion_block("attention")),
    ]


def _loss_checks() -> list[GradCheck]:
    spec = minimal_skeleton()
    n = spec.n_joints

    def data(rng):
        pair = generate_synthetic_pair(spec, "approach_handshake", 8, int(rng.integers(1 << 30)))
        gt_a, gt_b = pair.x_a[-3:], pair.x_b[-3:]
        return gt_a + rng.normal(0, 0.05, gt_a.shape), gt_b + rng.normal(0, 0.05, gt_b.shape), gt_a, gt_b

    def make(fn, tol):
        def run(rng):
            pa, pb, ga, gb = data(rng)
            return ad.grad_check(lambda a, b: fn(a, b, ga, gb), [pa, pb])

        return GradCheck(f"losses/{fn.__name__}", tol, run)

    def simple(a, b, ga, gb):
        return losses.l_simple(a, ga) + losses.l_simple(b, gb)

    def vel(a, b, ga, gb):
        return losses.l_vel(a, ga, n) + losses.l_vel(b, gb, n)

    def foot(a, b, ga, gb):
        # exaggerate the offsets so sliding exceeds the contact threshold
        return losses.l_foot(a * 3.0, np.ones((3, 4)), spec)

    def bone(a, b, ga, gb):
        return losses.l_bl(a, spec)

    def dm(a, b, ga, gb):
        return losses.l_dm(a, b, ga, gb, n, d_max=10.0)

    def ro(a, b, ga, gb):
        return losses.l_ro(a, b, ga, gb, n)

    def total(a, b, ga, gb):
        return losses.total_loss(a, b, ga, gb, spec, d_max=10.0)[0]

    return [make(simple, 1e-6), make(vel, 1e-6), make(foot, 1e-6), make(bone, 1e-6), make(dm, BLOCK_TOL), make(ro, 1e-5), make(total, BLOCK_TOL)]


def registry() -> list[GradCheck]:
    return _primitive_checks() + _blocks() + _loss_checks()


def run_all(seed: int = 0, names: list[str] | None = None) -> list[tuple[GradCheck, float]]:
    """Run every registered check (or those named) with per-check random streams."""
    out = []
    for i, check in enumerate(registry()):
        if names and check.name not in names:
            continue
        out.append((check, check.run(stream(seed, i))))
    return out
