import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from timotion import autodiff as ad
from timotion.errors import ConfigurationError, NumericError
from timotion.mixing import (
    P0_SENTINEL,
    AttentionBlock,
    ChannelMixing,
    InteractionMixing,
    MixingConfig,
    RwkvBlock,
    RwkvState,
    TimeMixing,
    rwkv_channel_mixing,
    rwkv_time_mixing,
    wkv,
    wkv_bruteforce,
    wkv_recurrence,
)


def _rel(a, b):
    return np.max(np.abs(a - b) / (np.abs(b) + 1e-300))


# numpy reference implementations, written independently of the modules


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def np_adaln(x, e, norm):
    s = e @ norm.scale.weight.data + norm.scale.bias.data
    b = e @ norm.shift.weight.data + norm.shift.bias.data
    return np_layer_norm(x) * (1 + s) + b


def np_lin(x, lin):
    out = x @ lin.weight.data
    return out if lin.bias is None else out + lin.bias.data


def np_attention_block(x, e, blk):
    heads = blk.attn.heads
    n, d = x.shape
    dh = d // heads
    h = np_adaln(x, e, blk.norm1)
    q, k, v = np_lin(h, blk.attn.q), np_lin(h, blk.attn.k), np_lin(h, blk.attn.v)
    out = np.zeros_like(x)
    for hd in range(heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        for i in range(n):
            s = np.array([q[i, cols] @ k[j, cols] for j in range(n)]) / np.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, cols] = sum(w[j] * v[j, cols] for j in range(n))
    x = x + np_lin(out, blk.attn.out)
    h = np_adaln(x, e, blk.norm2)
    return x + np_lin(np.maximum(np_lin(h, blk.ff.up), 0), blk.ff.down)


def np_shift(x, mu):
    prev = np.vstack([np.zeros((1, x.shape[1])), x[:-1]])
    return mu * x + (1 - mu) * prev


def np_time_mixing(x, m):
    q = np_shift(x, m.mu_q.data) @ m.w_q.weight.data
    k = np_shift(x, m.mu_k.data) @ m.w_k.weight.data
    v = np_shift(x, m.mu_v.data) @ m.w_v.weight.data
    return (1 / (1 + np.exp(-q)) * wkv_bruteforce(k, v)) @ m.w_o.weight.data


def np_channel_mixing(o, m):
    r = np_shift(o, m.mu_r.data) @ m.w_r.weight.data
    z = np_shift(o, m.mu_z.data) @ m.w_z.weight.data
    return 1 / (1 + np.exp(-r)) * (np.maximum(z, 0) ** 2 @ m.w_v.weight.data)


def _perturb(module, rng, scale=0.3):
    for p in module.parameters():
        p.data += rng.normal(0, scale, p.shape)
    return module


# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MixingConfig("mamba")
    with pytest.raises(ConfigurationError):
        MixingConfig("attention", width=10, heads=4)
    with pytest.raises(ConfigurationError):
        MixingConfig(layers=0)


def test_attention_single_row():
    rng = np.random.default_rng(0)
    blk = _perturb(AttentionBlock(8, 2, 3, rng), rng)
    x, e = rng.normal(size=(1, 8)), rng.normal(size=3)
    # one row: softmax weight 1, so attention returns its own value projection
    h = np_adaln(x, e, blk.norm1)
    x1 = x + np_lin(np_lin(h, blk.attn.v), blk.attn.out)
    h2 = np_adaln(x1, e, blk.norm2)
    expected = x1 + np_lin(np.maximum(np_lin(h2, blk.ff.up), 0), blk.ff.down)
    np.testing.assert_allclose(blk(x, e).data, expected, rtol=1e-12)


def test_attention_zero_weights_is_identity():
    rng = np.random.default_rng(1)
    blk = AttentionBlock(8, 2, 3, rng)
    for p in blk.parameters():
        p.data[...] = 0.0
    x = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(blk(x, np.zeros(3)).data, x)


def test_attention_matches_recomputation():
    rng = np.random.default_rng(2)
    blk = _perturb(AttentionBlock(8, 2, 3, rng), rng)
    x, e = rng.normal(size=(4, 8)), rng.normal(size=3)
    assert _rel(blk(x, e).data, np_attention_block(x, e, blk)) < 1e-10


def test_attention_batched_equals_looped():
    rng = np.random.default_rng(3)
    blk = _perturb(AttentionBlock(8, 4, 3, rng), rng)
    x, e = rng.normal(size=(3, 6, 8)), rng.normal(size=(3, 3))
    out = blk(x, e).data
    for i in range(3):
        np.testing.assert_allclose(out[i], blk(x[i], e[i]).data, rtol=1e-12, atol=1e-14)


def test_attention_is_not_causal():
    rng = np.random.default_rng(4)
    blk = AttentionBlock(8, 2, 3, rng)
    x, e = rng.normal(size=(6, 8)), rng.normal(size=3)
    y = x.copy()
    # a non-constant change, since the pre-norm removes a uniform shift
    y[5] += rng.normal(size=8)
    assert np.abs(blk(x, e).data[:5] - blk(y, e).data[:5]).max() > 1e-3


def test_non_finite_input():
    rng = np.random.default_rng(5)
    x = np.ones((3, 8))
    x[1, 2] = np.nan
    with pytest.raises(NumericError):
        AttentionBlock(8, 2, 3, rng)(x, np.zeros(3))
    with pytest.raises(NumericError):
        RwkvBlock(8, 3, rng)(x, np.zeros(3))


# ---------------------------------------------------------------------------
# WKV


def test_wkv_single_step():
    rng = np.random.default_rng(6)
    k, v = rng.normal(size=(1, 4)) * 30, rng.normal(size=(1, 4))
    np.testing.assert_array_equal(wkv_recurrence(k, v)[0], v)
    np.testing.assert_array_equal(wkv_bruteforce(k, v), v)


def test_wkv_equal_keys_give_running_mean():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(10, 3))
    h = wkv_recurrence(np.full((10, 3), -3.0), v)[0]
    expected = np.cumsum(v, axis=0) / np.arange(1, 11)[:, None]
    np.testing.assert_allclose(h, expected, rtol=1e-12)


def test_wkv_constant_values():
    rng = np.random.default_rng(8)
    k = rng.uniform(-50, 50, (12, 3))
    np.testing.assert_allclose(wkv_bruteforce(k, np.full((12, 3), 2.5)), 2.5, rtol=1e-14)
    np.testing.assert_allclose(wkv_recurrence(k, np.full((12, 3), 2.5))[0], 2.5, rtol=1e-14)


def test_wkv_recurrence_matches_oracle():
    rng = np.random.default_rng(9)
    k, v = rng.uniform(-50, 50, (64, 8)), rng.uniform(-50, 50, (64, 8))
    assert _rel(wkv_recurrence(k, v)[0], wkv_bruteforce(k, v)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_wkv_convex_and_state_laws(length, width, seed):
    rng = np.random.default_rng(seed)
    k, v = rng.uniform(-50, 50, (length, width)), rng.normal(size=(length, width))
    h, p, b = wkv_recurrence(k, v)
    run_min = np.minimum.accumulate(v, axis=0)
    run_max = np.maximum.accumulate(v, axis=0)
    tol = 1e-12 * (1 + np.abs(v).max())
    assert np.all(h >= run_min - tol) and np.all(h <= run_max + tol)
    assert np.all(np.diff(p, axis=0) >= 0)
    assert np.all(b >= 0)


def test_state_starts_at_sentinel():
    s = RwkvState.zeros(3)
    assert np.all(s.a == 0) and np.all(s.b == 0) and np.all(s.p == P0_SENTINEL)


def test_wkv_gradient():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(7, 3))
    assert ad.grad_check(lambda k, v: ad.sum_(wkv(k, v) * w), [rng.uniform(-1, 1, (7, 3)), rng.uniform(-1, 1, (7, 3))]) < 1e-5


def test_wkv_gradient_batched():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(2, 5, 3))
    assert ad.grad_check(lambda k, v: ad.sum_(wkv(k, v) * w), [rng.uniform(-3, 3, (2, 5, 3)), rng.uniform(-1, 1, (2, 5, 3))]) < 1e-5


# ---------------------------------------------------------------------------
# time / channel mixing


def test_time_mixing_matches_recomputation():
    rng = np.random.default_rng(12)
    m = _perturb(TimeMixing(6, rng), rng)
    x = rng.normal(size=(9, 6))
    assert _rel(rwkv_time_mixing(x, m).data, np_time_mixing(x, m)) < 1e-9


def test_time_mixing_single_row_uses_v():
    rng = np.random.default_rng(13)
    m = TimeMixing(4, rng)
    x = rng.normal(size=(1, 4))
    q, k, v = (t.data for t in m.projections(x))
    expected = (1 / (1 + np.exp(-q)) * v) @ m.w_o.weight.data
    np.testing.assert_allclose(m(x).data, expected, rtol=1e-13)


def test_channel_mixing_matches_recomputation():
    rng = np.random.default_rng(14)
    m = _perturb(ChannelMixing(6, 12, rng), rng)
    o = rng.normal(size=(9, 6))
    assert _rel(rwkv_channel_mixing(o, m).data, np_channel_mixing(o, m)) < 1e-12


def test_channel_mixing_negative_z_is_zero():
    rng = np.random.default_rng(15)
    m = ChannelMixing(4, 8, rng)
    m.w_z.weight.data[...] = -np.abs(m.w_z.weight.data)
    o = np.abs(rng.normal(size=(5, 4)))
    np.testing.assert_array_equal(m(o).data, 0.0)


def test_channel_mixing_saturated_gate():
    rng = np.random.default_rng(16)
    m = ChannelMixing(4, 8, rng)
    m.w_r.weight.data[...] = 0.0
    m.w_r.weight.data[np.arange(4), np.arange(4)] = 1e4
    o = np.abs(rng.normal(size=(5, 4))) + 1.0
    z = np_shift(o, m.mu_z.data) @ m.w_z.weight.data
    np.testing.assert_allclose(m(o).data, np.maximum(z, 0) ** 2 @ m.w_v.weight.data, rtol=1e-12)


@pytest.mark.parametrize("row", [0, 3, 6])
def test_rwkv_block_is_causal(row):
    rng = np.random.default_rng(17)
    blk = _perturb(RwkvBlock(6, 3, rng), rng)
    x, e = rng.normal(size=(8, 6)), rng.normal(size=3)
    y = x.copy()
    y[row] += rng.normal(size=6)
    a, b = blk(x, e).data, blk(y, e).data
    np.testing.assert_array_equal(a[:row], b[:row])
    assert not np.allclose(a[row:], b[row:])


def test_interaction_mixing_stacks_layers():
    rng = np.random.default_rng(18)
    mix = InteractionMixing(MixingConfig("rwkv", 6, layers=3), 3, rng)
    assert len(mix.blocks) == 3
    x, e = rng.normal(size=(4, 6)), rng.normal(size=3)
    y = x
    for blk in mix.blocks:
        y = blk(y, e)
    np.testing.assert_array_equal(mix(x, e).data, y.data)
