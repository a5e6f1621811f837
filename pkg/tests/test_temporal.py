import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from timotion import autodiff as ad
from timotion.errors import DimensionError
from timotion.temporal import (
    PERSON_A,
    PERSON_B,
    causal_interleave,
    deinterleave,
    role_evolving_concat,
    split_and_merge,
    split_causal,
    symmetric_interleave,
)

A = np.array([[1.0], [2.0]])
B = np.array([[10.0], [20.0]])


def test_causal_interleave_example():
    seq = causal_interleave(A, B)
    np.testing.assert_array_equal(seq.frames.data[:, 0], [1, 10, 2, 20])
    np.testing.assert_array_equal(seq.person, [PERSON_A, PERSON_B, PERSON_A, PERSON_B])
    np.testing.assert_array_equal(seq.source, [1, 1, 2, 2])


def test_single_frame():
    np.testing.assert_array_equal(causal_interleave(A[:1], B[:1]).frames.data[:, 0], [1, 10])


def test_equal_persons_give_equal_adjacent_rows():
    x = np.random.default_rng(0).normal(size=(5, 3))
    f = causal_interleave(x, x).frames.data
    np.testing.assert_array_equal(f[0::2], f[1::2])


def test_symmetric_interleave_example():
    np.testing.assert_array_equal(symmetric_interleave(A, B).frames.data[:, 0], [10, 1, 20, 2])


def test_deinterleave_symmetric_swaps():
    a, b = deinterleave(symmetric_interleave(A, B))
    np.testing.assert_array_equal(a.data, B)
    np.testing.assert_array_equal(b.data, A)


def test_role_evolving_concat_example():
    out = role_evolving_concat(np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])


def test_split_and_merge_zeros():
    a, b = split_and_merge(np.zeros((6, 4)))
    assert a.shape == b.shape == (3, 2)
    assert not a.data.any() and not b.data.any()


def test_split_and_merge_index_oracle():
    y = np.random.default_rng(1).normal(size=(4, 4))
    a, b = split_and_merge(y)
    exp_a = np.zeros((2, 2))
    exp_b = np.zeros((2, 2))
    for j in range(1, 5):  # 1-based rows
        frame = (j + 1) // 2 - 1
        if j % 2 == 1:
            exp_a[frame] += y[j - 1, :2]
            exp_b[frame] += y[j - 1, 2:]
        else:
            exp_b[frame] += y[j - 1, :2]
            exp_a[frame] += y[j - 1, 2:]
    np.testing.assert_array_equal(a.data, exp_a)
    np.testing.assert_array_equal(b.data, exp_b)


def test_errors():
    with pytest.raises(DimensionError):
        causal_interleave(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        role_evolving_concat(np.zeros((4, 2)), np.zeros((6, 2)))
    with pytest.raises(DimensionError):
        split_and_merge(np.zeros((5, 4)))
    with pytest.raises(DimensionError):
        split_and_merge(np.zeros((4, 3)))


pairs = st.integers(1, 6).flatmap(
    lambda L: st.integers(1, 4).flatmap(
        lambda C: st.tuples(
            hnp.arrays(np.float64, (L, C), elements=st.floats(-1e6, 1e6)),
            hnp.arrays(np.float64, (L, C), elements=st.floats(-1e6, 1e6)),
        )
    )
)


@settings(max_examples=100, deadline=None)
@given(pairs)
def test_round_trip_and_swap(xs):
    x_a, x_b = xs
    y_a, y_b = split_and_merge(role_evolving_concat(causal_interleave(x_a, x_b), symmetric_interleave(x_a, x_b)))
    np.testing.assert_array_equal(y_a.data, 2 * x_a)
    np.testing.assert_array_equal(y_b.data, 2 * x_b)
    np.testing.assert_array_equal(causal_interleave(x_b, x_a).frames.data, symmetric_interleave(x_a, x_b).frames.data)
    # swapping persons swaps the channel blocks of X
    c = x_a.shape[1]
    x = role_evolving_concat(causal_interleave(x_a, x_b), symmetric_interleave(x_a, x_b)).data
    xs_ = role_evolving_concat(causal_interleave(x_b, x_a), symmetric_interleave(x_b, x_a)).data
    np.testing.assert_array_equal(xs_, np.concatenate([x[:, c:], x[:, :c]], axis=1))
    a, b = deinterleave(causal_interleave(x_a, x_b))
    np.testing.assert_array_equal(a.data, x_a)
    np.testing.assert_array_equal(b.data, x_b)
    a, b = split_causal(causal_interleave(x_a, x_b).frames)
    np.testing.assert_array_equal(a.data, x_a)
    np.testing.assert_array_equal(b.data, x_b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20))
def test_provenance_is_permutation(length):
    seq = causal_interleave(np.zeros((length, 1)), np.zeros((length, 1)))
    tags = set(zip(seq.person.tolist(), seq.source.tolist()))
    assert len(tags) == 2 * length
    assert tags == {(p, i) for p in (PERSON_A, PERSON_B) for i in range(1, length + 1)}


def test_batched_interleave():
    rng = np.random.default_rng(2)
    x_a, x_b = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    f = causal_interleave(x_a, x_b).frames.data
    for i in range(3):
        np.testing.assert_array_equal(f[i], causal_interleave(x_a[i], x_b[i]).frames.data)


def test_temporal_gradients():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 3))

    def f(a, b):
        y_a, y_b = split_and_merge(role_evolving_concat(causal_interleave(a, b), symmetric_interleave(a, b)))
        return ad.sum_(ad.square(y_a) * w) + ad.sum_(y_b * w)

    assert ad.grad_check(f, [rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 3))]) <= 1e-9
