import math
import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xprot.tensor_core import DimensionError, Rng, as_tensor, derive_seed, matmul, reduce, softmax_rows


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]


def test_matmul_against_loops(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - ref)) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_as_tensor_rejects_nan():
    with pytest.raises(ValueError):
        as_tensor([1.0, np.nan])
    assert np.isnan(as_tensor([np.nan], allow_nonfinite=True)[0])


def test_softmax_cases():
    assert softmax_rows([[0.0, 0.0]]).tolist() == [[0.5, 0.5]]
    out = softmax_rows([[1000.0, 0.0]])
    assert abs(out[0, 0] - 1) <= 1e-12 and out[0, 1] <= 1e-12
    mpmath.mp.dps = 40
    den = sum(mpmath.exp(v) for v in (1, 2, 3))
    ref = [float(mpmath.exp(v) / den) for v in (1, 2, 3)]
    assert np.allclose(softmax_rows([[1.0, 2.0, 3.0]])[0], ref, rtol=0, atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(ValueError):
        softmax_rows([[np.nan, 1.0]])


@given(arrays(np.float64, (3, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_are_distributions(a):
    out = softmax_rows(a)
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_reduce_cases():
    m = [[1, 2], [3, 4]]
    assert reduce(m, 0, "sum").tolist() == [4.0, 6.0]
    assert reduce(m, 1, "max").tolist() == [2.0, 4.0]
    with pytest.raises(DimensionError):
        reduce(m, 2)
    with pytest.raises(ValueError):
        reduce(m, 0, "median")


@given(arrays(np.float64, (8, 3), elements=st.floats(-1e6, 1e6)))
def test_mean_is_sum_over_extent_for_power_of_two(a):
    assert np.array_equal(reduce(a, 0, "mean"), reduce(a, 0, "sum") / 8)


def test_reduce_is_leftmost_first():
    vals = np.array([1e16, 1.0, -1e16, 1.0])
    expected = ((1e16 + 1.0) + -1e16) + 1.0
    assert reduce(vals, 0)[()] == expected


def test_rng_determinism_and_children():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal(5), b.normal(5))
    assert Rng(7).child("x").seed == Rng(7).child("x").seed
    assert Rng(7).child("x").seed != Rng(7).child("y").seed
    assert derive_seed(7, 1) != derive_seed(8, 1)


@settings(max_examples=50)
@given(st.integers(0, 2**64 - 1), st.text(max_size=8))
def test_derive_seed_in_range(seed, stream):
    assert 0 <= derive_seed(seed, stream) < 2**64


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_matmul_associativity(seed, m, k, l, n):
    gen = np.random.default_rng(seed)
    a, b, c = gen.normal(size=(m, k)), gen.normal(size=(k, l)), gen.normal(size=(l, n))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    scale = np.abs(a).max() * np.abs(b).max() * np.abs(c).max() * k * l
    assert np.abs(left - right).max() <= 1e-9 * scale


@settings(max_examples=40)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3)))
def test_total_sum_against_fsum(a):
    total = a
    for _ in range(a.ndim):
        total = reduce(total, 0)
    exact = math.fsum(a.ravel())
    assert abs(float(total) - exact) <= 1e-10 * max(np.abs(a).sum(), 1e-300)


def test_rng_million_draws_reproducible():
    assert np.array_equal(Rng(2024).uniform(10**6), Rng(2024).uniform(10**6))
    assert np.array_equal(Rng(2024).child(3).normal(10**6), Rng(2024).child(3).normal(10**6))
