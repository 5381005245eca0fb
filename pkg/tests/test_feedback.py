import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedalign import feedback as fb
from feedalign import layers as L
from feedalign.errors import DimensionError


# -- random feedback --------------------------------------------------------------

@pytest.mark.parametrize("scheme", fb.RANDOM_SCHEMES)
def test_random_feedback_deterministic(scheme):
    a = fb.build_random_feedback(20, 5, scheme, seed=42)
    b = fb.build_random_feedback(20, 5, scheme, seed=42)
    assert a.to_bytes() == b.to_bytes()


def test_he_scheme_sample_std():
    m = fb.build_random_feedback(1000, 10, "random_he", seed=1, dtype=np.float64)
    target = math.sqrt(2 / 10)
    assert abs(m.values.std() - target) <= 0.1 * target
    assert abs(m.values.mean()) < 0.05


def test_uniform_scheme_bounds():
    m = fb.build_random_feedback(30, 10, "random_uniform", seed=1, dtype=np.float64)
    a = math.sqrt(6 / 40)
    assert np.all(np.abs(m.values) <= a) and m.values.max() > 0.9 * a


@pytest.mark.parametrize("scheme", fb.RANDOM_SCHEMES)
def test_different_seeds_differ(scheme):
    a = fb.build_random_feedback(100, 10, scheme, seed=1).values
    b = fb.build_random_feedback(100, 10, scheme, seed=2).values
    assert np.mean(a != b) >= 0.99


def test_random_feedback_rejects_zero_dims():
    with pytest.raises(DimensionError):
        fb.build_random_feedback(0, 3)


def test_feedback_is_frozen():
    m = fb.build_random_feedback(4, 3)
    assert m.frozen
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0


# -- product feedback ---------------------------------------------------------------

def test_product_single_layer_is_the_weight():
    w = np.random.default_rng(0).standard_normal((3, 5))
    d = fb.build_product_feedback([w])
    assert np.array_equal(d.values, w.T)


def test_product_identity_chain():
    d = fb.build_product_feedback([np.eye(4)] * 3)
    assert np.array_equal(d.values, np.eye(4))


def test_product_matches_matmul_and_sequential_bp():
    rng = np.random.default_rng(3)
    w1 = rng.standard_normal((4, 6))
    w2 = rng.standard_normal((3, 4))
    d = fb.build_product_feedback([w1, w2])
    np.testing.assert_allclose(d.values.T, w2 @ w1, rtol=1e-13)
    e = rng.standard_normal((5, 3))
    np.testing.assert_allclose(fb.dfa_error(d, e), (e @ w2) @ w1, rtol=1e-12)


def test_product_rejects_noncomposable_chain():
    with pytest.raises(DimensionError):
        fb.build_product_feedback([np.ones((4, 6)), np.ones((3, 5))])


# -- binarisation ------------------------------------------------------------------

def test_binarize_examples():
    b = fb.binarize_sign(np.array([[0.5, -0.2], [0.0, 3.1]]))
    assert np.array_equal(b.dense(), [[1, -1], [1, 1]])
    assert np.all(fb.binarize_sign(-np.ones((3, 7))).dense() == -1)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_pack_unpack_roundtrip(rows, cols, seed):
    m = np.random.default_rng(seed).standard_normal((rows, cols))
    b = fb.binarize_sign(m)
    assert b.nbytes == math.ceil(rows * cols / 8)
    assert np.array_equal(b.dense(np.float64), np.where(m >= 0, 1.0, -1.0))
    # idempotence through the dense expansion
    again = fb.binarize_sign(b.dense())
    assert np.array_equal(again.packed, b.packed)


def test_bit_layout_is_lsb_first_row_major():
    m = np.array([[1.0, -1, -1, -1, -1, -1, -1, -1, 1]])  # bits 0 and 8 set
    assert list(fb.binarize_sign(m).packed) == [0b00000001, 0b00000001]


# -- error propagation ----------------------------------------------------------------

def test_fa_error_reduces_to_backprop_when_r_is_w():
    rng = np.random.default_rng(0)
    layer = L.FullyConnected(5, 3, rng=rng)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    layer.forward(x)
    e = rng.standard_normal((4, 3)).astype(np.float32)
    r = fb.FeedbackMatrix(layer.weight.T)
    assert np.array_equal(fb.fa_error(r, e), layer.backward_error(e))


def test_zero_errors_give_zero():
    r = fb.build_random_feedback(4, 3)
    assert not fb.fa_error(r, np.zeros((2, 3), np.float32)).any()
    assert not fb.dfa_error(r, np.zeros((2, 3), np.float32)).any()
    assert not fb.bdfa_error(fb.binarize_sign(r), np.zeros((2, 3), np.float32)).any()


def test_fa_error_matches_two_op_oracle():
    rng = np.random.default_rng(5)
    r = fb.build_random_feedback(6, 4, seed=5, dtype=np.float64)
    e = rng.standard_normal((3, 4))
    fp = rng.uniform(0, 1, (3, 6))
    np.testing.assert_allclose(fb.fa_error(r, e, fp), (e @ r.values.T) * fp, rtol=1e-13)


def test_dfa_scalar_case():
    d = fb.FeedbackMatrix(np.array([[2.5]]))
    out = fb.dfa_error(d, np.array([[3.0]]), np.array([[0.5]]))
    assert out[0, 0] == 2.5 * 3.0 * 0.5


def test_bdfa_all_plus_ones_row_sums():
    bm = fb.binarize_sign(np.ones((4, 3)))
    e = np.random.default_rng(1).standard_normal((2, 3))
    fp = np.random.default_rng(2).uniform(0, 1, (2, 4))
    expected = e.sum(axis=1, keepdims=True) * fp
    np.testing.assert_allclose(fb.bdfa_error(bm, e, fp), expected, rtol=1e-14)


def test_bdfa_negating_bits_negates_error():
    bm = fb.binarize_sign(np.random.default_rng(3).standard_normal((9, 5)))
    e = np.random.default_rng(4).standard_normal((3, 5)).astype(np.float32)
    assert np.array_equal(fb.bdfa_error(bm.negated(), e), -fb.bdfa_error(bm, e))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_bdfa_equals_dfa_on_dense_expansion(rows, cols, batch, seed):
    rng = np.random.default_rng(seed)
    bm = fb.binarize_sign(rng.standard_normal((rows, cols)))
    e = rng.standard_normal((batch, cols)).astype(np.float32)
    fp = rng.uniform(0, 1, (batch, rows)).astype(np.float32)
    dense = fb.FeedbackMatrix(bm.dense(np.float32))
    assert np.array_equal(fb.bdfa_error(bm, e, fp), fb.dfa_error(dense, e, fp))


def test_shape_mismatch_errors():
    d = fb.build_random_feedback(4, 3)
    with pytest.raises(DimensionError):
        fb.dfa_error(d, np.ones((2, 4), np.float32))
    with pytest.raises(DimensionError):
        fb.dfa_error(d, np.ones((2, 3), np.float32), np.ones((2, 5), np.float32))
    with pytest.raises(DimensionError):
        fb.bdfa_error(fb.binarize_sign(d), np.ones((2, 3, 1, 1), np.float32))


# -- storage -------------------------------------------------------------------------

def test_storage_sizes():
    bm = fb.binarize_sign(np.ones((64, 10)))
    assert fb.packed_size_bytes(bm) == 80
    assert fb.dense_size_bytes(64, 10) == 2560
    assert 1 - 80 / 2560 == 0.96875
    assert fb.packed_size(8, 1) == 1
    assert fb.packed_size(9, 1) == 2


@given(st.integers(1, 300), st.integers(1, 300))
def test_reduction_exact_when_divisible_by_eight(r, c):
    if (r * c) % 8:
        return
    assert 1 - fb.packed_size(r, c) / fb.dense_size_bytes(r, c) == 0.96875


def test_section_roundtrip():
    d = fb.build_random_feedback(5, 3, seed=9)
    d2, off = fb.feedback_from_bytes(d.to_bytes())
    assert np.array_equal(d2.values, d.values) and off == len(d.to_bytes())
    b = fb.binarize_sign(d)
    b2, _ = fb.feedback_from_bytes(b.to_bytes())
    assert np.array_equal(b2.packed, b.packed) and b2.shape == (5, 3)
