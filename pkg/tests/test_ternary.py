from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfree import autodiff as ad
from mmfree.ternary import (QuantizedLinear, TernaryMatrix, bypass_quantization, pack_trits,
                            quantize_absmean, ste_backward, ternary_matmul, trit_memory_bits, unpack_trits)

METHODS = ("addsub", "bitplane", "signplane")


@pytest.mark.parametrize("k", range(1, 9))
def test_pack_roundtrip_exhaustive(k):
    trits = np.array(list(itertools.product((-1, 0, 1), repeat=k)), dtype=np.int8)
    assert trits.shape == (3**k, k)
    for row in trits:
        np.testing.assert_array_equal(unpack_trits(pack_trits(row), k), row)


def test_pack_layout_is_little_endian_within_byte():
    # first trit in bits 0-1: +1 -> 01, -1 -> 10, 0 -> 00, +1 -> 01
    assert pack_trits(np.array([1, -1, 0, 1]))[0] == 0b01_00_10_01
    assert pack_trits(np.array([1])).tolist() == [0b01]
    assert pack_trits(np.array([0, 0, 0, 0, -1])).tolist() == [0, 0b10]


def test_forbidden_code_and_bad_values():
    with pytest.raises(ValueError, match="0b11"):
        unpack_trits(np.array([0b11], dtype=np.uint8), 1)
    with pytest.raises(ValueError):
        pack_trits(np.array([2, 0]))
    with pytest.raises(ValueError):
        pack_trits(np.array([0.5]))
    with pytest.raises(ValueError):
        unpack_trits(np.array([0], dtype=np.uint8), 5)


def test_ternary_matrix_invariants():
    t = TernaryMatrix.from_trits(np.array([[1, 0, -1], [0, 1, 1]]), 0.25)
    with pytest.raises(ValueError):
        t.packed[0] = 0
    np.testing.assert_array_equal(t.dequantize(), [[0.25, 0, -0.25], [0, 0.25, 0.25]])
    again = TernaryMatrix(2, 3, t.packed, 0.25)
    assert again == t
    np.testing.assert_array_equal(again.trits, t.trits)
    with pytest.raises(ValueError):
        TernaryMatrix(2, 2, np.zeros(1, np.uint8), 0.0)
    with pytest.raises(ValueError):
        TernaryMatrix(0, 2, np.zeros(1, np.uint8), 1.0)


def test_quantize_examples():
    q = quantize_absmean(np.array([[0.5, -0.5], [0.5, 0.5]]))
    assert q.scale == 0.5
    np.testing.assert_array_equal(q.trits, [[1, -1], [1, 1]])
    z = quantize_absmean(np.zeros((3, 3)))
    assert z.scale == 1e-8 and not z.trits.any()
    with pytest.raises(ValueError):
        quantize_absmean(np.array([[np.nan]]))


@given(st.integers(0, 2**31))
def test_quantize_rounds_or_clips(seed):
    w = np.random.default_rng(seed).normal(size=(8, 8))
    q = quantize_absmean(w)
    assert q.scale == pytest.approx(np.abs(w).mean(), rel=1e-12)
    r = w / q.scale
    for wi, ti in zip(r.ravel(), q.trits.ravel()):
        assert abs(wi - ti) <= 0.5 or (ti == 1 and wi > 1) or (ti == -1 and wi < -1)


@pytest.mark.parametrize("method", METHODS)
def test_matmul_examples(method):
    t = TernaryMatrix.from_trits(np.array([[1, 0], [-1, 1]]), 1.0)
    np.testing.assert_array_equal(ternary_matmul(np.array([1.0, 2.0]), t, method), [-1.0, 2.0])
    zero = TernaryMatrix.from_trits(np.zeros((3, 4)), 0.7)
    assert not ternary_matmul(np.ones((2, 3)), zero, method).any()
    with pytest.raises(ValueError):
        ternary_matmul(np.ones(3), t, method)


@pytest.mark.parametrize("method", METHODS)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 6), r=st.integers(1, 12), c=st.integers(1, 12))
def test_matmul_matches_dense_oracle(method, seed, m, r, c):
    rng = np.random.default_rng(seed)
    t = quantize_absmean(rng.normal(size=(r, c)))
    x = rng.normal(size=(m, r))
    assert np.abs(ternary_matmul(x, t, method) - x @ t.dequantize()).max() <= 1e-6


@given(st.integers(0, 2**31))
def test_matmul_is_linear(seed):
    rng = np.random.default_rng(seed)
    t = quantize_absmean(rng.normal(size=(10, 7)))
    x, y = rng.normal(size=(3, 10)), rng.normal(size=(3, 10))
    a, b = rng.normal(size=2)
    for method in METHODS:
        lhs = ternary_matmul(a * x + b * y, t, method)
        rhs = a * ternary_matmul(x, t, method) + b * ternary_matmul(y, t, method)
        assert np.abs(lhs - rhs).max() <= 1e-6


def test_matmul_independent_of_row_split(rng):
    t = quantize_absmean(rng.normal(size=(16, 9)))
    x = rng.normal(size=(10, 16)).astype(np.float32)
    whole = ternary_matmul(x, t)
    parts = np.concatenate([ternary_matmul(x[:3], t), ternary_matmul(x[3:], t)])
    np.testing.assert_array_equal(whole, parts)


def test_ste_pass_through_and_clip_mask(rng):
    latent = rng.uniform(-0.5, 0.5, size=(4, 3))
    latent[1, 2] = 10.0 * np.abs(latent).mean() * 3
    t = quantize_absmean(latent)
    x, g = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    gx, gw = ste_backward(g, x, t, latent)
    inside = np.abs(latent / t.scale) <= 1
    full = x.T @ g
    np.testing.assert_allclose(gw[inside], full[inside], rtol=1e-12)
    assert (gw[~inside] == 0).all() and not inside[1, 2]
    np.testing.assert_allclose(gx, g @ t.dequantize().T, rtol=1e-12)
    with pytest.raises(RuntimeError):
        ste_backward(g, x, t, None)


def test_ste_matches_identity_substitution(rng):
    """Inside the clip region the latent gradient equals that of a plain dense layer."""
    with ad.precision(np.float64):
        lin = QuantizedLinear(6, 4, rng=rng)
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=(3, 4))
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(lin(x), ad.Tensor(g)))
        tape.backward(loss)
        quantized = lin.latent.grad.copy()
        lin.latent.zero_grad()
        with bypass_quantization(), ad.Tape() as tape:
            loss = ad.sum(ad.mul(lin(x), ad.Tensor(g)))
        tape.backward(loss)
    inside = np.abs(lin.latent.data / lin.cached.scale) <= 1
    np.testing.assert_allclose(quantized[inside], lin.latent.grad[inside], rtol=1e-12)
    assert (quantized[~inside] == 0).all()


def test_frozen_linear_never_changes_and_has_no_backward(rng):
    t = quantize_absmean(rng.normal(size=(4, 4)))
    lin = QuantizedLinear.fixed(t, name="fixed")
    before = t.packed.tobytes()
    x = ad.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(lin(x))
    tape.backward(loss)
    assert lin.refresh() is t and t.packed.tobytes() == before
    assert lin.parameters() == []
    with pytest.raises(RuntimeError):
        lin.ste_backward(np.ones((2, 4)), np.ones((2, 4)))


def test_refresh_is_deterministic(rng):
    lin = QuantizedLinear(8, 8, rng=rng)
    a, b = lin.refresh(), lin.refresh()
    assert a is not b and a == b
    assert a.trits.tobytes() == b.trits.tobytes()


def test_trit_memory_bits():
    assert trit_memory_bits(0) == 0
    assert trit_memory_bits(1) == pytest.approx(1.58496, abs=1e-5)
    assert trit_memory_bits(10**6) == 10**6 * math.log2(3)
    with pytest.raises(ValueError):
        trit_memory_bits(-1)
