from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from mmfree.layers import MatMulFreeLM, ModelConfig
from mmfree.reservoir import (ConvergenceError, LIESNParams, ReservoirSpec, SharedFixed, draw_reservoir,
                              gen_fixed_dense_ternary, gen_sparse_ternary, li_esn_step, spectral_radius)
from mmfree.ternary import TernaryMatrix, quantize_absmean


def eig_radius(a: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(a)).max())


def test_sparse_generation_examples():
    dense = gen_sparse_ternary(ReservoirSpec(16, 0.0, seed=3))
    assert set(np.unique(dense.trits)) == {-1, 1} and dense.scale == 1.0
    a = gen_sparse_ternary(ReservoirSpec(32, 0.85, seed=9))
    b = gen_sparse_ternary(ReservoirSpec(32, 0.85, seed=9))
    assert a.packed.tobytes() == b.packed.tobytes()


def test_sparse_nonzero_count_binomial_bound():
    t = gen_sparse_ternary(ReservoirSpec(1000, 0.85, seed=0))
    n, p = 10**6, 0.15
    nz = np.count_nonzero(t.trits)
    assert abs(nz - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    pos = np.count_nonzero(t.trits == 1)
    assert abs(pos - nz / 2) <= 3 * math.sqrt(nz / 4)


def test_spec_validation():
    with pytest.raises(ValueError):
        ReservoirSpec(4, 1.0)
    with pytest.raises(ValueError):
        ReservoirSpec(0, 0.5)


def test_dense_fixed_generation():
    t = gen_fixed_dense_ternary(8, seed=1)
    assert set(np.unique(t.trits)) == {-1, 0, 1}
    assert t.scale > 0
    assert t == gen_fixed_dense_ternary(8, seed=1)
    bound = math.sqrt(6 / 16)
    w = np.random.default_rng(1).uniform(-bound, bound, size=(8, 8))
    assert t == quantize_absmean(w)


def test_spectral_radius_examples():
    assert spectral_radius(TernaryMatrix.from_trits(np.eye(4))) == pytest.approx(1.0, rel=1e-3)
    perm = np.eye(6)[[2, 0, 1, 5, 3, 4]]
    assert spectral_radius(perm) == pytest.approx(1.0, rel=1e-3)
    assert spectral_radius(np.diag([2.0, -3.0])) == pytest.approx(3.0, rel=1e-3)


@given(st.integers(0, 2**31), st.integers(4, 64))
@example(120, 4)  # nilpotent; eigvals reports ~1e-4 for the defective zero eigenvalue
def test_spectral_radius_matches_eigensolver(seed, d):
    w = gen_sparse_ternary(ReservoirSpec(d, 0.5, seed))
    try:
        est = spectral_radius(w)
    except ValueError:
        # exact integer check: W^d == 0
        assert not np.linalg.matrix_power(w.trits.astype(np.int64), d).any()
        return
    assert est == pytest.approx(eig_radius(w.dequantize()), rel=1e-3)


def test_spectral_radius_errors():
    with pytest.raises(ValueError):
        spectral_radius(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        spectral_radius(np.ones((2, 3)))
    with pytest.raises(ValueError, match="nilpotent"):
        spectral_radius(np.array([[0.0, 1.0], [0.0, 0.0]]))
    # a Jordan block converges only like log(k) / k; starving the budget must raise
    # with the last estimate attached
    with pytest.raises(ConvergenceError) as info:
        spectral_radius(np.array([[1.0, 1.0], [0.0, 1.0]]), max_iter=3)
    assert info.value.estimate > 0


def test_scaled_reservoir_has_unit_radius():
    for seed in range(10):
        d = [8, 16, 32, 64][seed % 4]
        w, lam = draw_reservoir(d, 0.85, seed)
        assert eig_radius(w.dequantize() / lam) == pytest.approx(1.0, rel=1e-3)


def _esn(d, seed, radius):
    rng = np.random.default_rng(seed)
    w_r, lam = draw_reservoir(d, 0.85, seed)
    return LIESNParams(w_in=quantize_absmean(rng.normal(size=(d, d))), w_res=w_r, lambda_max=lam,
                       b_c=rng.normal(size=d) * 0.1, leak=0.3,
                       w_out=quantize_absmean(rng.normal(size=(d, 3))), b_o=np.array([1.0, -2.0, 0.5]),
                       radius=radius)


def test_li_esn_examples():
    p = _esn(4, 0, 1.0)
    p.b_c = np.zeros(4)
    o, h = li_esn_step(np.zeros(4), np.zeros(4), p)
    assert not h.any()
    np.testing.assert_array_equal(o, p.b_o)
    p.leak = 1.0
    h_prev = np.array([0.3, -0.1, 0.7, 0.0])
    _, h = li_esn_step(np.ones(4), h_prev, p)
    np.testing.assert_array_equal(h, h_prev)
    with pytest.raises(ValueError):
        li_esn_step(np.zeros(4), np.zeros(4), LIESNParams(p.w_in, p.w_res, 0.0, p.b_c, 0.5, p.w_out, p.b_o))


def test_li_esn_scalar_oracle():
    w_in = TernaryMatrix.from_trits(np.array([[1, -1], [0, 1]]), 0.5)
    w_res = TernaryMatrix.from_trits(np.array([[0, 1], [1, 0]]), 1.0)
    w_out = TernaryMatrix.from_trits(np.array([[1], [-1]]), 2.0)
    p = LIESNParams(w_in, w_res, 1.0, np.array([0.1, -0.2]), 0.25, w_out, np.array([0.05]))
    x, h = np.array([0.4, -0.6]), np.array([0.2, 0.3])
    o, h_new = li_esn_step(x, h, p)
    c0 = math.tanh(0.5 * (0.4 * 1 + -0.6 * 0) + h[1] + 0.1)
    c1 = math.tanh(0.5 * (0.4 * -1 + -0.6 * 1) + h[0] - 0.2)
    e0, e1 = 0.25 * 0.2 + 0.75 * c0, 0.25 * 0.3 + 0.75 * c1
    assert h_new == pytest.approx([e0, e1], abs=1e-12)
    assert o == pytest.approx([2.0 * (e0 - e1) + 0.05], abs=1e-12)


def test_echo_state_convergence():
    d = 32
    p = _esn(d, 5, radius=0.9)
    rng = np.random.default_rng(11)
    xs = rng.normal(size=(200, d))
    a, b = rng.normal(size=d), rng.normal(size=d)
    start = np.linalg.norm(a - b)
    for x in xs:
        _, a = li_esn_step(x, a, p)
        _, b = li_esn_step(x, b, p)
    assert np.linalg.norm(a - b) <= 1e-3 * start


def test_draw_reservoir_skips_nilpotent_draws():
    for seed in range(20):
        w, lam = draw_reservoir(4, 0.85, seed)
        assert lam > 0 and lam == float(np.float32(lam))
        assert eig_radius(w.dequantize()) == pytest.approx(lam, rel=1e-3)


@pytest.mark.parametrize("variant,count", [("rc", 2), ("grc", 4)])
@pytest.mark.parametrize("n_layers", [1, 2, 5])
def test_fixed_storage_count_independent_of_depth(variant, count, n_layers):
    model = MatMulFreeLM(ModelConfig(d=8, n_layers=n_layers, variant=variant, context_size=8))
    assert len(model.fixed_matrices()) == count
    assert len(model.shared.matrices()) == count


def test_shared_fixed_determinism_and_validation():
    a = SharedFixed.create(8, "grc", seed=4)
    b = SharedFixed.create(8, "grc", seed=4)
    assert all(a.matrices()[k] == b.matrices()[k] for k in a.matrices())
    assert a.lambda_max == b.lambda_max > 0
    assert SharedFixed.create(8, "rc", seed=4).w_f is None
    with pytest.raises(ValueError):
        SharedFixed.create(8, "base")
    with pytest.raises(ValueError):
        SharedFixed(a.w_c, a.w_r, 0.0)
