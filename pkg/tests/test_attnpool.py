import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alstm.attnpool import PoolingParams, attend, attention_weights, weighted_pool
from alstm.diffcore import Tensor, grad_check
from alstm.errors import DimensionError, EmptySupportError


def test_zero_weights_uniform_over_valid_steps():
    hs = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    valid = np.array([1, 1, 0, 1, 0], dtype=bool)
    w = attention_weights(hs, PoolingParams.zeros(3), valid).data
    assert np.allclose(w, [1 / 3, 1 / 3, 0, 1 / 3, 0], atol=1e-15)
    assert w[2] == 0 and w[4] == 0


def test_single_valid_step():
    hs = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    w = attention_weights(hs, PoolingParams(Tensor([3.0, -1.0])), np.array([False, True, False])).data
    assert w.tolist() == [0.0, 1.0, 0.0]


def test_closed_form_energies():
    hs = Tensor([[np.log(2), 0.0], [0.0, 0.0]])
    w = attention_weights(hs, PoolingParams(Tensor([1.0, 0.0]))).data
    assert np.allclose(w, [2 / 3, 1 / 3], atol=1e-15)


def test_no_valid_steps():
    with pytest.raises(EmptySupportError):
        attention_weights(Tensor(np.ones((2, 3))), PoolingParams.zeros(3), np.zeros(2, bool))


def test_dimension_errors():
    with pytest.raises(DimensionError):
        attention_weights(Tensor(np.ones((2, 3))), PoolingParams.zeros(4))
    with pytest.raises(DimensionError):
        weighted_pool(Tensor(np.ones((2, 3))), Tensor(np.ones(3) / 3))


def test_uniform_pool_is_mean():
    rng = np.random.default_rng(1)
    hs = rng.normal(size=(6, 4))
    valid = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
    out = attend(Tensor(hs), PoolingParams.zeros(4), valid)
    assert np.max(np.abs(out.vector.data - hs[:4].mean(axis=0))) <= 1e-12


def test_one_hot_weights_select_step():
    hs = np.random.default_rng(2).normal(size=(4, 3))
    out = weighted_pool(Tensor(hs), Tensor([0.0, 0.0, 1.0, 0.0]))
    assert np.array_equal(out.vector.data, hs[2])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_convex_hull_and_padding(steps, dim, seed):
    rng = np.random.default_rng(seed)
    n_valid = int(rng.integers(1, steps + 1))
    valid = np.arange(steps) < n_valid
    hs = rng.normal(size=(steps, dim))
    W = PoolingParams(Tensor(rng.normal(size=dim) * 2))
    out = attend(Tensor(hs), W, valid)
    att = out.attention.data
    assert abs(att[valid].sum() - 1) <= 1e-12
    assert (att[~valid] == 0).all()
    v = out.vector.data
    lo, hi = hs[valid].min(axis=0), hs[valid].max(axis=0)
    assert (v >= lo - 1e-12).all() and (v <= hi + 1e-12).all()
    junk = hs.copy()
    junk[~valid] = rng.normal(size=junk[~valid].shape) * 1e3
    assert np.array_equal(attend(Tensor(junk), W, valid).vector.data, v)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    hs = rng.normal(size=(7, 3))
    valid = np.array([1, 0, 1, 1, 0, 1, 1], dtype=bool)
    W = PoolingParams(Tensor(rng.normal(size=3)))
    perm = rng.permutation(7)
    a = attend(Tensor(hs), W, valid)
    b = attend(Tensor(hs[perm]), W, valid[perm])
    assert np.allclose(b.attention.data, a.attention.data[perm], rtol=0, atol=1e-15)
    assert np.allclose(b.vector.data, a.vector.data, rtol=0, atol=1e-12)


def test_batched_rows_pool_independently():
    rng = np.random.default_rng(5)
    hs = rng.normal(size=(2, 4, 3))
    valid = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    W = PoolingParams(Tensor(rng.normal(size=3)))
    out = attend(Tensor(hs), W, valid)
    for b in range(2):
        row = attend(Tensor(hs[b]), W, valid[b])
        assert np.allclose(out.vector.data[b], row.vector.data, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    hs = Tensor(rng.normal(size=(5, 3)))
    W = Tensor(rng.normal(size=3))
    valid = np.array([1, 1, 1, 0, 1], dtype=bool)
    readout = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.5, 1.5, size=3)
    err = grad_check(lambda h, w: (attend(h, PoolingParams(w), valid).vector * readout).sum(), [hs, W])
    assert err < 1e-6
