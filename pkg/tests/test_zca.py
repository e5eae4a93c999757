"""Streaming whitening: shrinkage, transform identities, boundary refreshes."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hdnirs.core import NumericalError, ValidationError
from hdnirs.zca import (ZcaState, shrink, whiten, whitening_transform,
                        zca_init, zca_update)


def spd(rng, n, cond=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    e = np.geomspace(1.0, cond, n)
    return (q * e) @ q.T


def test_shrink_formula_and_bounds():
    rng = np.random.default_rng(0)
    c = spd(rng, 5)
    lam = 0.3
    assert_allclose(shrink(c, lam), 0.7 * c + 0.3 * np.diag(np.diag(c)))
    assert_array_equal(shrink(c, 0.0), c)
    assert_array_equal(shrink(c, 1.0), np.diag(np.diag(c)))
    for bad in (-0.1, 1.1):
        with pytest.raises(ValidationError, match="outside"):
            shrink(c, bad)


def test_whitening_transform_identities():
    rng = np.random.default_rng(1)
    c = spd(rng, 8, cond=1e4)
    w = whitening_transform(c)
    assert np.abs(w - w.T).max() < 1e-10
    assert np.abs(w @ c @ w - np.eye(8)).max() < 1e-8
    # inverse square root on a known diagonal
    d = np.diag([4.0, 9.0, 16.0])
    assert_allclose(whitening_transform(d), np.diag([0.5, 1 / 3, 0.25]),
                    atol=1e-12)


def test_whitening_floor_damps_null_directions():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 6))
    c = a.T @ a  # rank 3 of 6
    w = whitening_transform(c)
    assert np.all(np.isfinite(w))
    e = np.linalg.eigvalsh(c)
    # gain in the null space is capped by the relative floor
    assert np.abs(w).max() <= 1.0 / np.sqrt(1e-12 * e[-1]) + 1e-9
    with pytest.raises(NumericalError, match="positive eigenvalue"):
        whitening_transform(np.zeros((2, 2)))


def test_init_moment_is_uncentered_mean():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 4)) + 2.0
    st = zca_init(x, lam=0.2)
    assert_allclose(st.cov, x.T @ x / 40)
    assert st.count == 40
    assert_allclose(st.w, whitening_transform(shrink(st.cov, 0.2)))


def test_init_validation_and_small_sample_warning():
    rng = np.random.default_rng(4)
    with pytest.raises(ValidationError, match="zero samples"):
        zca_init(np.empty((0, 3)))
    with pytest.raises(ValidationError, match="time x channels"):
        zca_init(np.zeros(5))
    with pytest.warns(UserWarning, match="2 samples for 30 channels"):
        zca_init(rng.standard_normal((2, 30)))


def test_incremental_matches_batch_every_step():
    rng = np.random.default_rng(5)
    n, total = 20, 300
    stream = rng.standard_normal((total, n))
    init = stream[:50]
    bounds = (80, 150, 151, 290)
    st = zca_init(init, lam=0.4, boundaries=bounds)
    for t in range(50, total):
        zca_update(st, stream[t])
        k = t + 1
        batch = stream[:k].T @ stream[:k] / k
        assert np.abs(st.cov - batch).max() < 1e-10
        assert st.count == k
        # the live transform always equals the one refit at the last boundary
        last = max([b for b in bounds if b <= k], default=50)
        ref = whitening_transform(shrink(stream[:last].T @ stream[:last] / last, 0.4))
        assert np.abs(st.w - ref).max() < 1e-10


def test_refresh_only_at_boundaries():
    rng = np.random.default_rng(6)
    st = zca_init(rng.standard_normal((30, 3)), boundaries=(33, 36))
    w0 = st.w.copy()
    zca_update(st, rng.standard_normal(3))
    zca_update(st, rng.standard_normal(3))
    assert_array_equal(st.w, w0)  # 32 < 33: untouched
    zca_update(st, rng.standard_normal(3))
    assert not np.array_equal(st.w, w0)


def test_boundaries_already_passed_are_skipped():
    rng = np.random.default_rng(7)
    st = zca_init(rng.standard_normal((30, 3)), boundaries=(10, 31))
    w0 = st.w.copy()
    zca_update(st, rng.standard_normal(3))  # count 31 refreshes; 10 never fires
    assert not np.array_equal(st.w, w0)
    assert st._next_boundary == len(st.boundaries)


def test_update_validates_sample_shape():
    st = zca_init(np.random.default_rng(8).standard_normal((20, 4)))
    with pytest.raises(ValidationError, match="length"):
        zca_update(st, np.zeros(5))


def test_whiten_vector_and_block_agree():
    rng = np.random.default_rng(9)
    st = zca_init(rng.standard_normal((100, 5)), lam=0.1)
    x = rng.standard_normal((7, 5))
    block = whiten(st, x)
    rows = np.stack([whiten(st, r) for r in x])
    assert_allclose(block, rows, atol=1e-14)
    y = whiten(st, rng.standard_normal(5))
    assert y.shape == (5,)


def test_whitened_training_block_is_decorrelated():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((5, 5))
    x = rng.standard_normal((4000, 5)) @ a.T
    st = zca_init(x, lam=0.0)
    y = whiten(st, x)
    m = y.T @ y / x.shape[0]
    assert np.abs(m - np.eye(5)).max() < 1e-8
