import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aelab.numerics import (
    RankError,
    RngStream,
    givens,
    givens_pairs,
    givens_product,
    haar_unitary,
    sample_complex_gaussian,
    svd_2x2_batch,
    svd_small,
)

seeds = st.integers(min_value=0, max_value=2**32)


def test_stream_reproducible():
    a = RngStream(7, 3).complex_normal((5, 2))
    b = RngStream(7, 3).complex_normal((5, 2))
    assert np.array_equal(a, b)


def test_streams_differ():
    a = RngStream(7, 0).normal(100)
    b = RngStream(7, 1).normal(100)
    c = RngStream(7, 0).derive(0).normal(100)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_derive_is_addressable():
    root = RngStream(11)
    root.normal(1000)        # consuming the parent does not move its children
    assert np.array_equal(root.derive(4).normal(8), RngStream(11).derive(4).normal(8))


def test_complex_normal_variance():
    z = RngStream(0).complex_normal(200_000, 2.5)
    assert abs(np.mean(np.abs(z) ** 2) - 2.5) < 0.03
    assert abs(np.mean(z.real**2) - np.mean(z.imag**2)) < 0.03
    with pytest.raises(ValueError):
        RngStream(0).complex_normal(3, -1.0)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_svd_2x2_reconstructs(seed):
    h = sample_complex_gaussian(2, 2, 1.0, RngStream(seed))
    d = svd_small(h)
    assert np.max(np.abs(d.reconstruct() - h)) <= 1e-10
    assert np.allclose(d.u.conj().T @ d.u, np.eye(d.rank), atol=1e-10)
    assert np.allclose(d.v.conj().T @ d.v, np.eye(d.rank), atol=1e-10)
    assert np.all(np.diff(d.sigma) <= 0)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_svd_frobenius_and_determinant_oracle(seed):
    # sum sigma^2 = ||H||_F^2 and sigma1 sigma2 = |det H| hold for any 2x2 matrix
    h = sample_complex_gaussian(2, 2, 1.0, RngStream(seed))
    _, s, _ = svd_2x2_batch(h[None])
    assert np.isclose(np.sum(s**2), np.sum(np.abs(h) ** 2), rtol=1e-12)
    assert np.isclose(s[0, 0] * s[0, 1], abs(np.linalg.det(h)), rtol=1e-10, atol=1e-14)


def test_svd_matches_lapack_values():
    h = sample_complex_gaussian(2, 2, 1.0, RngStream(5))
    assert np.allclose(svd_small(h).sigma, np.linalg.svd(h, compute_uv=False), atol=1e-12)


def test_svd_phase_convention():
    h = sample_complex_gaussian(2, 2, 1.0, RngStream(9))
    v = svd_small(h).v
    assert np.all(np.abs(v[0].imag) < 1e-12) and np.all(v[0].real >= 0)


def test_svd_rank_one_truncates():
    a = np.array([1.0, 1j])
    b = np.array([2.0, -1.0])
    d = svd_small(np.outer(a, b))
    assert d.rank == 1
    assert np.allclose(d.reconstruct(), np.outer(a, b), atol=1e-10)


def test_svd_zero_raises():
    with pytest.raises(RankError):
        svd_small(np.zeros((2, 2)))


def test_svd_general_shapes():
    rng = RngStream(2)
    for shape in [(3, 2), (2, 4), (4, 4)]:
        h = rng.complex_normal(shape)
        assert np.allclose(svd_small(h).reconstruct(), h, atol=1e-10)
    with pytest.raises(ValueError):
        svd_small(np.ones((5, 5)))


def test_givens_entries_and_orthogonality():
    g = givens(4, 1, 3, 0.3)
    assert np.isclose(g[1, 1], np.cos(0.3)) and np.isclose(g[1, 3], -np.sin(0.3))
    assert np.allclose(g @ g.T, np.eye(4), atol=1e-15)
    for bad in [(2, 2), (3, 1), (-1, 2), (0, 4)]:
        with pytest.raises(IndexError):
            givens(4, *bad, 0.1)


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from([2, 4, 8]))
def test_givens_product_orthogonal(seed, n):
    theta = RngStream(seed).uniform(0, 2 * np.pi, n * (n - 1) // 2)
    r = givens_product(n, theta)
    assert np.max(np.abs(r @ r.T - np.eye(n))) <= 1e-10
    assert np.isclose(np.linalg.det(r), 1.0)


def test_givens_pairs_count():
    assert len(givens_pairs(8)) == 28
    with pytest.raises(ValueError):
        givens_product(4, np.zeros(5))


def test_haar_unitary():
    q = haar_unitary(2, RngStream(3), size=500)
    eye = np.einsum("bji,bjk->bik", q.conj(), q)
    assert np.allclose(eye, np.eye(2), atol=1e-12)
    # Haar: |q_00|^2 is uniform on [0, 1] for n = 2
    assert abs(np.mean(np.abs(q[:, 0, 0]) ** 2) - 0.5) < 0.05
