import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from aelab.baselines import (
    BIT_SPLITS,
    SearchTooLargeError,
    alamouti_candidates,
    alamouti_combine,
    alamouti_encode,
    alamouti_link,
    broadcast_link,
    cmod,
    precoding_matrix,
    stbc_ml_detect,
    svd_allocate,
    svd_allocate_batch,
    svd_transceive,
    time_share_system,
    vp_search,
    vp_search_batch,
    zf_precode,
)
from aelab.channels import NoiseSpec, fixed_singular_channel
from aelab.constellations import build_ser_table, lattice_d4, ml_detect_batch, square_qam
from aelab.evaluation import StopRule, evaluate_bler
from aelab.numerics import RngStream, svd_2x2_batch


@pytest.fixture(scope="module")
def qam_tables():
    formats = {c: square_qam(c) for c in (2, 4, 8, 16)}
    grid = np.arange(-5.0, 30.5, 1.0)
    tables = {c: build_ser_table(f, grid, 10_000, RngStream(c)) for c, f in formats.items()}
    return formats, tables


# --- Alamouti -----------------------------------------------------------------------

def test_alamouti_encode_example():
    x = alamouti_encode(np.array([1 + 1j, -1]))
    assert np.allclose(x[:, 0], [1 + 1j, -1])
    assert np.allclose(x[:, 1], [1, 1 - 1j])
    assert np.all(alamouti_encode(np.zeros(2)) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_alamouti_orthogonal(seed):
    s = RngStream(seed).complex_normal(2)
    x = alamouti_encode(s)
    assert np.allclose(x.conj().T @ x, np.sum(np.abs(s) ** 2) * np.eye(2), atol=1e-12)


def test_alamouti_combine_identity():
    rng = RngStream(1)
    s = rng.complex_normal((100, 2))
    h = rng.complex_normal((100, 1, 2))
    y = (h @ alamouti_encode(s))[:, 0, :]
    stats = alamouti_combine(y, h[:, 0, :])
    gain = np.sum(np.abs(h[:, 0, :]) ** 2, axis=-1)[:, None]
    assert np.max(np.abs(stats / gain - s)) <= 1e-12
    one = alamouti_combine(alamouti_encode(s[0])[0], np.array([1.0, 0.0]))
    assert np.allclose(one, s[0])


def test_alamouti_combining_equals_exhaustive_ml():
    omega = square_qam(4)
    rng = RngStream(2)
    n = 10_000
    cands = alamouti_candidates(omega)
    msgs = rng.integers(16, n)
    h = rng.complex_normal((n, 1, 2))
    y = h @ alamouti_encode(cands[msgs]) + rng.complex_normal((n, 1, 2), 0.3)
    ml = stbc_ml_detect(y, h, omega)
    stats = alamouti_combine(y[:, 0, :], h[:, 0, :])
    gain = np.sum(np.abs(h[:, 0, :]) ** 2, axis=-1)
    comb = ml_detect_batch(stats[:, 0], omega.points[:, 0], gain) * 4 + ml_detect_batch(stats[:, 1], omega.points[:, 0], gain)
    assert np.array_equal(ml, comb)
    assert np.mean(ml != msgs) > 0.01      # the comparison is not vacuous


def test_stbc_ml_noiseless_and_guard():
    rng = RngStream(3)
    omega = square_qam(16)
    msgs = rng.integers(256, 50)
    h = rng.complex_normal((50, 2, 2))
    y = h @ alamouti_encode(alamouti_candidates(omega)[msgs])
    assert np.array_equal(stbc_ml_detect(y, h, omega), msgs)
    assert len(alamouti_candidates(lattice_d4(), joint=True)) == 256
    with pytest.raises(SearchTooLargeError):
        stbc_ml_detect(y, h, omega, max_candidates=100)


def test_alamouti_link_power():
    link = alamouti_link(square_qam(4), pt=1.0)
    _, x = link.encode(20_000, RngStream(0))
    per_use = np.mean(np.sum(np.abs(x) ** 2, axis=(1,)), axis=0)
    assert np.allclose(per_use, 1.0, atol=0.03)


# --- SVD allocation -----------------------------------------------------------------

def test_allocation_strong_first_stream(qam_tables):
    _, tables = qam_tables
    h = np.diag([2.0, 0.01]).astype(complex)
    res = svd_allocate(h, qam_tables[0], 1.0, 1.0, tables)
    assert res.cardinalities == (16, 1)


def test_allocation_symmetric(qam_tables):
    formats, _ = qam_tables
    # identical tables per cardinality make the problem symmetric in the streams
    g = np.arange(-5.0, 30.5, 1.0)
    tab = build_ser_table(square_qam(4), g, 10_000, RngStream(9))
    tables = {2: tab, 4: tab, 8: tab, 16: tab}
    res = svd_allocate(np.eye(2, dtype=complex), formats, 1.0, 0.05, tables, splits=((4, 4),))
    assert res.cardinalities == (4, 4)
    assert np.isclose(res.powers[0], 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5.0, 25.0))
def test_allocation_constraints_and_optimality(qam_tables, seed, snr_db):
    _, tables = qam_tables
    h = RngStream(seed).complex_normal((8, 2, 2))
    _, s, _ = svd_2x2_batch(h)
    n0 = 10 ** (-snr_db / 10)
    k, p1, bler = svd_allocate_batch(s, tables, 1.0, n0)
    for i in range(8):
        c1, c2 = BIT_SPLITS[k[i]]
        assert c1 * c2 == 16
        assert 0.0 <= p1[i] <= 1.0
    # never worse than QPSK/QPSK at equal power
    eq = 1 - (1 - tables[4](s[:, 0] ** 2 * 0.5 / n0)) * (1 - tables[4](s[:, 1] ** 2 * 0.5 / n0))
    assert np.all(bler <= eq + 1e-12)


def test_allocation_matches_brute_force(qam_tables):
    _, tables = qam_tables
    s = np.array([[1.3, 0.4]])
    n0 = 0.05
    k, p1, bler = svd_allocate_batch(s, tables, 1.0, n0)
    best = (np.inf, None)
    for frac in np.linspace(0, 1, 101)[::-1]:
        for c1, c2 in BIT_SPLITS:
            e1 = 0.0 if c1 == 1 else tables[c1](s[0, 0] ** 2 * frac / n0)
            e2 = 0.0 if c2 == 1 else tables[c2](s[0, 1] ** 2 * (1 - frac) / n0)
            val = 1 - (1 - e1) * (1 - e2)
            if val < best[0]:
                best = (val, (c1, c2, frac))
    assert np.isclose(bler[0], best[0])
    assert BIT_SPLITS[k[0]] == best[1][:2] and np.isclose(p1[0], best[1][2])


def test_allocation_needs_tables():
    with pytest.raises(ValueError):
        svd_allocate_batch(np.ones((1, 2)), {}, 1.0, 1.0)


def test_svd_transceive_noiseless_and_power(qam_tables):
    formats, _ = qam_tables
    rng = RngStream(4)
    h = rng.complex_normal((200, 2, 2))
    cards = np.tile([4, 4], (200, 1))
    s = rng.integers(4, (200, 2))
    out = svd_transceive(h, s, np.full((200, 2), 0.5), formats, cards, 0.0, rng)
    assert np.array_equal(out, s)


def test_svd_transceive_product_form_oracle(qam_tables):
    # QPSK at gamma: SER = 1 - (1 - Q(sqrt(gamma)))^2 per stream
    formats, _ = qam_tables
    n = 100_000
    rng = RngStream(5)
    sigma = np.array([1.0, 0.5])
    h = fixed_singular_channel(sigma, rng, size=n).h
    n0 = 0.5 / 10 ** 0.8
    s = rng.integers(4, (n, 2))
    out = svd_transceive(h, s, np.full((n, 2), 0.5), formats, np.tile([4, 4], (n, 1)), n0, rng)
    errors = np.any(out != s, axis=1).mean()
    ser = [1 - (1 - norm.sf(np.sqrt(g))) ** 2 for g in sigma**2 * 0.5 / n0]
    pred = 1 - (1 - ser[0]) * (1 - ser[1])
    assert abs(errors - pred) <= 3 * np.sqrt(pred * (1 - pred) / n)


# --- precoding ----------------------------------------------------------------------

def test_zf_identity_channel():
    w = precoding_matrix(np.eye(2))
    assert np.allclose(w, np.eye(2))
    x, alpha = zf_precode(np.eye(2), np.array([1.0, -1.0]), pt=2.0)
    assert np.allclose(x, alpha * np.array([1.0, -1.0]))


def test_zf_cancels_interference():
    rng = RngStream(6)
    h = rng.complex_normal((100, 2, 2))
    s = square_qam(4).points[rng.integers(4, (100, 2)), 0]
    x, alpha = zf_precode(h, s)
    y = np.einsum("bij,bj->bi", h, x)
    assert np.max(np.abs(y / alpha[:, None] - s)) <= 1e-10


def test_regularized_matches_direct_inverse():
    rng = RngStream(7)
    h = rng.complex_normal((2, 2))
    beta = 0.3
    direct = np.linalg.solve(h.conj().T @ h + beta * np.eye(2), h.conj().T)
    # H^H (H H^H + b I)^-1 == (H^H H + b I)^-1 H^H (push-through identity)
    assert np.max(np.abs(precoding_matrix(h, beta) - direct)) <= 1e-12


def test_zf_power_over_message_set():
    rng = RngStream(8)
    h = rng.complex_normal((2, 2))
    pts = square_qam(4).points[:, 0]
    tuples = np.array(list(itertools.product(pts, repeat=2)))
    x, alpha = zf_precode(np.broadcast_to(h, (16, 2, 2)), tuples, 0.1, pt=1.0)
    assert abs(np.mean(np.sum(np.abs(x) ** 2, axis=1)) - 1.0) <= 1e-9


def test_singular_channel_raises():
    with pytest.raises(np.linalg.LinAlgError):
        precoding_matrix(np.ones((2, 2)))


def test_cmod_examples():
    assert np.isclose(cmod(1.5, 2), -0.5)
    assert np.isclose(cmod(-1 + 2.5j, 2), -1 + 0.5j)
    with pytest.raises(ValueError):
        cmod(1.0, 0.0)


def test_cmod_periodicity():
    rng = RngStream(9)
    x = rng.uniform(-10, 10, 100_000) + 1j * rng.uniform(-10, 10, 100_000)
    k = rng.integers(41, 100_000) - 20
    m = rng.integers(41, 100_000) - 20
    a = cmod(x, 2.0)
    assert np.all((a.real >= -1) & (a.real < 1) & (a.imag >= -1) & (a.imag < 1))
    assert np.allclose(cmod(x + 2 * k + 2j * m, 2.0), a, atol=1e-9)


def test_vp_examples():
    p = vp_search(np.eye(2), np.array([0.3 - 0.2j, -0.9 + 0.5j]), 2.0)
    assert np.allclose(p, 0)
    p = vp_search(np.eye(2), np.array([2.2, 0.0]), 2.0)
    assert np.allclose(p, [-2, 0])
    assert np.isclose(abs(2.2 + p[0]), 0.2)
    with pytest.raises(SearchTooLargeError):
        vp_search(np.eye(3), np.zeros(3), 2.0, bound=5, max_size=10**6)


def test_vp_nested_oracle():
    rng = RngStream(10)
    a = 2 * np.sqrt(2)
    checked = 0
    for _ in range(40):
        w = rng.complex_normal((2, 2))
        s = square_qam(4).points[rng.integers(4, 2), 0]
        p5 = vp_search(w, s, a, bound=5)
        p2 = vp_search(w, s, a, bound=2)
        k = np.concatenate([p5.real, p5.imag]) / a
        if np.all(np.abs(k) < 2):
            assert np.allclose(p5, p2)
            checked += 1
    assert checked > 20


def test_vp_batch_matches_exhaustive():
    rng = RngStream(11)
    a = 2 * np.sqrt(2)
    w = rng.complex_normal((30, 2, 2))
    s = square_qam(4).points[rng.integers(4, (30, 2)), 0]
    fast = vp_search_batch(w, s, a, bound=3)
    for i in range(30):
        slow = vp_search(w[i], s[i], a, bound=3)
        obj = lambda p: np.sum(np.abs(w[i] @ (s[i] + p)) ** 2)   # noqa: E731
        assert np.isclose(obj(fast[i]), obj(slow))
        assert obj(fast[i]) <= obj(np.zeros(2)) + 1e-12


def test_broadcast_links_noiseless():
    for mode in ("zf", "vp"):
        link = broadcast_link(square_qam(4), mode=mode, xi=0.0)
        pt = evaluate_bler(link, NoiseSpec(np.inf, nt=2), StopRule(1, 1600), RngStream(0), user=None)
        assert pt.errors == 0 and pt.trials == 1600


# --- time sharing -------------------------------------------------------------------

def test_time_share_rate_and_power():
    link = time_share_system(square_qam(16), users=2, nb=4)
    assert link.rate == 2.0
    msgs, x = link.encode(20_000, RngStream(1))
    assert np.all(x[0, :, 2:] == 0) and np.all(x[1, :, :2] == 0)
    block = np.mean(np.sum(np.abs(x) ** 2, axis=-1), axis=1)
    assert np.allclose(block, 4.0, rtol=0.03)
    active = np.mean(np.abs(x[0, :, :2]) ** 2)
    assert np.isclose(active, 2.0, rtol=0.03)
    with pytest.raises(ValueError):
        time_share_system(square_qam(16), users=3, nb=4)


def test_time_share_noiseless():
    for omega in (square_qam(16), lattice_d4()):
        link = time_share_system(omega, 2, 4)
        pt = evaluate_bler(link, 0.0, StopRule(1, 4096), RngStream(2), user=None)
        assert pt.errors == 0
