import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from aelab.constellations import (
    Constellation,
    DuplicatePointError,
    SerTable,
    build_ser_table,
    lattice_d4,
    load_constellation,
    load_ser_table,
    ml_detect,
    ml_detect_batch,
    save_constellation,
    save_ser_table,
    ser_union_bound,
    square_qam,
    train_gs_awgn,
)
from aelab.numerics import RngStream


def min_sq_distance(points):
    d2 = np.sum(np.abs(points[:, None] - points[None]) ** 2, axis=-1)
    d2[np.diag_indices(len(points))] = np.inf
    return d2.min()


def test_qpsk_points():
    q = square_qam(4)
    expected = {complex(a, b) / np.sqrt(2) for a in (-1, 1) for b in (-1, 1)}
    assert all(min(abs(p - e) for e in expected) < 1e-12 for p in q.points[:, 0])
    assert q.label == "qpsk"


def test_bpsk_points():
    assert np.allclose(sorted(square_qam(2).points[:, 0].real), [-1, 1])


def test_qam16_min_distance():
    q = square_qam(16)
    assert np.isclose(min_sq_distance(q.points), 4 / 10)
    assert np.isclose(q.energy, 1.0)


def test_qam_validation_and_modulo():
    with pytest.raises(ValueError):
        square_qam(32)
    # unit-energy QPSK sits at +-1/sqrt(2); modulo spans peak plus half spacing on both sides
    assert np.isclose(square_qam(4).modulo, 2 * np.sqrt(2))
    assert np.isclose(square_qam(16).modulo, 8 / np.sqrt(10))


def test_duplicates_rejected():
    with pytest.raises(DuplicatePointError):
        Constellation(np.array([1.0, 1.0, -1.0]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 20), st.integers(1, 3))
def test_normalization_idempotent(seed, m, dims):
    pts = RngStream(seed).complex_normal((m, dims), 4.0)
    c = Constellation.from_points(pts)
    assert abs(c.energy - 1.0) < 1e-12
    assert np.allclose(c.normalized().points, c.points, atol=1e-15)


def test_lattice_d4():
    w = lattice_d4(256)
    assert w.m == 256 and w.dims == 2 and w.label == "w4_256"
    raw = np.stack([w.points[:, 0].real, w.points[:, 0].imag, w.points[:, 1].real, w.points[:, 1].imag], 1)
    raw = raw / w.scale
    assert np.allclose(raw, np.round(raw), atol=1e-9)
    assert np.all(np.round(raw).sum(axis=1) % 2 == 0)
    # D4 minimum squared distance is 2 in lattice units
    assert np.isclose(min_sq_distance(w.points) / w.scale**2, 2.0)


def test_ml_detect_exact_and_ties():
    omega = Constellation(np.array([0.0, 1.0, 3.0, 2.0, -1.0]))
    assert ml_detect(2.0 * 2.0, omega, scale=2.0) == 3
    # 1.5 is equidistant to points 1 (1.0) and 3 (2.0): lowest index wins
    assert ml_detect(1.5, omega) == 1
    with pytest.raises(ValueError):
        ml_detect(np.zeros(2), omega)


def test_ml_detect_brute_force_oracle():
    rng = RngStream(6)
    omega = square_qam(16)
    idx = rng.integers(16, 10_000)
    y = 1.7 * omega.points[idx] + rng.complex_normal((10_000, 1), 0.3)
    fast = ml_detect_batch(y, omega.points, 1.7)
    slow = []
    for obs in y[:, 0]:
        best, best_d = 0, np.inf
        for k, p in enumerate(omega.points[:, 0]):
            d = abs(obs - 1.7 * p) ** 2
            if d < best_d:
                best, best_d = k, d
        slow.append(best)
    assert np.array_equal(fast, slow)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_ml_detect_scale_invariance(seed, c):
    rng = RngStream(seed)
    omega = square_qam(16)
    y = rng.complex_normal((50, 1), 1.0)
    assert np.array_equal(ml_detect_batch(y, omega.points, 0.8), ml_detect_batch(c * y, omega.points, 0.8 * c))


def test_ser_table_bpsk_q_function_oracle():
    # z = sqrt(g) p + CN(0, 1): BPSK sees real noise of variance 1/2, SER = Q(sqrt(2 g))
    snr_db = 9.6
    trials = 200_000
    table = build_ser_table(square_qam(2), [snr_db], trials, RngStream(4))
    g = 10 ** (snr_db / 10)
    exact = norm.sf(np.sqrt(2 * g))
    se = np.sqrt(exact * (1 - exact) / trials)
    assert abs(table.ser[0] - exact) <= 3 * se


def test_ser_table_properties():
    table = build_ser_table(square_qam(16), np.arange(-20, 21, 5.0), 10_000, RngStream(1))
    assert np.all(np.diff(table.ser) <= 0)
    assert np.all((table.ser >= 0) & (table.ser <= 1))
    assert table(10 ** (-2.0)) >= table(100.0)
    assert table(np.inf) == 0.0
    assert np.isclose(table(0.0), 15 / 16)
    with pytest.raises(ValueError):
        build_ser_table(square_qam(4), [], 100, RngStream(0))


def test_ser_table_reproducible_and_interpolates():
    a = build_ser_table(square_qam(4), [0, 5, 10], 10_000, RngStream(2))
    b = build_ser_table(square_qam(4), [0, 5, 10], 10_000, RngStream(2))
    assert np.array_equal(a.ser, b.ser)
    mid = a(10 ** 0.25)
    assert np.isclose(np.log(mid), 0.5 * (np.log(a.ser[0]) + np.log(a.ser[1])))


def test_union_bound_dominates_monte_carlo_tail():
    table = build_ser_table(square_qam(4), [12.0], 200_000, RngStream(3))
    assert table.ser[0] <= ser_union_bound(square_qam(4).points, 10 ** 1.2)[0] * 1.05


def test_constellation_file_roundtrip(tmp_path):
    q = square_qam(4)
    save_constellation(q, tmp_path / "qpsk.txt")
    back = load_constellation(tmp_path / "qpsk.txt")
    assert np.max(np.abs(back.points - q.points)) <= 1e-12
    w = lattice_d4()
    save_constellation(w, tmp_path / "w4.txt")
    assert load_constellation(tmp_path / "w4.txt").dims == 2
    assert (tmp_path / "qpsk.txt").read_text().splitlines()[0] == "1 4"


def test_constellation_file_errors(tmp_path):
    p = tmp_path / "dup.txt"
    p.write_text("1 3\n1 0\n1 0\n-1 0\n")
    with pytest.raises(DuplicatePointError):
        load_constellation(p)
    p.write_text("1 2\n1 0 5\n-1 0\n")
    with pytest.raises(ValueError):
        load_constellation(p)
    p.write_text("one two\n")
    with pytest.raises(ValueError):
        load_constellation(p)


def test_loader_renormalizes(tmp_path):
    p = tmp_path / "big.txt"
    p.write_text("1 2\n3 0\n-3 0\n")
    c = load_constellation(p)
    assert np.isclose(c.energy, 1.0) and np.isclose(c.scale, 1 / 3)


def test_ser_table_file_roundtrip(tmp_path):
    t = build_ser_table(square_qam(4), [0, 5, 10], 10_000, RngStream(2))
    save_ser_table(t, tmp_path / "t.txt")
    back = load_ser_table(tmp_path / "t.txt")
    assert isinstance(back, SerTable)
    assert np.array_equal(back.ser, t.ser) and np.array_equal(back.trials, t.trials)
    assert np.isclose(back(3.0), t(3.0))


def test_gs_bpsk_is_antipodal():
    # trained at low SNR, where errors are frequent enough to keep the gradient alive
    c = train_gs_awgn(2, 1, 0.0, RngStream(0), batch=512, steps=600, lr=1e-2)
    p = c.points[:, 0]
    angle = np.degrees(np.angle(p[1] / p[0]))
    assert abs(abs(angle) - 180.0) <= 5.0
    assert abs(c.energy - 1.0) <= 1e-9


def test_gs_qpsk_min_distance():
    c = train_gs_awgn(4, 1, 10.0, RngStream(1), batch=512, steps=1000, lr=1e-2)
    assert abs(np.sqrt(min_sq_distance(c.points)) - np.sqrt(2)) <= 0.05 * np.sqrt(2)
    assert c.info["converged"]


def test_gs_validation():
    with pytest.raises(ValueError):
        train_gs_awgn(1, 1, 10.0, RngStream(0))


def test_gs_qam_warm_start():
    c = train_gs_awgn(16, 2, 10.0, RngStream(2), batch=64, steps=1, lr=1e-9, rx_hidden=(16,), init="qam")
    q = square_qam(4).points[:, 0]
    grid = np.array([[a, b] for a in q for b in q])
    assert np.max(np.abs(c.points - grid)) < 1e-6
    with pytest.raises(ValueError):
        train_gs_awgn(8, 2, 10.0, RngStream(0), steps=1, init="qam")
