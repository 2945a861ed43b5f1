import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from aelab.baselines import alamouti_link
from aelab.channels import NoiseSpec
from aelab.constellations import ml_detect_batch, square_qam
from aelab.evaluation import (
    BlerCurve,
    BlerPoint,
    Link,
    StopRule,
    estimate_mi,
    evaluate_bler,
    snr_at_bler,
    sweep,
    wilson_half_width,
)
from aelab.numerics import RngStream


def bpsk_link():
    pts = np.array([-1.0, 1.0], dtype=complex)

    def encode(n, rng):
        m = rng.integers(2, n)
        return m[:, None], pts[m]

    def channel(x, n0, rng):
        return x + rng.complex_normal(x.shape, n0)

    def detect(y):
        return ml_detect_batch(y, pts)[:, None]

    return Link(encode, channel, detect, name="bpsk")


def test_bpsk_matches_q_function():
    noise = NoiseSpec(7.0, "ebn0", rate=1.0)
    pt = evaluate_bler(bpsk_link(), noise, StopRule(1000, 10**7), RngStream(3))
    exact = norm.sf(np.sqrt(2 * 10 ** 0.7))
    assert abs(pt.bler - exact) <= 3 * pt.ci_half_width
    assert pt.binding == "errors" and pt.errors >= 1000


def test_noiseless_hits_trial_cap():
    pt = evaluate_bler(bpsk_link(), 0.0, StopRule(10, 50_000, 8192), RngStream(0))
    assert pt.errors == 0 and pt.trials == 50_000 and pt.floor_limited


def test_zero_trial_rule_rejected():
    with pytest.raises(ValueError):
        StopRule(10, 0)
    link = bpsk_link()
    link.group = 16
    with pytest.raises(ValueError):
        evaluate_bler(link, 0.1, StopRule(10, 8), RngStream(0))


def test_deterministic_and_shard_parallel():
    link = alamouti_link(square_qam(4))
    rule = StopRule(300, 10**6, 4096)
    noise = NoiseSpec(10.0, nt=2)
    a = evaluate_bler(link, noise, rule, RngStream(5), workers=1)
    b = evaluate_bler(link, noise, rule, RngStream(5), workers=1)
    c = evaluate_bler(link, noise, rule, RngStream(5), workers=3)
    assert a == b == c


def test_single_point_sweep_equals_evaluate():
    link = bpsk_link()
    rule = StopRule(200, 10**6)
    curve = sweep(link, [4.0], rule, RngStream(8), NoiseSpec(0.0))
    pt = evaluate_bler(link, NoiseSpec(4.0), rule, RngStream(8))
    assert curve.points == [pt]


def test_sweep_monotone_and_sorted():
    curve = sweep(bpsk_link(), [8.0, 0.0, 4.0, 2.0, 6.0], StopRule(500, 10**6), RngStream(1), NoiseSpec(0.0))
    assert list(curve.snr_db) == [0.0, 2.0, 4.0, 6.0, 8.0]
    for p, q in zip(curve.points, curve.points[1:]):
        assert q.bler <= p.bler + 3 * (p.ci_half_width + q.ci_half_width)


def test_alamouti_diversity_slope():
    link = alamouti_link(square_qam(4))
    noise = NoiseSpec(0.0, nt=2)
    rule = StopRule(100, 10**8, 2**16)
    lo = evaluate_bler(link, noise.with_db(20.0), rule, RngStream(2))
    hi = evaluate_bler(link, noise.with_db(30.0), rule, RngStream(2))
    assert hi.bler / lo.bler <= 10 ** -1.5


def test_wilson_interval():
    assert wilson_half_width(0, 0) == 0.5
    assert wilson_half_width(0, 1000) > 0
    # shrinks like 1/sqrt(n)
    r = wilson_half_width(100, 10_000) / wilson_half_width(400, 40_000)
    assert abs(r - 2.0) < 0.05


def test_csv_roundtrip(tmp_path):
    curve = BlerCurve("x", [BlerPoint(0.0, 10, 100), BlerPoint(2.5, 3, 1000)])
    path = tmp_path / "c.csv"
    curve.to_csv(path)
    raw = path.read_bytes()
    assert raw.startswith(b"snr_db,bler,errors,trials,ci_half_width\n") and b"\r" not in raw
    back = BlerCurve.from_csv(path)
    assert [(p.snr_db, p.errors, p.trials) for p in back.points] == [(0.0, 10, 100), (2.5, 3, 1000)]


def test_snr_at_bler():
    curve = BlerCurve("x", [BlerPoint(0, 100, 1000), BlerPoint(10, 1, 1000)])
    assert np.isclose(snr_at_bler(curve, 1e-2), 5.0)
    assert np.isnan(snr_at_bler(curve, 1e-5))


def qpsk_mi_quadrature(n0):
    # QPSK = two independent BPSK components with amplitude 1/sqrt(2) and noise variance n0/2
    a = 1 / np.sqrt(2)
    s2 = n0 / 2

    def integrand(y):
        return norm.pdf(y, a, np.sqrt(s2)) * np.logaddexp(0, -2 * a * y / s2) / np.log(2)

    loss, _ = integrate.quad(integrand, a - 12 * np.sqrt(s2), a + 12 * np.sqrt(s2), limit=200)
    return 2 * (1 - loss)


def test_mi_qpsk_quadrature_oracle():
    n0 = 10 ** -0.5
    mi = estimate_mi(square_qam(4), n0, 200_000, RngStream(4))
    assert abs(mi - qpsk_mi_quadrature(n0)) <= 0.02


def test_mi_limits():
    q = square_qam(16)
    assert abs(estimate_mi(q, 1e-6, 100_000, RngStream(0)) - 4.0) <= 0.01
    assert estimate_mi(q, 0.0, 10, RngStream(0)) == 4.0
    assert estimate_mi(q, 1e4, 100_000, RngStream(0)) <= 0.05
    assert estimate_mi(q, 0.3, 100_000, RngStream(1)) <= 4.0
