"""Monte Carlo block-error-rate estimation and mutual information."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channels import NoiseSpec
from .numerics import RngStream

__all__ = [
    "Link",
    "StopRule",
    "BlerPoint",
    "BlerCurve",
    "wilson_half_width",
    "evaluate_bler",
    "sweep",
    "snr_at_bler",
    "estimate_mi",
]


@dataclass
class Link:
    """A transmit/channel/detect chain simulated on batches of blocks.

    ``encode(n, rng) -> (messages, tx)`` with ``messages`` of shape
    ``(n, users)``; ``channel(tx, n0, rng) -> rx``; ``detect(rx) -> estimates``
    shaped like ``messages``. ``group`` is the granularity of ``n`` for links
    that transmit complete message sets per channel draw.
    """

    encode: callable
    channel: callable
    detect: callable
    users: int = 1
    name: str = "link"
    group: int = 1
    rate: float = None


@dataclass(frozen=True)
class StopRule:
    """Stop once ``min_errors`` are counted or ``max_trials`` are spent."""

    min_errors: int = 1000
    max_trials: int = 10**8
    shard_size: int = 8192

    def __post_init__(self):
        if self.max_trials < 1 or self.shard_size < 1:
            raise ValueError("stop rule needs at least one trial")


def wilson_half_width(errors, trials, z=1.959963984540054):
    """Half-width of the 95% Wilson score interval."""
    if trials == 0:
        return 0.5
    p = errors / trials
    denom = 1.0 + z * z / trials
    return z * np.sqrt(p * (1 - p) / trials + z * z / (4.0 * trials * trials)) / denom


@dataclass(frozen=True)
class BlerPoint:
    snr_db: float
    errors: int
    trials: int
    binding: str = "errors"

    @property
    def bler(self) -> float:
        return self.errors / self.trials

    @property
    def ci_half_width(self) -> float:
        return wilson_half_width(self.errors, self.trials)

    @property
    def floor_limited(self) -> bool:
        return self.binding == "trials"


@dataclass
class BlerCurve:
    name: str
    points: list = field(default_factory=list)

    @property
    def snr_db(self):
        return np.array([p.snr_db for p in self.points])

    @property
    def bler(self):
        return np.array([p.bler for p in self.points])

    def to_csv(self, path):
        rows = ["snr_db,bler,errors,trials,ci_half_width"]
        for p in self.points:
            rows.append(f"{p.snr_db:g},{p.bler:.10g},{p.errors},{p.trials},{p.ci_half_width:.10g}")
        Path(path).write_bytes(("\n".join(rows) + "\n").encode("ascii"))

    @classmethod
    def from_csv(cls, path, name=None):
        lines = Path(path).read_text().strip().split("\n")
        pts = []
        for line in lines[1:]:
            snr, _, err, trials, _ = line.split(",")
            pts.append(BlerPoint(float(snr), int(err), int(trials)))
        return cls(name or Path(path).stem, pts)


def _run_shard(link, n, n0, rng, user):
    msgs, tx = link.encode(n, rng)
    est = link.detect(link.channel(tx, n0, rng))
    wrong = est != msgs
    if user is None:
        return int(np.count_nonzero(wrong.any(axis=1)))
    return int(np.count_nonzero(wrong[:, user]))


def evaluate_bler(link: Link, noise, rule: StopRule, rng: RngStream, user=0, workers: int = 1) -> BlerPoint:
    """Estimate the block error rate at one noise level.

    Trials run in fixed-size shards; shard ``k`` draws from ``rng.derive(k)``
    and shards are reduced in index order, so the result does not depend on
    ``workers``. ``user`` selects whose message defines an error
    (``None``: any user).
    """
    n0 = noise.n0 if isinstance(noise, NoiseSpec) else float(noise)
    snr_db = noise.value_db if isinstance(noise, NoiseSpec) else float("nan")
    group = max(1, link.group)
    shard = max(group, (rule.shard_size // group) * group)
    budget = (rule.max_trials // group) * group
    if budget == 0:
        raise ValueError("stop rule allows zero trials")

    def size_of(k):
        return min(shard, budget - k * shard)

    errors = trials = 0
    k = 0
    binding = "trials"
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while trials < budget:
            wave = []
            for j in range(max(1, workers)):
                idx = k + j
                if idx * shard >= budget:
                    break
                wave.append(idx)
            if pool is None:
                results = [_run_shard(link, size_of(i), n0, rng.derive(i), user) for i in wave]
            else:
                futures = [pool.submit(_run_shard, link, size_of(i), n0, rng.derive(i), user) for i in wave]
                results = [f.result() for f in futures]
            for i, e in zip(wave, results):
                errors += e
                trials += size_of(i)
                k = i + 1
                if errors >= rule.min_errors:
                    binding = "errors"
                    break
            if binding == "errors":
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return BlerPoint(snr_db, errors, trials, binding)


def sweep(link: Link, snrs_db, rule: StopRule, rng: RngStream, noise: NoiseSpec = None, user=0,
          workers: int = 1, name=None) -> BlerCurve:
    """BLER at each SNR, ascending. Every point reuses the same master stream
    (common random numbers across SNRs)."""
    noise = noise or NoiseSpec(0.0)
    curve = BlerCurve(name or link.name)
    for snr in sorted(snrs_db):
        curve.points.append(evaluate_bler(link, noise.with_db(snr), rule, rng, user, workers))
    return curve


def snr_at_bler(curve: BlerCurve, target: float):
    """SNR where the curve crosses ``target``, interpolating log10(BLER) linearly.

    Returns ``nan`` if the curve never brackets the target.
    """
    snr = curve.snr_db
    bler = curve.bler
    for k in range(len(snr) - 1):
        b0, b1 = bler[k], bler[k + 1]
        if b0 >= target >= b1 and b0 > 0:
            if b1 <= 0:
                return float(snr[k + 1])
            l0, l1, lt = np.log10(b0), np.log10(b1), np.log10(target)
            if l0 == l1:
                return float(snr[k])
            return float(snr[k] + (lt - l0) / (l1 - l0) * (snr[k + 1] - snr[k]))
    return float("nan")


def estimate_mi(omega, n0: float, samples: int, rng: RngStream, chunk: int = 4096) -> float:
    """Monte Carlo mutual information (bits) of equiprobable points over AWGN.

    Uses ``I = log2 M - E[log2 sum_j exp(-(|y - x_j|^2 - |y - x_m|^2) / n0)]``
    with ``y = x_m + CN(0, n0)``.
    """
    pts = omega.points
    m = len(pts)
    if n0 <= 0:
        return float(np.log2(m))
    acc = 0.0
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        idx = rng.integers(m, n)
        noise = rng.complex_normal((n, pts.shape[1]), n0)
        y = pts[idx] + noise
        d = np.sum(np.abs(y[:, None, :] - pts[None]) ** 2, axis=-1)
        own = np.sum(np.abs(noise) ** 2, axis=-1)
        expo = -(d - own[:, None]) / n0
        top = expo.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(expo - top).sum(axis=1))
        acc += lse.sum() / np.log(2.0)
        done += n
    return float(min(np.log2(m), np.log2(m) - acc / samples))
