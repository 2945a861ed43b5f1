"""Channel simulators and SNR bookkeeping.

All simulators accept leading batch axes so a Monte Carlo shard is simulated
in one vectorized call.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, haar_unitary

__all__ = [
    "NoiseSpec",
    "ChannelRealization",
    "draw_rayleigh",
    "transmit_block",
    "fixed_singular_channel",
    "interference_outputs",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level derived from an SNR figure.

    ``kind="snr"``: ``SNR = pt / (nt * n0)``.
    ``kind="ebn0"``: ``Eb/N0 = pt / (rate * n0)``.
    """

    value_db: float
    kind: str = "snr"
    pt: float = 1.0
    nt: int = 1
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("snr", "ebn0"):
            raise ValueError(f"unknown SNR definition {self.kind!r}")

    @property
    def _denominator(self):
        return self.nt if self.kind == "snr" else self.rate

    @property
    def n0(self) -> float:
        if np.isinf(self.value_db) and self.value_db > 0:
            return 0.0
        return self.pt / (self._denominator * 10.0 ** (self.value_db / 10.0))

    def db_from_n0(self, n0: float) -> float:
        """Inverse of :attr:`n0` under this spec's definition."""
        return 10.0 * np.log10(self.pt / (self._denominator * n0))

    def with_db(self, value_db: float) -> "NoiseSpec":
        return NoiseSpec(value_db, self.kind, self.pt, self.nt, self.rate)


@dataclass
class ChannelRealization:
    """Channel matrix (or stack of them) held constant over ``nb`` channel uses."""

    h: np.ndarray
    nb: int = 1

    @property
    def nr(self):
        return self.h.shape[-2]

    @property
    def nt(self):
        return self.h.shape[-1]


def draw_rayleigh(nr: int, nt: int, rng: RngStream, size=None, nb: int = 1) -> ChannelRealization:
    """i.i.d. CN(0, 1) channel entries; ``size`` adds a leading batch axis."""
    if nr < 1 or nt < 1:
        raise ValueError(f"invalid channel dimensions {nr}x{nt}")
    shape = (nr, nt) if size is None else (size, nr, nt)
    return ChannelRealization(rng.complex_normal(shape, 1.0), nb)


def _noise(shape, n0, rng):
    if n0 == 0:
        return np.zeros(shape, dtype=np.complex128)
    return rng.complex_normal(shape, n0)


def transmit_block(h, x, noise, rng: RngStream):
    """``Y = H X + N`` with ``N`` i.i.d. CN(0, n0).

    ``noise`` is either a :class:`NoiseSpec` or a plain ``n0`` value.
    """
    hm = h.h if isinstance(h, ChannelRealization) else np.asarray(h)
    x = np.asarray(x)
    if x.ndim == hm.ndim - 1:
        x = x[..., None]
        squeeze = True
    else:
        squeeze = False
    if hm.shape[-1] != x.shape[-2]:
        raise ValueError(f"channel {hm.shape} cannot act on input {x.shape}")
    n0 = noise.n0 if isinstance(noise, NoiseSpec) else float(noise)
    y = hm @ x
    y = y + _noise(y.shape, n0, rng)
    return y[..., 0] if squeeze else y


def fixed_singular_channel(sigma, rng: RngStream, size=None) -> ChannelRealization:
    """``H = U diag(sigma) V^H`` with Haar-random unitary ``U`` and ``V``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("singular values must be positive")
    if np.any(np.diff(sigma) > 0):
        raise ValueError("singular values must be in descending order")
    n = len(sigma)
    u = haar_unitary(n, rng, size)
    v = haar_unitary(n, rng, size)
    return ChannelRealization((u * sigma) @ np.swapaxes(v.conj(), -1, -2))


def interference_outputs(x1, x2, noise, rng: RngStream):
    """Two-user interference channel with all gains equal to one.

    Each receiver sees ``x1 + x2`` plus its own independent noise.
    """
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ValueError(f"user blocks differ in shape: {x1.shape} vs {x2.shape}")
    n0 = noise.n0 if isinstance(noise, NoiseSpec) else float(noise)
    s = x1 + x2
    return s + _noise(s.shape, n0, rng), s + _noise(s.shape, n0, rng)
