"""Classical reference transceivers.

Alamouti space-time coding, SVD precoding with bit and power loading,
zero-forcing / vector-perturbation broadcast precoding, and time sharing on
the interference channel. Each scheme is exposed both as plain functions and
as a :class:`~aelab.evaluation.Link` builder for Monte Carlo evaluation.
"""

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channels import draw_rayleigh, fixed_singular_channel, interference_outputs
from .constellations import (
    Constellation,
    build_ser_table,
    load_ser_table,
    ml_detect_batch,
    save_ser_table,
    shaped_constellation,
    square_qam,
)
from .evaluation import Link
from .numerics import svd_2x2_batch

__all__ = [
    "SearchTooLargeError",
    "AllocationResult",
    "PrecoderSpec",
    "alamouti_encode",
    "alamouti_combine",
    "alamouti_candidates",
    "stbc_ml_detect",
    "alamouti_link",
    "BIT_SPLITS",
    "allocation_formats",
    "svd_allocate",
    "svd_allocate_batch",
    "svd_transceive",
    "svd_link",
    "precoding_matrix",
    "zf_precode",
    "vp_search",
    "vp_search_batch",
    "cmod",
    "broadcast_link",
    "time_share_system",
]


class SearchTooLargeError(RuntimeError):
    pass


# --- Alamouti -----------------------------------------------------------------------

def alamouti_encode(s):
    """Map symbol pairs ``(..., 2)`` to 2x2 codewords (antennas x time slots)."""
    s = np.asarray(s, dtype=np.complex128)
    s1, s2 = s[..., 0], s[..., 1]
    x = np.empty(s.shape[:-1] + (2, 2), dtype=np.complex128)
    x[..., 0, 0] = s1
    x[..., 1, 0] = s2
    x[..., 0, 1] = -s2.conj()
    x[..., 1, 1] = s1.conj()
    return x


def alamouti_combine(y, h):
    """Linear combining for one receive antenna.

    ``y`` holds the two received samples and ``h = [h1, h2]`` the 1x2 channel,
    both with optional leading batch axes. Noiselessly the output is
    ``||h||^2 * s``.
    """
    y = np.asarray(y)
    h = np.asarray(h)
    h1, h2 = h[..., 0], h[..., 1]
    y1, y2 = y[..., 0], y[..., 1]
    return np.stack([h1.conj() * y1 + h2 * y2.conj(), h2.conj() * y1 - h1 * y2.conj()], axis=-1)


def alamouti_candidates(omega: Constellation, joint: bool = False):
    """Symbol pairs for every message: ``M^2`` pairs of a 1-D format, or the ``M`` points of a 2-D one."""
    if joint or omega.dims == 2:
        if omega.dims != 2:
            raise ValueError("joint mode needs a 2-dimensional constellation")
        return omega.points.copy()
    if omega.dims != 1:
        raise ValueError("Alamouti needs a 1- or 2-dimensional constellation")
    p = omega.points[:, 0]
    return np.stack([np.repeat(p, omega.m), np.tile(p, omega.m)], axis=-1)


def stbc_ml_detect(y, h, omega: Constellation, joint: bool = False, scale: float = 1.0,
                   max_candidates: int = 2**16, chunk: int = 2048):
    """Exhaustive ML detection of Alamouti blocks.

    Parameters
    ----------
    y : ndarray, shape (B, N_R, 2)
    h : ndarray, shape (B, N_R, 2)
    omega : Constellation
        1-D format (search over all ``M^2`` pairs) or 2-D format (``M`` points).
    scale : float
        Amplitude applied to the symbols before encoding.

    Returns
    -------
    ndarray of int, shape (B,)
        Message index; for 1-D formats ``m1 * M + m2``.
    """
    cands = alamouti_candidates(omega, joint)
    if len(cands) > max_candidates:
        raise SearchTooLargeError(f"{len(cands)} candidates exceed the limit {max_candidates}")
    code = scale * alamouti_encode(cands)                    # (K, 2, 2)
    y = np.asarray(y)
    h = np.asarray(h)
    out = np.empty(y.shape[0], dtype=np.int64)
    for lo in range(0, y.shape[0], chunk):
        hy = h[lo:lo + chunk]
        hx = np.einsum("brt,kts->bkrs", hy, code)
        d = np.sum(np.abs(y[lo:lo + chunk, None] - hx) ** 2, axis=(-2, -1))
        out[lo:lo + chunk] = np.argmin(d, axis=1)
    return out


def alamouti_link(omega: Constellation, nr: int = 1, pt: float = 1.0, detector: str = "combine"):
    """Alamouti over i.i.d. Rayleigh fading with ``N_T = 2``, ``N_B = 2``.

    Symbols are scaled so each channel use carries ``pt`` on average.
    ``detector="combine"`` makes per-symbol decisions after linear combining
    (1-D formats only); ``"ml"`` runs the exhaustive search.
    """
    cands = alamouti_candidates(omega)
    amp = np.sqrt(pt / 2.0)
    if detector == "combine" and (omega.dims != 1 or nr != 1):
        detector = "ml"

    def encode(n, rng):
        msgs = rng.integers(len(cands), n)
        return msgs[:, None], amp * alamouti_encode(cands[msgs])

    def channel(x, n0, rng):
        h = draw_rayleigh(nr, 2, rng, size=x.shape[0]).h
        y = h @ x + rng.complex_normal((x.shape[0], nr, 2), n0)
        return y, h

    def detect(rx):
        y, h = rx
        if detector == "ml":
            return stbc_ml_detect(y, h, omega, scale=amp)[:, None]
        stats = alamouti_combine(y[:, 0, :], h[:, 0, :])
        gain = amp * np.sum(np.abs(h[:, 0, :]) ** 2, axis=-1)
        pts = omega.points[:, 0]
        m1 = ml_detect_batch(stats[:, 0], pts, gain)
        m2 = ml_detect_batch(stats[:, 1], pts, gain)
        return (m1 * omega.m + m2)[:, None]

    return Link(encode, channel, detect, users=1, name=f"alamouti_{omega.label}")


# --- SVD transceiver with bit and power allocation ----------------------------------

BIT_SPLITS = ((1, 16), (2, 8), (4, 4), (8, 2), (16, 1))
POWER_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class AllocationResult:
    cardinalities: tuple
    powers: tuple
    predicted_bler: float
    labels: tuple = ()


def _stream_ser(tables, card, gamma):
    if card == 1:
        return np.zeros_like(gamma)
    return tables[card](gamma)


def svd_allocate_batch(sigma, tables: dict, pt: float, n0: float, splits=BIT_SPLITS,
                       power_grid=POWER_GRID):
    """Exhaustive bit/power loading for a batch of singular-value pairs.

    Parameters
    ----------
    sigma : ndarray, shape (B, 2)
    tables : dict
        Cardinality -> :class:`SerTable` (or any callable SER(gamma)).
        Cardinality 1 (silent stream) needs no entry.
    splits : sequence of (|Omega_1|, |Omega_2|)

    Returns
    -------
    split_index : ndarray, shape (B,)
    p1 : ndarray, shape (B,)
        Power on stream 1; stream 2 gets ``pt - p1``.
    bler : ndarray, shape (B,)
        Predicted block error probability ``1 - prod(1 - SER_i)``.
    """
    if not tables:
        raise ValueError("no SER tables supplied")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    frac = np.asarray(power_grid)
    p1 = pt * frac
    p2 = pt - p1
    if n0 == 0:
        g1 = np.where(p1 > 0, np.inf, 0.0)[None, :] * np.ones((sigma.shape[0], 1))
        g2 = np.where(p2 > 0, np.inf, 0.0)[None, :] * np.ones((sigma.shape[0], 1))
    else:
        g1 = sigma[:, :1] ** 2 * p1[None, :] / n0
        g2 = sigma[:, 1:2] ** 2 * p2[None, :] / n0
    objective = np.empty((len(splits), sigma.shape[0], len(frac)))
    for k, (c1, c2) in enumerate(splits):
        e1 = _stream_ser(tables, c1, g1)
        e2 = _stream_ser(tables, c2, g2)
        objective[k] = 1.0 - (1.0 - e1) * (1.0 - e2)
    # ties resolve to the larger stream-1 power, then to the earlier split
    flipped = objective[:, :, ::-1]
    flat = np.transpose(flipped, (1, 2, 0)).reshape(sigma.shape[0], -1)
    best = np.argmin(flat, axis=1)
    p_idx = len(frac) - 1 - best // len(splits)
    s_idx = best % len(splits)
    bler = objective[s_idx, np.arange(sigma.shape[0]), p_idx]
    return s_idx, p1[p_idx], bler


def svd_allocate(h, formats: dict, pt: float, n0: float, tables: dict, splits=BIT_SPLITS):
    """Bit and power allocation for one 2x2 channel realization.

    ``formats`` maps cardinality -> :class:`Constellation`; ``tables`` maps
    cardinality -> :class:`SerTable`.
    """
    hm = h.h if hasattr(h, "h") else np.asarray(h)
    _, s, _ = svd_2x2_batch(hm[None])
    k, p1, bler = svd_allocate_batch(s, tables, pt, n0, splits)
    c1, c2 = splits[int(k[0])]
    labels = tuple(formats[c].label if c in formats else "silent" for c in (c1, c2))
    return AllocationResult((c1, c2), (float(p1[0]), float(pt - p1[0])), float(bler[0]), labels)


SER_GRID_DB = np.arange(-5.0, 25.25, 0.5)


def allocation_formats(rng, cache_dir=None, shaped=True, trials=100_000, grid=SER_GRID_DB):
    """Stream formats and SER tables for the allocation baseline.

    Cardinalities 2 and 4 use BPSK and QPSK; 8 and 16 use the learned
    ``c2_8``/``c2_16`` shapes when ``shaped`` is set and square QAM otherwise.
    Tables are cached as ``ser_<label>.txt`` under ``cache_dir``.

    Returns
    -------
    formats, tables : dict
        Both keyed by cardinality.
    """
    formats = {2: square_qam(2), 4: square_qam(4)}
    for c, name in ((8, "c2_8"), (16, "c2_16")):
        formats[c] = shaped_constellation(name, rng.derive(c), cache_dir) if shaped else square_qam(c)
    tables = {}
    for c, omega in formats.items():
        path = Path(cache_dir) / f"ser_{omega.label}.txt" if cache_dir is not None else None
        if path is not None and path.exists():
            tables[c] = load_ser_table(path, omega.label)
            continue
        tables[c] = build_ser_table(omega, grid, trials, rng.derive(100 + c))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_ser_table(tables[c], path)
    return formats, tables


def _split_messages(msgs, c2):
    return msgs // c2, msgs % c2


def svd_transceive(h, s, powers, formats: dict, cardinalities, n0, rng):
    """Precode with ``V diag(sqrt(P_i))``, combine with ``U^H`` and detect per stream.

    Parameters
    ----------
    h : ndarray, shape (B, 2, 2)
    s : ndarray, shape (B, 2), int
        Per-stream symbol indices.
    powers : ndarray, shape (B, 2)
    cardinalities : ndarray, shape (B, 2), int

    Returns
    -------
    ndarray, shape (B, 2)
        Detected per-stream indices (0 on silent streams).
    """
    h = np.asarray(h)
    powers = np.asarray(powers, dtype=float)
    cards = np.asarray(cardinalities)
    u, sig, v = svd_2x2_batch(h)
    sym = np.zeros(s.shape, dtype=np.complex128)
    for i in range(2):
        for c in np.unique(cards[:, i]):
            if c == 1:
                continue
            rows = cards[:, i] == c
            sym[rows, i] = formats[c].points[s[rows, i], 0]
    x = np.einsum("bij,bj->bi", v, np.sqrt(powers) * sym)
    y = np.einsum("bij,bj->bi", h, x) + rng.complex_normal(x.shape, n0)
    yhat = np.einsum("bji,bj->bi", u.conj(), y)
    out = np.zeros(s.shape, dtype=np.int64)
    for i in range(2):
        gain = sig[:, i] * np.sqrt(powers[:, i])
        for c in np.unique(cards[:, i]):
            if c == 1:
                continue
            rows = cards[:, i] == c
            out[rows, i] = ml_detect_batch(yhat[rows, i], formats[c].points[:, 0], gain[rows])
    return out


def svd_link(formats: dict, pt: float = 1.0, tables: dict = None, split=None, sigma=None,
             splits=BIT_SPLITS, m: int = 16, name="svd"):
    """SVD transceiver over 2x2 channels.

    Modes: ``tables`` given -> exhaustive allocation per realization (restricted
    to ``split`` when it is set); no tables -> the fixed ``split`` at equal
    power. ``sigma`` fixes the singular values (Haar-random singular vectors),
    otherwise channels are Rayleigh.
    """
    if tables is None and split is None:
        raise ValueError("need SER tables or a fixed split")

    def encode(n, rng):
        msgs = rng.integers(m, n)
        return msgs[:, None], msgs

    def channel(msgs, n0, rng):
        n = msgs.shape[0]
        if sigma is None:
            h = draw_rayleigh(2, 2, rng, size=n).h
        else:
            h = fixed_singular_channel(sigma, rng, size=n).h
        if tables is not None:
            use = splits if split is None else (tuple(split),)
            _, s, _ = svd_2x2_batch(h)
            k, p1, _ = svd_allocate_batch(s, tables, pt, n0, use)
            cards = np.array(use)[k]
            powers = np.stack([p1, pt - p1], axis=-1)
        else:
            cards = np.tile(np.array(split), (n, 1))
            powers = np.full((n, 2), pt / 2.0)
        streams = np.stack(_split_messages(msgs, cards[:, 1]), axis=-1)
        det = svd_transceive(h, streams, powers, formats, cards, n0, rng)
        return det, cards

    def detect(rx):
        det, cards = rx
        return (det[:, 0] * cards[:, 1] + det[:, 1])[:, None]

    return Link(encode, channel, detect, users=1, name=name)


# --- broadcast precoding ------------------------------------------------------------

@dataclass(frozen=True)
class PrecoderSpec:
    w: np.ndarray
    beta: float
    xi: float
    alpha: float


def precoding_matrix(h, beta: float = 0.0):
    """``W = H^H (H H^H + beta I)^-1`` for one or a stack of channels."""
    h = np.asarray(h, dtype=np.complex128)
    hh = np.swapaxes(h.conj(), -1, -2)
    gram = h @ hh + beta * np.eye(h.shape[-2])
    if np.any(np.abs(np.linalg.det(gram)) < 1e-300):
        raise np.linalg.LinAlgError("H H^H + beta I is singular")
    return hh @ np.linalg.inv(gram)


def zf_precode(h, s, beta: float = 0.0, pt: float = 1.0, symbol_energy: float = 1.0):
    """Linear precoding ``x = alpha W s`` with ``E{||x||^2 | H} = pt`` over the messages.

    The expectation assumes independent zero-mean user symbols of energy
    ``symbol_energy``, giving ``alpha = sqrt(pt / (symbol_energy ||W||_F^2))``.
    Returns ``(x, alpha)``.
    """
    w = precoding_matrix(h, beta)
    alpha = np.sqrt(pt / (symbol_energy * np.sum(np.abs(w) ** 2, axis=(-2, -1))))
    x = alpha[..., None] * np.einsum("...ij,...j->...i", w, np.asarray(s))
    return x, alpha


def cmod(y, a: float):
    """Complex modulo: real and imaginary parts folded into ``[-a/2, a/2)``."""
    if a <= 0:
        raise ValueError(f"modulo scale must be positive, got {a}")
    y = np.asarray(y)

    def fold(v):
        return v - a * np.floor((v + a / 2.0) / a)

    return fold(y.real) + 1j * fold(y.imag)


def vp_search(w, s, a: float, bound: int = 5, max_size: int = 10**8, chunk: int = 2**16):
    """Exhaustive vector-perturbation search.

    Minimizes ``||W (s + p)||^2`` over ``p = a (k_re + j k_im)`` with every
    integer entry in ``[-bound, bound]``. Candidates are visited in
    lexicographic order of ``(re_1, im_1, re_2, im_2, ...)`` so ties resolve
    to the lexicographically smallest perturbation.
    """
    if bound < 1:
        raise ValueError("search range must be at least 1")
    w = np.asarray(w, dtype=np.complex128)
    s = np.asarray(s, dtype=np.complex128)
    k = s.shape[0]
    size = (2 * bound + 1) ** (2 * k)
    if size > max_size:
        raise SearchTooLargeError(f"search size {size} exceeds {max_size}")
    vals = np.arange(-bound, bound + 1)
    best_val, best_p = np.inf, None
    grid = itertools.product(vals, repeat=2 * k)
    while True:
        block = np.array(list(itertools.islice(grid, chunk)), dtype=float)
        if block.size == 0:
            break
        p = a * (block[:, 0::2] + 1j * block[:, 1::2])
        obj = np.sum(np.abs((s[None, :] + p) @ w.T) ** 2, axis=1)
        i = int(np.argmin(obj))
        if obj[i] < best_val:
            best_val, best_p = obj[i], p[i]
    return best_p


def _round_half_down(v):
    return np.ceil(v - 0.5)


def vp_search_batch(w, s, a: float, bound: int = 5):
    """Exact perturbation search for a batch, enumerating all but the last user.

    For fixed perturbations of the first ``K-1`` users the objective is an
    isotropic quadratic in the last entry, so its box-constrained lattice
    minimizer is the clamped per-component rounding.

    Parameters
    ----------
    w : ndarray, shape (B, N_T, K)
    s : ndarray, shape (B, K)

    Returns
    -------
    ndarray, shape (B, K)
    """
    w = np.asarray(w, dtype=np.complex128)
    s = np.asarray(s, dtype=np.complex128)
    b, k = s.shape
    g = np.swapaxes(w.conj(), -1, -2) @ w                     # (B, K, K) Gram matrix
    vals = np.arange(-bound, bound + 1)
    head = np.array(list(itertools.product(vals, repeat=2 * (k - 1))), dtype=float).reshape(-1, 2 * (k - 1))
    ph = a * (head[:, 0::2] + 1j * head[:, 1::2])               # (C, K-1)
    u = s[:, None, :k - 1] + ph[None]                           # (B, C, K-1)
    gkk = g[:, k - 1, k - 1].real[:, None]
    c = np.einsum("bj,bcj->bc", g[:, k - 1, :k - 1], u) / gkk  # (B, C)
    target = -(s[:, None, k - 1] + c) / a
    kre = np.clip(_round_half_down(target.real), -bound, bound)
    kim = np.clip(_round_half_down(target.imag), -bound, bound)
    last = a * (kre + 1j * kim)
    full = np.concatenate([u, (s[:, None, k - 1] + last)[..., None]], axis=-1)
    obj = np.einsum("bci,bij,bcj->bc", full.conj(), g, full).real
    best = np.argmin(obj, axis=1)
    rows = np.arange(b)
    return np.concatenate([ph[best], last[rows, best][:, None]], axis=-1)


def broadcast_link(omega: Constellation, nt: int = 2, nr: int = 2, pt: float = 1.0,
                   mode: str = "zf", xi: float = 0.0, bound: int = 5, snr_kind_nt: int = None):
    """Multi-user downlink with linear ZF or vector-perturbation precoding.

    Trials come in groups: one channel draw carries every one of the
    ``M^N_R`` message tuples, which is also the set the transmit scaling
    ``alpha`` averages over. ``xi`` sets the regularization
    ``beta = xi / SNR`` with ``SNR = pt / (N_T n0)``.
    """
    m = omega.m
    tuples = np.array(list(itertools.product(range(m), repeat=nr)))
    group = len(tuples)
    pts = omega.points[:, 0]
    a = omega.modulo
    if mode == "vp" and a is None:
        raise ValueError(f"constellation {omega.label} has no modulo scale")
    nt_snr = nt if snr_kind_nt is None else snr_kind_nt

    def encode(n, rng):
        if n % group:
            raise ValueError(f"trial count {n} must be a multiple of {group}")
        msgs = np.tile(tuples, (n // group, 1))
        return msgs, msgs

    def channel(msgs, n0, rng):
        draws = msgs.shape[0] // group
        h = draw_rayleigh(nr, nt, rng, size=draws).h
        beta = 0.0 if n0 == 0 else xi * n0 * nt_snr / pt
        w = precoding_matrix(h, beta)
        s = pts[msgs].reshape(draws, group, nr)
        if mode == "vp":
            wb = np.repeat(w, group, axis=0)
            p = vp_search_batch(wb, s.reshape(-1, nr), a, bound).reshape(draws, group, nr)
            s = s + p
        xt = np.einsum("dij,dgj->dgi", w, s)
        alpha = np.sqrt(pt / np.mean(np.sum(np.abs(xt) ** 2, axis=-1), axis=1))
        x = alpha[:, None, None] * xt
        y = np.einsum("dij,dgj->dgi", h, x) + rng.complex_normal((draws, group, nr), n0)
        return y.reshape(-1, nr) / np.repeat(alpha, group)[:, None]

    def detect(z):
        out = np.empty(z.shape, dtype=np.int64)
        for i in range(nr):
            if mode == "vp":
                d = np.abs(cmod(z[:, i, None] - pts[None, :], a)) ** 2
                out[:, i] = np.argmin(d, axis=1)
            else:
                out[:, i] = ml_detect_batch(z[:, i], pts)
        return out

    return Link(encode, channel, detect, users=nr, name=f"{mode}_{omega.label}", group=group)


# --- interference channel time sharing ----------------------------------------------

def time_share_system(omega: Constellation, users: int = 2, nb: int = 4, pt: float = 1.0):
    """Round-robin time sharing on the all-ones interference channel.

    User ``i`` owns slots ``[i*nb/users, (i+1)*nb/users)`` and is silent
    elsewhere. The per-user block energy is ``nb * pt``, so active slots carry
    ``users * pt`` per channel use. Each user's message is a tuple of
    constellation points filling its slots.
    """
    if nb % users:
        raise ValueError(f"block length {nb} not divisible by {users} users")
    slots = nb // users
    if slots % omega.dims:
        raise ValueError(f"{slots} slots cannot hold {omega.dims}-dimensional points")
    per_block = slots // omega.dims
    m_user = omega.m ** per_block
    amp = np.sqrt(users * pt)

    def symbols(msgs):
        digits = [(msgs // omega.m ** (per_block - 1 - q)) % omega.m for q in range(per_block)]
        return np.concatenate([omega.points[d] for d in digits], axis=-1)

    def encode(n, rng):
        msgs = rng.integers(m_user, (n, users))
        x = np.zeros((users, n, nb), dtype=np.complex128)
        for i in range(users):
            x[i, :, i * slots:(i + 1) * slots] = amp * symbols(msgs[:, i])
        return msgs, x

    def channel(x, n0, rng):
        if users == 2:
            y1, y2 = interference_outputs(x[0], x[1], n0, rng)
            return np.stack([y1, y2])
        total = x.sum(axis=0)
        return np.stack([total + rng.complex_normal(total.shape, n0) for _ in range(users)])

    def detect(y):
        n = y.shape[1]
        out = np.zeros((n, users), dtype=np.int64)
        for i in range(users):
            active = y[i, :, i * slots:(i + 1) * slots]
            for q in range(per_block):
                part = active[:, q * omega.dims:(q + 1) * omega.dims]
                d = ml_detect_batch(part, omega.points, amp)
                out[:, i] = out[:, i] * omega.m + d
        return out

    link = Link(encode, channel, detect, users=users, name=f"ts_{omega.label}")
    link.rate = np.log2(m_user) / nb
    return link
