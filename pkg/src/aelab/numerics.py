"""Complex linear algebra helpers and reproducible random streams.

Complex matrices are plain ``numpy`` arrays of dtype ``complex128``. Every
stochastic routine in the package draws from an :class:`RngStream`, a thin
wrapper around the counter-based Philox generator keyed by ``(seed, stream)``
so that Monte Carlo shards can be replayed independently of each other.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RankError",
    "RngStream",
    "SvdDecomposition",
    "svd_small",
    "svd_2x2_batch",
    "givens",
    "givens_product",
    "sample_complex_gaussian",
    "haar_unitary",
]

_MASK64 = (1 << 64) - 1


class RankError(ValueError):
    """Raised when a decomposition is requested for a rank-zero matrix."""


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class RngStream:
    """Addressable random stream.

    Two streams with equal ``(seed, stream)`` produce bit-identical samples.
    A stream must be owned by a single worker; use :meth:`derive` to hand
    out independent child streams instead of sharing one.
    """

    seed: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream = int(self.stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def derive(self, index: int) -> "RngStream":
        """Child stream addressed by ``index``; independent of this stream."""
        child = _splitmix64(self.stream ^ _splitmix64(int(index) + 1))
        return RngStream(self.seed, child)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)

    def complex_normal(self, shape, variance=1.0):
        """Circularly symmetric complex Gaussian samples of the given variance."""
        if variance < 0:
            raise ValueError(f"variance must be nonnegative, got {variance}")
        scale = np.sqrt(variance / 2.0)
        re = self._gen.standard_normal(shape)
        im = self._gen.standard_normal(shape)
        return scale * (re + 1j * im)


@dataclass(frozen=True)
class SvdDecomposition:
    """Thin SVD ``h = u @ diag(sigma) @ v^H`` with descending positive ``sigma``."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.conj().T


def _fix_column_phase(mat, tol=1e-300):
    # first nonzero entry of each column made real nonnegative
    mag = np.abs(mat)
    first = np.argmax(mag > tol * np.maximum(mag.max(axis=-2, keepdims=True), tol), axis=-2)
    pivot = np.take_along_axis(mat, first[..., None, :], axis=-2)
    pmag = np.abs(pivot)
    phase = np.where(pmag > 0, pivot.conj() / np.where(pmag > 0, pmag, 1.0), 1.0)
    return mat * phase, phase


def svd_2x2_batch(h):
    """Closed-form SVD of a stack of 2x2 complex matrices.

    Parameters
    ----------
    h : ndarray, shape (..., 2, 2), complex

    Returns
    -------
    u : ndarray, shape (..., 2, 2)
    sigma : ndarray, shape (..., 2), descending
    v : ndarray, shape (..., 2, 2)
        Columns of ``v`` have their first nonzero entry real nonnegative.
    """
    h = np.asarray(h, dtype=np.complex128)
    h00, h01 = h[..., 0, 0], h[..., 0, 1]
    h10, h11 = h[..., 1, 0], h[..., 1, 1]
    # Gram matrix h^H h = [[a, b], [conj(b), d]]
    a = np.abs(h00) ** 2 + np.abs(h10) ** 2
    d = np.abs(h01) ** 2 + np.abs(h11) ** 2
    b = h00.conj() * h01 + h10.conj() * h11
    disc = np.sqrt((a - d) ** 2 + 4.0 * np.abs(b) ** 2)
    lam1 = 0.5 * (a + d + disc)
    sigma1 = np.sqrt(lam1)

    # eigenvector of the larger eigenvalue, picking the better-conditioned row
    va = np.stack([lam1 - d, b.conj()], axis=-1)
    vb = np.stack([b, lam1 - a], axis=-1)
    v1 = np.where((a >= d)[..., None], va, vb)
    n1 = np.linalg.norm(v1, axis=-1, keepdims=True)
    degenerate = n1[..., 0] <= 1e-300
    v1 = np.where(degenerate[..., None], np.array([1.0 + 0j, 0.0]), v1 / np.where(n1 > 0, n1, 1.0))
    v2 = np.stack([-v1[..., 1].conj(), v1[..., 0].conj()], axis=-1)
    v = np.stack([v1, v2], axis=-1)
    v, _ = _fix_column_phase(v)
    v1, v2 = v[..., :, 0], v[..., :, 1]

    hv1 = np.einsum("...ij,...j->...i", h, v1)
    hv2 = np.einsum("...ij,...j->...i", h, v2)
    safe1 = np.where(sigma1 > 0, sigma1, 1.0)
    u1 = hv1 / safe1[..., None]
    u1 = np.where((sigma1 > 0)[..., None], u1, np.array([1.0 + 0j, 0.0]))
    perp = np.stack([-u1[..., 1].conj(), u1[..., 0].conj()], axis=-1)
    proj = np.einsum("...i,...i->...", perp.conj(), hv2)
    sigma2 = np.abs(proj)
    ph = np.where(sigma2 > 0, proj / np.where(sigma2 > 0, sigma2, 1.0), 1.0)
    u2 = perp * ph[..., None]
    u = np.stack([u1, u2], axis=-1)
    return u, np.stack([sigma1, sigma2], axis=-1), v


def svd_small(h) -> SvdDecomposition:
    """SVD of a small complex matrix with rank truncation.

    Singular values below ``1e-12 * sigma_max`` are dropped, so the returned
    ``u`` and ``v`` have ``rank`` columns. 2x2 inputs use a closed form; other
    shapes up to 4x4 fall back to LAPACK with the same phase convention.
    """
    h = np.asarray(h, dtype=np.complex128)
    if h.ndim != 2 or max(h.shape) > 4:
        raise ValueError(f"svd_small expects a matrix of at most 4x4, got shape {h.shape}")
    if not np.any(h):
        raise RankError("cannot decompose an all-zero matrix")
    if h.shape == (2, 2):
        u, s, v = svd_2x2_batch(h[None])
        u, s, v = u[0], s[0], v[0]
    else:
        u, s, vh = np.linalg.svd(h, full_matrices=False)
        v = vh.conj().T
        v, phase = _fix_column_phase(v)
        u = u * phase
    keep = s > 1e-12 * s[0]
    return SvdDecomposition(u=u[:, keep], sigma=s[keep], v=v[:, keep])


def givens(n: int, i: int, j: int, theta: float) -> np.ndarray:
    """Real n x n Givens rotation acting on coordinates ``i < j`` (0-based).

    Identity except ``[i, i] = [j, j] = cos(theta)``, ``[i, j] = -sin(theta)``
    and ``[j, i] = sin(theta)``.
    """
    if not (0 <= i < j < n):
        raise IndexError(f"need 0 <= i < j < n, got i={i}, j={j}, n={n}")
    g = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    g[i, i] = c
    g[j, j] = c
    g[i, j] = -s
    g[j, i] = s
    return g


def givens_pairs(n: int):
    """Coordinate pairs ``(i, j)``, ``i < j``, in the order used by :func:`givens_product`."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def givens_product(n: int, thetas) -> np.ndarray:
    """Ordered product of all n(n-1)/2 Givens factors, pairs in lexicographic order."""
    pairs = givens_pairs(n)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.shape != (len(pairs),):
        raise ValueError(f"expected {len(pairs)} angles for n={n}, got shape {thetas.shape}")
    r = np.eye(n)
    for (i, j), t in zip(pairs, thetas):
        r = r @ givens(n, i, j, t)
    return r


def sample_complex_gaussian(rows: int, cols: int, variance: float, rng: RngStream) -> np.ndarray:
    """Matrix of i.i.d. CN(0, variance) entries."""
    if variance < 0:
        raise ValueError(f"variance must be nonnegative, got {variance}")
    return rng.complex_normal((rows, cols), variance)


def haar_unitary(n: int, rng: RngStream, size=None) -> np.ndarray:
    """Haar-distributed unitary matrices via QR with the R diagonal phase-fixed."""
    shape = (n, n) if size is None else (size, n, n)
    z = rng.complex_normal(shape, 1.0)
    q, r = np.linalg.qr(z)
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    ph = diag / np.abs(diag)
    return q * ph[..., None, :]
