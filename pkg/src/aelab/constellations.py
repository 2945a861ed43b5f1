"""Signal constellations: standard grids, learned shapes, lattice packings,
ML detection, symbol-error tables and the plain-text file format.

File format (UTF-8): first line ``dims M``, then ``M`` lines with ``2*dims``
space-separated reals, real and imaginary parts interleaved per dimension.
"""

import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erfc

from .numerics import RngStream
from .training import codebook_forward, mlp_for, train_awgn_ae

__all__ = [
    "Constellation",
    "SerTable",
    "DuplicatePointError",
    "square_qam",
    "lattice_d4",
    "train_gs_awgn",
    "shaped_constellation",
    "ml_detect",
    "ml_detect_batch",
    "ser_union_bound",
    "build_ser_table",
    "save_constellation",
    "load_constellation",
    "save_ser_table",
    "load_ser_table",
]


class DuplicatePointError(ValueError):
    pass


def _check_distinct(points):
    m = len(points)
    if m < 2:
        return
    d2 = np.sum(np.abs(points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    d2[np.arange(m), np.arange(m)] = np.inf
    rms = np.sqrt(np.mean(np.sum(np.abs(points) ** 2, axis=-1)))
    if d2.min() <= (1e-12 * max(rms, 1e-300)) ** 2:
        i, j = np.unravel_index(np.argmin(d2), d2.shape)
        raise DuplicatePointError(f"points {i} and {j} coincide")


@dataclass(frozen=True)
class Constellation:
    """``M`` complex points in ``dims`` complex dimensions.

    ``scale`` is the factor that was applied to the raw points to reach unit
    average energy per complex dimension. ``modulo`` is the lattice spacing
    used by vector-perturbation precoding.
    """

    points: np.ndarray
    label: str = ""
    scale: float = 1.0
    modulo: float = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.complex128)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"points must be (M, dims), got {pts.shape}")
        _check_distinct(pts)
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dims(self) -> int:
        return self.points.shape[1]

    @property
    def energy(self) -> float:
        """Average energy per complex dimension."""
        return float(np.mean(np.sum(np.abs(self.points) ** 2, axis=1)) / self.dims)

    def normalized(self) -> "Constellation":
        factor = 1.0 / np.sqrt(self.energy)
        modulo = None if self.modulo is None else self.modulo * factor
        return Constellation(self.points * factor, self.label, self.scale * factor, modulo, self.info)

    @classmethod
    def from_points(cls, points, label="", modulo=None, info=None):
        return cls(points, label, 1.0, modulo, info or {}).normalized()


def _grid_modulo(points):
    # 2 * (peak per-dimension amplitude + half the per-dimension spacing)
    re = np.unique(np.round(np.concatenate([points.real.ravel(), points.imag.ravel()]), 12))
    step = np.min(np.diff(re)) if len(re) > 1 else 2 * np.max(np.abs(re))
    return 2.0 * (np.max(np.abs(re)) + step / 2.0)


def square_qam(m: int) -> Constellation:
    """BPSK, QPSK, rectangular 8-QAM or square 16-QAM at unit average energy."""
    if m == 2:
        pts = np.array([-1.0, 1.0], dtype=complex)
    elif m == 4:
        pts = np.array([a + 1j * b for a in (-1, 1) for b in (-1, 1)])
    elif m == 8:
        pts = np.array([a + 1j * b for a in (-3, -1, 1, 3) for b in (-1, 1)])
    elif m == 16:
        pts = np.array([a + 1j * b for a in (-3, -1, 1, 3) for b in (-3, -1, 1, 3)])
    else:
        raise ValueError(f"unsupported QAM order {m}; choose from 2, 4, 8, 16")
    labels = {2: "bpsk", 4: "qpsk", 8: "qam8", 16: "qam16"}
    omega = Constellation.from_points(pts, labels[m])
    modulo = _grid_modulo(omega.points) if m in (4, 16) else None
    return Constellation(omega.points, omega.label, omega.scale, modulo)


def lattice_d4(m: int = 256) -> Constellation:
    """The ``m`` lowest-energy points of the checkerboard lattice D4.

    Energy ties are broken lexicographically. Coordinates map to two complex
    dimensions as ``(x0 + j x1, x2 + j x3)``.
    """
    radius = int(np.ceil((2 * m) ** 0.25)) + 2
    rng_ = range(-radius, radius + 1)
    pts = np.array([p for p in itertools.product(rng_, repeat=4) if sum(p) % 2 == 0])
    energy = np.sum(pts**2, axis=1)
    order = np.lexsort(tuple(pts[:, k] for k in range(3, -1, -1)) + (energy,))
    chosen = pts[order[:m]].astype(float)
    cpts = chosen[:, 0::2] + 1j * chosen[:, 1::2]
    return Constellation.from_points(cpts, f"w4_{m}")


def _product_qam(m, dims):
    side = round(m ** (1.0 / dims))
    if side**dims != m:
        raise ValueError(f"{m} points do not form a product of {dims} QAM grids")
    q = square_qam(side).points[:, 0]
    return np.array(list(itertools.product(q, repeat=dims)))


def train_gs_awgn(m: int, dims: int, snr_db: float, rng: RngStream, *, batch=1024, steps=3000,
                  lr=1e-3, rx_hidden=None, init=None) -> Constellation:
    """Geometrically shaped constellation learned by an autoencoder over AWGN.

    The transmitter is a single linear layer on the one-hot message, so its
    normalized outputs are directly the constellation points. ``snr_db`` is
    the SNR per complex dimension at unit energy per dimension.

    ``init="qam"`` starts the transmitter from the product of square QAM
    grids (e.g. 16-QAM x 16-QAM for 256 points in two dimensions) instead of
    random weights. Large multi-dimensional formats need this to get past
    the product grid within a few thousand steps.
    """
    if m < 2 or dims < 1:
        raise ValueError("need m >= 2 and dims >= 1")
    if rx_hidden is None:
        rx_hidden = (max(64, m), max(64, m))
    nets = None
    if init == "qam":
        grid = _product_qam(m, dims)
        tx = mlp_for(m, (), 2 * dims, "linear", rng)
        tx.layers[0].weight[:] = np.stack([grid.real, grid.imag], axis=-1).reshape(m, -1).T
        tx.layers[0].bias[:] = 0.0
        nets = (tx, mlp_for(2 * dims, rx_hidden, m, "softmax", rng))
    elif init is not None:
        raise ValueError(f"unknown initialization {init!r}")
    tx, rx, trace = train_awgn_ae(m, dims, snr_db, rng, batch=batch, steps=steps, lr=lr,
                                  rx_hidden=rx_hidden, init=nets)
    book = codebook_forward(tx, m, dims, 1.0)
    tail = trace[-max(1, steps // 20):].mean()
    converged = bool(tail <= 0.99 * np.log(m))
    if not converged:
        warnings.warn(f"shaping m={m} dims={dims} did not beat chance (loss {tail:.3f})")
    info = {"train_snr_db": float(snr_db), "final_loss": float(tail), "converged": converged,
            "loss_trace": trace}
    return Constellation.from_points(book.x, f"gs{dims}_{m}", info=info)


def ml_detect_batch(y, points, scale=1.0, chunk=4096):
    """Minimum-distance decisions for a batch of observations.

    Parameters
    ----------
    y : ndarray, shape (B, dims) or (B,), complex
    points : ndarray, shape (M, dims) or (M,), complex
    scale : float or ndarray of shape (B,)
        Per-observation amplitude applied to the points.

    Returns
    -------
    ndarray of int, shape (B,)
        Index of the closest scaled point; ties resolve to the lowest index.
    """
    y = np.asarray(y, dtype=np.complex128)
    pts = np.asarray(points, dtype=np.complex128)
    if y.ndim == 1:
        y = y[:, None]
    if pts.ndim == 1:
        pts = pts[:, None]
    if y.shape[1] != pts.shape[1]:
        raise ValueError(f"observation dims {y.shape[1]} != constellation dims {pts.shape[1]}")
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (y.shape[0],))
    out = np.empty(y.shape[0], dtype=np.int64)
    for lo in range(0, y.shape[0], chunk):
        yy = y[lo:lo + chunk]
        sc = scale[lo:lo + chunk, None, None]
        d = np.sum(np.abs(yy[:, None, :] - sc * pts[None, :, :]) ** 2, axis=-1)
        out[lo:lo + chunk] = np.argmin(d, axis=1)
    return out


def ml_detect(y, omega: Constellation, scale: float = 1.0) -> int:
    """Index of the point minimizing ``||y - scale * p||^2`` (lowest index on ties)."""
    y = np.atleast_1d(np.asarray(y, dtype=np.complex128))
    if y.shape != (omega.dims,):
        raise ValueError(f"observation has shape {y.shape}, constellation dims {omega.dims}")
    return int(ml_detect_batch(y[None], omega.points, scale)[0])


def _q(x):
    return 0.5 * erfc(x / np.sqrt(2.0))


def ser_union_bound(points, snr_lin):
    """Pairwise union bound on SER for ``z = sqrt(snr) p + CN(0, 1)``."""
    pts = np.asarray(points).reshape(len(points), -1)
    d2 = np.sum(np.abs(pts[:, None] - pts[None]) ** 2, axis=-1)
    off = ~np.eye(len(pts), dtype=bool)
    snr = np.atleast_1d(np.asarray(snr_lin, dtype=float))
    vals = _q(np.sqrt(snr[:, None] * d2[off][None, :] / 2.0)).sum(axis=1) / len(pts)
    return np.minimum(vals, 1.0)


def _isotonic_decreasing(y, w):
    # pool-adjacent-violators for a non-increasing fit
    blocks = []
    for yi, wi in zip(y, w):
        blocks.append([yi, wi, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            v2, w2, n2 = blocks.pop()
            v1, w1, n1 = blocks.pop()
            tw = w1 + w2
            blocks.append([(v1 * w1 + v2 * w2) / tw, tw, n1 + n2])
    return np.concatenate([[v] * n for v, _, n in blocks])


@dataclass
class SerTable:
    """Symbol error probability of one constellation versus per-symbol SNR.

    The SNR ``gamma`` is the received energy per complex dimension relative to
    the noise power for a unit-energy constellation. Queries interpolate
    linearly in ``(dB, log SER)``, extrapolate the last slope above the grid
    and blend linearly towards ``1 - 1/M`` at ``gamma = 0`` below it.
    """

    label: str
    snr_db: np.ndarray
    ser: np.ndarray
    trials: np.ndarray
    m: int = 0
    points: np.ndarray = None

    def __call__(self, gamma_lin):
        """SER at linear SNR values (vectorized)."""
        g = np.asarray(gamma_lin, dtype=float)
        out = np.empty(g.shape)
        zero = g <= 0
        if self.m:
            out[zero] = 1.0 - 1.0 / self.m
        else:
            out[zero] = self.ser[0]
        db = 10.0 * np.log10(np.where(zero | np.isinf(g), 1.0, g))
        logs = np.log(np.maximum(self.ser, 1e-300))
        val = np.interp(db, self.snr_db, logs)
        hi = db > self.snr_db[-1]
        if np.any(hi) and len(self.snr_db) > 1:
            slope = (logs[-1] - logs[-2]) / (self.snr_db[-1] - self.snr_db[-2])
            val = np.where(hi, logs[-1] + slope * (db - self.snr_db[-1]), val)
        out[~zero] = np.exp(val[~zero])
        lo = ~zero & (db < self.snr_db[0])
        if self.m and np.any(lo):
            # below the grid: linear in gamma towards the chance level at gamma = 0
            g0 = 10.0 ** (self.snr_db[0] / 10.0)
            t = g[lo] / g0
            out[lo] = (1.0 - t) * (1.0 - 1.0 / self.m) + t * self.ser[0]
        out[np.isposinf(g)] = 0.0           # noiseless
        return out


def build_ser_table(omega: Constellation, snr_grid_db, trials: int, rng: RngStream,
                    min_errors: int = 10) -> SerTable:
    """Monte Carlo SER table, tail-corrected and made monotone.

    Grid points with fewer than ``min_errors`` counted errors use the pairwise
    union bound instead of the raw count, which is tight in that regime.
    """
    grid = np.asarray(sorted(snr_grid_db), dtype=float)
    if grid.size == 0:
        raise ValueError("empty SNR grid")
    m, dims = omega.m, omega.dims
    ser = np.empty(grid.size)
    counts = np.full(grid.size, trials, dtype=np.int64)
    chunk = max(1, min(trials, 2**18 // max(m, 1)))
    for k, snr in enumerate(grid):
        g = 10.0 ** (snr / 10.0)
        stream = rng.derive(k)
        errors = 0
        done = 0
        while done < trials:
            n = min(chunk, trials - done)
            idx = stream.integers(m, n)
            z = np.sqrt(g) * omega.points[idx] + stream.complex_normal((n, dims), 1.0)
            errors += int(np.count_nonzero(ml_detect_batch(z, omega.points) != idx))
            done += n
        if errors < min_errors:
            ser[k] = ser_union_bound(omega.points, g)[0]
        else:
            ser[k] = errors / trials
    ser = _isotonic_decreasing(ser, counts.astype(float))
    return SerTable(omega.label, grid, ser, counts, m, omega.points)


def save_constellation(omega: Constellation, path):
    pts = omega.points
    lines = [f"{omega.dims} {omega.m}"]
    for row in pts:
        vals = np.stack([row.real, row.imag], axis=-1).ravel()
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_points(lines, dims, m, path):
    if len(lines) < m:
        raise ValueError(f"{path}: expected {m} point rows, found {len(lines)}")
    rows = []
    for k, line in enumerate(lines[:m]):
        vals = line.split()
        if len(vals) != 2 * dims:
            raise ValueError(f"{path}: row {k + 1} has {len(vals)} values, expected {2 * dims}")
        rows.append([float(v) for v in vals])
    arr = np.array(rows)
    return arr[:, 0::2] + 1j * arr[:, 1::2]


def load_constellation(path, label=None) -> Constellation:
    """Read a constellation file and renormalize it to unit energy per dimension."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    try:
        dims, m = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}: header must be 'dims M'") from None
    pts = _parse_points(lines[1:], dims, m, path)
    if len(lines) - 1 != m:
        raise ValueError(f"{path}: expected {m} point rows, found {len(lines) - 1}")
    return Constellation.from_points(pts, label or path.stem)


def save_ser_table(table: SerTable, path):
    """Header ``dims M``, the constellation rows, ``table K``, then ``snr_db ser trials`` rows."""
    pts = np.asarray(table.points).reshape(table.m, -1)
    lines = [f"{pts.shape[1]} {table.m}"]
    for row in pts:
        vals = np.stack([row.real, row.imag], axis=-1).ravel()
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    lines.append(f"table {len(table.snr_db)}")
    for s, p, n in zip(table.snr_db, table.ser, table.trials):
        lines.append(f"{s:.17g} {p:.17g} {int(n)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ser_table(path, label=None) -> SerTable:
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    dims, m = (int(v) for v in lines[0].split())
    pts = _parse_points(lines[1:m + 1], dims, m, path)
    tag, count = lines[m + 1].split()
    if tag != "table":
        raise ValueError(f"{path}: missing 'table' line")
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[m + 2:m + 2 + int(count)]])
    return SerTable(label or path.stem, rows[:, 0], rows[:, 1], rows[:, 2].astype(np.int64), m,
                    pts[:, 0] if dims == 1 else pts)


_SHAPE_SWEEP_DB = (8.0, 12.0, 16.0, 20.0)


def _score(omega, snrs, trials, rng):
    total = 0.0
    for k, snr in enumerate(snrs):
        stream = rng.derive(k)
        g = 10.0 ** (snr / 10.0)
        idx = stream.integers(omega.m, trials)
        z = np.sqrt(g) * omega.points[idx] + stream.complex_normal((trials, omega.dims), 1.0)
        err = np.count_nonzero(ml_detect_batch(z, omega.points) != idx)
        total += np.log((err + 1.0) / trials)
    return total


def shaped_constellation(name: str, rng: RngStream, cache_dir=None, *, steps=None, batch=None,
                         sweep_db=_SHAPE_SWEEP_DB, eval_trials=20000) -> Constellation:
    """Named shaped formats: ``c2_8``, ``c2_16``, ``gs4_256`` (learned) or ``w4_256`` (D4 lattice).

    Learned formats are loaded from ``cache_dir`` when present; otherwise one
    autoencoder is trained per SNR in ``sweep_db`` and the candidate with the
    lowest evaluated SER (summed in log domain over the sweep) is kept and
    written back to the cache.
    """
    if name == "w4_256":
        return lattice_d4(256)
    shapes = {"c2_8": (8, 1), "c2_16": (16, 1), "gs4_256": (256, 2)}
    if name not in shapes:
        raise ValueError(f"unknown shaped format {name!r}")
    m, dims = shapes[name]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{name}.txt"
        if path.exists():
            return load_constellation(path, name)
    if steps is None:
        steps = 4000
    if batch is None:
        batch = 1024 if m <= 16 else 2048
    # multi-dimensional formats start from the product QAM grid (see train_gs_awgn)
    init = "qam" if dims > 1 else None
    best, best_score = None, np.inf
    for k, snr in enumerate(sweep_db):
        cand = train_gs_awgn(m, dims, snr, rng.derive(k), steps=steps, batch=batch,
                             lr=1e-3 if dims > 1 else 1e-2, init=init)
        score = _score(cand, sweep_db, eval_trials, rng.derive(1000 + k))
        if score < best_score:
            best, best_score = cand, score
    best = Constellation(best.points, name, best.scale, best.modulo, best.info)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_constellation(best, path)
    return best
