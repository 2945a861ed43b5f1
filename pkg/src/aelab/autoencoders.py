"""End-to-end trained transceivers for the four MIMO / multi-user scenarios.

Each ``train_*`` function returns a :class:`TrainedSystem`; :func:`system_link`
turns one into a :class:`~aelab.evaluation.Link` for BLER evaluation. The
module also holds the Givens-rotation search used to interpret the learned
interference-channel constellations.
"""

import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .channels import NoiseSpec, draw_rayleigh, fixed_singular_channel, interference_outputs
from .constellations import ml_detect_batch
from .evaluation import Link
from .neural import (
    backprop,
    complex_to_real,
    forward,
    forward_cached,
    load_networks,
    normalize_conditional_power,
    normalize_power_backward,
    real_to_complex,
    save_networks,
)
from .numerics import RngStream, givens, givens_pairs, givens_product
from .training import (
    Optimizers,
    codebook_backward,
    codebook_forward,
    mlp_for,
    receiver_step,
    stage_snrs,
    train_awgn_ae,
)

__all__ = [
    "ScenarioConfig",
    "TrainedSystem",
    "SCENARIOS",
    "train",
    "train_open_loop",
    "train_closed_loop",
    "train_broadcast",
    "train_interference",
    "train_fixed_sigma",
    "init_networks",
    "open_loop_step",
    "closed_loop_step",
    "broadcast_step",
    "interference_step",
    "system_link",
    "fixed_sigma_link",
    "transmit_codebook",
    "rotation_loss",
    "rotation_loss_grad",
    "derotate",
    "slot_leakage",
]

SCENARIOS = ("open_loop", "closed_loop", "broadcast", "interference", "awgn_gs")


@dataclass
class ScenarioConfig:
    """Dimensions, architecture and training schedule of one scenario.

    ``snr_db`` lists the training SNR stages (equal-length quarters, thirds,
    ... of ``steps``). ``snr_kind`` is ``"snr"`` (``pt / (nt n0)``) or
    ``"ebn0"`` (``pt / (r n0)``). A positive ``lr_final`` decays the Adam
    step size exponentially from ``lr`` to ``lr_final`` over the run; 0
    keeps it constant. With ``starts > 1`` the trainer first runs that many
    candidates for ``probe_steps`` steps each (constant step size, first SNR
    stage), keeps the one with the lowest mean loss over the last quarter of
    its probe and continues training it for ``steps`` steps.
    """

    scenario: str = "open_loop"
    nt: int = 2
    nr: int = 1
    nb: int = 2
    l: int = 2
    m: int = 4
    pt: float = 1.0
    users: int = 1
    tx_hidden: tuple = (64, 64, 64)
    rx_hidden: tuple = (512, 512, 512)
    batch: int = 8192
    steps: int = 400
    lr: float = 1e-3
    snr_db: tuple = (15.0,)
    snr_kind: str = "snr"
    seed: int = 0
    lr_final: float = 0.0
    starts: int = 1
    probe_steps: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        self.tx_hidden = tuple(int(v) for v in self.tx_hidden)
        self.rx_hidden = tuple(int(v) for v in self.rx_hidden)
        self.snr_db = tuple(float(v) for v in self.snr_db)
        if not self.snr_db:
            raise ValueError("need at least one training SNR")
        if self.lr_final < 0:
            raise ValueError("lr_final must be non-negative")
        if self.starts < 1:
            raise ValueError("starts must be at least 1")
        if self.starts > 1 and self.probe_steps < 4:
            raise ValueError("multi-start training needs probe_steps >= 4")
        if self.steps < len(self.snr_db):
            raise ValueError("fewer gradient steps than SNR stages")
        if self.scenario in ("closed_loop", "broadcast") and self.batch % self.group:
            raise ValueError(f"batch {self.batch} is not a multiple of the message-set size {self.group}")
        if self.scenario == "interference" and self.users != 2:
            raise ValueError("the interference trainer supports exactly two users")

    @property
    def messages(self) -> int:
        """Cardinality of the transmitter's one-hot input."""
        if self.scenario == "open_loop":
            return self.m**self.l
        if self.scenario == "broadcast":
            return self.m**self.nr
        return self.m

    @property
    def group(self) -> int:
        return self.messages

    @property
    def rate(self) -> float:
        """Bits per channel use (per user for the interference channel)."""
        if self.scenario == "open_loop":
            return self.l * np.log2(self.m) / self.nb
        if self.scenario == "broadcast":
            return self.nr * np.log2(self.m)
        return np.log2(self.m) / self.nb

    def noise(self, snr_db) -> NoiseSpec:
        return NoiseSpec(float(snr_db), self.snr_kind, self.pt, self.nt, self.rate)

    def to_dict(self):
        d = asdict(self)
        for k in ("tx_hidden", "rx_hidden", "snr_db"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper(cls, scenario, m=None):
        """Full-size architecture and schedule from the reference tables."""
        if scenario == "open_loop":
            m = m or 4
            return cls("open_loop", 2, 1, 2, 2, m, 1.0, 1, (64,) * 3, (512,) * 3, 65536, 20000,
                       1e-3, (15.0 if m == 4 else 18.0,))
        if scenario == "closed_loop":
            return cls("closed_loop", 2, 2, 1, 1, m or 16, 1.0, 1, (1024,) * 3, (1024,) * 3, 10240,
                       2_000_000, 1e-3, (5.0, 10.0, 15.0, 12.0))
        if scenario == "broadcast":
            return cls("broadcast", 2, 2, 1, 1, m or 4, 1.0, 2, (512,) * 3, (256,) * 3, 10240,
                       400_000, 1e-3, (12.0, 15.0, 18.0, 20.0))
        if scenario == "interference":
            return cls("interference", 1, 1, 4, 1, m or 256, 1.0, 2, (256,), (256,), 65536, 50_000,
                       1e-3, (11.0,), "ebn0")
        if scenario == "awgn_gs":
            return cls("awgn_gs", 1, 1, 2, 1, m or 256, 1.0, 1, (), (256, 256), 2048, 3000, 3e-3,
                       (16.0,))
        raise ValueError(f"unknown scenario {scenario!r}")

    @classmethod
    def desk(cls, scenario, m=None):
        """Full-size configuration with the batch divided by 8 and the steps by 50."""
        cfg = cls.paper(scenario, m)
        if scenario == "awgn_gs":
            return cfg
        cfg.batch //= 8
        cfg.steps //= 50
        return cfg


@dataclass
class TrainedSystem:
    config: ScenarioConfig
    networks: dict
    loss_trace: np.ndarray
    flags: dict = field(default_factory=dict)

    def save(self, path):
        meta = {"config": self.config.to_dict(), "flags": self.flags,
                "loss_trace": [float(v) for v in self.loss_trace]}
        save_networks(path, self.networks, self.config.scenario, self.config.seed, meta)

    @classmethod
    def load(cls, path):
        nets, header = load_networks(path)
        meta = header["meta"]
        cfg = ScenarioConfig.from_dict(meta["config"])
        return cls(cfg, nets, np.array(meta.get("loss_trace", [])), meta.get("flags", {}))


def _check_divergence(trace, cardinality):
    k = max(1, len(trace) // 10)
    flags = {"final_loss": float(np.mean(trace[-max(1, len(trace) // 20):]))}
    flags["diverged"] = bool(np.mean(trace[k - 1:k + 1]) > np.log(cardinality))
    flags["better_than_chance"] = bool(flags["final_loss"] < np.log(cardinality))
    if flags["diverged"]:
        warnings.warn(f"loss still above ln({cardinality}) after 10% of the steps")
    return flags


def _vec(mat):
    """Column-stacking vectorization of a stack of matrices ``(..., r, c)``."""
    return np.swapaxes(mat, -1, -2).reshape(mat.shape[:-2] + (-1,))


def _unvec(v, rows, cols):
    return np.swapaxes(v.reshape(v.shape[:-1] + (cols, rows)), -1, -2)


# --- open loop ----------------------------------------------------------------------

def _open_loop_rx_input(y, h):
    return np.concatenate([complex_to_real(_vec(y)), complex_to_real(_vec(h))], axis=-1)


def open_loop_step(nets, cfg: ScenarioConfig, msgs, h, noise):
    """Loss and gradients for one open-loop minibatch with pre-drawn randomness.

    ``msgs`` (B,), ``h`` (B, N_R, N_T) and ``noise`` (B, N_R, N_B) fix every
    random quantity, which makes the step a deterministic function of the
    network parameters.
    """
    tx, rx = nets["tx"], nets["rx"]
    book = codebook_forward(tx, cfg.messages, cfg.nb, cfg.pt)
    x = _unvec(book.x[msgs], cfg.nt, cfg.nb)
    y = h @ x + noise
    loss, g_rx, d_in, _ = receiver_step(rx, _open_loop_rx_input(y, h), msgs)
    g_y = _unvec(real_to_complex(d_in[:, :2 * cfg.nr * cfg.nb]), cfg.nr, cfg.nb)
    g_x = np.swapaxes(h.conj(), -1, -2) @ g_y
    g_tx = codebook_backward(tx, book, msgs, _vec(g_x))
    return loss, {"tx": g_tx, "rx": g_rx}


def init_networks(cfg: ScenarioConfig, rng: RngStream) -> dict:
    """Freshly initialized networks for a scenario, keyed as in :class:`TrainedSystem`."""
    k = cfg.messages
    csi = 2 * cfg.nr * cfg.nt
    if cfg.scenario == "open_loop":
        return {"tx": mlp_for(k, cfg.tx_hidden, 2 * cfg.nt * cfg.nb, "linear", rng),
                "rx": mlp_for(2 * cfg.nr * (cfg.nb + cfg.nt), cfg.rx_hidden, k, "softmax", rng)}
    if cfg.scenario == "closed_loop":
        return {"tx": mlp_for(k + csi, cfg.tx_hidden, 2 * cfg.nt, "linear", rng),
                "rx": mlp_for(2 * cfg.nr + csi, cfg.rx_hidden, cfg.m, "softmax", rng)}
    if cfg.scenario == "broadcast":
        return {"tx": mlp_for(k + csi, cfg.tx_hidden, 2 * cfg.nt, "linear", rng),
                "rx": mlp_for(2 + 2 * cfg.nt, cfg.rx_hidden, cfg.m, "softmax", rng)}
    if cfg.scenario == "interference":
        nets = {}
        for i in (1, 2):
            nets[f"tx{i}"] = mlp_for(cfg.m, cfg.tx_hidden, 2 * cfg.nb, "linear", rng)
            nets[f"rx{i}"] = mlp_for(2 * cfg.nb, cfg.rx_hidden, cfg.m, "softmax", rng)
        return nets
    raise ValueError(f"no networks for scenario {cfg.scenario!r}")


def learning_rates(cfg: ScenarioConfig):
    """Adam step size for every gradient step."""
    if cfg.lr_final <= 0:
        return np.full(cfg.steps, cfg.lr)
    frac = np.arange(cfg.steps) / max(1, cfg.steps - 1)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


def _run(cfg, nets, step, progress):
    opt = Optimizers(nets, cfg.lr)
    snrs = stage_snrs(cfg.snr_db, cfg.steps)
    rates = learning_rates(cfg)
    trace = np.empty(cfg.steps)
    for t in range(cfg.steps):
        for state in opt.states.values():
            state.lr = rates[t]
        loss, grads = step(cfg.noise(snrs[t]).n0)
        opt.step(grads)
        trace[t] = loss
        if progress:
            progress(t, loss)
    return trace


def train_open_loop(cfg: ScenarioConfig, rng: RngStream, progress=None, nets=None) -> TrainedSystem:
    """Open-loop MIMO: message tuple -> N_T x N_B code block; receiver sees (Y, H)."""
    if cfg.scenario != "open_loop":
        raise ValueError("config is not an open-loop scenario")
    nets = nets or init_networks(cfg, rng)
    b = cfg.batch

    def step(n0):
        msgs = rng.integers(cfg.messages, b)
        h = rng.complex_normal((b, cfg.nr, cfg.nt))
        noise = rng.complex_normal((b, cfg.nr, cfg.nb), n0)
        return open_loop_step(nets, cfg, msgs, h, noise)

    trace = _run(cfg, nets, step, progress)
    return TrainedSystem(cfg, nets, trace, _check_divergence(trace, cfg.messages))


# --- closed loop and broadcast ------------------------------------------------------

def _csi_tx_input(m, h):
    """One-hot over the message set concatenated with vec(H) reals, all messages per draw."""
    g = h.shape[0]
    onehot = np.tile(np.eye(m), (g, 1))
    csi = np.repeat(complex_to_real(_vec(h)), m, axis=0)
    return np.concatenate([onehot, csi], axis=1)


def _csi_transmit(tx, m, h, pt):
    out, cache = forward_cached(tx, _csi_tx_input(m, h))
    raw = real_to_complex(out).reshape(h.shape[0], m, -1)
    x, scale = normalize_conditional_power(raw, pt)
    return raw, x, scale, cache


def _closed_loop_rx_input(y, h):
    draws, m, _ = y.shape
    return np.concatenate([complex_to_real(y).reshape(draws * m, -1),
                           np.repeat(complex_to_real(_vec(h)), m, axis=0)], axis=1)


def closed_loop_step(nets, cfg: ScenarioConfig, h, noise):
    """Loss and gradients for ``h`` (G, N_R, N_T) carrying all M messages each; ``noise`` (G, M, N_R)."""
    tx, rx = nets["tx"], nets["rx"]
    m = cfg.m
    draws = h.shape[0]
    raw, x, scale, cache = _csi_transmit(tx, m, h, cfg.pt)
    y = np.einsum("grt,gmt->gmr", h, x) + noise
    labels = np.tile(np.arange(m), draws)
    loss, g_rx, d_in, _ = receiver_step(rx, _closed_loop_rx_input(y, h), labels)
    g_y = real_to_complex(d_in[:, :2 * cfg.nr]).reshape(draws, m, cfg.nr)
    g_x = np.einsum("grt,gmr->gmt", h.conj(), g_y)
    g_raw = normalize_power_backward(raw, scale, g_x)
    g_tx, _ = backprop(tx, cache, complex_to_real(g_raw).reshape(draws * m, -1))
    return loss, {"tx": g_tx, "rx": g_rx}


def train_closed_loop(cfg: ScenarioConfig, rng: RngStream, progress=None, nets=None) -> TrainedSystem:
    """Closed-loop MIMO with CSI at both ends and per-realization power normalization.

    Minibatches are ``batch / M`` channel draws, each carrying all ``M``
    messages.
    """
    if cfg.scenario != "closed_loop":
        raise ValueError("config is not a closed-loop scenario")
    nets = nets or init_networks(cfg, rng)
    draws = cfg.batch // cfg.m

    def step(n0):
        h = rng.complex_normal((draws, cfg.nr, cfg.nt))
        noise = rng.complex_normal((draws, cfg.m, cfg.nr), n0)
        return closed_loop_step(nets, cfg, h, noise)

    trace = _run(cfg, nets, step, progress)
    return TrainedSystem(cfg, nets, trace, _check_divergence(trace, cfg.m))


def _tuples(m, users):
    return np.array(list(itertools.product(range(m), repeat=users)))


def _broadcast_rx_input(y, h):
    """Per-user receiver inputs: (y_i reals, h_i reals), users stacked along the batch."""
    # y: (N, users) ; h: (N, users, nt)
    per_user = [np.concatenate([complex_to_real(y[:, i:i + 1]), complex_to_real(h[:, i, :])], axis=1)
                for i in range(y.shape[1])]
    return np.concatenate(per_user, axis=0)


def broadcast_step(nets, cfg: ScenarioConfig, h, noise):
    """Loss and gradients for ``h`` (G, N_R, N_T) carrying all M^N_R tuples; ``noise`` (G, K, N_R)."""
    tx, rx = nets["tx"], nets["rx"]
    users = cfg.nr
    k = cfg.messages
    draws = h.shape[0]
    n = draws * k
    tuples = _tuples(cfg.m, users)
    labels = np.concatenate([np.tile(tuples[:, i], draws) for i in range(users)])
    raw, x, scale, cache = _csi_transmit(tx, k, h, cfg.pt)
    y = np.einsum("grt,gmt->gmr", h, x) + noise
    rx_in = _broadcast_rx_input(y.reshape(-1, users), np.repeat(h, k, axis=0))
    # the batch mean over stacked users equals the mean of the per-user losses
    loss, g_rx, d_in, _ = receiver_step(rx, rx_in, labels)
    g_y = np.stack([real_to_complex(d_in[i * n:(i + 1) * n, :2])[:, 0] for i in range(users)], axis=-1)
    g_x = np.einsum("grt,gmr->gmt", h.conj(), g_y.reshape(draws, k, users))
    g_raw = normalize_power_backward(raw, scale, g_x)
    g_tx, _ = backprop(tx, cache, complex_to_real(g_raw).reshape(n, -1))
    return loss, {"tx": g_tx, "rx": g_rx}


def train_broadcast(cfg: ScenarioConfig, rng: RngStream, progress=None, nets=None) -> TrainedSystem:
    """MIMO broadcast: one CSI-aware transmitter, single-antenna users sharing one receiver network.

    The loss is the mean of the per-user cross-entropies.
    """
    if cfg.scenario != "broadcast":
        raise ValueError("config is not a broadcast scenario")
    nets = nets or init_networks(cfg, rng)
    draws = cfg.batch // cfg.messages

    def step(n0):
        h = rng.complex_normal((draws, cfg.nr, cfg.nt))
        noise = rng.complex_normal((draws, cfg.messages, cfg.nr), n0)
        return broadcast_step(nets, cfg, h, noise)

    trace = _run(cfg, nets, step, progress)
    return TrainedSystem(cfg, nets, trace, _check_divergence(trace, cfg.m))


# --- interference channel -----------------------------------------------------------

def interference_step(nets, cfg: ScenarioConfig, alpha, m1, m2, noise1, noise2):
    """Per-user losses and gradients of ``alpha J1 + (1 - alpha) J2`` for one minibatch.

    Returns ``(j1, j2, grads)``.
    """
    m, nb = cfg.m, cfg.nb
    book1 = codebook_forward(nets["tx1"], m, nb, cfg.pt)
    book2 = codebook_forward(nets["tx2"], m, nb, cfg.pt)
    s = book1.x[m1] + book2.x[m2]
    j1, g_rx1, d1, _ = receiver_step(nets["rx1"], complex_to_real(s + noise1), m1)
    j2, g_rx2, d2, _ = receiver_step(nets["rx2"], complex_to_real(s + noise2), m2)
    # both transmitters reach both receivers with unit gain
    g_x = alpha * real_to_complex(d1) + (1.0 - alpha) * real_to_complex(d2)
    grads = {
        "rx1": g_rx1.scaled(alpha),
        "rx2": g_rx2.scaled(1.0 - alpha),
        "tx1": codebook_backward(nets["tx1"], book1, m1, g_x),
        "tx2": codebook_backward(nets["tx2"], book2, m2, g_x),
    }
    return j1, j2, grads


def train_interference(cfg: ScenarioConfig, rng: RngStream, progress=None, nets=None) -> TrainedSystem:
    """Two transmitter/receiver pairs on the all-ones interference channel.

    No parameters are shared. The common loss ``a J1 + (1 - a) J2`` uses a
    weight ``a`` refreshed every step from the previous per-user losses,
    starting at 0.5. ``flags["alpha_trace"]`` keeps the weights used.
    """
    if cfg.scenario != "interference":
        raise ValueError("config is not an interference scenario")
    nets = nets or init_networks(cfg, rng)
    b = cfg.batch
    alphas = []
    state = {"alpha": 0.5}

    def step(n0):
        alpha = state["alpha"]
        m1 = rng.integers(cfg.m, b)
        m2 = rng.integers(cfg.m, b)
        noise1 = rng.complex_normal((b, cfg.nb), n0)
        noise2 = rng.complex_normal((b, cfg.nb), n0)
        j1, j2, grads = interference_step(nets, cfg, alpha, m1, m2, noise1, noise2)
        alphas.append(alpha)
        state["alpha"] = j1 / (j1 + j2)
        return alpha * j1 + (1.0 - alpha) * j2, grads

    trace = _run(cfg, nets, step, progress)
    flags = _check_divergence(trace, cfg.m)
    flags["final_alpha"] = float(state["alpha"])
    flags["alpha_trace"] = [float(a) for a in alphas[::max(1, len(alphas) // 200)]]
    return TrainedSystem(cfg, nets, trace, flags)


def train_fixed_sigma(sigma, m: int, snr_db: float, rng: RngStream, pt: float = 1.0, nt: int = 2,
                      **kw):
    """Joint constellation for parallel subchannels with fixed gains ``sigma``.

    Trains an autoencoder over ``y = diag(sigma) s + n`` with
    ``E||s||^2 = pt`` and ``n0 = pt / (nt 10^(snr/10))``. Returns the learned
    ``(M, len(sigma))`` complex points.
    """
    dims = len(sigma)
    per_dim = pt / dims
    # the AWGN trainer defines SNR per complex dimension at energy per_dim
    snr_dim = snr_db + 10 * np.log10(nt * per_dim / pt)
    tx, _, trace = train_awgn_ae(m, dims, snr_dim, rng, gains=sigma, pt=per_dim, **kw)
    book = codebook_forward(tx, m, dims, per_dim)
    return book.x, trace


TRAINERS = {
    "open_loop": train_open_loop,
    "closed_loop": train_closed_loop,
    "broadcast": train_broadcast,
    "interference": train_interference,
}


def train(cfg: ScenarioConfig, rng: RngStream = None, progress=None) -> TrainedSystem:
    """Train the end-to-end system of ``cfg`` (multi-start when ``cfg.starts > 1``).

    Candidate k draws everything from ``rng.derive(k)``; the winner keeps
    drawing from its own stream while it is trained further.
    """
    rng = rng or RngStream(cfg.seed)
    if cfg.scenario not in TRAINERS:
        raise ValueError(f"no end-to-end trainer for {cfg.scenario!r}")
    trainer = TRAINERS[cfg.scenario]
    if cfg.starts == 1:
        return trainer(cfg, rng, progress)
    probe = replace(cfg, steps=cfg.probe_steps, snr_db=cfg.snr_db[:1], lr_final=0.0,
                    starts=1, probe_steps=0)
    streams = [rng.derive(k) for k in range(cfg.starts)]
    candidates = [trainer(probe, s) for s in streams]
    tail = max(1, cfg.probe_steps // 4)
    scores = [float(np.mean(c.loss_trace[-tail:])) for c in candidates]
    best = int(np.argmin(scores))
    system = trainer(cfg, streams[best], progress, nets=candidates[best].networks)
    system.flags.update(start=best, probe_scores=scores)
    return system


# --- evaluation links ---------------------------------------------------------------

def _argmax_chunked(net, inputs, chunk=16384):
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for lo in range(0, inputs.shape[0], chunk):
        out[lo:lo + chunk] = np.argmax(forward(net, inputs[lo:lo + chunk]), axis=1)
    return out


def transmit_codebook(system: TrainedSystem, name="tx"):
    """Normalized transmitter outputs for every message of a CSI-free transmitter."""
    cfg = system.config
    nb = cfg.nb
    book = codebook_forward(system.networks[name], cfg.messages, nb, cfg.pt)
    return book.x


def system_link(system: TrainedSystem, sigma=None) -> Link:
    """Evaluation link for a trained system.

    ``sigma`` (closed loop only) replaces Rayleigh draws by channels with
    fixed singular values and Haar-random singular vectors.
    """
    cfg = system.config
    nets = system.networks
    if cfg.scenario == "open_loop":
        book = transmit_codebook(system)
        k = cfg.messages

        def encode(n, rng):
            msgs = rng.integers(k, n)
            return msgs[:, None], _unvec(book[msgs], cfg.nt, cfg.nb)

        def channel(x, n0, rng):
            h = draw_rayleigh(cfg.nr, cfg.nt, rng, size=x.shape[0]).h
            y = h @ x + rng.complex_normal((x.shape[0], cfg.nr, cfg.nb), n0)
            return _open_loop_rx_input(y, h)

        def detect(inputs):
            return _argmax_chunked(nets["rx"], inputs)[:, None]

        return Link(encode, channel, detect, 1, "ae_open_loop")

    if cfg.scenario in ("closed_loop", "broadcast"):
        k = cfg.messages
        users = 1 if cfg.scenario == "closed_loop" else cfg.nr
        tuples = np.arange(k)[:, None] if users == 1 else _tuples(cfg.m, users)

        def encode(n, rng):
            if n % k:
                raise ValueError(f"trial count {n} must be a multiple of {k}")
            msgs = np.tile(tuples, (n // k, 1))
            return msgs, n // k

        def channel(draws, n0, rng):
            if sigma is not None:
                h = fixed_singular_channel(sigma, rng, size=draws).h
            else:
                h = rng.complex_normal((draws, cfg.nr, cfg.nt))
            _, x, _, _ = _csi_transmit(nets["tx"], k, h, cfg.pt)
            y = np.einsum("grt,gmt->gmr", h, x) + rng.complex_normal((draws, k, cfg.nr), n0)
            if users == 1:
                return np.concatenate([complex_to_real(y).reshape(draws * k, -1),
                                       np.repeat(complex_to_real(_vec(h)), k, axis=0)], axis=1)
            return _broadcast_rx_input(y.reshape(-1, users), np.repeat(h, k, axis=0))

        def detect(inputs):
            est = _argmax_chunked(nets["rx"], inputs)
            return est.reshape(users, -1).T

        return Link(encode, channel, detect, users, f"ae_{cfg.scenario}", group=k)

    if cfg.scenario == "interference":
        b1 = transmit_codebook(system, "tx1")
        b2 = transmit_codebook(system, "tx2")

        def encode(n, rng):
            msgs = rng.integers(cfg.m, (n, 2))
            return msgs, (b1[msgs[:, 0]], b2[msgs[:, 1]])

        def channel(x, n0, rng):
            return interference_outputs(x[0], x[1], n0, rng)

        def detect(y):
            return np.stack([_argmax_chunked(nets["rx1"], complex_to_real(y[0])),
                             _argmax_chunked(nets["rx2"], complex_to_real(y[1]))], axis=1)

        link = Link(encode, channel, detect, 2, "ae_interference")
        link.rate = cfg.rate
        return link
    raise ValueError(f"no link for scenario {cfg.scenario!r}")


def fixed_sigma_link(points, sigma, pt: float = 1.0, name="joint4d"):
    """Parallel-subchannel link ``y = diag(sigma) s + n`` with ML detection over ``points``."""
    points = np.asarray(points)
    sigma = np.asarray(sigma, dtype=float)
    m = len(points)

    def encode(n, rng):
        msgs = rng.integers(m, n)
        return msgs[:, None], points[msgs] * sigma

    def channel(x, n0, rng):
        return x + rng.complex_normal(x.shape, n0)

    def detect(y):
        return ml_detect_batch(y, points * sigma)[:, None]

    return Link(encode, channel, detect, 1, name)


# --- de-rotation --------------------------------------------------------------------

def _givens_derivative(n, i, j, theta):
    d = np.zeros((n, n))
    c, s = np.cos(theta), np.sin(theta)
    d[i, i] = -s
    d[j, j] = -s
    d[i, j] = -c
    d[j, i] = c
    return d


def rotation_loss(theta, x1, x2):
    """Energy of user 1 in the lower half plus user 2 in the upper half after rotation.

    ``x1``, ``x2`` are real ``(n, M)`` matrices, one column per point.
    """
    n = x1.shape[0]
    r = givens_product(n, theta)
    h = n // 2
    return float(np.sum((r[h:] @ x1) ** 2) + np.sum((r[:h] @ x2) ** 2))


def rotation_loss_grad(theta, x1, x2):
    """:func:`rotation_loss` and its gradient in the Givens angles."""
    n = x1.shape[0]
    pairs = givens_pairs(n)
    factors = [givens(n, i, j, t) for (i, j), t in zip(pairs, theta)]
    prefix = [np.eye(n)]
    for g in factors:
        prefix.append(prefix[-1] @ g)
    suffix = [np.eye(n)]
    for g in reversed(factors):
        suffix.append(g @ suffix[-1])
    suffix = suffix[::-1]            # suffix[k] = G_k ... G_last
    r = prefix[-1]
    h = n // 2
    c1 = x1 @ x1.T
    c2 = x2 @ x2.T
    loss = float(np.trace(r[h:] @ c1 @ r[h:].T) + np.trace(r[:h] @ c2 @ r[:h].T))
    d_r = np.zeros((n, n))
    d_r[h:] = 2.0 * r[h:] @ c1
    d_r[:h] = 2.0 * r[:h] @ c2
    grad = np.empty(len(pairs))
    for k, ((i, j), t) in enumerate(zip(pairs, theta)):
        dk = prefix[k] @ _givens_derivative(n, i, j, t) @ suffix[k + 1]
        grad[k] = np.sum(d_r * dk)
    return loss, grad


def slot_leakage(x1, x2):
    """Fraction of each user's energy sitting in the other user's half of the dimensions."""
    h = x1.shape[0] // 2
    e1 = np.sum(x1[h:] ** 2) / np.sum(x1**2)
    e2 = np.sum(x2[:h] ** 2) / np.sum(x2**2)
    return float(e1), float(e2)


def derotate(x1, x2, steps: int = 20000, lr: float = 1e-3, rng: RngStream = None, theta0=None,
             tol: float = 1e-12):
    """Search Givens angles that confine user 1 to the upper and user 2 to the lower half.

    Full-batch gradient descent on the rotation loss; the step uses the loss
    averaged over the ``M`` points (``lr`` is per point). Angles start uniform
    on ``[0, 2 pi)`` unless ``theta0`` is given.

    Returns
    -------
    theta : ndarray
    rotated : tuple of ndarray
        ``(R x1, R x2)``.
    trace : ndarray
        Loss per step (full, unaveraged). The returned angles are the best
        seen, so the final loss never exceeds the initial one.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = x1.shape[0]
    if n % 2:
        raise ValueError(f"dimension {n} is odd")
    if x2.shape[0] != n:
        raise ValueError("user constellations differ in dimension")
    count = len(givens_pairs(n))
    if theta0 is None:
        rng = rng or RngStream(0)
        theta = rng.uniform(0.0, 2 * np.pi, count)
    else:
        theta = np.array(theta0, dtype=float)
    per_point = 1.0 / x1.shape[1]
    trace = []
    best_theta, best_loss = theta.copy(), np.inf
    for _ in range(steps):
        loss, grad = rotation_loss_grad(theta, x1, x2)
        trace.append(loss)
        if loss < best_loss:
            best_theta, best_loss = theta.copy(), loss
        if loss * per_point < tol:
            break
        theta = theta - lr * per_point * grad
    r = givens_product(n, best_theta)
    return best_theta, (r @ x1, r @ x2), np.array(trace)


def constellation_to_real(points):
    """``(M, n)`` complex points -> ``(2n, M)`` real matrix with interleaved re/im rows."""
    return complex_to_real(np.asarray(points)).T


def real_to_points(mat):
    return real_to_complex(np.asarray(mat).T)


def config_json(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
