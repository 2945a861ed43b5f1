"""Shared machinery for end-to-end training loops.

Gradients of real losses with respect to complex signals are carried as
``dL/dRe(z) + 1j * dL/dIm(z)``. With that convention a linear map ``y = H x``
back-propagates as ``g_x = H^H g_y``.
"""

from dataclasses import dataclass

import numpy as np

from .neural import (
    adam_init,
    adam_step,
    backprop,
    complex_to_real,
    cross_entropy,
    forward_cached,
    init_mlp,
    normalize_avg_power,
    normalize_power_backward,
    real_to_complex,
)


@dataclass
class Codebook:
    """Transmitter evaluated on every one-hot input, plus what backprop needs."""

    raw: np.ndarray      # (M, n) complex, unnormalized
    x: np.ndarray        # (M, n) complex, normalized
    scale: float
    cache: tuple


def mlp_for(in_width, hidden, out_width, final, rng):
    widths = [in_width, *hidden, out_width]
    acts = ["relu"] * len(hidden) + [final]
    return init_mlp(widths, acts, rng)


def codebook_forward(tx, m, nb, pt) -> Codebook:
    out, cache = forward_cached(tx, np.eye(m))
    raw = real_to_complex(out)
    x, scale = normalize_avg_power(raw, nb, pt)
    return Codebook(raw, x, float(scale), cache)


def codebook_backward(tx, book: Codebook, messages, grad_x):
    """Scatter per-sample gradients onto codebook rows and backprop into ``tx``."""
    g_book = np.zeros_like(book.x)
    np.add.at(g_book, messages, grad_x)
    g_raw = normalize_power_backward(book.raw, book.scale, g_book)
    grads, _ = backprop(tx, book.cache, complex_to_real(g_raw))
    return grads


def receiver_step(rx, inputs, labels):
    """Forward + cross-entropy + backprop for a softmax receiver.

    Returns ``(loss, grads, d_inputs, probs)``.
    """
    probs, cache = forward_cached(rx, inputs)
    loss, d_logits = cross_entropy(probs, labels)
    grads, d_in = backprop(rx, cache, d_logits)
    return loss, grads, d_in, probs


def stage_snrs(stages, steps):
    """SNR for every gradient step: equal-length stages, remainder on the last."""
    stages = list(stages)
    per = steps // len(stages)
    out = []
    for k, snr in enumerate(stages):
        count = per if k < len(stages) - 1 else steps - per * (len(stages) - 1)
        out.extend([snr] * count)
    return np.array(out, dtype=float)


class Optimizers:
    """One Adam state per named network."""

    def __init__(self, networks: dict, lr: float):
        self.networks = networks
        self.states = {name: adam_init(net, lr) for name, net in networks.items()}

    def step(self, grads: dict):
        for name, g in grads.items():
            adam_step(self.states[name], self.networks[name], g)


def train_awgn_ae(m, dims, snr_db, rng, *, batch=1024, steps=2000, lr=1e-3,
                  tx_hidden=(), rx_hidden=(256, 256), gains=None, pt=1.0, init=None):
    """Autoencoder over ``y = g * x + n`` with ``n ~ CN(0, n0)``.

    ``x`` has ``dims`` complex entries and average energy ``dims * pt``;
    ``n0 = pt / 10^(snr/10)`` so ``snr_db`` is the SNR per complex dimension.
    ``gains`` (length ``dims``, default ones) model parallel subchannels.
    ``snr_db`` may be a scalar or a per-step array.

    Returns ``(tx, rx, loss_trace)``.
    """
    gains = np.ones(dims) if gains is None else np.asarray(gains, dtype=float)
    if init is None:
        tx = mlp_for(m, tx_hidden, 2 * dims, "linear", rng)
        rx = mlp_for(2 * dims, rx_hidden, m, "softmax", rng)
    else:
        tx, rx = init
    opt = Optimizers({"tx": tx, "rx": rx}, lr)
    snrs = np.broadcast_to(np.asarray(snr_db, dtype=float), (steps,))
    trace = np.empty(steps)
    for t in range(steps):
        n0 = pt / 10.0 ** (snrs[t] / 10.0)
        msgs = rng.integers(m, batch)
        book = codebook_forward(tx, m, dims, pt)
        y = book.x[msgs] * gains + rng.complex_normal((batch, dims), n0)
        loss, g_rx, d_in, _ = receiver_step(rx, complex_to_real(y), msgs)
        g_x = real_to_complex(d_in) * gains
        g_tx = codebook_backward(tx, book, msgs, g_x)
        opt.step({"tx": g_tx, "rx": g_rx})
        trace[t] = loss
    return tx, rx, trace
