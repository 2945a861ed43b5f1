"""Small fully connected networks with hand-written reverse-mode gradients.

Networks act on row batches: an input of shape ``(B, n_in)`` maps to
``(B, n_out)``. Weights are stored as ``(out, in)`` matrices. Also home to the
transmitter power-normalization layers, Adam, and model persistence.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "NormalizationError",
    "Layer",
    "MlpParams",
    "GradientBundle",
    "AdamState",
    "init_mlp",
    "one_hot",
    "one_hot_batch",
    "forward",
    "forward_cached",
    "backprop",
    "backward",
    "softmax",
    "cross_entropy",
    "adam_init",
    "adam_step",
    "normalize_avg_power",
    "normalize_conditional_power",
    "normalize_power_backward",
    "real_to_complex",
    "complex_to_real",
    "save_networks",
    "load_networks",
]

ACTIVATIONS = ("relu", "linear", "softmax")
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NormalizationError(ZeroDivisionError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class MlpParams:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weight.shape[0]} -> {nxt.weight.shape[1]}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ValueError("softmax is only allowed as the final activation")

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def widths(self):
        return [self.input_width] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


@dataclass
class GradientBundle:
    """Per-layer ``(d_weight, d_bias)`` pairs mirroring an :class:`MlpParams`."""

    layers: list

    def arrays(self):
        out = []
        for dw, db in self.layers:
            out.extend([dw, db])
        return out

    def __add__(self, other):
        return GradientBundle([(a + c, b + d) for (a, b), (c, d) in zip(self.layers, other.layers)])

    def scaled(self, factor):
        return GradientBundle([(factor * a, factor * b) for a, b in self.layers])


def init_mlp(widths, activations, rng) -> MlpParams:
    """Random network: Kaiming-uniform for ReLU layers, Glorot-uniform otherwise, zero biases."""
    if len(activations) != len(widths) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        if act == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return MlpParams(layers)


def one_hot(m: int, cardinality: int) -> np.ndarray:
    """One-hot vector for message index ``m`` (0-based)."""
    if not 0 <= m < cardinality:
        raise IndexError(f"message {m} outside [0, {cardinality})")
    v = np.zeros(cardinality)
    v[m] = 1.0
    return v


def one_hot_batch(indices, cardinality: int) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= cardinality):
        raise IndexError(f"message indices outside [0, {cardinality})")
    out = np.zeros((indices.size, cardinality))
    out[np.arange(indices.size), indices.ravel()] = 1.0
    return out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "softmax":
        return softmax(z)
    return z


def forward_cached(params: MlpParams, x):
    """Forward pass that also returns the per-layer inputs and pre-activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_width:
        raise ShapeError(f"input shape {x.shape} does not match input width {params.input_width}")
    inputs, pre = [], []
    a = x
    for layer in params.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _activate(z, layer.activation)
    return a, (inputs, pre)


def forward(params: MlpParams, x):
    """Evaluate the network on a vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = forward_cached(params, x[None] if single else x)
    return out[0] if single else out


def backprop(params: MlpParams, cache, d_final):
    """Vector-Jacobian product through the network.

    ``d_final`` is the gradient with respect to the last layer's
    pre-activation (for a softmax output this is the logit gradient; for a
    linear output it is simply the output gradient).

    Returns the :class:`GradientBundle` and the gradient with respect to the
    network input.
    """
    inputs, pre = cache
    grads = [None] * len(params.layers)
    dz = d_final
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if k < len(params.layers) - 1 and layer.activation == "relu":
            dz = dz * (pre[k] > 0)
        grads[k] = (dz.T @ inputs[k], dz.sum(axis=0))
        dz = dz @ layer.weight
    return GradientBundle(grads), dz


def cross_entropy(probs, labels):
    """Batch-mean cross-entropy and its logit gradient for softmax outputs.

    Probabilities are floored at ``1e-12`` before the logarithm; samples whose
    true-label probability sits on the floor contribute no gradient.
    """
    labels = np.asarray(labels)
    b = probs.shape[0]
    if b == 0:
        raise ValueError("cross-entropy of an empty batch")
    picked = probs[np.arange(b), labels]
    loss = -np.mean(np.log(np.maximum(picked, PROB_FLOOR)))
    d = probs.copy()
    d[np.arange(b), labels] -= 1.0
    d[picked < PROB_FLOOR] = 0.0
    return loss, d / b


def backward(params: MlpParams, inputs, labels, loss="cross_entropy"):
    """Loss value and exact parameter gradients for a labelled batch."""
    if loss != "cross_entropy":
        raise ValueError(f"unsupported loss {loss!r}")
    if params.layers[-1].activation != "softmax":
        raise ValueError("cross-entropy needs a softmax output layer")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("backward needs a nonempty 2-D batch")
    probs, cache = forward_cached(params, inputs)
    value, d_logits = cross_entropy(probs, labels)
    grads, _ = backprop(params, cache, d_logits)
    return value, grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _param_arrays(obj):
    return obj.arrays() if hasattr(obj, "arrays") else list(obj)


def adam_init(params, lr=1e-3) -> AdamState:
    arrays = _param_arrays(params)
    return AdamState(lr=lr, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, applied in place. Returns ``(state, params)``."""
    p_arrays = _param_arrays(params)
    g_arrays = _param_arrays(grads)
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ShapeError("parameter, gradient and optimizer state structures differ")
    for p, g, m in zip(p_arrays, g_arrays, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


# --- complex <-> interleaved real ---------------------------------------------------

def real_to_complex(z):
    """Interpret the last axis as interleaved ``(re, im)`` pairs."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] % 2:
        raise ShapeError("need an even number of real outputs")
    pairs = z.reshape(z.shape[:-1] + (z.shape[-1] // 2, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


def complex_to_real(c):
    c = np.asarray(c)
    out = np.stack([c.real, c.imag], axis=-1)
    return out.reshape(c.shape[:-1] + (2 * c.shape[-1],))


# --- power normalization ------------------------------------------------------------

def _mean_energy(candidates):
    return np.mean(np.sum(np.abs(candidates) ** 2, axis=-1), axis=-1)


def normalize_avg_power(candidates, nb: int, pt: float):
    """Scale all candidate transmit vectors by one common factor.

    Parameters
    ----------
    candidates : ndarray, shape (..., M, n), complex
        Unnormalized transmitter outputs for every message. Leading axes are
        independent groups, each normalized on its own.
    nb : int
        Channel uses per block.
    pt : float
        Average power per channel use.

    Returns
    -------
    x : ndarray
        Scaled candidates with ``mean_i ||x_i||^2 == nb * pt`` per group.
    scale : ndarray
        The applied factor per group.
    """
    candidates = np.asarray(candidates)
    energy = _mean_energy(candidates)
    if np.any(energy <= 0):
        raise NormalizationError("all candidate vectors are zero")
    scale = np.sqrt(nb * pt / energy)
    return candidates * np.asarray(scale)[..., None, None], scale


def normalize_conditional_power(candidates, pt: float):
    """Per-channel-realization normalization: ``E{||x||^2 | H} = pt`` over messages only."""
    return normalize_avg_power(candidates, 1, pt)


def normalize_power_backward(candidates, scale, grad):
    """Gradient through :func:`normalize_avg_power` for real-valued losses.

    ``grad`` holds ``dL/dRe(x) + 1j dL/dIm(x)`` for the normalized outputs;
    returns the same quantity for the unnormalized ``candidates``.
    """
    scale = np.asarray(scale)[..., None, None]
    inner = np.sum((grad.conj() * candidates).real, axis=(-2, -1), keepdims=True)
    energy = np.sum(np.abs(candidates) ** 2, axis=(-2, -1), keepdims=True)
    return scale * (grad - candidates * inner / energy)


# --- persistence --------------------------------------------------------------------

MODEL_MAGIC = "AELAB-MODEL 1"


def save_networks(path, networks: dict, scenario: str = "", seed: int = 0, meta=None):
    """Write networks to a model file.

    Layout: a UTF-8 text header terminated by a line ``end``, then for each
    network (header order) and each layer the weight matrix (row-major,
    ``out x in``) followed by the bias, all little-endian float64.
    """
    lines = [MODEL_MAGIC, f"scenario {scenario}", f"seed {int(seed)}"]
    lines.append("meta " + json.dumps(meta or {}, sort_keys=True))
    for name, net in networks.items():
        lines.append(f"network {name} {len(net.layers)}")
        for layer in net.layers:
            out_w, in_w = layer.weight.shape
            lines.append(f"layer {in_w} {out_w} {layer.activation}")
    lines.append("end")
    blob = bytearray(("\n".join(lines) + "\n").encode("utf-8"))
    for net in networks.values():
        for layer in net.layers:
            blob += layer.weight.astype("<f8").tobytes(order="C")
            blob += layer.bias.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_networks(path):
    """Inverse of :func:`save_networks`. Returns ``(networks, header)``."""
    data = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = data.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: missing header terminator")
    header_lines = data[:cut].decode("utf-8").split("\n")
    body = memoryview(data)[cut + len(marker):]
    if header_lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    header = {"scenario": "", "seed": 0, "meta": {}}
    specs = {}
    current = None
    for line in header_lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "scenario":
            header["scenario"] = rest
        elif key == "seed":
            header["seed"] = int(rest)
        elif key == "meta":
            header["meta"] = json.loads(rest)
        elif key == "network":
            name, _count = rest.split()
            current = specs.setdefault(name, [])
        elif key == "layer":
            in_w, out_w, act = rest.split()
            current.append((int(in_w), int(out_w), act))
        else:
            raise ValueError(f"{path}: unexpected header line {line!r}")
    offset = 0
    networks = {}
    for name, layer_specs in specs.items():
        layers = []
        for in_w, out_w, act in layer_specs:
            n_w = in_w * out_w
            w = np.frombuffer(body, dtype="<f8", count=n_w, offset=offset).reshape(out_w, in_w)
            offset += 8 * n_w
            b = np.frombuffer(body, dtype="<f8", count=out_w, offset=offset)
            offset += 8 * out_w
            layers.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
        networks[name] = MlpParams(layers)
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes")
    return networks, header
