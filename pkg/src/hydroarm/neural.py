"""Minimal MLP engine: forward/backward, Adam, running normalization,
and versioned JSON weight files.

Everything runs in float64 with a fixed reduction order, so training and
inference are bit-reproducible for a given seed. Gradients are exact
reverse-mode; the test suite checks them against central finite
differences.
"""

import json
from dataclasses import dataclass, field

import numpy as np

WEIGHT_FORMAT_VERSION = "hydroarm-weights-v1"

HIDDEN_ACTIVATIONS = ("relu", "elu")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "elu"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or any(s <= 0 for s in self.layer_sizes):
            raise ValueError("need >= 2 positive layer sizes")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(z))
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if name == "tanh":
        return np.tanh(z)
    return z  # linear


def _act_grad(name, z, a):
    """Derivative of the activation, given pre-activation z and output a."""
    if name == "relu":
        return (z > 0.0).astype(float)
    if name == "elu":
        return np.where(z > 0.0, 1.0, a + 1.0)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class MlpWeights:
    spec: MlpSpec
    layers: list                      # [(W (in, out), b (out,)), ...]
    version: int = 0                  # bumped on every in-place update

    def parameters(self):
        for W, b in self.layers:
            yield W
            yield b

    def copy(self):
        return MlpWeights(
            self.spec, [(W.copy(), b.copy()) for W, b in self.layers], self.version
        )


def init_mlp(spec, rng):
    """He-style uniform initialization, deterministic for a given rng."""
    layers = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((W, b))
    return MlpWeights(spec=spec, layers=layers)


@dataclass
class ForwardCache:
    version: int
    inputs: list       # activation entering each layer, batch-shaped
    pre_acts: list     # z = x W + b per layer
    squeeze: bool      # input arrived as a 1-D vector


def mlp_forward(weights, x):
    """Forward pass. x is (n,) or (batch, n); returns (output, cache)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != weights.spec.layer_sizes[0]:
        raise ValueError(
            f"input width {x.shape[1]} != first layer size {weights.spec.layer_sizes[0]}"
        )
    spec = weights.spec
    n_layers = len(weights.layers)
    inputs, pre_acts = [], []
    a = x
    for i, (W, b) in enumerate(weights.layers):
        inputs.append(a)
        z = a @ W + b
        pre_acts.append(z)
        name = spec.output_activation if i == n_layers - 1 else spec.hidden_activation
        a = _act(name, z)
    cache = ForwardCache(weights.version, inputs, pre_acts, squeeze)
    return (a[0] if squeeze else a), cache


def mlp_backward(weights, cache, grad_output):
    """Exact gradients of a scalar loss given d(loss)/d(output).

    Returns (grads, grad_input) where grads mirrors weights.layers. The
    cache must come from a forward pass through the same weight version.
    """
    if cache.version != weights.version:
        raise ValueError("stale forward cache: weights were updated since the pass")
    spec = weights.spec
    n_layers = len(weights.layers)
    g = np.asarray(grad_output, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        W, _ = weights.layers[i]
        z = cache.pre_acts[i]
        name = spec.output_activation if i == n_layers - 1 else spec.hidden_activation
        a = _act(name, z)
        dz = g * _act_grad(name, z, a)
        grads[i] = (cache.inputs[i].T @ dz, dz.sum(axis=0))
        g = dz @ W.T
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class AdamState:
    """Bias-corrected Adam over a list of parameter arrays."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def ensure_shapes(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state):
    """One in-place Adam update over matching lists of arrays."""
    state.ensure_shapes(params)
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in Adam step")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


def adam_step_mlp(weights, grads, state):
    """Adam update over an MlpWeights' layers; bumps the weight version."""
    params = list(weights.parameters())
    flat_grads = []
    for gW, gb in grads:
        flat_grads.extend([gW, gb])
    adam_step(params, flat_grads, state)
    weights.version += 1
    return weights


STD_FLOOR = 1e-6


@dataclass
class Normalizer:
    """Running mean/std (population) feature normalizer."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def for_dim(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), 0)

    @property
    def std(self):
        return np.sqrt(self.var)

    def update(self, batch):
        """Merge a batch of rows into the running statistics (Chan update)."""
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, n
            return
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.var = (
            self.var * (self.count / total)
            + b_var * (n / total)
            + np.square(delta) * (self.count * n / total**2)
        )
        self.count = total

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / np.maximum(self.std, STD_FLOOR)

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * np.maximum(self.std, STD_FLOOR) + self.mean


class WeightFormatError(ValueError):
    pass


def _normalizer_to_json(norm):
    return {"mean": norm.mean.tolist(), "var": norm.var.tolist(), "count": norm.count}


def _normalizer_from_json(obj):
    return Normalizer(
        np.asarray(obj["mean"], dtype=float),
        np.asarray(obj["var"], dtype=float),
        int(obj["count"]),
    )


def save_weights(path, weights, normalizers=None, metadata=None):
    """Versioned JSON weight file; round-trips bit-exactly in float64."""
    doc = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "spec": {
            "layer_sizes": list(weights.spec.layer_sizes),
            "hidden_activation": weights.spec.hidden_activation,
            "output_activation": weights.spec.output_activation,
        },
        "layers": [
            {"W": W.tolist(), "b": b.tolist()} for W, b in weights.layers
        ],
        "normalizers": {
            name: _normalizer_to_json(norm) for name, norm in (normalizers or {}).items()
        },
        "metadata": metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_weights(path):
    """Load a weight file; returns (MlpWeights, normalizers, metadata)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"cannot read weight file {path}: {exc}") from exc
    if doc.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise WeightFormatError(
            f"unsupported weight format {doc.get('format_version')!r}"
        )
    try:
        spec = MlpSpec(
            tuple(doc["spec"]["layer_sizes"]),
            doc["spec"]["hidden_activation"],
            doc["spec"]["output_activation"],
        )
        layers = [
            (np.asarray(l["W"], dtype=float), np.asarray(l["b"], dtype=float))
            for l in doc["layers"]
        ]
    except (KeyError, TypeError) as exc:
        raise WeightFormatError(f"malformed weight file {path}: {exc}") from exc
    weights = MlpWeights(spec=spec, layers=layers)
    expect = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    got = [W.shape for W, _ in layers]
    if got != expect:
        raise WeightFormatError(f"layer shapes {got} do not match spec {expect}")
    normalizers = {
        name: _normalizer_from_json(obj)
        for name, obj in doc.get("normalizers", {}).items()
    }
    return weights, normalizers, doc.get("metadata", {})


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    diff = pred - target
    loss = float(np.mean(np.square(diff)))
    return loss, 2.0 * diff / diff.size
