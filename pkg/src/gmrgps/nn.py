"""Minimal dense-network engine: forward, manual reverse-mode gradients, Adam.

Just enough machinery for the reflex-generating networks and the baseline
controller net: affine layers, leaky-ReLU or identity activations, float64
throughout. There is no general computation graph; `Network.backward`
replays the intermediate values cached by the most recent `forward`.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "identity")
CHECKPOINT_VERSION = 1


def _activate(tag, z):
    if tag == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    return z


def _activate_deriv(tag, z):
    if tag == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


class GradientTape:
    """Per-parameter gradient buffers, shape-congruent with one Network."""

    def __init__(self, d_weights, d_biases):
        self.d_weights = d_weights
        self.d_biases = d_biases

    @classmethod
    def zeros_for(cls, net):
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def add_(self, other):
        for dw, ow in zip(self.d_weights, other.d_weights):
            dw += ow
        for db, ob in zip(self.d_biases, other.d_biases):
            db += ob
        return self

    def scale_(self, factor):
        for dw in self.d_weights:
            dw *= factor
        for db in self.d_biases:
            db *= factor
        return self

    def zero_(self):
        for dw in self.d_weights:
            dw[...] = 0.0
        for db in self.d_biases:
            db[...] = 0.0
        return self


class Network:
    """Feedforward stack of affine layers with per-layer activations.

    `dims` chains the layer sizes, e.g. ``(4, 64, 2)`` is one hidden layer
    of width 64. One activation tag per affine layer, from ``ACTIVATIONS``.
    Weights initialize uniform in +-sqrt(6 / (fan_in + fan_out)), biases
    zero. `forward` accepts a single vector ``(d,)`` or a row batch
    ``(n, d)``; `backward` takes an upstream gradient of the same shape as
    the forward output and returns parameter gradients summed over the
    batch plus the gradient with respect to the input.
    """

    def __init__(self, dims, activations, rng=None):
        dims = tuple(int(d) for d in dims)
        activations = tuple(activations)
        if len(dims) < 2:
            raise ValueError("dims must chain at least one affine layer")
        if any(d <= 0 for d in dims):
            raise ValueError("layer dims must be positive")
        if len(activations) != len(dims) - 1:
            raise ValueError(
                f"expected {len(dims) - 1} activation tags, got {len(activations)}"
            )
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        if rng is None:
            rng = np.random.default_rng()

        self.dims = dims
        self.activations = activations
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def output_dim(self):
        return self.dims[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def parameter_count(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def squared_parameter_norm(self):
        return sum(float(np.sum(w * w)) for w in self.weights) + sum(
            float(np.sum(b * b)) for b in self.biases
        )

    def copy(self):
        clone = Network.__new__(Network)
        clone.dims = self.dims
        clone.activations = self.activations
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone._cache = None
        return clone

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ValueError(
                f"input must have {self.input_dim} features, got shape {x.shape}"
            )
        cache = []
        acts = batch
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            pre = acts @ w.T + b
            cache.append((acts, pre))
            acts = _activate(tag, pre)
        self._cache = cache
        return acts[0] if single else acts

    def backward(self, upstream_grad):
        """Backpropagate an upstream gradient through the cached forward pass.

        Returns ``(tape, input_grad)`` where the tape holds d(loss)/d(param)
        summed over the batch and ``input_grad`` matches the forward input
        shape.
        """
        if self._cache is None:
            raise RuntimeError("backward() requires a cached forward pass")
        up = np.asarray(upstream_grad, dtype=np.float64)
        single = up.ndim == 1
        delta = up[None, :] if single else up
        n_cached = self._cache[0][0].shape[0]
        if delta.shape != (n_cached, self.output_dim):
            raise ValueError(
                f"upstream gradient shape {up.shape} does not match cached "
                f"forward output ({n_cached}, {self.output_dim})"
            )
        d_weights = [None] * self.n_layers
        d_biases = [None] * self.n_layers
        for layer in range(self.n_layers - 1, -1, -1):
            inputs, pre = self._cache[layer]
            delta = delta * _activate_deriv(self.activations[layer], pre)
            d_weights[layer] = delta.T @ inputs
            d_biases[layer] = delta.sum(axis=0)
            delta = delta @ self.weights[layer]
        input_grad = delta[0] if single else delta
        return GradientTape(d_weights, d_biases), input_grad


class Adam:
    """Adaptive-moment optimizer state bound to one network's parameter shapes."""

    def __init__(self, net, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m_w = [np.zeros_like(w) for w in net.weights]
        self._v_w = [np.zeros_like(w) for w in net.weights]
        self._m_b = [np.zeros_like(b) for b in net.biases]
        self._v_b = [np.zeros_like(b) for b in net.biases]

    def step(self, net, tape):
        if len(tape.d_weights) != len(self._m_w):
            raise ValueError("tape is not congruent with the optimizer state")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(net.weights, tape.d_weights, self._m_w, self._v_w):
            self._update(p, g, m, v, c1, c2)
        for p, g, m, v in zip(net.biases, tape.d_biases, self._m_b, self._v_b):
            self._update(p, g, m, v, c1, c2)
        return net

    def _update(self, param, grad, m, v, c1, c2):
        if param.shape != grad.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        param -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_network(net, path):
    """Write a network checkpoint (versioned .npz of dims + row-major arrays)."""
    payload = {
        "format_version": np.array([CHECKPOINT_VERSION], dtype=np.int64),
        "dims": np.asarray(net.dims, dtype=np.int64),
        "activations": np.asarray(net.activations),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        payload[f"W{i}"] = np.ascontiguousarray(w)
        payload[f"b{i}"] = np.ascontiguousarray(b)
    np.savez(path, **payload)


def load_network(path):
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {version}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        dims = tuple(int(d) for d in data["dims"])
        activations = tuple(str(a) for a in data["activations"])
        net = Network(dims, activations, rng=np.random.default_rng(0))
        for i in range(net.n_layers):
            w = np.asarray(data[f"W{i}"], dtype=np.float64)
            b = np.asarray(data[f"b{i}"], dtype=np.float64)
            if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
                raise ValueError(f"checkpoint layer {i} has inconsistent shapes")
            net.weights[i] = w
            net.biases[i] = b
    return net
