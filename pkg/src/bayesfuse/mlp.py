"""Small fully-connected softmax classifiers on a flat parameter vector.

Parameters are packed layer by layer as ``W`` (row-major, ``n_in x n_out``)
followed by ``b``. All gradients are hand-written backprop so that per-sample
quantities (for the empirical Fisher) come out without an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameter_count(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.parameter_count,):
        raise ValueError(f"expected {spec.parameter_count} parameters, got {params.shape}")
    layers, i = [], 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = params[i : i + n_in * n_out].reshape(n_in, n_out)
        i += n_in * n_out
        b = params[i : i + n_out]
        i += n_out
        layers.append((w, b))
    return layers


def pack(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
    layers = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        layers.append((rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out)))
    return pack(layers)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a**2 if name == "tanh" else (z > 0).astype(float)


def _forward(spec, layers, x):
    acts, pres = [x], []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            pres.append(z)
            h = _act(spec.activation, z)
            acts.append(h)
        else:
            h = z
    return h, acts, pres


def logits(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, _, _ = _forward(spec, unpack(spec, params), x)
    return out


def predict_log_proba(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    return log_softmax(logits(spec, params, x), axis=1)


def accuracy(spec: MlpSpec, params: np.ndarray, x: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits(spec, params, x), axis=1) == labels))


def _backward(spec, layers, x, labels):
    """Per-sample output deltas of the summed log-likelihood.

    Returns the activations and the deltas ``d log p(y_n|x_n) / d z_n`` for
    every layer's pre-activation, plus per-sample log-likelihoods.
    """
    out, acts, pres = _forward(spec, layers, x)
    logp = log_softmax(out, axis=1)
    n = x.shape[0]
    onehot = np.zeros_like(logp)
    onehot[np.arange(n), labels] = 1.0
    delta = onehot - np.exp(logp)
    deltas = [delta]
    for i in range(len(layers) - 1, 0, -1):
        w, _ = layers[i]
        delta = (delta @ w.T) * _act_grad(spec.activation, pres[i - 1], acts[i])
        deltas.append(delta)
    deltas.reverse()
    return acts, deltas, logp[np.arange(n), labels]


def log_likelihood_and_grad(spec: MlpSpec, params: np.ndarray, x: np.ndarray, labels: np.ndarray):
    """Summed log-likelihood ``sum_n log p(y_n | x_n, params)`` and its gradient."""
    layers = unpack(spec, params)
    acts, deltas, ll = _backward(spec, layers, np.asarray(x, dtype=float), np.asarray(labels))
    grads = [(a.T @ d, d.sum(axis=0)) for a, d in zip(acts, deltas)]
    return float(ll.sum()), pack(grads)


def per_sample_grads(spec: MlpSpec, params: np.ndarray, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``(N, P)`` matrix of per-sample log-likelihood gradients."""
    layers = unpack(spec, params)
    acts, deltas, _ = _backward(spec, layers, np.asarray(x, dtype=float), np.asarray(labels))
    parts = []
    for a, d in zip(acts, deltas):
        parts.append(np.einsum("ni,nj->nij", a, d).reshape(a.shape[0], -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def fisher_diagonal(spec: MlpSpec, params: np.ndarray, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean over samples of squared per-sample gradients, without forming them."""
    n = len(labels)
    if n == 0:
        return np.zeros(spec.parameter_count)
    layers = unpack(spec, params)
    acts, deltas, _ = _backward(spec, layers, np.asarray(x, dtype=float), np.asarray(labels))
    parts = []
    for a, d in zip(acts, deltas):
        d2 = d**2
        parts.append(((a**2).T @ d2).ravel())
        parts.append(d2.sum(axis=0))
    return np.concatenate(parts) / n
