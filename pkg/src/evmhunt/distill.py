"""Neuron distillation and the multi-knowledge loss.

``N`` neurons each map the source-code feature to the graph-feature space
through an affine map and an activation; their outputs are averaged into
the distilled target.  The student's graph feature is pulled toward that
target with a softmax cross entropy, while the label is learned with BCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .student import Params

EPS = 1e-12

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda out: 1.0 - out**2),
    "sigmoid": (lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)), lambda out: out * (1.0 - out)),
    "identity": (lambda x: x, lambda out: np.ones_like(out)),
}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.01
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")

    @property
    def delta(self) -> float:
        return self.alpha / self.beta if self.beta else float("inf")


def init_neurons(
    n_neurons: int, source_dim: int, graph_dim: int, rng: np.random.Generator
) -> Params:
    if n_neurons < 1:
        raise ValueError("need at least one neuron")
    r = 1.0 / np.sqrt(source_dim)
    return {
        "nd.W": rng.uniform(-r, r, size=(n_neurons, graph_dim, source_dim)),
        "nd.b": np.zeros((n_neurons, graph_dim)),
    }


def nd_forward(h_sc: np.ndarray, p: Params, activation: str = "tanh"):
    """Distilled feature (D_g,): mean over neurons of act(W_j h + b_j)."""
    w, b = p["nd.W"], p["nd.b"]
    if h_sc.shape != (w.shape[2],):
        raise ValueError(f"source feature has shape {h_sc.shape}, neurons expect ({w.shape[2]},)")
    act, _ = _ACTIVATIONS[activation]
    out = act(w @ h_sc + b)  # (N, D_g)
    return out.mean(axis=0), (h_sc, out, activation)


def nd_backward(d_ht: np.ndarray, cache, p: Params) -> tuple[Params, np.ndarray]:
    h_sc, out, activation = cache
    _, deriv = _ACTIVATIONS[activation]
    n = out.shape[0]
    d_pre = (d_ht / n)[None, :] * deriv(out)  # (N, D_g)
    grads = {"nd.W": d_pre[:, :, None] * h_sc[None, None, :], "nd.b": d_pre}
    d_h = np.matmul(d_pre[:, None, :], p["nd.W"]).sum(axis=(0, 1))
    return grads, d_h


def pre_loss(y, target) -> float:
    """Mean binary cross entropy; predictions clamped to [eps, 1 - eps]."""
    y = np.clip(np.atleast_1d(np.asarray(y, dtype=np.float64)), EPS, 1.0 - EPS)
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if y.shape != t.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {t.shape}")
    return float(-np.mean(t * np.log(y) + (1.0 - t) * np.log(1.0 - y)))


def pre_loss_grad_logit(y, target) -> np.ndarray:
    """Gradient of :func:`pre_loss` w.r.t. the logits that produced ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    return (y - t) / y.shape[0]


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(h_t: np.ndarray, h_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h_t, h_s = np.atleast_2d(h_t), np.atleast_2d(h_s)
    if h_t.shape != h_s.shape:
        raise ValueError(f"shape mismatch: {h_t.shape} vs {h_s.shape}")
    return h_t, h_s


def msl_loss(h_t: np.ndarray, h_s: np.ndarray) -> float:
    """Cross entropy of softmax(h_s) against softmax(h_t), batch mean."""
    h_t, h_s = _as_batch(h_t, h_s)
    return float(-np.mean(np.sum(softmax(h_t) * log_softmax(h_s), axis=-1)))


def msl_loss_grad(h_t: np.ndarray, h_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`msl_loss` w.r.t. ``(h_t, h_s)``, shaped like the inputs."""
    shape = np.shape(h_s)
    h_t2, h_s2 = _as_batch(h_t, h_s)
    b = h_t2.shape[0]
    p_t = softmax(h_t2)
    d_s = (softmax(h_s2) - p_t) / b
    g = -log_softmax(h_s2)
    d_t = p_t * (g - np.sum(p_t * g, axis=-1, keepdims=True)) / b
    return d_t.reshape(shape), d_s.reshape(shape)


def softmax_entropy(h: np.ndarray) -> float:
    p = softmax(h)
    return float(-np.sum(p * log_softmax(h)))


def mk_loss(l_msl: float, l_pre: float, cfg: LossConfig) -> float:
    return cfg.alpha * l_msl + cfg.beta * l_pre


def feature_mse_baseline(h_t: np.ndarray, h_s: np.ndarray) -> float:
    """Plain MSE between raw feature vectors, averaged over all entries."""
    h_t, h_s = _as_batch(h_t, h_s)
    return float(np.mean((h_t - h_s) ** 2))


def feature_mse_baseline_grad(h_t: np.ndarray, h_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shape = np.shape(h_s)
    h_t2, h_s2 = _as_batch(h_t, h_s)
    d_s = 2.0 * (h_s2 - h_t2) / h_s2.size
    return (-d_s).reshape(shape), d_s.reshape(shape)
