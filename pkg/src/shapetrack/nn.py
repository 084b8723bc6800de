"""Minimal float64 neural-network stack: MLPs with manual backprop, AdamW,
masked softmax, the normalized log-affinity loss, and finite-difference
gradient checking.

Everything here is deliberately dependency-free beyond numpy so that gradients
can be verified end to end against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Logit substituted for masked entries before the stabilizing max-subtraction.
# exp(-1e9 - max) underflows to exactly 0.0 whenever any unmasked logit is
# within ~700 of the max, so masked probabilities are exact zeros in practice;
# we zero them explicitly anyway.
MASK_LOGIT = -1e9

# Probabilities are clamped here before the log so an exactly-zero entry that
# carries ground-truth mass yields a large finite loss instead of inf.
LOG_EPS = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Architecture + init seed; enough to rebuild a network deterministically."""

    layer_sizes: tuple[int, ...]
    init_seed: int

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs input and output dims")
        if any(w < 1 for w in self.layer_sizes):
            raise ValueError(f"widths must be >= 1, got {self.layer_sizes}")

    def build(self) -> "Mlp":
        return init_mlp(self.layer_sizes, self.init_seed)


class Mlp:
    """Fully connected ReLU network with a linear output layer, float64 only.

    ``weights[k]`` has shape (d_k, d_{k+1}); ``biases[k]`` has shape (d_{k+1},).
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases):
            raise ValueError("weights and biases must have equal length")
        if not weights:
            raise ValueError("network needs at least one layer")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {k} shapes inconsistent: {w.shape} vs {b.shape}")
            if k > 0 and weights[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k} input dim mismatch")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def param_list(self) -> list[np.ndarray]:
        """Live references in a fixed order: [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Run a (B, d_in) batch. Returns output and the cache for backward.

        The cache holds each layer's input; entry k >= 1 doubles as the ReLU
        output of layer k - 1 (its positivity encodes the ReLU gate).
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(
                f"input dim {x.shape[1]} != expected {self.weights[0].shape[0]}"
            )
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
                cache.append(h)
        return (h[0] if squeeze else h), cache

    def backward(
        self, cache: list[np.ndarray], grad_out: np.ndarray
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Backpropagate. Returns (grad wrt input, grads parallel to param_list())."""
        g = np.asarray(grad_out, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for k in reversed(range(len(self.weights))):
            x_k = cache[k]
            grads[2 * k] = x_k.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (cache[k] > 0.0)
        return (g[0] if squeeze else g), grads


def init_mlp(layer_sizes: Sequence[int], seed: int | np.random.Generator) -> Mlp:
    """He-uniform initialization from a seeded generator; zero biases.

    The output layer's weights are scaled by 0.1 so raw meter-scale features
    produce modest initial logits instead of saturating the softmax.
    """
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs input and output dims")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    last = len(layer_sizes) - 2
    for k in range(len(layer_sizes) - 1):
        fan_in, fan_out = layer_sizes[k], layer_sizes[k + 1]
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if k == last:
            w = w * 0.1
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def zeros_like_params(params: list[np.ndarray]) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in params]


def accumulate_grads(dst: list[np.ndarray], src: list[np.ndarray]) -> None:
    for d, s in zip(dst, src):
        d += s


@dataclass
class AdamState:
    """AdamW moments keyed positionally to a parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params), t=0)


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay applies to every parameter (weights and biases alike).
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params/grads/state length mismatch")
    for g in grads:
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient passed to adamw_step")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p)


def masked_softmax(logits: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    """Softmax along ``axis`` restricted to entries where ``mask`` is True.

    Masked entries come out exactly zero. A slice with no unmasked entries
    comes out all zero rather than uniform; an input with no unmasked
    entries anywhere is rejected.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any():
        raise ValueError("masked_softmax: every entry is masked")
    shifted = np.where(mask, logits, MASK_LOGIT)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)


def log_affinity_loss(affinity: np.ndarray, gt: np.ndarray) -> float:
    """Normalized cross-entropy: sum(gt * -log(clamped affinity)) / sum(gt).

    Probabilities are clamped at 1e-12 before the log. Zero ground-truth mass
    yields zero loss.
    """
    gt = np.asarray(gt, dtype=np.float64)
    total = gt.sum()
    if total <= 0.0:
        return 0.0
    logp = np.log(np.maximum(np.asarray(affinity, dtype=np.float64), LOG_EPS))
    return float(-(gt * logp).sum() / total)


def masked_softmax_xent(
    logits: np.ndarray, mask: np.ndarray, gt: np.ndarray, axis: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused masked softmax + log-affinity loss with its exact logit gradient.

    Returns (loss, probabilities, dloss/dlogits). With row mass
    g_i = sum_j gt_ij the gradient along the softmax axis is
    (g_i * p_ij - gt_ij) / sum(gt), and exactly zero at masked entries.
    """
    probs = masked_softmax(logits, mask, axis=axis)
    gt = np.asarray(gt, dtype=np.float64)
    total = gt.sum()
    loss = log_affinity_loss(probs, gt)
    if total <= 0.0:
        return loss, probs, np.zeros_like(probs)
    slice_mass = gt.sum(axis=axis, keepdims=True)
    grad = (slice_mass * probs - gt) / total
    grad = np.where(np.broadcast_to(np.asarray(mask, dtype=bool), grad.shape), grad, 0.0)
    return loss, probs, grad


def pack_params(params: list[np.ndarray]) -> np.ndarray:
    """Concatenate arrays into one flat float64 vector."""
    if not params:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in params])


def unpack_params(vec: np.ndarray, params: list[np.ndarray]) -> None:
    """Write a flat vector back into the arrays, in place."""
    offset = 0
    for p in params:
        n = p.size
        p[...] = vec[offset : offset + n].reshape(p.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector has {vec.size} entries, params hold {offset}")


def finite_difference_grad(
    f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    probe = theta.copy()
    for k in range(theta.size):
        orig = probe[k]
        probe[k] = orig + h
        fp = f(probe)
        probe[k] = orig - h
        fm = f(probe)
        probe[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over coordinates of |a - n| / max(1e-8, |a| + |n|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError("gradient shape mismatch")
    if a.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central differences.

    Returns the max relative error. The caller supplies f as a pure function
    of the flat parameter vector.
    """
    numeric = finite_difference_grad(f, theta, h=h)
    return max_relative_error(analytic_grad, numeric)
