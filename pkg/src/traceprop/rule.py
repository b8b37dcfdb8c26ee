"""Traces Propagation: dual traces, pairwise contrastive loss and its local gradient.

Every function here sees one layer only: its own traces, potentials and the
presynaptic spikes arriving from the layer below. Batch rows are samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContrastiveBatchError, DimensionError, NumericError
from .neuron import LifParams, surrogate_derivative

SIMILARITIES = ("dot", "neg_euclidean")
REDUCTIONS = ("mean", "sum")


@dataclass
class TraceState:
    """Input trace ``eps`` and target trace ``eps_tilde`` of one layer."""

    eps: np.ndarray
    eps_tilde: np.ndarray
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")

    @classmethod
    def zeros(cls, shape, beta: float, dtype=np.float32) -> "TraceState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), beta)


@dataclass
class BatchLossSignal:
    z: np.ndarray
    y: np.ndarray
    mod: np.ndarray


def _require_batch(n: int) -> None:
    if n < 2:
        raise ContrastiveBatchError(
            f"the pairwise contrastive loss needs a batch of at least 2 samples, got {n}"
        )


def update_traces(trace: TraceState, spikes_in: np.ndarray, spikes_trg: np.ndarray) -> TraceState:
    if spikes_in.shape != trace.eps.shape or spikes_trg.shape != trace.eps_tilde.shape:
        raise DimensionError(
            f"spike shapes {spikes_in.shape}/{spikes_trg.shape} do not match traces {trace.eps.shape}"
        )
    dtype = trace.eps.dtype
    eps = (trace.beta * trace.eps + spikes_in).astype(dtype, copy=False)
    eps_tilde = (trace.beta * trace.eps_tilde + spikes_trg).astype(dtype, copy=False)
    return TraceState(eps, eps_tilde, trace.beta)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def pairwise_logits(eps: np.ndarray, eps_tilde: np.ndarray) -> np.ndarray:
    """``z[b, b'] = <eps[b], eps_tilde[b']>`` over the flattened feature axis."""
    eps = eps.reshape(eps.shape[0], -1)
    eps_tilde = eps_tilde.reshape(eps_tilde.shape[0], -1)
    _require_batch(eps.shape[0])
    if eps.shape != eps_tilde.shape:
        raise DimensionError(f"trace shapes differ: {eps.shape} vs {eps_tilde.shape}")
    return eps @ eps_tilde.T


def pairwise_targets(eps_tilde_prev: np.ndarray, similarity: str = "dot") -> np.ndarray:
    """Row-wise softmax of the similarity between target traces of the layer below.

    ``dot`` uses the inner product; ``neg_euclidean`` the negated Euclidean
    distance, i.e. softmax(-distance).
    """
    e = eps_tilde_prev.reshape(eps_tilde_prev.shape[0], -1)
    _require_batch(e.shape[0])
    if similarity == "dot":
        f = e @ e.T
    elif similarity == "neg_euclidean":
        sq = np.sum(e * e, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (e @ e.T), 0.0)
        np.fill_diagonal(d2, 0.0)
        f = -np.sqrt(d2)
    else:
        raise ConfigError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")
    return softmax_rows(f)


def local_loss(z: np.ndarray, y: np.ndarray, reduction: str = "mean") -> float:
    """Cross-entropy between target rows ``y`` and row-wise ``softmax(z)``."""
    if z.shape != y.shape or z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise DimensionError(f"z {z.shape} and y {y.shape} must be equal square matrices")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise NumericError("non-finite logits or targets")
    per_row = -np.sum(y * log_softmax_rows(z), axis=1)
    if reduction == "mean":
        return float(per_row.mean())
    if reduction == "sum":
        return float(per_row.sum())
    raise ConfigError(f"unknown reduction {reduction!r}")


def modulatory_signal(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if z.shape != y.shape:
        raise DimensionError(f"z {z.shape} and y {y.shape} differ")
    return softmax_rows(z) - y


def loss_signal(
    eps: np.ndarray, eps_tilde: np.ndarray, eps_tilde_prev: np.ndarray, similarity: str = "dot"
) -> BatchLossSignal:
    z = pairwise_logits(eps, eps_tilde)
    y = pairwise_targets(eps_tilde_prev, similarity)
    return BatchLossSignal(z, y, modulatory_signal(z, y))


def postsynaptic_factors(
    mod: np.ndarray,
    trace: TraceState,
    v: np.ndarray,
    v_tilde: np.ndarray,
    params: LifParams,
    reduction: str = "mean",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-neuron learning signals for the input and target paths.

    Returns ``(g_in, g_trg)`` shaped like ``v`` with

        g_in[b, j]   = sum_b' mod[b, b'] * eps_tilde[b', j] * theta'(v[b, j])
        g_trg[b', j] = sum_b  mod[b, b'] * eps[b, j]        * theta'(v_tilde[b', j])

    divided by the batch size under mean reduction. Weight gradients are the
    contraction of these with the presynaptic activity of each path.
    """
    n = mod.shape[0]
    _require_batch(n)
    shape = v.shape
    if mod.shape != (n, n) or shape[0] != n or v_tilde.shape != shape:
        raise DimensionError(f"mod {mod.shape}, v {shape}, v_tilde {v_tilde.shape} disagree")
    if trace.eps.shape != shape or trace.eps_tilde.shape != shape:
        raise DimensionError(f"trace shape {trace.eps.shape} does not match potentials {shape}")
    eps = trace.eps.reshape(n, -1)
    eps_tilde = trace.eps_tilde.reshape(n, -1)
    g_in = (mod @ eps_tilde) * surrogate_derivative(v.reshape(n, -1), params)
    g_trg = (mod.T @ eps) * surrogate_derivative(v_tilde.reshape(n, -1), params)
    if reduction == "mean":
        g_in /= n
        g_trg /= n
    elif reduction != "sum":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return g_in.reshape(shape), g_trg.reshape(shape)


def layer_gradient_terms(
    mod: np.ndarray,
    trace: TraceState,
    v: np.ndarray,
    v_tilde: np.ndarray,
    s_prev_in: np.ndarray,
    s_prev_trg: np.ndarray,
    params: LifParams,
    reduction: str = "mean",
) -> tuple[np.ndarray, np.ndarray]:
    """Dense-layer gradient split into its input-path and target-path terms.

    Both are shaped ``[pre, post]``. The target term is the one that flows
    through whichever matrix feeds the target path (W_l, or S at layer 1).
    """
    g_in, g_trg = postsynaptic_factors(mod, trace, v, v_tilde, params, reduction)
    if s_prev_in.shape[0] != mod.shape[0] or s_prev_trg.shape[0] != mod.shape[0]:
        raise DimensionError("presynaptic spikes must have one row per batch sample")
    return s_prev_in.T @ g_in, s_prev_trg.T @ g_trg


def layer_gradient(
    mod: np.ndarray,
    trace: TraceState,
    v: np.ndarray,
    v_tilde: np.ndarray,
    s_prev_in: np.ndarray,
    s_prev_trg: np.ndarray,
    params: LifParams,
    reduction: str = "mean",
) -> np.ndarray:
    """Closed-form gradient of the local loss w.r.t. a weight matrix shared by both paths."""
    d_in, d_trg = layer_gradient_terms(
        mod, trace, v, v_tilde, s_prev_in, s_prev_trg, params, reduction
    )
    if d_in.shape != d_trg.shape:
        raise DimensionError(f"path gradients differ in shape: {d_in.shape} vs {d_trg.shape}")
    return d_in + d_trg


def apply_update(W: np.ndarray, dW: np.ndarray, eta: float, out: np.ndarray | None = None) -> np.ndarray:
    """Plain gradient step ``W - eta*dW``; pass ``out=W`` to update in place."""
    if W.shape != dW.shape:
        raise DimensionError(f"weight {W.shape} and gradient {dW.shape} differ")
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    step = (eta * dW).astype(W.dtype, copy=False)
    return np.subtract(W, step, out=out)
