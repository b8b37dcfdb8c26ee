"""Finite-difference check of the TP gradient on a smoothed one-step layer model.

The smoothed model replaces the hard spike with the ArcTan antiderivative so
that its exact derivative is the surrogate used by the rule. Only the current
step is differentiated (traces enter through ``beta*eps_prev + s``), which is
the locality approximation TP makes; this is not a BPTT check.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import ConvLayer, DenseLayer
from .neuron import LifParams, surrogate_antiderivative
from .rule import (
    TraceState,
    layer_gradient_terms,
    local_loss,
    loss_signal,
    pairwise_logits,
    pairwise_targets,
    postsynaptic_factors,
)

REPORT_HEADER = (
    "# TP gradient check: analytic three-factor gradient vs central differences of the\n"
    "# smoothed one-step local loss. Traces are differentiated through the current step\n"
    "# only (the locality approximation of the rule); this does not certify BPTT.\n"
)
MUTATIONS = ("mod", "trace", "surrogate", "presynaptic")


@dataclass
class SmoothedInstance:
    """One layer frozen at one time step, in double precision.

    ``layer`` carries the base-point weights. ``pre_in``/``pre_trg`` are the
    presynaptic spikes of the two paths; ``s_prev_*`` this layer's previous
    spikes (reset and recurrence); ``trg_below`` the target traces of the
    layer below, which define the frozen targets ``y``. With ``first_layer``
    the target path is driven by ``pre_trg @ S`` instead of the layer weights.
    """

    layer: DenseLayer | ConvLayer
    pre_in: np.ndarray
    pre_trg: np.ndarray
    v_prev: np.ndarray
    v_tilde_prev: np.ndarray
    s_prev_in: np.ndarray
    s_prev_trg: np.ndarray
    eps_prev: np.ndarray
    eps_tilde_prev: np.ndarray
    trg_below: np.ndarray
    S: np.ndarray | None = None
    first_layer: bool = False
    similarity: str = "dot"
    reduction: str = "mean"

    @property
    def params(self) -> LifParams:
        return self.layer.params

    @property
    def batch(self) -> int:
        return self.pre_in.shape[0]


def _with_weights(layer, W=None, R=None):
    if W is None and R is None:
        return layer
    return replace(layer, W=layer.W if W is None else W, R=layer.R if R is None else R)


def smoothed_forward(inst: SmoothedInstance, W=None, R=None, S=None):
    """Potentials and smoothed traces of both paths: ``(v, v_tilde, trace)``."""
    layer = _with_weights(inst.layer, W, R)
    p = inst.params
    S = inst.S if S is None else S
    i_in = layer.current(inst.pre_in)
    if inst.first_layer:
        i_trg = (inst.pre_trg @ S).reshape(i_in.shape)
    else:
        i_trg = layer.current(inst.pre_trg)
    v = (p.alpha * inst.v_prev + i_in + layer.recurrent_current(inst.s_prev_in)
         - inst.s_prev_in * p.v_th)
    v_t = (p.alpha * inst.v_tilde_prev + i_trg + layer.recurrent_current(inst.s_prev_trg)
           - inst.s_prev_trg * p.v_th)
    eps = layer.beta * inst.eps_prev + surrogate_antiderivative(v, p)
    eps_t = layer.beta * inst.eps_tilde_prev + surrogate_antiderivative(v_t, p)
    return v, v_t, TraceState(eps, eps_t, layer.beta)


def smoothed_loss(inst: SmoothedInstance, W=None, R=None, S=None) -> float:
    _, _, trace = smoothed_forward(inst, W, R, S)
    z = pairwise_logits(trace.eps, trace.eps_tilde)
    y = pairwise_targets(inst.trg_below, inst.similarity)
    return local_loss(z, y, inst.reduction)


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at every entry of ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(x)
        flat[i] = orig - h
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def numeric_gradients(inst: SmoothedInstance, h: float = 1e-5) -> dict[str, np.ndarray]:
    out = {"W": finite_difference_grad(lambda W: smoothed_loss(inst, W=W), inst.layer.W, h)}
    if inst.layer.R is not None:
        R0 = inst.layer.R

        if inst.layer.recurrent == "diagonal":
            def on_diag(d):
                return smoothed_loss(inst, R=np.diag(d))
            out["R"] = np.diag(finite_difference_grad(on_diag, np.diagonal(R0).copy(), h))
        else:
            out["R"] = finite_difference_grad(lambda R: smoothed_loss(inst, R=R), R0, h)
    if inst.first_layer:
        out["S"] = finite_difference_grad(lambda S: smoothed_loss(inst, S=S), inst.S, h)
    return out


def analytic_gradients(inst: SmoothedInstance, mutate: str | None = None) -> dict[str, np.ndarray]:
    """Closed-form TP gradients on the smoothed instance.

    ``mutate`` corrupts one factor of the three-factor product (for
    mutation-sensitivity checks): ``mod`` drops ``y`` from the modulatory
    matrix, ``trace`` swaps input and target traces, ``surrogate`` evaluates
    the surrogate at the other path's potential, ``presynaptic`` pairs each
    sample with another sample's presynaptic spikes.
    """
    if mutate is not None and mutate not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutate!r}")
    layer = inst.layer
    v, v_t, trace = smoothed_forward(inst)
    sig = loss_signal(trace.eps, trace.eps_tilde, inst.trg_below, inst.similarity)
    mod = sig.mod + sig.y if mutate == "mod" else sig.mod
    if mutate == "trace":
        trace = TraceState(trace.eps_tilde, trace.eps, trace.beta)
    if mutate == "surrogate":
        v, v_t = v_t, v
    pre_in, pre_trg, rec_in, rec_trg = inst.pre_in, inst.pre_trg, inst.s_prev_in, inst.s_prev_trg
    if mutate == "presynaptic":
        pre_in, pre_trg = np.roll(pre_in, 1, axis=0), np.roll(pre_trg, 1, axis=0)
        rec_in, rec_trg = np.roll(rec_in, 1, axis=0), np.roll(rec_trg, 1, axis=0)

    out = {}
    dense = isinstance(layer, DenseLayer) and not layer.weight_norm
    if dense and not inst.first_layer:
        d_in, d_trg = layer_gradient_terms(mod, trace, v, v_t, pre_in, pre_trg, inst.params,
                                           inst.reduction)
        out["W"] = d_in + d_trg
    else:
        g_in, g_trg = postsynaptic_factors(mod, trace, v, v_t, inst.params, inst.reduction)
        out["W"] = layer.weight_grad(pre_in, g_in)
        if inst.first_layer:
            out["S"] = pre_trg.T @ g_trg.reshape(g_trg.shape[0], -1)
        else:
            out["W"] = out["W"] + layer.weight_grad(pre_trg, g_trg)
    if layer.R is not None:
        d_in, d_trg = layer_gradient_terms(mod, trace, v, v_t, rec_in, rec_trg, inst.params,
                                           inst.reduction)
        dR = d_in + d_trg
        out["R"] = np.diag(np.diagonal(dR)) if layer.recurrent == "diagonal" else dR
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def compare(analytic: dict, numeric: dict) -> dict[str, float]:
    """Max relative error per parameter tensor."""
    return {k: max_relative_error(analytic[k], numeric[k]) for k in numeric}


def random_instance(rng, batch: int = 3, n_pre: int = 4, n_post: int = 3, kind: str = "dense",
                    first_layer: bool = False, similarity: str = "dot",
                    conv_shape: tuple[int, int, int] = (2, 4, 4), conv_channels: int = 2,
                    weight_norm: bool = False) -> SmoothedInstance:
    """Random double-precision instance; potentials are kept near threshold.

    ``kind`` is ``dense``, ``recurrent`` (full R), ``recurrent-diagonal`` or ``conv``.
    """
    params = LifParams(alpha=float(rng.uniform(0.3, 0.95)), v_th=float(rng.choice([0.5, 1.0])),
                       surrogate_scale=float(rng.uniform(0.5, 2.0)))
    beta = float(rng.uniform(0.3, 0.95))
    if kind == "conv":
        k = 3
        W = rng.uniform(-0.5, 0.5, size=(conv_channels, conv_shape[0], k, k))
        layer = ConvLayer(W, params, beta, conv_shape, padding=1, pool_size=1,
                          weight_norm=weight_norm)
        pre_shape = (batch,) + tuple(conv_shape)
    else:
        W = rng.uniform(-0.8, 0.8, size=(n_pre, n_post))
        R, mode = None, None
        if kind.startswith("recurrent"):
            mode = "diagonal" if kind == "recurrent-diagonal" else "full"
            R = rng.uniform(-0.5, 0.5, size=(n_post, n_post))
            if mode == "diagonal":
                R = np.diag(np.diagonal(R))
        elif kind != "dense":
            raise ValueError(f"unknown instance kind {kind!r}")
        layer = DenseLayer(W, params, beta, R, mode, weight_norm)
        pre_shape = (batch, n_pre)
    unit_shape = (batch,) + tuple(layer.unit_shape)

    def spikes(shape, p=0.5):
        return (rng.random(shape) < p).astype(np.float64)

    n_classes = int(rng.integers(2, 4))
    if first_layer:
        labels = rng.integers(0, n_classes, size=batch)
        pre_trg = np.eye(n_classes)[labels]
        S = rng.uniform(-0.8, 0.8, size=(n_classes, layer.units))
        trg_below = pre_trg * rng.uniform(1.0, 3.0)
    else:
        pre_trg, S = spikes(pre_shape), None
        trg_below = rng.uniform(0.0, 2.0, size=(batch, 5))
    return SmoothedInstance(
        layer=layer,
        pre_in=spikes(pre_shape),
        pre_trg=pre_trg,
        v_prev=params.v_th + rng.normal(0.0, 0.5, size=unit_shape),
        v_tilde_prev=params.v_th + rng.normal(0.0, 0.5, size=unit_shape),
        s_prev_in=spikes(unit_shape, 0.3),
        s_prev_trg=spikes(unit_shape, 0.3),
        eps_prev=rng.uniform(0.0, 1.5, size=unit_shape),
        eps_tilde_prev=rng.uniform(0.0, 1.5, size=unit_shape),
        trg_below=trg_below,
        S=S,
        first_layer=first_layer,
        similarity=similarity,
    )


@dataclass
class CheckResult:
    index: int
    kind: str
    first_layer: bool
    similarity: str
    batch: int
    errors: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def run_gradcheck(n: int = 100, seed: int = 0, h: float = 1e-5,
                  kinds=("dense", "recurrent", "recurrent-diagonal", "conv", "dense-wn")
                  ) -> list[CheckResult]:
    """Check ``n`` random instances cycling through layer kinds, layer-1 mode and similarity.

    ``dense-wn`` is a dense layer with weight normalization.
    """
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        first = bool((i // len(kinds)) % 2)
        sim = ("dot", "neg_euclidean")[(i // (2 * len(kinds))) % 2]
        batch = int(rng.integers(2, 5))
        n_pre = int(rng.integers(2, 9))
        n_post = int(rng.integers(1, 9))
        wn = kind.endswith("-wn")
        inst = random_instance(rng, batch, n_pre, n_post, kind.removesuffix("-wn"), first, sim,
                               weight_norm=wn)
        errors = compare(analytic_gradients(inst), numeric_gradients(inst, h))
        results.append(CheckResult(i, kind, first, sim, batch, errors))
    return results


def format_report(results: list[CheckResult], tol: float = 1e-4) -> str:
    lines = [REPORT_HEADER.rstrip("\n"),
             "index,kind,layer1_mode,similarity,batch,err_W,err_R,err_S,max_error,pass"]
    for r in results:
        e = r.errors
        lines.append(",".join([
            str(r.index), r.kind, "S" if r.first_layer else "shared", r.similarity, str(r.batch),
            f"{e['W']:.3e}", f"{e['R']:.3e}" if "R" in e else "", f"{e['S']:.3e}" if "S" in e else "",
            f"{r.max_error:.3e}", "pass" if r.max_error < tol else "FAIL"]))
    return "\n".join(lines) + "\n"
