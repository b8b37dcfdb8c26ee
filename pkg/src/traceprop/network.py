"""Layer stack with a dual (input / target) forward path, readout integrator and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContainerFormatError, DimensionError
from .layers import ConvLayer, DenseLayer
from .neuron import LifParams, MembraneState, lif_step
from .rule import (
    BatchLossSignal,
    TraceState,
    local_loss,
    loss_signal,
    postsynaptic_factors,
    softmax_rows,
    update_traces,
)

CKPT_MAGIC = b"TPCKPT1"
LAYER_KINDS = ("dense", "dense-recurrent", "conv")


@dataclass
class LayerSpec:
    """One hidden layer of an architecture description.

    For ``conv`` layers ``units`` is the number of output channels.
    """

    kind: str
    units: int
    alpha: float = 0.9
    beta: float = 0.8
    v_th: float = 1.0
    surrogate_scale: float = 1.0
    recurrent_mode: str = "full"
    kernel: int = 3
    padding: int = 1
    pool: int = 1
    weight_norm: bool = False
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.units < 1:
            raise ConfigError("layers need at least one unit")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass
class ArchSpec:
    input_shape: tuple[int, ...]
    num_classes: int
    layers: list[LayerSpec]
    beta_in: float | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if not self.layers:
            raise ConfigError("need at least one hidden layer")
        if self.beta_in is None:
            self.beta_in = self.layers[0].beta


@dataclass
class TpNetwork:
    """Hidden layers, the fixed target propagator ``S`` and the readout.

    ``S`` is ``[classes, units of layer 1]`` and only feeds the target path of
    the first layer; deeper target paths reuse each layer's own ``W``.
    """

    layers: list
    S: np.ndarray
    readout: np.ndarray
    input_shape: tuple[int, ...]
    num_classes: int
    beta_in: float

    def __post_init__(self):
        if self.S.shape != (self.num_classes, self.layers[0].units):
            raise DimensionError(
                f"S must be [{self.num_classes}, {self.layers[0].units}], got {self.S.shape}"
            )
        prev = self.input_shape
        for i, layer in enumerate(self.layers):
            if int(np.prod(prev)) != int(np.prod(layer.in_shape)):
                raise DimensionError(f"layer {i + 1} expects {layer.in_shape}, previous gives {prev}")
            prev = layer.out_shape
        if self.readout.shape != (int(np.prod(prev)), self.num_classes):
            raise DimensionError(f"readout must be [{int(np.prod(prev))}, {self.num_classes}]")

    @property
    def dtype(self):
        return self.S.dtype

    def parameters(self) -> list[np.ndarray]:
        """Tensors in checkpoint order: W_1, R_1?, ..., W_L, R_L?, S, readout."""
        out = []
        for layer in self.layers:
            out.extend(layer.state_tensors())
        return out + [self.S, self.readout]

    def copy(self) -> "TpNetwork":
        layers = []
        for layer in self.layers:
            clone = _copy_layer(layer)
            layers.append(clone)
        return TpNetwork(layers, self.S.copy(), self.readout.copy(), self.input_shape,
                         self.num_classes, self.beta_in)


def _copy_layer(layer):
    if isinstance(layer, ConvLayer):
        return ConvLayer(layer.W.copy(), layer.params, layer.beta, layer.in_shape, layer.padding,
                         layer.pool_size, layer.weight_norm,
                         None if layer.gain is None else layer.gain.copy())
    return DenseLayer(layer.W.copy(), layer.params, layer.beta,
                      None if layer.R is None else layer.R.copy(), layer.recurrent,
                      layer.weight_norm, None if layer.gain is None else layer.gain.copy())


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_network(arch: ArchSpec, seed: int = 0, dtype=np.float32) -> TpNetwork:
    """Draw every matrix uniformly in +-sqrt(1/fan_in) from a seeded generator."""
    rng = np.random.default_rng(seed)
    layers = []
    prev = arch.input_shape
    for spec in arch.layers:
        params = LifParams(spec.alpha, spec.v_th, spec.surrogate_scale)
        if spec.kind == "conv":
            if len(prev) != 3:
                raise ConfigError(f"conv layer needs a (channels, height, width) input, got {prev}")
            c_in = prev[0]
            fan_in = c_in * spec.kernel * spec.kernel
            W = _uniform(rng, (spec.units, c_in, spec.kernel, spec.kernel), fan_in, dtype)
            gain = np.full(spec.units, spec.gain, dtype=dtype) if spec.weight_norm else None
            layer = ConvLayer(W, params, spec.beta, prev, spec.padding, spec.pool,
                              spec.weight_norm, gain)
        else:
            fan_in = int(np.prod(prev))
            W = _uniform(rng, (fan_in, spec.units), fan_in, dtype)
            R, mode = None, None
            if spec.kind == "dense-recurrent":
                mode = spec.recurrent_mode
                R = _uniform(rng, (spec.units, spec.units), spec.units, dtype)
                if mode == "diagonal":
                    R = np.diag(np.diagonal(R)).astype(dtype)
            gain = np.full(spec.units, spec.gain, dtype=dtype) if spec.weight_norm else None
            layer = DenseLayer(W, params, spec.beta, R, mode, spec.weight_norm, gain)
        layers.append(layer)
        prev = layer.out_shape
    S = _uniform(rng, (arch.num_classes, layers[0].units), arch.num_classes, dtype)
    n_out = int(np.prod(prev))
    readout = _uniform(rng, (n_out, arch.num_classes), n_out, dtype)
    return TpNetwork(layers, S, readout, arch.input_shape, arch.num_classes, arch.beta_in)


@dataclass
class LayerState:
    mem: MembraneState
    mem_tilde: MembraneState
    trace: TraceState


@dataclass
class NetworkState:
    """Everything that evolves within one sequence; reset to zero between sequences."""

    layers: list[LayerState]
    input_trace: TraceState


def init_state(net: TpNetwork, batch: int) -> NetworkState:
    dtype = net.dtype
    layers = []
    for layer in net.layers:
        shape = (batch,) + tuple(layer.unit_shape)
        layers.append(LayerState(MembraneState.zeros(shape, dtype), MembraneState.zeros(shape, dtype),
                                 TraceState.zeros(shape, layer.beta, dtype)))
    in_shape = (batch, int(np.prod(net.input_shape)))
    input_trace = TraceState(np.zeros(in_shape, dtype), np.zeros((batch, net.num_classes), dtype),
                             net.beta_in)
    return NetworkState(layers, input_trace)


@dataclass
class LayerRecord:
    """What one layer saw and produced in one step; the inputs to its local update."""

    pre_in: np.ndarray
    pre_trg: np.ndarray
    rec_in: np.ndarray
    rec_trg: np.ndarray
    v: np.ndarray
    v_tilde: np.ndarray
    spikes: np.ndarray
    spikes_tilde: np.ndarray
    out: np.ndarray
    out_tilde: np.ndarray


def check_one_hot(targets: np.ndarray, num_classes: int) -> None:
    if targets.ndim != 2 or targets.shape[1] != num_classes:
        raise DimensionError(f"targets must be [batch, {num_classes}], got {targets.shape}")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise ConfigError("target rows must be one-hot")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1
    return out


def forward_step(
    net: TpNetwork,
    state: NetworkState,
    input_spikes: np.ndarray,
    targets: np.ndarray,
    target_pool: str = "independent",
) -> tuple[NetworkState, list[LayerRecord]]:
    """Propagate one time step along both paths through every layer.

    The input path is driven by ``input_spikes``; the target path by the one-hot
    ``targets`` through ``S`` at layer 1 and through the shared ``W_l`` above.
    ``target_pool`` is ``"independent"`` (each path max-pools on its own) or
    ``"input"`` (the target path reuses the input path's pooling choices).
    ``targets=None`` runs the input path only (inference); the target path
    then stays silent.
    """
    dtype = net.dtype
    batch = input_spikes.shape[0]
    x = input_spikes.reshape(batch, -1).astype(dtype, copy=False)
    if x.shape[1] != int(np.prod(net.input_shape)):
        raise DimensionError(f"input has {x.shape[1]} features, network expects {net.input_shape}")
    infer = targets is None
    if infer:
        c = np.zeros((batch, net.num_classes), dtype=dtype)
    else:
        check_one_hot(targets, net.num_classes)
        c = targets.astype(dtype, copy=False)
    if target_pool not in ("independent", "input"):
        raise ConfigError(f"unknown target pooling policy {target_pool!r}")

    input_trace = update_traces(state.input_trace, x, c)
    pre_in = x.reshape((batch,) + tuple(net.input_shape))
    pre_trg = c
    new_layers, records = [], []
    for idx, (layer, ls) in enumerate(zip(net.layers, state.layers)):
        if ls.mem.v.shape[0] != batch:
            raise DimensionError("state batch size differs from input batch size")
        i_in = layer.current(pre_in)
        if infer:
            i_trg = np.zeros_like(i_in)
        elif idx == 0:
            i_trg = (c @ net.S).reshape(i_in.shape)
        else:
            i_trg = layer.current(pre_trg)
        mem, s = lif_step(ls.mem, i_in, layer.recurrent_current(ls.mem.s_prev), layer.params)
        mem_t, s_t = lif_step(ls.mem_tilde, i_trg, layer.recurrent_current(ls.mem_tilde.s_prev),
                              layer.params)
        trace = update_traces(ls.trace, s, s_t)
        out = layer.pool(s)
        out_t = layer.pool(s_t, s if target_pool == "input" else None)
        records.append(LayerRecord(pre_in, pre_trg, ls.mem.s_prev, ls.mem_tilde.s_prev,
                                   mem.v, mem_t.v, s, s_t, out, out_t))
        new_layers.append(LayerState(mem, mem_t, trace))
        pre_in, pre_trg = out, out_t
    return NetworkState(new_layers, input_trace), records


@dataclass
class LayerGradient:
    dW: np.ndarray
    dR: np.ndarray | None
    dS: np.ndarray | None
    signal: BatchLossSignal
    loss: float


def local_gradients(
    net: TpNetwork,
    state: NetworkState,
    records: list[LayerRecord],
    targets: np.ndarray,
    similarity: str = "dot",
    reduction: str = "mean",
    learn_target_propagator: bool = False,
    learn_recurrent: bool = True,
) -> list[LayerGradient]:
    """Per-layer TP gradients for the step just taken by :func:`forward_step`.

    Layer l only touches its own traces/potentials and the spikes of layer l-1.
    At layer 1 the target-path term belongs to ``S``: it is returned as ``dS``
    when ``learn_target_propagator`` is set and dropped otherwise.
    """
    grads = []
    trg_prev = state.input_trace.eps_tilde
    c = targets.astype(net.dtype, copy=False)
    for idx, (layer, ls, rec) in enumerate(zip(net.layers, state.layers, records)):
        sig = loss_signal(ls.trace.eps, ls.trace.eps_tilde, trg_prev, similarity)
        g_in, g_trg = postsynaptic_factors(sig.mod, ls.trace, rec.v, rec.v_tilde, layer.params,
                                           reduction)
        dW = layer.weight_grad(rec.pre_in, g_in)
        dS = None
        if idx == 0:
            if learn_target_propagator:
                dS = c.T @ g_trg.reshape(g_trg.shape[0], -1)
        else:
            dW = dW + layer.weight_grad(rec.pre_trg, g_trg)
        dR = None
        if layer.R is not None and learn_recurrent:
            dR = layer.recurrent_grad(rec.rec_in, g_in) + layer.recurrent_grad(rec.rec_trg, g_trg)
        grads.append(LayerGradient(dW, dR, dS, sig, local_loss(sig.z, sig.y, reduction)))
        trg_prev = ls.trace.eps_tilde
    return grads


@dataclass
class ReadoutState:
    """Running sum of readout currents plus the spike counts that produced them."""

    accumulator: np.ndarray
    counts: np.ndarray = field(default=None)
    steps: int = 0

    @classmethod
    def zeros(cls, batch: int, net: TpNetwork) -> "ReadoutState":
        return cls(np.zeros((batch, net.num_classes), net.dtype),
                   np.zeros((batch, net.readout.shape[0]), net.dtype))


def readout_step(readout: ReadoutState, last_hidden_spikes: np.ndarray,
                 readout_weights: np.ndarray) -> ReadoutState:
    s = last_hidden_spikes.reshape(last_hidden_spikes.shape[0], -1)
    if s.shape[1] != readout_weights.shape[0] or s.shape[0] != readout.accumulator.shape[0]:
        raise DimensionError(f"spikes {s.shape} do not match readout {readout_weights.shape}")
    counts = s if readout.counts is None else readout.counts + s
    return ReadoutState(readout.accumulator + s @ readout_weights, counts, readout.steps + 1)


def predict(readout: ReadoutState | np.ndarray) -> np.ndarray:
    """Class with the largest integrated value; ties go to the lowest index."""
    acc = readout.accumulator if isinstance(readout, ReadoutState) else np.asarray(readout)
    return np.argmax(acc, axis=1)


def readout_gradient(readout: ReadoutState, targets: np.ndarray) -> np.ndarray:
    """Delta rule: cross-entropy of the integrated logits against the one-hot targets."""
    err = softmax_rows(readout.accumulator) - targets
    return readout.counts.T @ err / targets.shape[0]


# -- checkpoints ---------------------------------------------------------------------------


def write_tensors(fh, tensors) -> None:
    for t in tensors:
        t = np.ascontiguousarray(t, dtype="<f4")
        fh.write(struct.pack("<I", t.ndim))
        fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        fh.write(t.tobytes())


def save_checkpoint(net: TpNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(net.layers)))
        write_tensors(fh, net.parameters())


def read_checkpoint(path) -> tuple[int, list[np.ndarray]]:
    """Parse a checkpoint into ``(layer_count, tensors)`` without needing the architecture."""
    buf = Path(path).read_bytes()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ContainerFormatError("bad checkpoint magic", 0)
    off = len(CKPT_MAGIC)
    if len(buf) < off + 4:
        raise ContainerFormatError("truncated checkpoint header", off)
    (n_layers,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = []
    while off < len(buf):
        if len(buf) < off + 4:
            raise ContainerFormatError("truncated tensor header", off)
        (rank,) = struct.unpack_from("<I", buf, off)
        if rank > 8:
            raise ContainerFormatError(f"implausible tensor rank {rank}", off)
        off += 4
        if len(buf) < off + 4 * rank:
            raise ContainerFormatError("truncated tensor shape", off)
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.uint64))
        if len(buf) < off + nbytes:
            raise ContainerFormatError("truncated tensor payload", off)
        tensors.append(np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off)
                       .reshape(shape).copy())
        off += nbytes
    return n_layers, tensors


def load_checkpoint(net: TpNetwork, path) -> TpNetwork:
    """Overwrite the parameters of ``net`` (built from the same architecture) in place."""
    n_layers, tensors = read_checkpoint(path)
    params = net.parameters()
    if n_layers != len(net.layers) or len(tensors) != len(params):
        raise ContainerFormatError(
            f"checkpoint holds {n_layers} layers / {len(tensors)} tensors, network needs "
            f"{len(net.layers)} / {len(params)}", len(CKPT_MAGIC))
    for dst, src in zip(params, tensors):
        if dst.shape != src.shape:
            raise ContainerFormatError(f"tensor shape {src.shape} != expected {dst.shape}",
                                       len(CKPT_MAGIC))
        dst[...] = src
    return net
