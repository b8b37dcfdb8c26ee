"""Training, evaluation and k-shot fine-tuning loops around the TP rule."""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FrameTensor, KShotSplit, random_crop
from .errors import ConfigError, ContrastiveBatchError, DimensionError, NumericError
from .network import (
    TpNetwork,
    ReadoutState,
    forward_step,
    init_state,
    local_gradients,
    one_hot,
    predict,
    readout_gradient,
    readout_step,
)
from .rule import REDUCTIONS, SIMILARITIES, apply_update


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    eta: float = 1e-4
    readout_eta: float = 1e-2
    seed: int = 0
    similarity: str = "dot"
    reduction: str = "mean"
    update_cadence: str = "step"
    learn_target_propagator: bool = False
    learn_recurrent: bool = True
    target_pool: str = "independent"
    eval_every: int = 1
    crop_pad: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContrastiveBatchError(
                f"batch_size must be at least 2 for the pairwise contrastive loss, got {self.batch_size}")
        if not self.eta > 0 or not self.readout_eta >= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.update_cadence not in ("step", "sequence"):
            raise ConfigError("update_cadence must be 'step' or 'sequence'")
        if self.target_pool not in ("independent", "input"):
            raise ConfigError("target_pool must be 'independent' or 'input'")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    best_accuracy: float
    loss: list[float] = field(default_factory=list)
    silhouette: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_line(self) -> str:
        parts = [f"epoch={self.epoch}", f"split={self.split}", f"accuracy={self.accuracy:.6f}",
                 f"best_accuracy={self.best_accuracy:.6f}"]
        parts += [f"loss_l{i + 1}={v:.6g}" for i, v in enumerate(self.loss)]
        parts += [f"silhouette_l{i + 1}={v:.6f}" for i, v in enumerate(self.silhouette)]
        parts.append(f"wall_clock={self.wall_clock:.6f}")
        return " ".join(parts)


class MetricsWriter:
    """Append-only ``key=value`` log plus a CSV summary written on close."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: list[MetricsRecord] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def __call__(self, rec: MetricsRecord) -> None:
        self.records.append(rec)
        self._fh.write(rec.to_line() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
        write_metrics_csv(self.records, self.path.with_suffix(".csv"))


def write_metrics_csv(records, path) -> None:
    n_layers = max((len(r.loss) for r in records), default=0)
    n_sil = max((len(r.silhouette) for r in records), default=0)
    header = ["epoch", "split", "accuracy", "best_accuracy"]
    header += [f"loss_l{i + 1}" for i in range(n_layers)]
    header += [f"silhouette_l{i + 1}" for i in range(n_sil)] + ["wall_clock"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in records:
            row = [str(r.epoch), r.split, f"{r.accuracy:.6f}", f"{r.best_accuracy:.6f}"]
            row += [f"{v:.6g}" for v in r.loss] + [""] * (n_layers - len(r.loss))
            row += [f"{v:.6f}" for v in r.silhouette] + [""] * (n_sil - len(r.silhouette))
            row.append(f"{r.wall_clock:.6f}")
            fh.write(",".join(row) + "\n")


def single_thread():
    """Context manager pinning BLAS to one thread so reductions run in a fixed order."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def _check_compatible(net: TpNetwork, data: FrameTensor) -> None:
    if data.features != int(np.prod(net.input_shape)):
        raise DimensionError(f"data has {data.features} features, network expects {net.input_shape}")
    if data.num_classes != net.num_classes:
        raise ConfigError(f"data has {data.num_classes} classes, network reads out {net.num_classes}")


def _check_finite(net: TpNetwork) -> None:
    for p in net.parameters():
        if not np.all(np.isfinite(p)):
            raise NumericError("non-finite weights after update")


def train_batch(net: TpNetwork, x: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Run the TP training loop on one batch ``x`` of shape ``[batch, time, features]``.

    Every time step propagates both paths through all layers and then applies
    each layer's local update. Returns the per-layer loss summed over steps.
    """
    batch, steps = x.shape[:2]
    if batch < 2:
        raise ContrastiveBatchError("a training batch needs at least 2 samples")
    c = one_hot(labels, net.num_classes, net.dtype)
    state = init_state(net, batch)
    ro = ReadoutState.zeros(batch, net)
    losses = np.zeros(len(net.layers))
    pending = None
    for t in range(steps):
        state, records = forward_step(net, state, x[:, t], c, cfg.target_pool)
        grads = local_gradients(net, state, records, c, cfg.similarity, cfg.reduction,
                                cfg.learn_target_propagator, cfg.learn_recurrent)
        losses += [g.loss for g in grads]
        if cfg.update_cadence == "step":
            _apply(net, grads, cfg.eta)
        elif pending is None:
            pending = grads
        else:
            for acc, g in zip(pending, grads):
                acc.dW = acc.dW + g.dW
                acc.dR = None if g.dR is None else acc.dR + g.dR
                acc.dS = None if g.dS is None else acc.dS + g.dS
        ro = readout_step(ro, records[-1].out, net.readout)
    if pending is not None:
        _apply(net, pending, cfg.eta)
    if cfg.readout_eta > 0:
        apply_update(net.readout, readout_gradient(ro, c), cfg.readout_eta, out=net.readout)
    return losses


def _apply(net, grads, eta):
    for layer, g in zip(net.layers, grads):
        apply_update(layer.W, g.dW, eta, out=layer.W)
        if g.dR is not None:
            apply_update(layer.R, g.dR, eta, out=layer.R)
        if g.dS is not None:
            apply_update(net.S, g.dS, eta, out=net.S)


def run_inference(net: TpNetwork, data: FrameTensor, batch_size: int = 256):
    """Input-path-only pass. Returns integrated readout and final-step input traces per layer."""
    _check_compatible(net, data)
    n = len(data)
    acc = np.zeros((n, net.num_classes), dtype=net.dtype)
    traces = [np.zeros((n, layer.units), dtype=net.dtype) for layer in net.layers]
    for lo in range(0, n, batch_size):
        x = data.data[lo:lo + batch_size].astype(net.dtype, copy=False)
        state = init_state(net, len(x))
        ro = ReadoutState.zeros(len(x), net)
        for t in range(data.steps):
            state, records = forward_step(net, state, x[:, t], None)
            ro = readout_step(ro, records[-1].out, net.readout)
        acc[lo:lo + len(x)] = ro.accumulator
        for i, ls in enumerate(state.layers):
            traces[i][lo:lo + len(x)] = ls.trace.eps.reshape(len(x), -1)
    return acc, traces


def evaluate(net: TpNetwork, data: FrameTensor, batch_size: int = 256):
    """Accuracy and ``[true, predicted]`` confusion matrix; never touches the weights."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    acc, _ = run_inference(net, data, batch_size)
    pred = predict(acc)
    confusion = np.zeros((net.num_classes, net.num_classes), dtype=np.int64)
    np.add.at(confusion, (data.labels, pred), 1)
    return float(np.mean(pred == data.labels)), confusion


def silhouette(traces: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Samples of singleton classes are excluded (their coefficient is undefined).
    """
    x = np.asarray(traces, dtype=np.float64).reshape(len(traces), -1)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    keep = np.isin(labels, classes[counts >= 2])
    x, labels = x[keep], labels[keep]
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError("silhouette needs at least two classes with two or more samples")
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    member = labels[:, None] == classes[None, :]
    sums = dist @ member
    sizes = member.sum(axis=0)
    own = np.argmax(member, axis=1)
    rows = np.arange(len(x))
    a = sums[rows, own] / (sizes[own] - 1)
    mean_other = sums / sizes
    mean_other[rows, own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def layer_silhouettes(net: TpNetwork, data: FrameTensor, max_samples: int = 2000) -> list[float]:
    _, traces = run_inference(net, data.subset(np.arange(min(len(data), max_samples))))
    labels = data.labels[:max_samples]
    return [silhouette(t, labels) for t in traces]


def train(net: TpNetwork, data: FrameTensor, cfg: TrainConfig, test: FrameTensor | None = None,
          sink=None, with_silhouette: bool = False, input_shape=None):
    """Train ``net`` in place; returns ``(net, records)``.

    One record per evaluation: ``split="test"`` when a test set is given,
    otherwise ``split="train"``. ``best_accuracy`` tracks the peak so far.
    """
    _check_compatible(net, data)
    if len(data) < 2:
        raise ContrastiveBatchError("need at least 2 training samples")
    rng = np.random.default_rng(cfg.seed)
    records: list[MetricsRecord] = []
    best = 0.0
    start = time.perf_counter()
    last_clock = 0.0
    ctx = single_thread() if cfg.deterministic else contextlib.nullcontext()
    with ctx:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data))
            losses = np.zeros(len(net.layers))
            n_steps = 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                if len(idx) < 2:
                    continue
                x = data.data[idx]
                if cfg.crop_pad:
                    x = random_crop(x, input_shape or net.input_shape, cfg.crop_pad, rng)
                losses += train_batch(net, x.astype(net.dtype, copy=False), data.labels[idx], cfg)
                n_steps += data.steps
            _check_finite(net)
            if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                split, target = ("test", test) if test is not None else ("train", data)
                acc, _ = evaluate(net, target)
                best = max(best, acc)
                sil = layer_silhouettes(net, target) if with_silhouette else []
                clock = max(time.perf_counter() - start, np.nextafter(last_clock, np.inf))
                last_clock = clock
                rec = MetricsRecord(epoch, split, acc, best, list(losses / max(n_steps, 1)), sil,
                                    clock)
                records.append(rec)
                if sink is not None:
                    sink(rec)
    return net, records


@dataclass
class FinetuneReport:
    k: int
    query_before: float
    query_after: float
    base_before: float | None = None
    base_after: float | None = None

    @property
    def improvement(self) -> float:
        return self.query_after - self.query_before

    @property
    def forgetting(self) -> float | None:
        """Drop in base-set accuracy caused by fine-tuning (clamped at 0)."""
        if self.base_before is None:
            return None
        return max(0.0, self.base_before - self.base_after)

    def as_dict(self) -> dict:
        out = asdict(self)
        out.update(improvement=self.improvement, forgetting=self.forgetting)
        return out


def finetune(net: TpNetwork, split: KShotSplit, cfg: TrainConfig, base: FrameTensor | None = None):
    """Adapt a deployed network on the support set only; returns ``(tuned, report)``.

    The input network is left untouched; the tuned network is a copy.
    """
    if len(split.support) == 0:
        raise ConfigError("empty support set")
    if split.support.num_classes != net.num_classes:
        raise ConfigError("support classes do not match the network readout")
    before, _ = evaluate(net, split.query)
    base_before = evaluate(net, base)[0] if base is not None else None
    tuned = net.copy()
    batch = min(cfg.batch_size, len(split.support))
    tune_cfg = replace(cfg, batch_size=batch, eval_every=0)
    train(tuned, split.support, tune_cfg)
    after, _ = evaluate(tuned, split.query)
    base_after = evaluate(tuned, base)[0] if base is not None else None
    return tuned, FinetuneReport(split.k, before, after, base_before, base_after)
