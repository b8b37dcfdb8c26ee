"""Frame tensors, event binning, synthetic tasks, k-shot splits and the TPDATA1 container."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContainerFormatError, DimensionError

DATA_MAGIC = b"TPDATA1"
_HEADER = struct.Struct("<4I")


@dataclass
class EventStream:
    """Address-event recording: ``events`` is an ``[n, 3]`` array of (t_us, unit, polarity)."""

    events: np.ndarray
    duration: float
    num_units: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=np.int64).reshape(-1, 3)
        if len(self.events):
            if np.any(np.diff(self.events[:, 0]) < 0):
                raise ConfigError("event timestamps must be non-decreasing")
            if np.any(self.events[:, 1] < 0) or np.any(self.events[:, 1] >= self.num_units):
                raise ConfigError("event unit index out of range")


@dataclass
class FrameTensor:
    """``data`` is ``[samples, time, features]`` float32; ``labels`` one class index per sample."""

    data: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 3:
            raise DimensionError(f"frame data must be [samples, time, features], got {self.data.shape}")
        if len(self.labels) != len(self.data):
            raise DimensionError("one label per sample required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def steps(self) -> int:
        return self.data.shape[1]

    @property
    def features(self) -> int:
        return self.data.shape[2]

    def subset(self, idx) -> "FrameTensor":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameTensor(self.data[idx], self.labels[idx], self.num_classes)


@dataclass
class KShotSplit:
    support: FrameTensor
    query: FrameTensor
    k: int
    support_idx: np.ndarray
    query_idx: np.ndarray


# -- event binning -------------------------------------------------------------------------


def bin_events(stream: EventStream, window: float, max_steps: int, mode: str = "count",
               split_polarity: bool = False) -> np.ndarray:
    """Histogram events into ``[max_steps, units]`` frames of ``window`` microseconds.

    Frame t covers ``[t*window, (t+1)*window)``; later events are dropped and
    short recordings are zero-padded. With ``split_polarity`` the feature axis
    doubles: ON events on units ``[0, n)``, OFF events on ``[n, 2n)``.
    """
    if not window > 0:
        raise ConfigError("window must be positive")
    if mode not in ("count", "binary"):
        raise ConfigError(f"unknown binning mode {mode!r}")
    n = stream.num_units * (2 if split_polarity else 1)
    frames = np.zeros((max_steps, n), dtype=np.float32)
    ev = stream.events
    if len(ev):
        step = (ev[:, 0] // window).astype(np.int64)
        unit = ev[:, 1].copy()
        if split_polarity:
            unit = unit + np.where(ev[:, 2] > 0, 0, stream.num_units)
        keep = (step >= 0) & (step < max_steps)
        np.add.at(frames, (step[keep], unit[keep]), 1.0)
    if mode == "binary":
        frames = (frames > 0).astype(np.float32)
    return frames


def clip_and_scale(frames: np.ndarray, clip: float = 15.0) -> np.ndarray:
    """Bound count frames to ``[0, clip]`` and rescale to ``[0, 1]``."""
    return (np.minimum(frames, clip) / clip).astype(np.float32)


def read_event_csv(path, num_units: int | None = None):
    """Read ``sample,label,t_us,unit,polarity`` rows into per-sample event streams.

    Returns ``(streams, labels)`` ordered by first appearance of each sample id.
    """
    rows: dict[str, list] = {}
    labels: dict[str, int] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            sid = rec["sample"]
            labels.setdefault(sid, int(rec["label"]))
            rows.setdefault(sid, []).append(
                (int(float(rec["t_us"])), int(rec["unit"]), int(rec.get("polarity") or 1)))
    max_unit = max((u for ev in rows.values() for _, u, _ in ev), default=-1)
    units = num_units if num_units is not None else max_unit + 1
    streams = []
    for ev in rows.values():
        ev = np.array(sorted(ev), dtype=np.int64).reshape(-1, 3)
        duration = float(ev[-1, 0]) if len(ev) else 0.0
        streams.append(EventStream(ev, duration, units))
    return streams, np.array(list(labels.values()), dtype=np.int64)


def convert_events(streams, labels, num_classes: int, window: float, steps: int,
                   mode: str = "count", clip: float | None = 15.0, max_time: float | None = None,
                   split_polarity: bool = False) -> FrameTensor:
    """Bin a list of recordings into one frame tensor.

    ``max_time`` keeps only events before that timestamp (e.g. the first
    saccade of an N-MNIST recording).
    """
    frames = []
    for s in streams:
        if max_time is not None:
            s = EventStream(s.events[s.events[:, 0] < max_time], min(s.duration, max_time),
                            s.num_units)
        f = bin_events(s, window, steps, mode, split_polarity)
        if mode == "count" and clip is not None:
            f = clip_and_scale(f, clip)
        frames.append(f)
    n_feat = streams[0].num_units * (2 if split_polarity else 1) if streams else 0
    data = np.stack(frames) if frames else np.zeros((0, steps, n_feat), np.float32)
    return FrameTensor(data, labels, num_classes)


# -- synthetic tasks -----------------------------------------------------------------------


def class_templates(num_classes: int, units: int, active: int, rng) -> np.ndarray:
    """Boolean ``[classes, units]`` masks, each class with ``active`` random units."""
    masks = np.zeros((num_classes, units), dtype=bool)
    for k in range(num_classes):
        masks[k, rng.choice(units, size=active, replace=False)] = True
    return masks


def _check_rates(rate_lo, rate_hi, jitter):
    if not 0.0 <= rate_lo < rate_hi <= 1.0:
        raise ConfigError(f"need 0 <= rate_lo < rate_hi <= 1, got {rate_lo}, {rate_hi}")
    if not 0.0 <= jitter <= 1.0:
        raise ConfigError(f"jitter must be a probability, got {jitter}")


def _render(masks, labels, steps, rate_hi, rate_lo, jitter, rng) -> np.ndarray:
    p = np.where(masks[labels], rate_hi, rate_lo).astype(np.float64)  # [n, units]
    spikes = rng.random((len(labels), steps, masks.shape[1])) < p[:, None, :]
    if jitter > 0:
        spikes ^= rng.random(spikes.shape) < jitter
    return spikes.astype(np.float32)


def synth_task(num_classes: int = 10, units: int = 100, steps: int = 20,
               rate_hi: float = 0.5, rate_lo: float = 0.05, jitter: float = 0.0,
               samples_per_class: int = 50, active_fraction: float = 0.2,
               seed: int = 0) -> FrameTensor:
    """Rate-coded classes: each class drives a fixed random subset of "active" units.

    Active units fire Bernoulli(rate_hi) per step, the rest Bernoulli(rate_lo);
    ``jitter`` then flips every entry independently with that probability.
    """
    _check_rates(rate_lo, rate_hi, jitter)
    rng = np.random.default_rng(seed)
    active = max(1, int(round(active_fraction * units)))
    masks = class_templates(num_classes, units, active, rng)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng.shuffle(labels)
    return FrameTensor(_render(masks, labels, steps, rate_hi, rate_lo, jitter, rng), labels,
                       num_classes)


def user_shift_task(num_classes: int = 10, units: int = 100, steps: int = 20,
                    rate_hi: float = 0.5, rate_lo: float = 0.05, jitter: float = 0.0,
                    samples_per_class: int = 50, active_fraction: float = 0.2,
                    shift_fraction: float = 0.5, seed: int = 0, user_seed: int = 1) -> FrameTensor:
    """Samples from the :func:`synth_task` distribution of ``seed`` seen through a new "user".

    For every class, ``shift_fraction`` of its active units are swapped with
    randomly chosen other units (a class-conditional unit permutation).
    """
    _check_rates(rate_lo, rate_hi, jitter)
    base_rng = np.random.default_rng(seed)
    active = max(1, int(round(active_fraction * units)))
    masks = class_templates(num_classes, units, active, base_rng)
    rng = np.random.default_rng(user_seed)
    shifted = masks.copy()
    n_move = int(round(shift_fraction * active))
    for k in range(num_classes):
        on = np.flatnonzero(masks[k])
        off = np.flatnonzero(~masks[k])
        src = rng.choice(on, size=n_move, replace=False)
        dst = rng.choice(off, size=n_move, replace=False)
        shifted[k, src] = False
        shifted[k, dst] = True
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng.shuffle(labels)
    return FrameTensor(_render(shifted, labels, steps, rate_hi, rate_lo, jitter, rng), labels,
                       num_classes)


def order_task(num_groups: int = 2, group_units: int = 20, steps: int = 20,
               rate_hi: float = 0.5, rate_lo: float = 0.02, jitter: float = 0.0,
               samples_per_class: int = 100, seed: int = 0) -> FrameTensor:
    """Temporal-order classification: each class is one ordering of the unit groups.

    The sequence is cut into ``num_groups`` equal segments and in segment i
    only group ``order[i]`` fires at ``rate_hi``. Every group is active for the
    same number of steps in every class, so time-summed counts carry no label
    information. There are ``num_groups!`` classes.
    """
    import itertools

    _check_rates(rate_lo, rate_hi, jitter)
    if steps < num_groups:
        raise ConfigError("need at least one step per group")
    rng = np.random.default_rng(seed)
    orders = list(itertools.permutations(range(num_groups)))
    num_classes = len(orders)
    units = num_groups * group_units
    bounds = np.linspace(0, steps, num_groups + 1).round().astype(int)
    prob = np.full((num_classes, steps, units), rate_lo)
    for k, order in enumerate(orders):
        for seg, g in enumerate(order):
            prob[k, bounds[seg]:bounds[seg + 1], g * group_units:(g + 1) * group_units] = rate_hi
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng.shuffle(labels)
    spikes = rng.random((len(labels), steps, units)) < prob[labels]
    if jitter > 0:
        spikes ^= rng.random(spikes.shape) < jitter
    return FrameTensor(spikes.astype(np.float32), labels, num_classes)


def majority_vote_baseline(train: FrameTensor, test: FrameTensor) -> float:
    """Accuracy of a vote over time-summed counts of each class's active units.

    Active units of a class are those whose mean count in that class exceeds
    their mean count over all training samples.
    """
    counts_tr = train.data.sum(axis=1)
    counts_te = test.data.sum(axis=1)
    overall = counts_tr.mean(axis=0)
    scores = np.zeros((len(test), train.num_classes))
    for k in range(train.num_classes):
        mean_k = counts_tr[train.labels == k].mean(axis=0)
        active = mean_k > overall
        if active.any():
            scores[:, k] = counts_te[:, active].mean(axis=1)
    return float(np.mean(np.argmax(scores, axis=1) == test.labels))


def train_test_split(data: FrameTensor, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == k))
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    return data.subset(np.sort(train_idx)), data.subset(np.sort(test_idx))


def kshot_split(data: FrameTensor, k: int, ratio: float = 0.8, seed: int = 0) -> KShotSplit:
    """Split each class ``ratio``/``1-ratio`` into support pool and query, then keep k per class.

    ``k`` larger than a class's pool keeps the whole pool ("all-shot").
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    rng = np.random.default_rng(seed)
    support, query = [], []
    for c in range(data.num_classes):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        if len(idx) == 0:
            raise ConfigError(f"class {c} has no samples")
        n_pool = min(len(idx), max(1, int(round(ratio * len(idx)))))
        pool = idx[:n_pool]
        query.extend(idx[n_pool:])
        support.extend(pool[: min(k, len(pool))])
    support = np.sort(np.array(support, dtype=np.int64))
    query = np.sort(np.array(query, dtype=np.int64))
    return KShotSplit(data.subset(support), data.subset(query), k, support, query)


def random_crop(frames: np.ndarray, shape: tuple[int, int, int], pad: int, rng) -> np.ndarray:
    """Zero-pad every ``[time, C*H*W]`` sample by ``pad`` and crop back at a random offset.

    The offset is drawn per sample and shared across its time steps.
    """
    n, t, f = frames.shape
    c, h, w = shape
    if c * h * w != f:
        raise DimensionError(f"shape {shape} does not match {f} features")
    x = np.pad(frames.reshape(n, t, c, h, w), ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, t, c, h, w), dtype=frames.dtype)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(offsets):
        out[i] = x[i, :, :, dy:dy + h, dx:dx + w]
    return out.reshape(n, t, f)


# -- TPDATA1 container ---------------------------------------------------------------------


def save_container(data: FrameTensor, path) -> None:
    n, t, f = data.data.shape
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(_HEADER.pack(n, t, f, data.num_classes))
        fh.write(np.ascontiguousarray(data.labels, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(data.data, dtype="<f4").tobytes())


def load_container(path) -> FrameTensor:
    buf = Path(path).read_bytes()
    if buf[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise ContainerFormatError("bad data container magic", 0)
    off = len(DATA_MAGIC)
    if len(buf) < off + _HEADER.size:
        raise ContainerFormatError("truncated header", off)
    n, t, f, num_classes = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    label_bytes = 4 * n
    payload_bytes = 4 * n * t * f
    if label_bytes + payload_bytes > len(buf) - off:
        where = off if label_bytes > len(buf) - off else off + label_bytes
        raise ContainerFormatError(
            f"header declares {n}x{t}x{f} samples but only {len(buf) - off} payload bytes remain",
            where)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise ContainerFormatError(f"label {labels[bad]} >= num_classes {num_classes}",
                                   off + 4 * bad)
    off += label_bytes
    samples = np.frombuffer(buf, dtype="<f4", count=n * t * f, offset=off).reshape(n, t, f)
    off += payload_bytes
    if off != len(buf):
        raise ContainerFormatError(f"{len(buf) - off} trailing bytes after payload", off)
    return FrameTensor(samples.astype(np.float32), labels, num_classes)
