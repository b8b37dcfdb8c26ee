"""``key = value`` configuration files shared by every CLI subcommand.

Example::

    # architecture
    input = 100
    classes = 10
    layers = dense:64, dense:64
    alpha = 0.95
    beta = 0.95
    v_th = 0.5
    # training
    epochs = 50
    batch_size = 8
    eta = 1e-4
    # data
    task = synth
    jitter = 0.05

Per-layer keys (alpha, beta, v_th, surrogate_scale, weight_norm, gain) take a
scalar or one comma-separated value per layer. Layer entries are
``dense:N``, ``rec:N`` (full recurrence), ``rec-diag:N`` or
``conv:C[:k=3][:pad=1][:pool=2]``.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .data import (
    FrameTensor,
    load_container,
    order_task,
    synth_task,
    train_test_split,
    user_shift_task,
)
from .errors import ConfigError
from .network import ArchSpec, LayerSpec
from .trainer import TrainConfig

ARCH_KEYS = {"input", "classes", "layers", "alpha", "beta", "v_th", "surrogate_scale",
             "weight_norm", "gain", "beta_in", "recurrent_mode"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
DATA_KEYS = {"task", "train_data", "test_data", "units", "steps", "rate_hi", "rate_lo", "jitter",
             "samples_per_class", "active_fraction", "test_fraction", "data_seed", "num_groups",
             "group_units", "shift_fraction", "user_seed", "crop_shape"}
COST_KEYS = {"update_step"}
KNOWN_KEYS = ARCH_KEYS | TRAIN_KEYS | DATA_KEYS | COST_KEYS

DEFAULTS = {
    "alpha": "0.95", "beta": "0.95", "v_th": "0.5", "surrogate_scale": "1.0",
    "weight_norm": "0", "gain": "1.0", "recurrent_mode": "full",
    "task": "synth", "units": "100", "steps": "20", "rate_hi": "0.5", "rate_lo": "0.05",
    "jitter": "0.05", "samples_per_class": "100", "active_fraction": "0.2",
    "test_fraction": "0.2", "data_seed": "0", "num_groups": "3", "group_units": "20",
    "shift_fraction": "0.5", "user_seed": "1", "update_step": "0",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def _get(cfg, key):
    return cfg.get(key, DEFAULTS.get(key))


def _bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _ints(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.replace("x", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected integers, got {value!r}") from exc


def _per_layer(cfg, key, n, conv=float):
    raw = [v.strip() for v in str(_get(cfg, key)).split(",")]
    if len(raw) == 1:
        raw = raw * n
    if len(raw) != n:
        raise ConfigError(f"{key}: expected 1 or {n} values, got {len(raw)}")
    try:
        return [conv(v) for v in raw]
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def _layer_entry(entry: str) -> dict:
    parts = [p.strip() for p in entry.split(":")]
    kinds = {"dense": "dense", "rec": "dense-recurrent", "rec-diag": "dense-recurrent",
             "conv": "conv"}
    if parts[0] not in kinds or len(parts) < 2:
        raise ConfigError(f"bad layer entry {entry!r}")
    try:
        spec = {"kind": kinds[parts[0]], "units": int(parts[1])}
        if parts[0] == "rec-diag":
            spec["recurrent_mode"] = "diagonal"
        for opt in parts[2:]:
            k, v = opt.split("=")
            name = {"k": "kernel", "pad": "padding", "pool": "pool"}[k.strip()]
            spec[name] = int(v)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad layer entry {entry!r}") from exc
    return spec


def build_arch(cfg: dict[str, str]) -> ArchSpec:
    for key in ("input", "classes", "layers"):
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    entries = [_layer_entry(e) for e in cfg["layers"].split(",") if e.strip()]
    n = len(entries)
    alpha = _per_layer(cfg, "alpha", n)
    beta = _per_layer(cfg, "beta", n)
    v_th = _per_layer(cfg, "v_th", n)
    scale = _per_layer(cfg, "surrogate_scale", n)
    wn = _per_layer(cfg, "weight_norm", n, _bool)
    gain = _per_layer(cfg, "gain", n)
    layers = []
    for i, e in enumerate(entries):
        e.setdefault("recurrent_mode", _get(cfg, "recurrent_mode"))
        layers.append(LayerSpec(alpha=alpha[i], beta=beta[i], v_th=v_th[i],
                                surrogate_scale=scale[i], weight_norm=wn[i], gain=gain[i], **e))
    beta_in = float(cfg["beta_in"]) if "beta_in" in cfg else None
    try:
        return ArchSpec(_ints(cfg["input"]), int(cfg["classes"]), layers, beta_in)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def build_train_config(cfg: dict[str, str], **overrides) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in cfg:
            continue
        raw = cfg[f.name]
        try:
            if f.type in ("bool", bool):
                kwargs[f.name] = _bool(raw)
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        except ValueError as exc:
            raise ConfigError(f"{f.name}: {exc}") from exc
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)


def _synth_kwargs(cfg, seed):
    return dict(num_classes=int(cfg["classes"]), units=int(_get(cfg, "units")),
                steps=int(_get(cfg, "steps")), rate_hi=float(_get(cfg, "rate_hi")),
                rate_lo=float(_get(cfg, "rate_lo")), jitter=float(_get(cfg, "jitter")),
                samples_per_class=int(_get(cfg, "samples_per_class")),
                active_fraction=float(_get(cfg, "active_fraction")), seed=seed)


def build_task(cfg: dict[str, str]) -> tuple[FrameTensor, FrameTensor]:
    """Training and test sets named by the ``task`` key.

    ``synth``, ``order`` and ``shift`` generate data; ``container`` loads
    ``train_data`` (and ``test_data`` if given, else a held-out split).
    """
    task = _get(cfg, "task")
    seed = int(_get(cfg, "data_seed"))
    frac = float(_get(cfg, "test_fraction"))
    if task == "container":
        if "train_data" not in cfg:
            raise ConfigError("task=container needs train_data")
        train = load_container(cfg["train_data"])
        if "test_data" in cfg:
            return train, load_container(cfg["test_data"])
        return train_test_split(train, frac, seed)
    try:
        if task == "synth":
            data = synth_task(**_synth_kwargs(cfg, seed))
        elif task == "shift":
            data = user_shift_task(**_synth_kwargs(cfg, seed),
                                   shift_fraction=float(_get(cfg, "shift_fraction")),
                                   user_seed=int(_get(cfg, "user_seed")))
        elif task == "order":
            data = order_task(num_groups=int(_get(cfg, "num_groups")),
                              group_units=int(_get(cfg, "group_units")),
                              steps=int(_get(cfg, "steps")), rate_hi=float(_get(cfg, "rate_hi")),
                              rate_lo=float(_get(cfg, "rate_lo")), jitter=float(_get(cfg, "jitter")),
                              samples_per_class=int(_get(cfg, "samples_per_class")), seed=seed)
        else:
            raise ConfigError(f"unknown task {task!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return train_test_split(data, frac, seed)
