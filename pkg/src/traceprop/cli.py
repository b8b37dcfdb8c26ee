"""Command-line entry point: ``traceprop <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numeric failure (NaN/inf, or a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cost import sweep
from .data import (
    convert_events,
    kshot_split,
    load_container,
    read_event_csv,
    save_container,
    synth_task,
)
from .errors import (
    ConfigError,
    ContainerFormatError,
    ContrastiveBatchError,
    DimensionError,
    NumericError,
)
from .network import init_network, load_checkpoint, save_checkpoint
from .trainer import MetricsWriter, evaluate, finetune, layer_silhouettes, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _sibling(metrics_out, suffix):
    p = Path(metrics_out)
    return p.with_name(p.stem + suffix)


def _load_cfg(args) -> dict[str, str]:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    return cfgmod.load_config(args.config)


def _network(args, cfg):
    arch = cfgmod.build_arch(cfg)
    net = init_network(arch, seed=args.seed if args.seed is not None else 0)
    if getattr(args, "checkpoint_in", None):
        try:
            load_checkpoint(net, args.checkpoint_in)
        except (OSError, EOFError) as exc:
            raise ContainerFormatError(f"cannot read checkpoint: {exc}", 0) from exc
    return net


def _train_cfg(args, cfg, **extra):
    over = dict(extra)
    if args.seed is not None:
        over["seed"] = args.seed
    if args.deterministic:
        over["deterministic"] = True
    return cfgmod.build_train_config(cfg, **over)


def _crop_shape(cfg):
    return cfgmod._ints(cfg["crop_shape"]) if "crop_shape" in cfg else None


# -- subcommands ----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    tcfg = _train_cfg(args, cfg, epochs=args.epochs)
    net = _network(args, cfg)
    train_set, test_set = cfgmod.build_task(cfg)
    writer = MetricsWriter(args.metrics_out) if args.metrics_out else None

    def sink(rec):
        print(rec.to_line(), flush=True)
        if writer is not None:
            writer(rec)

    try:
        _, records = train(net, train_set, tcfg, test=test_set, sink=sink,
                           with_silhouette=args.silhouette, input_shape=_crop_shape(cfg))
    finally:
        if writer is not None:
            writer.close()
    if args.checkpoint_out:
        save_checkpoint(net, args.checkpoint_out)
    if args.metrics_out:
        from .plotting import plot_silhouette, plot_training

        plot_training(records, _sibling(args.metrics_out, "_training.png"))
        if records and records[-1].silhouette:
            plot_silhouette(records[-1].silhouette, _sibling(args.metrics_out, "_silhouette.png"))
    final = records[-1] if records else None
    _emit(status="done", epochs=tcfg.epochs,
          final_accuracy=_fmt(final.accuracy) if final else "nan",
          best_accuracy=_fmt(final.best_accuracy) if final else "nan")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    net = _network(args, cfg)
    if args.data:
        data = load_container(args.data)
    else:
        data = cfgmod.build_task(cfg)[1]
    acc, confusion = evaluate(net, data)
    sil = layer_silhouettes(net, data) if args.silhouette else []
    kv = {"split": "eval", "samples": len(data), "accuracy": _fmt(acc)}
    kv.update({f"silhouette_l{i + 1}": _fmt(s) for i, s in enumerate(sil)})
    _emit(**kv)
    if args.metrics_out:
        Path(args.metrics_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.metrics_out).write_text(" ".join(f"{k}={v}" for k, v in kv.items()) + "\n")
        np.savetxt(_sibling(args.metrics_out, "_confusion.csv"), confusion, fmt="%d",
                   delimiter=",")
        if sil:
            from .plotting import plot_silhouette

            plot_silhouette(sil, _sibling(args.metrics_out, "_silhouette.png"))
    return EXIT_OK


def _parse_ks(text: str) -> list[int | None]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok == "all":
            out.append(None)
        else:
            try:
                out.append(int(tok))
            except ValueError as exc:
                raise ConfigError(f"bad k value {tok!r}") from exc
    return out


def cmd_finetune(args) -> int:
    """Fine-tune a pretrained checkpoint on the config's task (usually ``task = shift``).

    The base set used for the forgetting metric is ``--base-data`` if given,
    otherwise the held-out split of the unshifted synthetic task with the same
    data seed. ``--checkpoint-out`` receives the network tuned with the last k.
    """
    cfg = _load_cfg(args)
    if not args.checkpoint_in:
        raise ConfigError("finetune needs --checkpoint-in")
    tcfg = _train_cfg(args, cfg, epochs=args.epochs)
    net = _network(args, cfg)
    user_train, user_test = cfgmod.build_task(cfg)
    user = _concat(user_train, user_test)
    if args.base_data:
        base = load_container(args.base_data)
    elif cfg.get("task", cfgmod.DEFAULTS["task"]) in ("shift", "synth"):
        base_cfg = dict(cfg, task="synth")
        base = cfgmod.build_task(base_cfg)[1]
    else:
        base = None
    seed = tcfg.seed
    reports = []
    tuned = None
    for k in _parse_ks(args.k):
        k_eff = k if k is not None else len(user)
        split = kshot_split(user, k_eff, ratio=args.support_ratio, seed=seed)
        tuned, rep = finetune(net, split, tcfg, base=base)
        row = rep.as_dict()
        row["k"] = "all" if k is None else k
        reports.append((row, rep))
        _emit(**{key: _fmt(v) if v is not None else "na" for key, v in row.items()})
    if args.metrics_out:
        path = Path(args.metrics_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for row, _ in reports:
                fh.write(" ".join(f"{k}={_fmt(v) if v is not None else 'na'}"
                                  for k, v in row.items()) + "\n")
        with open(_sibling(path, ".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(reports[0][0]))
            w.writeheader()
            w.writerows(r for r, _ in reports)
        from .plotting import plot_finetune

        plot_finetune([rep for _, rep in reports], _sibling(path, "_finetune.png"))
    if args.checkpoint_out and tuned is not None:
        save_checkpoint(tuned, args.checkpoint_out)
    return EXIT_OK


def _concat(a, b):
    from .data import FrameTensor

    return FrameTensor(np.concatenate([a.data, b.data]), np.concatenate([a.labels, b.labels]),
                       a.num_classes)


def _int_list(text: str, name: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated integers") from exc
    if not vals:
        raise ConfigError(f"{name}: empty list")
    return vals


def cmd_cost(args) -> int:
    cfg = _load_cfg(args)
    arch = cfgmod.build_arch(cfg)
    widths = []
    for spec in arch.layers:
        if spec.kind == "conv":
            raise ConfigError("the cost model covers dense layers only")
        widths.append(spec.units)
    tcfg = cfgmod.build_train_config(cfg)
    batches = _int_list(args.sweep_batch, "--sweep-batch") if args.sweep_batch else [tcfg.batch_size]
    classes = _int_list(args.sweep_classes, "--sweep-classes") if args.sweep_classes else [arch.num_classes]
    steps = args.steps if args.steps is not None else int(cfgmod._get(cfg, "steps"))
    rows = sweep(int(np.prod(arch.input_shape)), widths, steps, batches, classes,
                 int(cfgmod._get(cfg, "update_step")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.9g}" if isinstance(v, float) else v for k, v in r.items()})
    from .plotting import plot_relative_memory_cost

    plot_relative_memory_cost(batches, classes, out.with_suffix(".png"))
    _emit(status="done", rows=len(rows), csv=out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .oracle import format_report, run_gradcheck

    if args.instances < 1:
        raise ConfigError("--instances must be positive")
    if not args.h > 0:
        raise ConfigError("--h must be positive")
    results = run_gradcheck(args.instances, args.seed if args.seed is not None else 0, args.h)
    report = format_report(results, args.tol)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    worst = max(r.max_error for r in results)
    failed = sum(r.max_error >= args.tol for r in results)
    for r in results:
        if r.max_error >= args.tol:
            _emit(instance=r.index, kind=r.kind, max_error=f"{r.max_error:.3e}", result="FAIL")
    _emit(instances=len(results), failed=failed, max_error=f"{worst:.3e}", tol=args.tol,
          result="pass" if failed == 0 else "FAIL")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_convert_events(args) -> int:
    if args.window_us <= 0 or args.steps < 1:
        raise ConfigError("--window-us and --steps must be positive")
    try:
        streams, labels = read_event_csv(args.input, args.units)
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"bad event file {args.input}: {exc}", 0) from exc
    num_classes = args.classes if args.classes else int(labels.max()) + 1 if len(labels) else 1
    data = convert_events(streams, labels, num_classes, args.window_us, args.steps, args.mode,
                          clip=args.clip, max_time=args.max_time_us,
                          split_polarity=args.split_polarity)
    save_container(data, args.output)
    _emit(status="done", samples=len(data), steps=data.steps, features=data.features,
          classes=num_classes, output=args.output)
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a synthetic task to a container (handy for ``eval --data``)."""
    data = synth_task(num_classes=args.classes, units=args.units, steps=args.steps,
                      samples_per_class=args.samples_per_class, jitter=args.jitter,
                      seed=args.seed if args.seed is not None else 0)
    save_container(data, args.output)
    _emit(status="done", samples=len(data), output=args.output)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--checkpoint-in")
    common.add_argument("--checkpoint-out")
    common.add_argument("--metrics-out", help="key=value metrics log; CSV/PNG go next to it")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bit-reproducible runs")

    p = argparse.ArgumentParser(prog="traceprop", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a network from a config")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--silhouette", action="store_true", help="log per-layer silhouette scores")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--data", help="TPDATA1 container (default: the config's test split)")
    e.add_argument("--silhouette", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("finetune", parents=[common], help="k-shot fine-tuning of a checkpoint")
    f.add_argument("--k", default="1,5,all", help="comma-separated shots per class, or 'all'")
    f.add_argument("--epochs", type=int, default=3)
    f.add_argument("--support-ratio", type=float, default=0.8)
    f.add_argument("--base-data", help="container used for the forgetting metric")
    f.set_defaults(func=cmd_finetune)

    c = sub.add_parser("cost", parents=[common], help="TP vs TESS compute/memory sweep")
    c.add_argument("--sweep-classes")
    c.add_argument("--sweep-batch")
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--out", default="cost.csv")
    c.set_defaults(func=cmd_cost)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the rule")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--report")
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("convert-events", parents=[common], help="bin event CSV into TPDATA1")
    v.add_argument("input", help="CSV with columns sample,label,t_us,unit,polarity")
    v.add_argument("output")
    v.add_argument("--window-us", type=float, required=True)
    v.add_argument("--steps", type=int, required=True)
    v.add_argument("--mode", choices=("count", "binary"), default="count")
    v.add_argument("--clip", type=float, default=15.0)
    v.add_argument("--max-time-us", type=float, default=None)
    v.add_argument("--units", type=int, default=None)
    v.add_argument("--classes", type=int, default=None)
    v.add_argument("--split-polarity", action="store_true")
    v.set_defaults(func=cmd_convert_events)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic task container")
    s.add_argument("output")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--units", type=int, default=100)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--samples-per-class", type=int, default=50)
    s.add_argument("--jitter", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ContrastiveBatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerFormatError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
