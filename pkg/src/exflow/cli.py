"""Operator command line.

Subcommands: init, learn-task, learn-classes, predict, task-id, outlier,
synth, benchmark. stdout carries machine-parseable CSV only (key=value
summary lines are single-field CSV records); diagnostics go to stderr.

Exit codes: 0 success, 2 configuration or usage, 3 data or model file,
4 training divergence, 5 dimension mismatch, 6 label or task contract,
7 incompatible label spaces.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys

import numpy as np

from exflow import bench, data, inference, persist
from exflow.config import RunConfig, load_config
from exflow.continual import UpdateConfig, cil_update, til_update
from exflow.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    ExflowError,
    LabelSpaceError,
    PersistError,
)
from exflow.model import ContinualFlowModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_DIMENSION = 5
EXIT_CONTRACT = 6
EXIT_LABEL_SPACE = 7

# order matters: subclasses before their bases
_ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_DATA),
    (PersistError, EXIT_DATA),
    (DivergenceError, EXIT_DIVERGENCE),
    (DimensionError, EXIT_DIMENSION),
    (LabelSpaceError, EXIT_LABEL_SPACE),
    (ContractError, EXIT_CONTRACT),
)


def _exit_code(exc: ExflowError) -> int:
    for klass, code in _ERROR_CODES:
        if isinstance(exc, klass):
            return code
    return EXIT_CONTRACT


def _say(msg):
    print(msg, file=sys.stderr)


def _kv(key, value, out):
    if isinstance(value, float):
        value = f"{value:.9f}"
    print(f"{key}={value}", file=out)


def _infer_dim(path) -> int:
    """Feature width implied by the first data row (label column excluded)."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for row in csv.reader(fh):
            if row:
                if len(row) < 2:
                    raise DataError(f"{path}: rows need a label and at least one feature")
                return len(row) - 1
    raise DataError(f"{path}: no data rows")


def _read_features(path, dim) -> np.ndarray:
    """Unlabeled feature rows; width is checked against the model."""
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != dim:
                raise DimensionError(
                    f"{path} row {rownum}: {len(row)} features, model expects {dim}"
                )
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path} row {rownum}: bad feature value ({exc})")
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path} row {rownum}: non-finite feature value")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows)


def _write_metrics(path, metrics):
    # the val column exists only when early stopping had a held-out split
    has_val = bool(metrics) and "val" in metrics[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["epoch", "total", "nll", "replay", "functional"]
        if has_val:
            header = header + ["val"]
        w.writerow(header)
        for m in metrics:
            cells = [m["epoch"], f"{m['total']:.9f}", f"{m['nll']:.9f}",
                     f"{m['replay']:.9f}", f"{m['functional']:.9f}"]
            if has_val:
                cells = cells + [f"{m['val']:.9f}"]
            w.writerow(cells)


def _train_accuracy(model, t, xs, ys) -> float:
    labels, probs = inference.label_posterior_batch(model, t, xs)
    pred = np.asarray(labels)[probs.argmax(axis=1)]
    return float(np.mean(pred == ys))


def _emit_prob_csv(col_ids, probs, kind, out, prefix="p_"):
    w = csv.writer(out)
    w.writerow([f"{prefix}{c}" for c in col_ids] + [kind])
    ids = np.asarray(col_ids)
    for row in probs:
        w.writerow([f"{p:.9f}" for p in row] + [int(ids[row.argmax()])])


def _load_model(path):
    model, tf = persist.load_model(path)
    return model, tf


def _apply_transform(tf, xs):
    return xs if tf.is_identity() else tf.apply(xs)


def cmd_init(args) -> int:
    cfg = load_config(args.config)
    dim = _infer_dim(args.data)
    ds = data.load_dataset(args.data, dim, task_id=args.task)
    tf = None
    if cfg.standardize:
        ds, _, tf = data.standardize(ds)
    model = ContinualFlowModel(
        dim, n_layers=cfg.layers, embed_width=cfg.embed_width,
        pseudo_count=cfg.pseudo_count, replay_weight=cfg.alpha1,
        functional_weight=cfg.alpha2, base_seed=cfg.seed, hidden=cfg.hidden,
    )
    upd = UpdateConfig.for_model(model, **cfg.update_overrides())
    rng = np.random.default_rng(cfg.seed)
    _say(f"training task {args.task} from scratch on {len(ds)} rows")
    metrics = til_update(model, args.task, ds.features, ds.labels, upd, rng)
    persist.save_model(model, args.output, standardizer=tf)
    _write_metrics(f"{args.output}.metrics.csv", metrics)
    _kv("final_nll", metrics[-1]["nll"], sys.stdout)
    _kv("train_accuracy", _train_accuracy(model, args.task, ds.features, ds.labels),
        sys.stdout)
    return EXIT_OK


def _load_update_inputs(args):
    """Shared plumbing for the two incremental-update commands."""
    model, tf = _load_model(args.model)
    cfg = load_config(args.config) if args.config else RunConfig()
    dim = _infer_dim(args.data)
    if dim != model.dim:
        raise DimensionError(f"{args.data} has {dim} features, model expects {model.dim}")
    return model, tf, cfg, dim


def cmd_learn_task(args) -> int:
    model, tf, cfg, dim = _load_update_inputs(args)
    task = args.task if args.task is not None else max(model.task_ids(), default=0) + 1
    ds = data.load_dataset(args.data, dim, task_id=task)
    xs = _apply_transform(tf, ds.features)
    upd = UpdateConfig.for_model(model, **cfg.update_overrides())
    rng = np.random.default_rng(cfg.seed)
    _say(f"task-incremental update: task {task} on {len(ds)} rows")
    metrics = til_update(model, task, xs, ds.labels, upd, rng)
    persist.save_model(model, args.output, standardizer=tf)
    _write_metrics(f"{args.output}.metrics.csv", metrics)
    _kv("task", task, sys.stdout)
    _kv("final_nll", metrics[-1]["nll"], sys.stdout)
    _kv("train_accuracy", _train_accuracy(model, task, xs, ds.labels), sys.stdout)
    return EXIT_OK


def cmd_learn_classes(args) -> int:
    model, tf, cfg, dim = _load_update_inputs(args)
    ds = data.load_dataset(args.data, dim, task_id=args.task)
    xs = _apply_transform(tf, ds.features)
    upd = UpdateConfig.for_model(model, **cfg.update_overrides())
    rng = np.random.default_rng(cfg.seed)
    _say(f"class-incremental update: task {args.task}, labels {sorted(ds.label_set())}")
    try:
        metrics = cil_update(model, args.task, xs, ds.labels, upd, rng)
    except LabelSpaceError as exc:
        # overlapping class batches violate the task contract
        _say(str(exc))
        return EXIT_CONTRACT
    persist.save_model(model, args.output, standardizer=tf)
    _write_metrics(f"{args.output}.metrics.csv", metrics)
    _kv("task", args.task, sys.stdout)
    _kv("final_nll", metrics[-1]["nll"], sys.stdout)
    _kv("train_accuracy", _train_accuracy(model, args.task, xs, ds.labels), sys.stdout)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, tf = _load_model(args.model)
    xs = _apply_transform(tf, _read_features(args.input, model.dim))
    if args.task == "auto":
        labels, probs = inference.marginal_label_posterior_batch(model, xs)
    else:
        labels, probs = inference.label_posterior_batch(model, _task_arg(args.task), xs)
    _emit_prob_csv(labels, probs, "label", sys.stdout)
    return EXIT_OK


def cmd_task_id(args) -> int:
    model, tf = _load_model(args.model)
    xs = _apply_transform(tf, _read_features(args.input, model.dim))
    prior = None
    if args.prior is not None:
        try:
            prior = [float(v) for v in args.prior.split(",")]
        except ValueError:
            raise ConfigError(f"--prior must be comma-separated floats, got {args.prior!r}")
    ids, probs = inference.task_posterior_batch(model, xs, prior)
    _emit_prob_csv(ids, probs, "task", sys.stdout, prefix="p_task")
    return EXIT_OK


def cmd_outlier(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise ConfigError(f"--alpha must be inside (0, 1), got {args.alpha}")
    model, tf = _load_model(args.model)
    xs = _apply_transform(tf, _read_features(args.input, model.dim))
    rng = np.random.default_rng(args.seed)
    threshold = inference.calibrate_outlier(model, args.task, args.alpha,
                                            args.n_calib, rng)
    flags, dens = inference.is_outlier_batch(model, threshold, xs)
    w = csv.writer(sys.stdout)
    w.writerow(["flag", "log_density", "threshold"])
    for f, d in zip(flags, dens):
        w.writerow([int(f), f"{d:.9f}", f"{threshold.threshold:.9f}"])
    return EXIT_OK


def cmd_synth(args) -> int:
    import os

    cfg = load_config(args.config)
    spec = data.SyntheticSpec(cfg.dim, cfg.n_tasks, cfg.task_size,
                              noise_var=cfg.noise_var, seed=cfg.seed,
                              test_size=cfg.test_size)
    trains, tests = data.generate_synthetic(spec)
    os.makedirs(args.output_dir, exist_ok=True)
    for t in range(1, cfg.n_tasks + 1):
        for split, ds in (("train", trains[t - 1]), ("test", tests[t - 1])):
            path = os.path.join(args.output_dir, f"task{t}_{split}.csv")
            data.save_dataset(ds, path)
            _kv(f"task{t}_{split}", path, sys.stdout)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    import os
    import time

    cfg = load_config(args.config)
    os.makedirs(args.output_dir, exist_ok=True)

    def progress(outcome):
        worst = min(acc for _, _, acc, _ in outcome.rows)
        _say(f"step {outcome.step} ({outcome.kind} task {outcome.task_id}): "
             f"worst seen-task accuracy {worst:.4f}")
        _write_metrics(os.path.join(args.output_dir,
                                    f"step{outcome.step}_metrics.csv"),
                       outcome.metrics)

    start = time.monotonic()
    result = bench.run_benchmark(cfg, ablation=args.ablation, progress=progress)
    _say(f"benchmark finished in {time.monotonic() - start:.1f}s")

    curve_path = os.path.join(args.output_dir, "forgetting_curve.csv")
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "accuracy", "task_id_accuracy"])
        for step, task, acc, tacc in result.curve():
            w.writerow([step, task, f"{acc:.9f}", f"{tacc:.9f}"])
    persist.save_model(result.model, os.path.join(args.output_dir, "model.bin"))

    for key, value in result.summary().items():
        _kv(key, value, sys.stdout)
    for t, drop in sorted(result.forgetting().items()):
        _kv(f"task{t}_forgetting", drop, sys.stdout)
    return EXIT_OK


def _task_arg(raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"task id must be an integer or 'auto', got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exflow",
                                description="continual flow model operations")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("init", help="train a first task from scratch")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--task", type=int, default=1)
    sp.set_defaults(run=cmd_init)

    sp = sub.add_parser("learn-task", help="add a whole new task")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--task", type=int, default=None)
    sp.add_argument("--config", default=None)
    sp.set_defaults(run=cmd_learn_task)

    sp = sub.add_parser("learn-classes", help="add new classes to a task")
    sp.add_argument("--model", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--config", default=None)
    sp.set_defaults(run=cmd_learn_classes)

    sp = sub.add_parser("predict", help="per-class probabilities for feature rows")
    sp.add_argument("--model", required=True)
    sp.add_argument("--task", required=True,
                    help="task id, or 'auto' to marginalize task identity")
    sp.add_argument("--input", required=True)
    sp.set_defaults(run=cmd_predict)

    sp = sub.add_parser("task-id", help="task identity posterior for feature rows")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--prior", default=None,
                    help="comma-separated task prior (default uniform)")
    sp.set_defaults(run=cmd_task_id)

    sp = sub.add_parser("outlier", help="flag rows outside a task's density region")
    sp.add_argument("--model", required=True)
    sp.add_argument("--task", type=int, required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--n-calib", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(run=cmd_outlier)

    sp = sub.add_parser("synth", help="write the synthetic benchmark datasets")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.set_defaults(run=cmd_synth)

    sp = sub.add_parser("benchmark", help="run the five-step retention benchmark")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--ablation", action="store_true",
                    help="zero both regularizer weights")
    sp.set_defaults(run=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except ExflowError as exc:
        _say(f"error: {exc}")
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
