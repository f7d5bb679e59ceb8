"""Command-line entry point: ``acnn {train,eval,gen-cluttered,inspect}``.

Exit codes: 0 success, 2 usage or data problems, 3 numerical failure.

``train`` settings resolve as defaults < ``--config`` file < explicit
flags, and the resolved set is echoed to ``config.txt`` in the run
directory; passing that file back via ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
from pathlib import Path

from . import checkpoint
from .analysis import (
    CovarianceTrace,
    covariance_table,
    export_feature_maps,
    export_filter_images,
    export_metrics_csv,
    to_gray,
    write_pgm,
)
from .datasets import (
    MNIST_FILES,
    DatasetFormatError,
    MissingDataError,
    generate_cluttered_mnist,
    load_mnist_idx,
    load_split,
    mnist_paths,
    write_idx,
)
from .layers import Conv2d
from .network import DATASET_SHAPES, PRESETS, Network, build_preset
from .trainer import NonFiniteLossError, TrainerConfig, error_percent, train

log = logging.getLogger("acnn")

DATA_ENV = "ACNN_DATA_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# key -> (type, default); the order here is the order of the config echo
TRAIN_KEYS = {
    "dataset": (str, "mnist"),
    "preset": (str, "acnn-11"),
    "epochs": (int, 10),
    "batch_size": (int, 500),
    "learning_rate": (float, 0.01),
    "momentum": (float, 0.95),
    "seed": (int, 0),
    "precision": (str, "single"),
    "eps_pd": (float, 1e-2),
    "limit": (int, 0),
    "distractors": (int, 6),
    "crop": (int, 8),
    "clutter_seed": (int, 0),
    "record_time": (bool, True),
    "data_dir": (str, None),
}


class UsageError(Exception):
    pass


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_train_config(args):
    cfg = {k: default for k, (_, default) in TRAIN_KEYS.items()}
    cfg["data_dir"] = os.environ.get(DATA_ENV, "data")
    if args.config:
        for key, raw in read_config(args.config).items():
            kind = TRAIN_KEYS[key][0]
            try:
                cfg[key] = _parse_bool(raw) if kind is bool else kind(raw)
            except ValueError as e:
                raise UsageError(f"{args.config}: bad value for {key}: {e}") from None
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["dataset"] not in DATASET_SHAPES:
        raise UsageError(f"unknown dataset {cfg['dataset']!r}")
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    if cfg["precision"] not in ("single", "double"):
        raise UsageError(f"unknown precision {cfg['precision']!r}")
    return cfg


def format_config(cfg):
    lines = []
    for key in TRAIN_KEYS:
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def load_data(dataset, data_dir, limit, distractors=6, crop=8, clutter_seed=0):
    """Train/test sets for a run, truncated to ``limit`` items when ``limit > 0``.

    A cluttered set that was not generated ahead of time is built in
    memory from plain MNIST.
    """
    limit = limit or None
    data_dir = Path(data_dir)
    if dataset == "mnist-cluttered" and not (data_dir / dataset).is_dir():
        sets = []
        for i, split in enumerate(("train", "test")):
            source = load_split("mnist", split, data_dir).head(limit)
            sets.append(generate_cluttered_mnist(source, len(source), distractors, clutter_seed + i, crop=crop))
        return sets
    return [load_split(dataset, split, data_dir).head(limit) for split in ("train", "test")]


def _missing_hint(dataset, data_dir):
    if dataset == "cifar10":
        return f"place data_batch_1..5.bin and test_batch.bin in {data_dir}/cifar10 (or set {DATA_ENV})"
    files = ", ".join(MNIST_FILES["train"] + MNIST_FILES["test"])
    return f"place {files} in {data_dir}/mnist (or set {DATA_ENV})"


def export_network_images(network, out_dir):
    """Filter images for every convolution; adaptive layers get three per filter."""
    paths = []
    for i, layer in enumerate(network.layers):
        if getattr(layer, "kind", "") == "adaptive-conv":
            paths += export_filter_images(layer, out_dir, prefix=f"layer{i}_")
        elif isinstance(layer, Conv2d):
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            for f in range(layer.weights.shape[0]):
                path = Path(out_dir) / f"layer{i}_filter{f:02d}_raw.pgm"
                write_pgm(path, to_gray(layer.weights[f].mean(axis=0)))
                paths.append(path)
    return paths


def _run_dir(out_dir, cfg):
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir) / f"{stamp}-{cfg['preset']}-{cfg['dataset']}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def cmd_train(args):
    cfg = resolve_train_config(args)
    try:
        train_set, test_set = load_data(
            cfg["dataset"], cfg["data_dir"], cfg["limit"], cfg["distractors"], cfg["crop"], cfg["clutter_seed"]
        )
    except MissingDataError as e:
        print(f"error: {e}\nhint: {_missing_hint(cfg['dataset'], cfg['data_dir'])}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    tc = TrainerConfig(
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        precision=cfg["precision"],
        eps_pd=cfg["eps_pd"],
        record_time=cfg["record_time"],
    )
    spec = build_preset(cfg["preset"], cfg["dataset"])
    run = Path(args.run_dir) if args.run_dir else _run_dir(args.out_dir, cfg)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(format_config(cfg))
    log.info("run directory %s", run)

    network = Network(spec, tc.precision, seed=tc.seed)
    initial = network.covariance()
    status = EXIT_OK
    try:
        network, metrics = train(spec, train_set, test_set, tc, network=network)
    except NonFiniteLossError as e:
        print(f"error: {e}; last finite parameters saved", file=sys.stderr)
        network, metrics, status = e.network, e.metrics, EXIT_NUMERIC
    trace = CovarianceTrace.from_metrics(metrics, initial) if initial is not None else None
    export_metrics_csv(metrics, trace, run)
    export_network_images(network, run / "filters")
    if args.sample_outputs:
        first = next(layer for layer in network.layers if hasattr(layer, "weights") and layer.weights.ndim == 4)
        export_feature_maps(first, test_set.images(network.dtype, 0), run / "responses")
    checkpoint.save(network, run / "checkpoint.bin")
    if metrics:
        print(f"test_error_pct={metrics[-1].test_error_pct!r}")
    print(f"run_dir={run}")
    return status


def cmd_eval(args):
    try:
        network = checkpoint.load(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_USAGE
    dataset = args.dataset or network.spec.dataset
    data_dir = args.data_dir or os.environ.get(DATA_ENV, "data")
    try:
        _, test_set = load_data(dataset, data_dir, args.limit, args.distractors, args.crop, args.clutter_seed)
    except MissingDataError as e:
        print(f"error: {e}\nhint: {_missing_hint(dataset, data_dir)}", file=sys.stderr)
        return EXIT_USAGE
    if tuple(test_set.shape) != tuple(network.spec.input_shape):
        print(
            f"error: dataset {dataset} has shape {test_set.shape}, checkpoint expects {tuple(network.spec.input_shape)}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    print(f"test_error_pct={error_percent(network, test_set)!r}")
    return EXIT_OK


def cmd_gen_cluttered(args):
    out = Path(args.out_dir)
    try:
        sources = {split: load_mnist_idx(*mnist_paths(args.source_dir, split)) for split in ("train", "test")}
    except MissingDataError as e:
        print(f"error: {e}\nhint: {_missing_hint('mnist', args.source_dir)}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": args.count, "test": args.test_count if args.test_count is not None else args.count}
    for i, split in enumerate(("train", "test")):
        ds = generate_cluttered_mnist(sources[split], counts[split], args.distractors, args.seed + i, crop=args.crop)
        img, lbl = MNIST_FILES[split]
        write_idx(out / img, out / lbl, ds)
        log.info("wrote %d %s images to %s", len(ds), split, out)
    return EXIT_OK


def cmd_inspect(args):
    try:
        network = checkpoint.load(args.checkpoint)
    except (OSError, checkpoint.CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not network.is_adaptive:
        print(
            f"error: checkpoint is a {network.spec.name or 'fixed-kernel'} network without adaptive "
            "convolutions; nothing to inspect",
            file=sys.stderr,
        )
        return EXIT_USAGE
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for i, layer in enumerate(network.layers):
        if getattr(layer, "kind", "") == "adaptive-conv":
            export_filter_images(layer, out, prefix=f"layer{i}_")
            tables.append(f"# layer {i}\n{covariance_table(layer.sigma)}")
    text = "\n".join(tables) + "\n"
    (out / "covariance.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="acnn", description="Adaptive Gaussian-envelope convolution experiments.")
    ap.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a preset network")
    t.add_argument("--config", help="key=value file; explicit flags override it")
    t.add_argument("--dataset", choices=sorted(DATASET_SHAPES))
    t.add_argument("--preset", choices=PRESETS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("single", "double"))
    t.add_argument("--eps-pd", dest="eps_pd", type=float)
    t.add_argument("--limit", type=int, help="keep only the first N train and N test items (0 = all)")
    t.add_argument("--distractors", type=int, help="clutter patches per image when generating on the fly")
    t.add_argument("--crop", type=int, help="clutter patch size")
    t.add_argument("--clutter-seed", dest="clutter_seed", type=int)
    t.add_argument("--no-timing", dest="record_time", action="store_const", const=False,
                   help="write 0 for epoch seconds so metrics.csv is reproducible byte-for-byte")
    t.add_argument("--data-dir", dest="data_dir", help=f"dataset root (default ${DATA_ENV} or ./data)")
    t.add_argument("--out-dir", default="runs", help="parent of the timestamped run directory")
    t.add_argument("--run-dir", help="exact run directory to use instead of a timestamped one")
    t.add_argument("--sample-outputs", action="store_true", help="also save conv-1 responses to one test image")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test error of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", choices=sorted(DATASET_SHAPES))
    e.add_argument("--data-dir")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--distractors", type=int, default=6)
    e.add_argument("--crop", type=int, default=8)
    e.add_argument("--clutter-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-cluttered", help="generate 60x60 cluttered MNIST as IDX files")
    g.add_argument("--source-dir", required=True, help="directory with the MNIST IDX files")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=50_000)
    g.add_argument("--test-count", type=int)
    g.add_argument("--distractors", "-k", type=int, default=6)
    g.add_argument("--crop", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_cluttered)

    i = sub.add_parser("inspect", help="export envelopes and covariance of an adaptive checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
