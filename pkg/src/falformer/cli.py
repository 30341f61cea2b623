"""Command-line interface: ``falformer {train,eval,synth,bench-attn,approx-error}``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__
from . import bench
from .data import SynthSpec, load_manifest, synth_generate, write_dataset
from .errors import ConfigError, DataError, FalformerError, NumericError, ShapeError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import DEFAULT_CLIP, DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_PATIENCE, evaluate, history_line, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "model.ckpt"
HISTORY_NAME = "history.jsonl"

log = logging.getLogger("falformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default, which collides with the data-error code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not value > 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return value


def nonneg_float(text):
    value = float(text)
    if value < 0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("list must be non-empty with every value >= 1")
    return values


def mode_list(text):
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in bench.BENCH_MODES]
    if not modes or bad:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {','.join(bench.BENCH_MODES)}")
    return modes


def resolve_threads(value):
    """``--threads`` wins; otherwise ``FALFORMER_THREADS``; otherwise 1."""
    if value is not None:
        return value
    env = os.environ.get("FALFORMER_THREADS")
    if not env:
        return 1
    try:
        threads = int(env)
    except ValueError:
        raise UsageError(f"FALFORMER_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise UsageError("FALFORMER_THREADS must be >= 1")
    return threads


# --------------------------------------------------------------------------
# commands


def cmd_train(args):
    dataset = load_manifest(args.manifest)
    train_bags, val_bags = dataset.load("train"), dataset.load("val")
    if not train_bags or not val_bags:
        raise DataError("manifest needs non-empty train and val splits")
    config = ModelConfig(
        d_f=train_bags[0].d_f, d_model=args.d_model, layers=args.layers, segments=args.segments,
        heads=args.heads, n_classes=dataset.n_classes, attention_mode=args.mode,
        kmeans_seed=args.seed, cluster_space=args.cluster_space,
    )
    clip = None if args.no_clip else args.clip
    print(f"falformer train: mode={config.attention_mode} L={config.layers} d_model={config.d_model} "
          f"N_s={config.segments} heads={config.heads} lr={args.lr:g} epochs={args.epochs} "
          f"patience={args.patience} seed={args.seed}")
    print(f"data: train={len(train_bags)} val={len(val_bags)} d_f={config.d_f} classes={config.n_classes}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    history_path = out / HISTORY_NAME
    with open(history_path, "w") as hist:
        def on_epoch(record):
            hist.write(history_line(record) + "\n")
            hist.flush()
            print(f"epoch {record['epoch']:3d}  train_loss={record['train_loss']:.6f}  "
                  f"val_loss={record['val_loss']:.6f}  val_acc={record['val_acc']:.2f}")

        result = train(train_bags, val_bags, config, seed=args.seed, lr=args.lr, epochs=args.epochs,
                       patience=args.patience, clip=clip, average=args.average, on_epoch=on_epoch,
                       threads=resolve_threads(args.threads))
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(ckpt, config, result.params, result.optimizer)
    stop = "early stop" if result.stopped_early else "completed"
    print(f"{stop}: best_epoch={result.best_epoch} best_val_loss={result.best_val_loss:.6f}")
    print(f"checkpoint={ckpt}")
    print(f"history={history_path}")
    return EXIT_OK


def cmd_eval(args):
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    config, params, _ = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    bags = dataset.load(args.split)
    if not bags:
        raise DataError(f"split {args.split!r} is empty")
    if bags[0].d_f != config.d_f:
        raise ConfigError(f"checkpoint expects d_f={config.d_f}, bags have d_f={bags[0].d_f}")
    if dataset.n_classes > config.n_classes:
        raise ConfigError(f"manifest has {dataset.n_classes} classes, checkpoint {config.n_classes}")
    report = evaluate(bags, params, config, average=args.average, threads=resolve_threads(args.threads))
    print("\n".join(report.lines()))
    return EXIT_OK


def split_counts(total):
    """60/20/20 split of ``total`` bags; the test split takes the rounding remainder."""
    n_train = round(0.6 * total)
    n_val = round(0.2 * total)
    return n_train, n_val, total - n_train - n_val


def cmd_synth(args):
    if args.bags is not None:
        counts = split_counts(args.bags)
    else:
        counts = (args.train, args.val, args.test)
    try:
        spec = SynthSpec(n_train=counts[0], n_val=counts[1], n_test=counts[2], d_f=args.d_f,
                         min_tokens=args.min_tokens, max_tokens=args.max_tokens,
                         n_clusters=args.clusters, signal_fraction=args.signal_fraction,
                         separation=args.separation, noise_sigma=args.sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = synth_generate(spec, seed=args.seed)
    manifest = write_dataset(dataset, args.out)
    sizes = dataset.sizes()
    n_pos = sum(b.label for split in dataset.splits.values() for b in split)
    print(f"wrote {sum(sizes.values())} bags ({sizes['train']}/{sizes['val']}/{sizes['test']}), "
          f"{n_pos} positive")
    print(f"manifest={manifest}")
    return EXIT_OK


def cmd_bench_attn(args):
    def progress(rec):
        if rec.status == "skipped":
            print(f"{rec.mode:8s} N={rec.n:6d}  skipped (above exact cap)")
        else:
            print(f"{rec.mode:8s} N={rec.n:6d}  m={rec.landmarks:5d}  {rec.time_ms:10.3f} ms  "
                  f"peak={rec.peak_bytes / 2**20:9.2f} MiB  flops={rec.flops:.3e}")

    records = bench.bench_attention(
        n_list=args.n_list, modes=args.modes, landmarks=args.landmarks, repeats=args.repeats,
        dim=args.dim, exact_cap=args.exact_cap, seed=args.seed, measure_error=args.measure_error,
        progress=progress)
    comments = [
        "attention forward only: feature extraction, projections and k-means are not timed",
        f"dim={args.dim} landmarks={args.landmarks} repeats={args.repeats} "
        f"exact_cap={args.exact_cap} seed={args.seed}",
        "time_ms is the median over repeats; peak_bytes counts allocations during one run",
    ]
    for mode in args.modes:
        ok = [r for r in records if r.mode == mode and r.status == "ok"]
        if len(ok) >= 2:
            slope = bench.loglog_slope([r.n for r in ok], [r.time_ms for r in ok])
            comments.append(f"loglog_slope {mode}={slope:.3f}")
            print(f"log-log slope {mode}: {slope:.3f}")
    bench.write_report(args.out, records, comments)
    print(f"report={args.out}")
    return EXIT_OK


def cmd_approx_error(args):
    records, medians = bench.approx_error_study(
        n=args.n, clusters=args.clusters, separation=args.separation, landmarks=args.landmarks,
        seeds=args.seeds, dim=args.dim, oracle_pinv=args.oracle_pinv, seed0=args.seed)
    pinv = "svd" if args.oracle_pinv else "iterative"
    comments = [
        f"n={args.n} clusters={args.clusters} separation={args.separation:g} "
        f"landmarks={args.landmarks} seeds={args.seeds} dim={args.dim} pinv={pinv}",
    ] + [f"median {mode}={value!r}" for mode, value in medians.items()]
    bench.write_report(args.out, records, comments)
    for mode, value in medians.items():
        print(f"median_{mode}={value:.6g}")
    print(f"report={args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="falformer", description="Feature-aware landmark attention MIL classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a classifier from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("exact", "nystrom", "falsa"), default="falsa")
    p.add_argument("--d-model", type=positive_int, default=768)
    p.add_argument("--layers", type=positive_int, default=2)
    p.add_argument("--segments", type=positive_int, default=256)
    p.add_argument("--heads", type=positive_int, default=8)
    p.add_argument("--lr", type=positive_float, default=DEFAULT_LR)
    p.add_argument("--epochs", type=positive_int, default=DEFAULT_EPOCHS)
    p.add_argument("--patience", type=positive_int, default=DEFAULT_PATIENCE)
    p.add_argument("--clip", type=positive_float, default=DEFAULT_CLIP, help="global gradient-norm clip")
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.add_argument("--average", choices=("macro", "binary"), default="macro")
    p.add_argument("--cluster-space", choices=("projected", "raw"), default="projected")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--average", choices=("macro", "binary"), default="macro")
    p.add_argument("--threads", type=positive_int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic MIL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bags", type=positive_int, default=None, help="total bags, split 60/20/20")
    p.add_argument("--train", type=positive_int, default=SynthSpec.n_train)
    p.add_argument("--val", type=positive_int, default=SynthSpec.n_val)
    p.add_argument("--test", type=positive_int, default=SynthSpec.n_test)
    p.add_argument("--d-f", type=positive_int, default=SynthSpec.d_f)
    p.add_argument("--min-tokens", type=positive_int, default=SynthSpec.min_tokens)
    p.add_argument("--max-tokens", type=positive_int, default=SynthSpec.max_tokens)
    p.add_argument("--clusters", type=positive_int, default=SynthSpec.n_clusters)
    p.add_argument("--signal-fraction", type=positive_float, default=SynthSpec.signal_fraction)
    p.add_argument("--separation", type=nonneg_float, default=SynthSpec.separation)
    p.add_argument("--sigma", type=positive_float, default=SynthSpec.noise_sigma)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench-attn", help="time exact vs landmark attention over N")
    p.add_argument("--n-list", type=int_list, default=list(bench.DEFAULT_N_LIST))
    p.add_argument("--modes", type=mode_list, default=list(bench.BENCH_MODES))
    p.add_argument("--landmarks", type=positive_int, default=257)
    p.add_argument("--repeats", type=positive_int, default=3)
    p.add_argument("--dim", type=positive_int, default=64)
    p.add_argument("--exact-cap", type=positive_int, default=bench.DEFAULT_EXACT_CAP)
    p.add_argument("--measure-error", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("approx-error", help="landmark quality: contiguous vs k-means landmarks")
    p.add_argument("--n", type=positive_int, default=64)
    p.add_argument("--clusters", type=positive_int, default=4)
    p.add_argument("--separation", type=nonneg_float, default=6.0)
    p.add_argument("--landmarks", type=positive_int, default=4)
    p.add_argument("--seeds", type=positive_int, default=20)
    p.add_argument("--dim", type=positive_int, default=8)
    p.add_argument("--oracle-pinv", action="store_true", help="use the SVD pseudoinverse")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_approx_error)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench-attn" and args.repeats < 3:
        parser.error("--repeats must be >= 3")
    if args.command == "approx-error" and args.landmarks > args.n:
        parser.error("--landmarks cannot exceed --n")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"falformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"falformer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, ShapeError, FalformerError, OSError) as exc:
        print(f"falformer: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
