"""Command-line surface: dataset generation, harvesting, training,
benchmarking, plotting, and cross-size generalization tables.

Exit codes are part of the interface: 0 success, 2 invalid flags, 3 I/O
failure, 4 diverged training, 5 model/data dimension mismatch. All output
files are written atomically (temp file + rename). GNFP_THREADS caps the
number of worker processes; timing measurements always stay on one worker.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import bench, plotting, training
from .bench import DEEPFP_LABEL, write_atomic
from .channel import (BadDatasetFile, InvalidConfig, NetworkConfig,
                      generate_instance, load_dataset, save_dataset)
from .gnn import CorruptFile, GNNModel, VersionMismatch, load_model
from .reform import BadHarvestFile, DimensionMismatch, HarvestFile
from .training import DivergedLoss, TrainConfig, split_indices

EXIT_OK = 0
EXIT_BAD_FLAGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_DIM_MISMATCH = 5

SPLITS = ("all", "train", "val", "test")


def worker_count() -> int:
    """Worker processes for per-instance parallel sections: the CPU count,
    capped by GNFP_THREADS when set."""
    n = os.cpu_count() or 1
    cap = os.environ.get("GNFP_THREADS")
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise SystemExit(EXIT_BAD_FLAGS)
    return n


def _nonneg_int(text: str) -> int:
    val = int(text)
    if val < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return val


def _pos_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"{text} is not positive")
    return val


def _pos_float(text: str) -> float:
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError(f"{text} is not positive")
    return val


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3 or any(p < 0 for p in parts) \
            or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(
            "ratios must be three nonnegative fractions summing to 1")
    return tuple(parts)


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("user counts must be positive")
    return vals


def _split_instances(instances, split: str, ratios, seed: int):
    if split == "all":
        return list(instances)
    idx = dict(zip(("train", "val", "test"),
                   split_indices(len(instances), ratios, seed)))[split]
    return [instances[i] for i in idx]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gnnfp",
        description="Beamforming solver suite: classical and fast "
                    "fractional-programming iterations plus a learned "
                    "per-cell subproblem solver.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a channel dataset")
    g.add_argument("--cells", type=_pos_int, default=7)
    g.add_argument("--users", type=_pos_int, default=6)
    g.add_argument("--tx", type=_pos_int, default=8)
    g.add_argument("--rx", type=_pos_int, default=2)
    g.add_argument("--samples", type=_nonneg_int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    h = sub.add_parser("harvest", help="record solver subproblems")
    h.add_argument("--data", required=True)
    h.add_argument("--iters", type=_nonneg_int, default=8)
    h.add_argument("--policy", choices=("fp", "model"), default="fp")
    h.add_argument("--model", help="checkpoint (required for --policy model)")
    h.add_argument("--split", choices=SPLITS, default="all")
    h.add_argument("--ratios", type=_ratios, default=(0.70, 0.15, 0.15))
    h.add_argument("--split-seed", type=int, default=0)
    h.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit the model on a harvest")
    t.add_argument("--harvest", required=True)
    t.add_argument("--val-harvest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=_nonneg_int, default=300)
    t.add_argument("--lr", type=_pos_float, default=1e-3)
    t.add_argument("--batch", type=_pos_int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--patience", type=_pos_int, default=30)
    t.add_argument("--log", help="training log CSV (streamed, not atomic)")
    t.add_argument("--init", help="checkpoint to continue from")

    b = sub.add_parser("bench", help="compare solvers on the test split")
    b.add_argument("--data", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--algorithms", default="fp,fastfp,gnnfp")
    b.add_argument("--iters", type=_pos_int, default=16)
    b.add_argument("--fp-baseline-iters", type=_pos_int, default=100)
    b.add_argument("--ratios", type=_ratios, default=(0.70, 0.15, 0.15))
    b.add_argument("--split-seed", type=int, default=0)
    b.add_argument("--timing-reps", type=_nonneg_int, default=5)
    b.add_argument("--bits", action="store_true",
                   help="report rates in bits instead of nats")
    b.add_argument("--csv", required=True)

    pl = sub.add_parser("plot", help="render a benchmark CSV to SVG")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--out", required=True)

    z = sub.add_parser("generalize",
                       help="evaluate one model across user counts")
    z.add_argument("--model", required=True)
    z.add_argument("--users", type=_int_list, default=[3, 4, 5, 6, 7, 8])
    z.add_argument("--iters", type=_pos_int, default=5)
    z.add_argument("--samples", type=_pos_int, default=50)
    z.add_argument("--fp-baseline-iters", type=_pos_int, default=100)
    z.add_argument("--seed", type=int, default=1000,
                   help="dataset seed for the freshly drawn test instances")
    z.add_argument("--csv", required=True)
    return p


def _atomic_sidecar_write(write_fn, path: str):
    """Run write_fn(tmp_path) producing tmp_path and tmp_path.manifest.json,
    then rename both into place."""
    tmp = path + ".tmp"
    write_fn(tmp)
    os.replace(tmp, path)
    if os.path.exists(tmp + ".manifest.json"):
        os.replace(tmp + ".manifest.json", path + ".manifest.json")


def cmd_gen(args) -> int:
    try:
        config = NetworkConfig(L=args.cells, Q=args.users, Nt=args.tx,
                               Nr=args.rx, seed=args.seed)
    except InvalidConfig as e:
        print(f"gen: {e}", file=sys.stderr)
        return EXIT_BAD_FLAGS
    workers = worker_count()
    if workers > 1 and args.samples > 1:
        import functools
        import multiprocessing as mp
        with mp.Pool(min(workers, args.samples)) as pool:
            instances = pool.map(functools.partial(generate_instance, config),
                                 range(args.samples), chunksize=16)
    else:
        instances = [generate_instance(config, i)
                     for i in range(args.samples)]
    _atomic_sidecar_write(
        lambda tmp: save_dataset(tmp, config, instances), args.out)
    print(f"wrote {args.samples} instances to {args.out}")
    return EXIT_OK


def cmd_harvest(args) -> int:
    config, instances = load_dataset(args.data)
    subset = _split_instances(instances, args.split, args.ratios,
                              args.split_seed)
    policy = {"fp": "classical_fp", "model": "current_model"}[args.policy]
    model = None
    if policy == "current_model":
        if not args.model:
            print("harvest: --policy model requires --model",
                  file=sys.stderr)
            return EXIT_BAD_FLAGS
        model = load_model(args.model)
    extra = {"data": os.path.abspath(args.data), "split": args.split,
             "split_seed": args.split_seed, "ratios": list(args.ratios)}
    count = 0

    def write(tmp):
        nonlocal count
        count = training.harvest(subset, args.iters, tmp, policy=policy,
                                 model=model, manifest_extra=extra,
                                 workers=worker_count())

    _atomic_sidecar_write(write, args.out)
    print(f"wrote {count} records "
          f"({len(subset)} instances x {args.iters} iterations) "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                      learning_rate=args.lr, seed=args.seed,
                      early_stop_patience=args.patience)
    initial = load_model(args.init) if args.init else None
    train_h = HarvestFile(args.harvest)
    val_h = HarvestFile(args.val_harvest)
    model, history = training.train(train_h, val_h, cfg, args.out,
                                    log_path=args.log, initial=initial)
    if history:
        last = history[-1]
        best = min(h["val_gap_mean"] for h in history)
        print(f"trained {len(history)} epochs; final val gap mean "
              f"{last['val_gap_mean']:.4f}, best {best:.4f}; "
              f"checkpoint at {args.out}")
    else:
        print(f"wrote initialized checkpoint to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    algorithms = tuple(a for a in args.algorithms.split(",") if a)
    unknown = set(algorithms) - set(bench.ALGORITHMS)
    if not algorithms or unknown:
        print(f"bench: unknown algorithms {sorted(unknown)}",
              file=sys.stderr)
        return EXIT_BAD_FLAGS
    config, instances = load_dataset(args.data)
    test = _split_instances(instances, "test", args.ratios, args.split_seed)
    if not test:
        print("bench: test split is empty", file=sys.stderr)
        return EXIT_BAD_FLAGS
    model = load_model(args.model) if "gnnfp" in algorithms else None
    report = bench.benchmark(test, algorithms, iters=args.iters,
                             baseline_iters=args.fp_baseline_iters,
                             model=model, timing_reps=args.timing_reps,
                             workers=worker_count())
    text = bench.report_csv(report, bits=args.bits, users=config.Q)
    write_atomic(args.csv, text)
    unit = "bits" if args.bits else "nats"
    print(f"benchmarked {len(test)} test instances ({unit}); "
          f"normalized to fp at {args.fp_baseline_iters} iterations:")
    for name in algorithms:
        line = (f"  {name:7s} @ {args.iters:3d}: "
                f"{report.pct(name, args.iters):6.2f}%")
        if name in report.sec_per_iter:
            line += f"   {report.sec_per_iter[name] * 1e3:7.2f} ms/iter"
        print(line)
    if config.Q in bench.DEEPFP_NORMALIZED_PCT_5ITER:
        print(f"  deepfp  @   5: "
              f"{bench.DEEPFP_NORMALIZED_PCT_5ITER[config.Q]:6.2f}%   "
              f"({DEEPFP_LABEL})")
    print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_plot(args) -> int:
    with open(args.csv) as f:
        rows = plotting.read_bench_rows(f.read())
    svg = plotting.render_svg(rows)
    tmp = args.out + ".tmp"
    with open(tmp, "wb") as f:
        f.write(svg)
    os.replace(tmp, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_generalize(args) -> int:
    model = load_model(args.model)
    base = NetworkConfig(seed=args.seed)
    text = bench.generalize(model, args.users, args.iters, args.samples,
                            base, baseline_iters=args.fp_baseline_iters,
                            progress=lambda q: print(f"  Q={q} done"),
                            workers=worker_count())
    write_atomic(args.csv, text)
    print(f"wrote {args.csv} (deepfp rows are {DEEPFP_LABEL})")
    return EXIT_OK


_COMMANDS = {
    "gen": cmd_gen,
    "harvest": cmd_harvest,
    "train": cmd_train,
    "bench": cmd_bench,
    "plot": cmd_plot,
    "generalize": cmd_generalize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.cmd](args)
    except DivergedLoss as e:
        print(f"{args.cmd}: training diverged: {e}; the checkpoint file "
              f"holds the last good state", file=sys.stderr)
        return EXIT_DIVERGED
    except DimensionMismatch as e:
        print(f"{args.cmd}: dimension mismatch: {e}", file=sys.stderr)
        return EXIT_DIM_MISMATCH
    except (OSError, BadDatasetFile, BadHarvestFile, CorruptFile,
            VersionMismatch, plotting.BadPlotInput) as e:
        print(f"{args.cmd}: {e}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfig, ValueError) as e:
        print(f"{args.cmd}: {e}", file=sys.stderr)
        return EXIT_BAD_FLAGS


if __name__ == "__main__":
    sys.exit(main())
