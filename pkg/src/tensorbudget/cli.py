"""Command-line surface: configure thresholds, run benchmarks, verify pass
correctness, and dump graphs before/after optimisation.

Size flags accept decimal suffixes (KB/MB/GB, powers of ten) and binary ones
(KiB/MiB/GiB).  The same flags can be supplied through the TB_FLAGS
environment variable; explicit command-line flags win.  Exit codes: 0 on
success, 1 on verification failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import shlex
import sys
import time
from dataclasses import dataclass

import numpy as np

from .frontend import (
    METRICS, KernelSpec, build_kernel_mvm, build_knn, build_pairwise_distance,
    random_inputs,
)
from .interpreter import BudgetExceeded, evaluate
from .ir import DType, Graph, dump
from .pipeline import PassConfig, run_pipeline

ENV_FLAGS = "TB_FLAGS"

_DECIMAL = {"B": 1, "KB": 10**3, "MB": 10**6, "GB": 10**9}
_BINARY = {"KIB": 2**10, "MIB": 2**20, "GIB": 2**30}


def parse_size(text: str) -> int:
    """'1GB' -> 10**9, '64MiB' -> 64 * 2**20, bare digits -> bytes."""
    s = text.strip()
    upper = s.upper()
    for suffix, mult in sorted({**_DECIMAL, **_BINARY}.items(),
                               key=lambda kv: -len(kv[0])):
        if upper.endswith(suffix):
            number = s[: len(s) - len(suffix)].strip()
            if not number:
                raise ValueError(f"missing number in size literal {text!r}")
            value = float(number)
            result = value * mult
            if result != int(result) or result < 0:
                raise ValueError(f"size literal {text!r} is not a whole byte count")
            return int(result)
    if not s.isdigit():
        raise ValueError(f"malformed size literal {text!r}")
    return int(s)


def format_size(nbytes: int) -> str:
    """Normalised literal: the largest suffix that divides exactly, preferring
    decimal; falls back to raw bytes."""
    if nbytes < 0:
        raise ValueError("sizes are non-negative")
    for suffix, mult in (("GB", 10**9), ("MB", 10**6), ("KB", 10**3)):
        if nbytes and nbytes % mult == 0:
            return f"{nbytes // mult}{suffix}"
    for suffix, mult in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if nbytes and nbytes % mult == 0:
            return f"{nbytes // mult}{suffix}"
    return f"{nbytes}B"


def _size(text: str) -> int:
    try:
        return parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tensor-size-threshold", type=_size, default=10**9,
                   metavar="SIZE", help="tensors at least this large are split "
                   "candidates (default 1GB)")
    p.add_argument("--tensor-split-size", type=_size, default=None,
                   metavar="SIZE", help="largest allowed slice produced by "
                   "splitting (defaults to the threshold)")
    p.add_argument("--no-passes", action="store_true",
                   help="evaluate the graph as built, without optimisation")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--seed", type=int, default=0)


def _add_kind_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("kind", choices=("mvm", "knn", "pairwise"))
    p.add_argument("-n", type=int, default=1024, help="data points")
    p.add_argument("-m", type=int, default=64, help="query points (knn/pairwise)")
    p.add_argument("-d", type=int, default=8, help="feature dimension")
    p.add_argument("-k", type=int, default=10, help="neighbours (knn)")
    p.add_argument("--metric", choices=METRICS, default="l2")
    p.add_argument("--variance", type=float, default=1.0)
    p.add_argument("--lengthscale", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorbudget",
        description="memory-budget-aware tensor graph compiler and evaluator")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a benchmark and emit CSV rows")
    _add_kind_params(bench)
    _add_common(bench)
    bench.add_argument("--budget", type=_size, default=None, metavar="SIZE",
                       help="hard live-byte limit; exceeding it records a "
                       "failure row instead of crashing")
    bench.add_argument("--repeats", type=int, default=1)
    bench.add_argument("--trace-csv", metavar="PATH", default=None,
                       help="write the memory trace of the first repeat here")

    verify = sub.add_parser("verify", help="compare original vs optimised outputs")
    _add_kind_params(verify)
    _add_common(verify)
    verify.add_argument("--seeds", type=int, default=5,
                        help="number of seeded input sets")

    dump_p = sub.add_parser("dump-hlo", help="print the textual graph")
    _add_kind_params(dump_p)
    _add_common(dump_p)
    dump_p.add_argument("--stage", choices=("before", "after"), default="after")
    return parser


def parse_config(argv, env=None) -> tuple[PassConfig, argparse.Namespace]:
    """Parses flags (command line over TB_FLAGS) into a PassConfig + command.

    The environment variable holds the same flag syntax as the command line,
    e.g. TB_FLAGS='--tensor-size-threshold=1GB --tensor-split-size=500MB'.
    """
    env = os.environ if env is None else env
    argv = list(argv)
    env_flags = shlex.split(env.get(ENV_FLAGS, ""))
    if env_flags and argv:
        argv = [argv[0]] + env_flags + argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = PassConfig(
            tensor_size_threshold=args.tensor_size_threshold,
            tensor_split_size=args.tensor_split_size)
    except ValueError as exc:
        parser.error(str(exc))
    return config, args


def _build(args) -> Graph:
    dtype = DType.F32 if args.dtype == "f32" else DType.F64
    if args.kind == "mvm":
        return build_kernel_mvm(
            args.n, KernelSpec(args.variance, args.lengthscale), dtype)
    if args.kind == "pairwise":
        return build_pairwise_distance(args.n, args.m, args.d, args.metric, dtype)
    return build_knn(args.n, args.m, args.d, args.k, args.metric, dtype)


_CSV_HEADER = ("kind", "n", "m", "d", "k", "metric", "dtype", "threshold",
               "split_size", "passes", "budget", "repeat", "status",
               "peak_live_bytes", "wall_time_s", "queries_per_s")


def cmd_bench(config: PassConfig, args, out=None) -> int:
    out = out if out is not None else sys.stdout
    graph = _build(args)
    if not args.no_passes:
        graph = run_pipeline(graph, config)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_CSV_HEADER)
    for repeat in range(args.repeats):
        inputs = random_inputs(graph, args.seed + repeat)
        start = time.perf_counter()
        try:
            _, trace = evaluate(graph, inputs, budget=args.budget)
            elapsed = time.perf_counter() - start
            status, peak = "ok", trace.peak_live_bytes
            qps = f"{args.m / elapsed:.1f}" if args.kind == "knn" else ""
            row_time = f"{elapsed:.6f}"
        except BudgetExceeded as exc:
            trace = exc.trace
            status, peak, qps, row_time = "oom", "", "", ""
        writer.writerow((
            args.kind, args.n, args.m if args.kind != "mvm" else "",
            args.d if args.kind != "mvm" else "",
            args.k if args.kind == "knn" else "",
            args.metric if args.kind != "mvm" else "",
            args.dtype, config.tensor_size_threshold, config.tensor_split_size,
            int(not args.no_passes),
            args.budget if args.budget is not None else "",
            repeat, status, peak, row_time, qps))
        if repeat == 0 and args.trace_csv:
            with open(args.trace_csv, "w") as fh:
                fh.write(trace.to_csv())
    return 0


def _relative_error(result, reference) -> float:
    def one(a, b):
        scale = max(float(np.max(np.abs(b.array))), 1e-300)
        return float(np.max(np.abs(a.array - b.array))) / scale
    if isinstance(result, tuple):
        return max(one(a, b) for a, b in zip(result, reference))
    return one(result, reference)


def cmd_verify(config: PassConfig, args, out=None) -> int:
    out = out if out is not None else sys.stdout
    graph = _build(args)
    optimised = run_pipeline(graph, config)
    tolerance = 1e-4 if args.dtype == "f32" else 1e-10
    worst = 0.0
    for s in range(args.seeds):
        inputs = random_inputs(graph, args.seed + s)
        reference, _ = evaluate(graph, inputs)
        result, _ = evaluate(optimised, inputs)
        err = _relative_error(result, reference)
        worst = max(worst, err)
        print(f"seed={args.seed + s} max_rel_err={err:.3e}", file=out)
    verdict = "PASS" if worst <= tolerance else "FAIL"
    print(f"{verdict}: worst={worst:.3e} tolerance={tolerance:.1e}", file=out)
    return 0 if worst <= tolerance else 1


def cmd_dump_hlo(config: PassConfig, args, out=None) -> int:
    out = out if out is not None else sys.stdout
    graph = _build(args)
    if args.stage == "after" and not args.no_passes:
        graph = run_pipeline(graph, config)
    print(dump(graph), end="", file=out)
    return 0


def main(argv=None) -> int:
    config, args = parse_config(sys.argv[1:] if argv is None else argv)
    if args.command == "bench":
        return cmd_bench(config, args)
    if args.command == "verify":
        return cmd_verify(config, args)
    return cmd_dump_hlo(config, args)


if __name__ == "__main__":
    sys.exit(main())
