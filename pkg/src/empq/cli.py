"""Command line interface: generate workloads, run them, sweep experiments."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .pq_core import InvariantError

EXIT_ORACLE_MISMATCH = 2
EXIT_INVARIANT = 3


def _setup_logging():
    level = os.environ.get("EMPQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _add_run_flags(p):
    p.add_argument("--block-size", type=int, default=16, help="records per block")
    p.add_argument("--memory", type=int, default=None, help="internal memory in records (default 8*c*B)")
    p.add_argument("--sort-memory", type=int, default=None, help="sorting black box memory (default --memory)")
    p.add_argument("--c", type=int, default=17, help="head scale constant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check-oracle", action="store_true", help="run an in-memory heap in lockstep")
    p.add_argument("--check-invariants", action="store_true", help="audit structure invariants at stage boundaries")
    p.add_argument("--enforce-residency", action="store_true", help="enforce the internal memory budget")
    p.add_argument("--trace-io", metavar="FILE", default=None, help="write one line per I/O")
    p.add_argument("--force-layers", default=None, help="comma-separated layer sizes (test hook)")
    p.add_argument("--sorter", choices=["merge", "inmemory"], default="merge")


def _run_config(args) -> harness.RunConfig:
    force = None
    if args.force_layers:
        force = [int(x) for x in args.force_layers.split(",") if x]
    return harness.RunConfig(
        block_size=args.block_size,
        c=args.c,
        memory=args.memory,
        sort_memory=args.sort_memory,
        seed=args.seed,
        check_oracle=args.check_oracle,
        check_invariants=args.check_invariants,
        enforce_residency=args.enforce_residency,
        trace_path=args.trace_io,
        force_layers=force,
        sorter_kind=args.sorter,
    )


def cmd_generate(args) -> int:
    ops = harness.generate_workload(args.kind, args.n, args.seed)
    harness.write_workload(args.out, ops)
    print(f"wrote {len(ops)} ops to {args.out}")
    return 0


def cmd_run(args) -> int:
    ops = harness.read_workload(args.workload)
    cfg = _run_config(args)
    try:
        summary, transcript = harness.run_workload(ops, cfg)
    except harness.OracleMismatch as exc:
        print(f"ORACLE MISMATCH: {exc}", file=sys.stderr)
        return EXIT_ORACLE_MISMATCH
    except InvariantError as exc:
        print(f"INVARIANT VIOLATION: {exc}", file=sys.stderr)
        if exc.dump:
            print(exc.dump, file=sys.stderr)
        return EXIT_INVARIANT
    if args.transcript:
        with open(args.transcript, "w") as fh:
            for v in transcript:
                fh.write(f"{v if v is not None else 'none'}\n")
    io = summary.io
    print(f"ops: {sum(summary.ops.values())} {summary.ops}")
    print(f"io: reads={io.reads} writes={io.writes} total={io.total}")
    print(f"per-cause: {io.per_cause}")
    print(
        f"amortized={float(summary.amortized_ios_per_op):.4f} "
        f"bound={float(summary.bound_value):.4f} "
        f"ratio={summary.ratio if summary.ratio is not None else 'n/a'}"
    )
    print(
        f"rebuilds={summary.rebuild_count} peak_blocks={summary.peak_blocks} "
        f"peak_resident={io.peak_resident_records}"
    )
    return 0


def cmd_sweep(args) -> int:
    n_list = [int(x) for x in args.n.split(",") if x]
    b_list = [int(x) for x in args.b.split(",") if x]
    kinds = [k for k in args.kinds.split(",") if k]
    base = _run_config(args)
    try:
        rows = harness.sweep(n_list, b_list, kinds, seed=args.seed, csv_path=args.csv, base=base)
    except harness.OracleMismatch as exc:
        print(f"ORACLE MISMATCH: {exc}", file=sys.stderr)
        return EXIT_ORACLE_MISMATCH
    except InvariantError as exc:
        print(f"INVARIANT VIOLATION: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {len(rows)} rows to {args.csv}")
    if args.plots:
        from .plotting import render_sweep_figures

        for path in render_sweep_figures(rows, args.plots):
            print(f"wrote {path}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import read_sweep_csv, render_sweep_figures

    rows = read_sweep_csv(args.csv)
    for path in render_sweep_figures(rows, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="empq", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a deterministic workload file")
    g.add_argument("--kind", choices=harness.WORKLOAD_KINDS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="execute a workload file")
    r.add_argument("--workload", required=True)
    r.add_argument("--transcript", default=None, help="write findmin/deletemin results")
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a grid of workloads and emit CSV")
    s.add_argument("--n", required=True, help="comma-separated op counts")
    s.add_argument("--b", required=True, help="comma-separated block sizes")
    s.add_argument("--kinds", required=True, help="comma-separated workload kinds")
    s.add_argument("--csv", required=True)
    s.add_argument("--plots", default=None, help="also render figures into this directory")
    _add_run_flags(s)
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render figures from an existing sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
