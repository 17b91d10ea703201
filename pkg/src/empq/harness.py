"""Workload generation, differential runs, and experiment sweeps.

Workload files are plain text, one operation per line::

    I <uint64>   insert
    D <uint64>   delete (the value must be live)
    F            findmin
    X            deletemin (findmin, then delete the returned minimum)

The runner executes a workload against the priority queue, optionally in
lockstep with a deliberately naive in-memory oracle (a binary heap plus a
set of live keys), and reports the amortized I/O cost next to the value the
reduction predicts from the sorter's cost function.
"""
from __future__ import annotations

import csv
import heapq
import random
from dataclasses import dataclass, field
from fractions import Fraction

from .io_sim import BlockDevice, DeviceConfig, IoReport
from .pq_core import PQConfig, PriorityQueue, ceil_log2_ratio
from .sorter import InMemorySorter, MergeSorter

WORKLOAD_KINDS = ("uniform", "sorted", "reversed", "heapsort", "churn")


class WorkloadError(ValueError):
    pass


class OracleMismatch(Exception):
    def __init__(self, index, op, got, expected):
        super().__init__(
            f"oracle mismatch at op {index} ({op}): queue returned {got}, "
            f"oracle expected {expected}"
        )
        self.index = index
        self.got = got
        self.expected = expected


def generate_workload(kind: str, n: int, seed: int) -> list[tuple]:
    """Deterministic workload of n primary operations for the given seed.

    uniform: n inserts of random keys; sorted/reversed: n ordered inserts
    then a full drain; heapsort: n random inserts then a full drain;
    churn: steady-state mix of 50% insert, 40% deletemin, 10% findmin.
    """
    if n < 1:
        raise WorkloadError("n must be at least 1")
    if kind not in WORKLOAD_KINDS:
        raise WorkloadError(f"unknown workload kind {kind!r}")
    rng = random.Random(seed)
    ops = []
    if kind == "uniform":
        for v in _fresh_values(rng, n):
            ops.append(("I", v))
    elif kind in ("sorted", "reversed"):
        values = sorted(_fresh_values(rng, n), reverse=(kind == "reversed"))
        ops.extend(("I", v) for v in values)
        ops.extend(("X", None) for _ in range(n))
    elif kind == "heapsort":
        for v in _fresh_values(rng, n):
            ops.append(("I", v))
        ops.extend(("X", None) for _ in range(n))
    else:  # churn
        live = 0
        used = set()
        for _ in range(n):
            r = rng.random()
            if live == 0 or r < 0.5:
                v = rng.getrandbits(64)
                while v in used:
                    v = rng.getrandbits(64)
                used.add(v)
                ops.append(("I", v))
                live += 1
            elif r < 0.9:
                ops.append(("X", None))
                live -= 1
            else:
                ops.append(("F", None))
    return ops


def _fresh_values(rng, n):
    used = set()
    out = []
    while len(out) < n:
        v = rng.getrandbits(64)
        if v not in used:
            used.add(v)
            out.append(v)
    return out


def write_workload(path, ops) -> None:
    with open(path, "w") as fh:
        for op, v in ops:
            fh.write(f"{op} {v}\n" if v is not None else f"{op}\n")


def read_workload(path) -> list[tuple]:
    ops = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] in ("I", "D"):
                ops.append((parts[0], int(parts[1])))
            elif parts[0] in ("F", "X"):
                ops.append((parts[0], None))
            else:
                raise WorkloadError(f"bad workload line: {line!r}")
    return ops


def validate_workload(ops) -> None:
    """Check the live-key contract: D targets live keys, I values unique."""
    live = set()
    for idx, (op, v) in enumerate(ops):
        if op == "I":
            if v in live:
                raise WorkloadError(f"op {idx}: insert of live value {v}")
            live.add(v)
        elif op == "D":
            if v not in live:
                raise WorkloadError(f"op {idx}: delete of non-live value {v}")
            live.remove(v)
        elif op == "X":
            if live:
                live.remove(min(live))
        elif op != "F":
            raise WorkloadError(f"op {idx}: unknown op {op!r}")


class HeapOracle:
    """Binary heap plus a live-key set; deliberately naive and obvious."""

    def __init__(self):
        self._heap = []
        self._live = set()

    def insert(self, v):
        self._live.add(v)
        heapq.heappush(self._heap, v)

    def delete(self, v):
        self._live.discard(v)

    def findmin(self):
        h = self._heap
        while h and h[0] not in self._live:
            heapq.heappop(h)
        return h[0] if h else None


@dataclass
class RunConfig:
    block_size: int = 16
    c: int = 17
    memory: int | None = None  # defaults to 8 * c * block_size
    sort_memory: int | None = None  # defaults to memory
    seed: int = 0
    check_oracle: bool = False
    check_invariants: bool = False
    enforce_residency: bool = False
    trace_path: str | None = None
    force_layers: list | None = None
    sorter_kind: str = "merge"  # merge | inmemory

    def resolved_memory(self) -> int:
        return self.memory if self.memory is not None else 8 * self.c * self.block_size

    def resolved_sort_memory(self) -> int:
        return self.sort_memory if self.sort_memory is not None else self.resolved_memory()


@dataclass
class RunSummary:
    ops: dict
    io: IoReport
    amortized_ios_per_op: Fraction
    bound_value: Fraction
    ratio: float | None
    rebuild_count: int
    peak_blocks: int
    flush_events: list = field(default_factory=list)
    rebuild_log: list = field(default_factory=list)
    stats: object = None


def sorting_cost_bound(n_ops: int, block: int, c: int, sorter) -> Fraction:
    """(1/B) * sum of S over the nested-log size sequence, head scale cut.

    Terms follow x -> B * ceil(log2(x/B)) starting at the operation count;
    sizes at or below the head scale cost nothing (they stay in memory).
    """
    total = Fraction(0)
    x = n_ops
    while x > c * block:
        total += Fraction(sorter.predicted_per_key_cost(x))
        x = block * ceil_log2_ratio(x, block)
    return total / block


def run_workload(ops, config: RunConfig):
    """Execute a workload; returns (RunSummary, transcript).

    The transcript records the result of every F and X operation in order.
    With the oracle enabled, any disagreement raises OracleMismatch at the
    offending operation index.
    """
    trace = open(config.trace_path, "w") if config.trace_path else None
    try:
        device = BlockDevice(
            DeviceConfig(
                block_capacity_records=config.block_size,
                internal_memory_records=config.resolved_memory(),
                enforce_residency=config.enforce_residency,
            ),
            trace=trace,
        )
        if config.sorter_kind == "merge":
            sorter = MergeSorter(device, config.resolved_sort_memory())
        elif config.sorter_kind == "inmemory":
            sorter = InMemorySorter(device, config.resolved_sort_memory())
        else:
            raise ValueError(f"unknown sorter kind {config.sorter_kind!r}")
        pq = PriorityQueue(
            device,
            sorter,
            PQConfig(
                c=config.c,
                force_layer_plan=config.force_layers,
                check_invariants=config.check_invariants,
            ),
        )
        oracle = HeapOracle() if config.check_oracle else None
        transcript = []
        counts = {"I": 0, "D": 0, "F": 0, "X": 0}
        for idx, (op, v) in enumerate(ops):
            counts[op] += 1
            if op == "I":
                pq.insert(v)
                if oracle:
                    oracle.insert(v)
            elif op == "D":
                pq.delete(v)
                if oracle:
                    oracle.delete(v)
            elif op == "F":
                got = pq.findmin()
                transcript.append(got)
                if oracle:
                    want = oracle.findmin()
                    if got != want:
                        raise OracleMismatch(idx, "F", got, want)
            else:  # X
                got = pq.findmin()
                transcript.append(got)
                if oracle:
                    want = oracle.findmin()
                    if got != want:
                        raise OracleMismatch(idx, "X", got, want)
                if got is not None:
                    pq.delete(got)
                    if oracle:
                        oracle.delete(got)
        report = device.report()
        n_ops = max(1, len(ops))
        amortized = Fraction(report.total, n_ops)
        bound = sorting_cost_bound(len(ops), config.block_size, config.c, sorter)
        ratio = float(amortized / bound) if bound > 0 else None
        summary = RunSummary(
            ops=counts,
            io=report,
            amortized_ios_per_op=amortized,
            bound_value=bound,
            ratio=ratio,
            rebuild_count=pq.stats.rebuilds,
            peak_blocks=report.peak_allocated_blocks,
            flush_events=pq.stats.flush_events,
            rebuild_log=pq.stats.rebuild_log,
            stats=pq.stats,
        )
        return summary, transcript
    finally:
        if trace:
            trace.close()


def rebuild_window_violations(rebuild_log, window_divisor: int = 8) -> int:
    """Count rebuilds preceded by more than two others within N/8 updates."""
    violations = 0
    for k, (u, n) in enumerate(rebuild_log):
        w = max(1, n // window_divisor)
        recent = [1 for u2, _ in rebuild_log[: k + 1] if u - w < u2 <= u]
        if len(recent) > 3:
            violations += 1
    return violations


CSV_HEADER = [
    "n",
    "b",
    "kind",
    "total_ios",
    "amortized",
    "bound",
    "ratio",
    "rebuilds",
    "peak_blocks",
]


def sweep(n_list, b_list, kinds, seed: int = 0, csv_path=None, base: RunConfig | None = None):
    """One run per (n, b, kind) combination; returns the CSV-shaped rows."""
    if not n_list or not b_list or not kinds:
        raise WorkloadError("sweep lists must be nonempty")
    rows = []
    for n in n_list:
        for b in b_list:
            for kind in kinds:
                cfg = RunConfig(
                    block_size=b,
                    c=base.c if base else 17,
                    memory=base.memory if base else None,
                    sort_memory=base.sort_memory if base else None,
                    seed=seed,
                    check_oracle=base.check_oracle if base else False,
                    check_invariants=base.check_invariants if base else False,
                )
                ops = generate_workload(kind, n, seed)
                summary, _ = run_workload(ops, cfg)
                rows.append(
                    {
                        "n": n,
                        "b": b,
                        "kind": kind,
                        "total_ios": summary.io.total,
                        "amortized": float(summary.amortized_ios_per_op),
                        "bound": float(summary.bound_value),
                        "ratio": summary.ratio if summary.ratio is not None else "",
                        "rebuilds": summary.rebuild_count,
                        "peak_blocks": summary.peak_blocks,
                    }
                )
    if csv_path:
        write_sweep_csv(csv_path, rows)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow(row)
