"""Simulated block-structured external memory with exact I/O accounting.

The device models the standard two-level memory: an unbounded external store
divided into blocks of a fixed record capacity, plus an internal memory able
to hold a bounded number of records.  Every ``read_block``/``write_block``
is exactly one I/O, attributed to a cause tag so experiments can break down
where traffic came from.  There is no read cache: touching the same block
twice costs two I/Os; any reuse of data in internal memory must be explicit
in the client.

Capacities are counted in records, not bytes.  Residency enforcement is a
debug mode: reads check blocks out of the ledger, writes (or an explicit
``release_block``) check them back in, and client-declared pools (the head,
the memory buffer) are added on top.  Checkouts tagged ``sort`` are excluded
from the enforced total because the sorting black box owns its own memory
budget; the sorter enforces that budget itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

CAUSES = ("sort", "flush", "rebalance", "rebuild", "navlist")


class IoSimError(Exception):
    """Invalid block id, capacity violation, or memory budget violation."""


@dataclass
class DeviceConfig:
    block_capacity_records: int = 16
    internal_memory_records: int = 8 * 17 * 16
    enforce_residency: bool = False

    def __post_init__(self):
        if self.block_capacity_records < 2:
            raise ValueError("block capacity must be at least 2 records")
        if self.internal_memory_records < 4 * self.block_capacity_records:
            raise ValueError(
                "internal memory must hold at least 4 blocks "
                "(head, memory buffer, and working blocks)"
            )


@dataclass
class IoReport:
    """Snapshot of the device counters.

    ``per_cause`` maps each cause tag to an ``(reads, writes)`` pair and
    always partitions the totals exactly.
    """

    reads: int = 0
    writes: int = 0
    per_cause: dict = field(default_factory=dict)
    peak_allocated_blocks: int = 0
    peak_resident_records: int = 0

    @property
    def total(self) -> int:
        return self.reads + self.writes


class BlockDevice:
    """Block store with per-cause I/O counters and a residency ledger."""

    def __init__(self, config: DeviceConfig | None = None, trace=None):
        self.cfg = config or DeviceConfig()
        self._blocks: dict[int, list] = {}
        self._next_id = 0
        self._reads = 0
        self._writes = 0
        self._per_cause = {c: [0, 0] for c in CAUSES}
        self._peak_alloc = 0
        # Residency ledger: pools declared by the client plus records held
        # via read_block and not yet written back or released.
        self._pools: dict[str, int] = {}
        self._checked_out: dict[int, tuple[int, str]] = {}
        self._resident = 0
        self._peak_resident = 0
        self._trace = trace

    # -- allocation ---------------------------------------------------

    @property
    def allocated_blocks(self) -> int:
        return len(self._blocks)

    def alloc_block(self) -> int:
        bid = self._next_id
        self._next_id += 1
        self._blocks[bid] = []
        if len(self._blocks) > self._peak_alloc:
            self._peak_alloc = len(self._blocks)
        return bid

    def free_block(self, bid: int) -> None:
        if bid not in self._blocks:
            raise IoSimError(f"invalid block id {bid}")
        if bid in self._checked_out:
            self._drop_checkout(bid)
        del self._blocks[bid]

    # -- I/O ----------------------------------------------------------

    def read_block(self, bid: int, cause: str) -> list:
        if bid not in self._blocks:
            raise IoSimError(f"invalid block id {bid}")
        if cause not in self._per_cause:
            raise IoSimError(f"unknown cause tag {cause!r}")
        stored = self._blocks[bid]
        if bid not in self._checked_out:
            n = len(stored)
            if cause != "sort":
                if (
                    self.cfg.enforce_residency
                    and self._resident + n > self.cfg.internal_memory_records
                ):
                    raise IoSimError("internal memory exceeded")
                self._resident += n
                if self._resident > self._peak_resident:
                    self._peak_resident = self._resident
            self._checked_out[bid] = (n, cause)
        self._reads += 1
        self._per_cause[cause][0] += 1
        if self._trace is not None:
            self._trace.write(f"R {bid} {cause}\n")
        return list(stored)

    def write_block(self, bid: int, records: list, cause: str) -> None:
        if bid not in self._blocks:
            raise IoSimError(f"invalid block id {bid}")
        if cause not in self._per_cause:
            raise IoSimError(f"unknown cause tag {cause!r}")
        if len(records) > self.cfg.block_capacity_records:
            raise IoSimError("block overflow")
        self._blocks[bid] = list(records)
        if bid in self._checked_out:
            self._drop_checkout(bid)
        self._writes += 1
        self._per_cause[cause][1] += 1
        if self._trace is not None:
            self._trace.write(f"W {bid} {cause}\n")

    def release_block(self, bid: int) -> None:
        """Return a read-only checkout to the ledger without writing."""
        if bid not in self._checked_out:
            raise IoSimError(f"block {bid} is not checked out")
        self._drop_checkout(bid)

    def _drop_checkout(self, bid):
        n, cause = self._checked_out.pop(bid)
        if cause != "sort":
            self._resident -= n

    def peek_block(self, bid: int) -> list:
        """Uncharged debug access for invariant audits; never counts as I/O."""
        if bid not in self._blocks:
            raise IoSimError(f"invalid block id {bid}")
        return self._blocks[bid]

    # -- residency pools ------------------------------------------------

    def set_pool(self, name: str, records: int) -> None:
        old = self._pools.get(name, 0)
        self._pools[name] = records
        self._resident += records - old
        if self._resident > self._peak_resident:
            self._peak_resident = self._resident
        if (
            self.cfg.enforce_residency
            and self._resident > self.cfg.internal_memory_records
        ):
            raise IoSimError("internal memory exceeded")

    @property
    def checked_out_records(self) -> int:
        return sum(n for n, c in self._checked_out.values() if c != "sort")

    @property
    def io_total(self) -> int:
        return self._reads + self._writes

    # -- reporting ------------------------------------------------------

    def report(self) -> IoReport:
        return IoReport(
            reads=self._reads,
            writes=self._writes,
            per_cause={c: (rw[0], rw[1]) for c, rw in self._per_cause.items()},
            peak_allocated_blocks=self._peak_alloc,
            peak_resident_records=self._peak_resident,
        )

    def reset(self) -> None:
        """Zero the counters; allocation and ledger state survive."""
        self._reads = 0
        self._writes = 0
        self._per_cause = {c: [0, 0] for c in CAUSES}
        self._peak_alloc = len(self._blocks)
        self._peak_resident = self._resident
