"""The sorting black box: interface, disk runs, and a baseline merge sort.

Any object with ``sort_run(run, cause) -> (DiskRun, SortStats)`` and
``predicted_per_key_cost(n)`` can serve as the black box.  The baseline is a
classic multiway external merge sort running through the simulated device:
memory-sized loads form sorted runs, then fan-in limited merge passes
combine them.  ``InMemorySorter`` is a deliberately naive substitute that
still pays block I/Os, used to check that the structure above is oblivious
to which sorter it runs on.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from fractions import Fraction

from .io_sim import BlockDevice
from .records import DELETE_SIGNAL


class SortMemoryError(ValueError):
    pass


@dataclass
class DiskRun:
    """A key sequence stored in consecutive blocks; only the last block may
    be partially full."""

    blocks: list
    length: int


@dataclass
class SortStats:
    keys_sorted: int
    ios_used: int
    per_key_block_cost: Fraction


def validate_run(device: BlockDevice, run: DiskRun) -> None:
    """Debug check of the DiskRun shape invariants (uncharged)."""
    cap = device.cfg.block_capacity_records
    total = 0
    for i, bid in enumerate(run.blocks):
        n = len(device.peek_block(bid))
        if i < len(run.blocks) - 1 and n != cap:
            raise ValueError(f"non-final block {bid} is not full")
        total += n
    if total != run.length:
        raise ValueError(f"run length {run.length} != stored {total}")


class RunWriter:
    """Accumulates records and writes them out as full blocks."""

    def __init__(self, device: BlockDevice, cause: str):
        self.dev = device
        self.cause = cause
        self.blocks = []
        self.length = 0
        self._buf = []

    def extend(self, records) -> None:
        cap = self.dev.cfg.block_capacity_records
        buf = self._buf
        for rec in records:
            buf.append(rec)
            if len(buf) == cap:
                bid = self.dev.alloc_block()
                self.dev.write_block(bid, buf, self.cause)
                self.blocks.append(bid)
                self.length += cap
                buf = []
        self._buf = buf

    def write(self, rec) -> None:
        self.extend((rec,))

    def close(self) -> DiskRun:
        if self._buf:
            bid = self.dev.alloc_block()
            self.dev.write_block(bid, self._buf, self.cause)
            self.blocks.append(bid)
            self.length += len(self._buf)
            self._buf = []
        return DiskRun(self.blocks, self.length)


def run_reader(device: BlockDevice, run: DiskRun, cause: str, free: bool = False):
    """Stream a run's records holding one block at a time."""
    for bid in run.blocks:
        records = device.read_block(bid, cause)
        device.release_block(bid)
        if free:
            device.free_block(bid)
        yield from records


def free_run(device: BlockDevice, run: DiskRun) -> None:
    for bid in run.blocks:
        device.free_block(bid)
    run.blocks = []
    run.length = 0


class RunSlicer:
    """Cursor over a sorted run handing out consecutive record ranges.

    Block-aligned ranges adopt the run's blocks without any I/O; ragged
    boundaries repack through fresh blocks.  Consumed source blocks are
    freed as the cursor passes them.  ``take_chain`` optionally extends a
    cut past trailing delete signals so a signal is never separated from
    the insert it cancels.
    """

    def __init__(self, device: BlockDevice, run: DiskRun, cause: str):
        self.dev = device
        self.cause = cause
        self._blocks = list(run.blocks)
        self._length = run.length
        self._bi = 0          # next unconsumed source block
        self._carry = None    # records of a partially consumed source block
        self._coff = 0
        self._pos = 0

    @property
    def remaining(self) -> int:
        return self._length - self._pos

    def _load_carry(self):
        bid = self._blocks[self._bi]
        self._carry = self.dev.read_block(bid, self.cause)
        self.dev.release_block(bid)
        self.dev.free_block(bid)
        self._bi += 1
        self._coff = 0

    def peek(self):
        if self.remaining == 0:
            return None
        if self._carry is None:
            self._load_carry()
        return self._carry[self._coff]

    def take_records(self, k: int, skip_signals: bool = False) -> list:
        """Consume the next k records (plus trailing signals if asked)."""
        out = []
        k = min(k, self.remaining)
        while len(out) < k:
            if self._carry is None:
                self._load_carry()
            want = k - len(out)
            chunk = self._carry[self._coff : self._coff + want]
            out.extend(chunk)
            self._coff += len(chunk)
            self._pos += len(chunk)
            if self._coff == len(self._carry):
                self._carry = None
        if skip_signals:
            while self.remaining and self.peek()[2] == DELETE_SIGNAL:
                out.append(self._carry[self._coff])
                self._coff += 1
                self._pos += 1
                if self._coff == len(self._carry):
                    self._carry = None
        return out

    def take_chain(self, k: int, skip_signals: bool = True):
        """Consume the next k records into fresh block ownership.

        Returns ``(blocks, count, first_record)``.  Aligned full blocks are
        adopted; the remainder is repacked.  ``first_record`` costs one
        charged read when the first block was adopted unseen.
        """
        cap = self.dev.cfg.block_capacity_records
        k = min(k, self.remaining)
        blocks = []
        count = 0
        first = None
        pending = []

        def flush_pending():
            nonlocal pending
            while len(pending) >= cap:
                bid = self.dev.alloc_block()
                self.dev.write_block(bid, pending[:cap], self.cause)
                blocks.append(bid)
                pending = pending[cap:]

        while count < k:
            want = k - count
            if self._carry is not None:
                avail = len(self._carry) - self._coff
                take = min(avail, want)
                chunk = self._carry[self._coff : self._coff + take]
                if first is None and chunk:
                    first = chunk[0]
                pending.extend(chunk)
                flush_pending()
                self._coff += take
                self._pos += take
                count += take
                if self._coff == len(self._carry):
                    self._carry = None
            elif not pending and want >= cap:
                # aligned: adopt the whole source block
                bid = self._blocks[self._bi]
                self._bi += 1
                n = cap if self._pos + cap <= self._length else self._length - self._pos
                blocks.append(bid)
                self._pos += n
                count += n
            else:
                self._load_carry()
        if skip_signals:
            while self.remaining and self.peek()[2] == DELETE_SIGNAL:
                if not pending and blocks:
                    # reopen the last written/adopted block
                    bid = blocks.pop()
                    pending = self.dev.read_block(bid, self.cause)
                    self.dev.release_block(bid)
                    self.dev.free_block(bid)
                pending.append(self._carry[self._coff])
                self._coff += 1
                self._pos += 1
                count += 1
                flush_pending()
                if self._coff == len(self._carry):
                    self._carry = None
        if pending:
            bid = self.dev.alloc_block()
            self.dev.write_block(bid, pending, self.cause)
            blocks.append(bid)
        if first is None and blocks:
            recs = self.dev.read_block(blocks[0], self.cause)
            self.dev.release_block(blocks[0])
            first = recs[0]
        return blocks, count, first

    def finish(self) -> None:
        """Free any unconsumed tail."""
        self._carry = None
        while self._bi < len(self._blocks):
            self.dev.free_block(self._blocks[self._bi])
            self._bi += 1
        self._pos = self._length


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class MergeSorter:
    """Baseline multiway external merge sort through a BlockDevice.

    Sorts up to its memory budget per load, then merges with fan-in
    ``memory/B - 1`` (one input block per run plus one output block).
    """

    def __init__(self, device: BlockDevice, memory_records: int | None = None):
        self.dev = device
        self.memory = (
            memory_records
            if memory_records is not None
            else device.cfg.internal_memory_records
        )

    def _require_memory(self):
        if self.memory < 3 * self.dev.cfg.block_capacity_records:
            raise SortMemoryError("insufficient sort memory")

    @property
    def fan_in(self) -> int:
        return self.memory // self.dev.cfg.block_capacity_records - 1

    def sort_run(self, run: DiskRun, cause: str = "sort"):
        self._require_memory()
        dev = self.dev
        before = dev.io_total
        n = run.length
        if n == 0:
            free_run(dev, run)
            return DiskRun([], 0), SortStats(0, 0, Fraction(0))

        cap = dev.cfg.block_capacity_records
        chunk_blocks = self.memory // cap
        runs = []
        buf = []
        held = 0
        for bid in run.blocks:
            buf.extend(dev.read_block(bid, cause))
            dev.release_block(bid)
            dev.free_block(bid)
            held += 1
            if held == chunk_blocks:
                buf.sort()
                w = RunWriter(dev, cause)
                w.extend(buf)
                runs.append(w.close())
                buf = []
                held = 0
        if buf:
            buf.sort()
            w = RunWriter(dev, cause)
            w.extend(buf)
            runs.append(w.close())
        run.blocks = []
        run.length = 0

        fan = self.fan_in
        while len(runs) > 1:
            nxt = []
            for i in range(0, len(runs), fan):
                group = runs[i : i + fan]
                if len(group) == 1:
                    nxt.append(group[0])
                else:
                    nxt.append(self.merge_pass(group, fan, cause))
            runs = nxt
        out = runs[0]
        ios = dev.io_total - before
        return out, SortStats(n, ios, Fraction(ios * cap, max(n, 1)))

    def merge_pass(
        self,
        runs: list[DiskRun],
        fan_in: int,
        cause: str = "sort",
        check_sorted: bool = False,
    ) -> DiskRun:
        self._require_memory()
        if fan_in > self.fan_in:
            raise SortMemoryError("insufficient sort memory")
        if len(runs) > fan_in:
            raise ValueError("more runs than fan-in")
        dev = self.dev

        def reader(r):
            prev = None
            for rec in run_reader(dev, r, cause, free=True):
                if check_sorted and prev is not None and rec < prev:
                    raise ValueError("unsorted input run")
                prev = rec
                yield rec

        w = RunWriter(dev, cause)
        w.extend(heapq.merge(*(reader(r) for r in runs)))
        return w.close()

    def predicted_per_key_cost(self, n: int) -> int:
        """Predicted S(n): 2 I/Os per key-block per pass, counted exactly."""
        if n <= 0:
            return 0
        chunks = _ceil_div(n, self.memory)
        passes = 0
        fan = max(self.fan_in, 2)
        while chunks > 1:
            chunks = _ceil_div(chunks, fan)
            passes += 1
        return 2 * (1 + passes)


class InMemorySorter:
    """Degenerate black box: reads everything, sorts in RAM, writes back.

    Same interface and the same I/O pattern as a single-pass load, with no
    regard for any memory budget.  Exists to demonstrate the reduction does
    not care what is behind the sorting interface.
    """

    def __init__(self, device: BlockDevice, memory_records: int | None = None):
        self.dev = device
        self.memory = memory_records or device.cfg.internal_memory_records

    def sort_run(self, run: DiskRun, cause: str = "sort"):
        dev = self.dev
        before = dev.io_total
        n = run.length
        records = list(run_reader(dev, run, cause, free=True))
        run.blocks = []
        run.length = 0
        records.sort()
        w = RunWriter(dev, cause)
        w.extend(records)
        out = w.close()
        ios = dev.io_total - before
        cap = dev.cfg.block_capacity_records
        return out, SortStats(n, ios, Fraction(ios * cap, max(n, 1)))

    def predicted_per_key_cost(self, n: int) -> int:
        return 2 if n > 0 else 0
