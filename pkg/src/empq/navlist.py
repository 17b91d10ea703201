"""Navigation lists and block chains.

A navigation list holds one representative per sub-structure: the minimum
key, the number of buffered records, and the write cursor (last non-full
block) of the sub-structure's buffer chain.  Representatives live
consecutively on disk, four field slots each, so a list of t entries costs
ceil(t / (B//4)) blocks to scan or rewrite.

``flush_via`` is the unified buffer flush: sort the source (in memory when
small, through the sorting black box otherwise), then stream it across the
representatives, appending each record to the target whose key range
contains it.  Ranges are half-open on the minimum keys, so a delete signal
with a boundary value lands in the same target as the insert it cancels.
"""
from __future__ import annotations

from dataclasses import dataclass

from .io_sim import BlockDevice
from .records import META
from .sorter import run_reader


class NavListError(Exception):
    pass


REP_SLOTS = 4


@dataclass
class Representative:
    """The on-disk view of one sub-structure, per the packing above."""

    min_key: int
    buffered_count: int
    last_block: int | None
    last_block_len: int


class BufferChain:
    """Device-backed list of blocks where only the last may be non-full.

    Appends read at most the one partial tail block and write
    ceil(appended/B)+1 blocks; everything else is sequential.
    """

    __slots__ = ("dev", "blocks", "count")

    def __init__(self, device: BlockDevice, blocks=None, count=0):
        self.dev = device
        self.blocks = blocks or []
        self.count = count

    @property
    def last_block(self):
        return self.blocks[-1] if self.blocks else None

    @property
    def last_block_len(self) -> int:
        if not self.blocks:
            return 0
        cap = self.dev.cfg.block_capacity_records
        return self.count - (len(self.blocks) - 1) * cap

    def append(self, records, cause: str) -> None:
        k = len(records)
        if k == 0:
            return
        dev = self.dev
        cap = dev.cfg.block_capacity_records
        idx = 0
        tail_len = self.last_block_len
        if self.blocks and tail_len < cap:
            tail = dev.read_block(self.blocks[-1], cause)
            take = min(cap - tail_len, k)
            tail.extend(records[:take])
            dev.write_block(self.blocks[-1], tail, cause)
            idx = take
        while idx < k:
            take = min(cap, k - idx)
            bid = dev.alloc_block()
            dev.write_block(bid, records[idx : idx + take], cause)
            self.blocks.append(bid)
            idx += take
        self.count += k

    def read_all(self, cause: str) -> list:
        out = []
        for bid in self.blocks:
            out.extend(self.dev.read_block(bid, cause))
            self.dev.release_block(bid)
        return out

    def to_run(self):
        """Hand the blocks over as a DiskRun, leaving the chain empty."""
        from .sorter import DiskRun

        run = DiskRun(self.blocks, self.count)
        self.blocks = []
        self.count = 0
        return run

    def free(self) -> None:
        for bid in self.blocks:
            self.dev.free_block(bid)
        self.blocks = []
        self.count = 0


class NavEntry:
    """In-memory mirror of a representative plus its buffer chain."""

    __slots__ = ("min_key", "chain")

    def __init__(self, min_key: int, chain: BufferChain):
        self.min_key = min_key
        self.chain = chain


def sorted_stream(device, source, sorter, cause: str, work_memory: int):
    """Iterate a record source in sorted order.

    Lists and chains within the working-memory bound are sorted in internal
    memory (computation is free in the model; chain reads are still
    charged).  Larger chains go through the sorting black box as a run.
    Either way the source is consumed.
    """
    if isinstance(source, list):
        return iter(sorted(source))
    if source.count <= work_memory:
        records = source.read_all(cause)
        source.free()
        records.sort()
        return iter(records)
    out, _ = sorter.sort_run(source.to_run(), cause="sort")
    return run_reader(device, out, cause, free=True)


class NavList:
    """Ordered representatives stored consecutively on disk.

    The in-memory entries are authoritative for structure surgery; the disk
    blocks mirror them and carry the I/O cost of every scan and rewrite.
    """

    def __init__(self, device: BlockDevice, entries: list[NavEntry]):
        if device.cfg.block_capacity_records < REP_SLOTS:
            raise NavListError("block capacity below one representative")
        self.dev = device
        self.entries = entries
        self.blocks: list[int] = []

    # -- construction ---------------------------------------------------

    @classmethod
    def build(cls, device, entries, cause: str = "navlist") -> "NavList":
        prev = None
        for e in entries:
            if prev is not None and e.min_key < prev:
                raise NavListError("unsorted representative keys")
            prev = e.min_key
        nav = cls(device, list(entries))
        nav.rewrite(cause)
        return nav

    @classmethod
    def build_from_mins(cls, device, mins, cause: str = "navlist") -> "NavList":
        """Fresh list with one empty-buffered representative per minimum."""
        prev = None
        for m in mins:
            if prev is not None and m <= prev:
                raise NavListError("unsorted representative keys")
            prev = m
        return cls.build(
            device, [NavEntry(m, BufferChain(device)) for m in mins], cause
        )

    # -- disk mirror ------------------------------------------------------

    @property
    def reps_per_block(self) -> int:
        return self.dev.cfg.block_capacity_records // REP_SLOTS

    def _encode(self, entry: NavEntry):
        ch = entry.chain
        last = ch.last_block
        return [
            (entry.min_key, 0, META),
            (ch.count, 0, META),
            (0 if last is None else last + 1, 0, META),
            (ch.last_block_len, 0, META),
        ]

    def rewrite(self, cause: str = "navlist") -> None:
        dev = self.dev
        rpb = self.reps_per_block
        need = -(-len(self.entries) // rpb) if self.entries else 0
        while len(self.blocks) > need:
            dev.free_block(self.blocks.pop())
        while len(self.blocks) < need:
            self.blocks.append(dev.alloc_block())
        for i in range(need):
            payload = []
            for e in self.entries[i * rpb : (i + 1) * rpb]:
                payload.extend(self._encode(e))
            dev.write_block(self.blocks[i], payload, cause)

    def scan(self, cause: str = "navlist") -> list[Representative]:
        """Charged read of the representative blocks."""
        out = []
        for bid in self.blocks:
            payload = self.dev.read_block(bid, cause)
            self.dev.release_block(bid)
            for i in range(0, len(payload), REP_SLOTS):
                quad = payload[i : i + REP_SLOTS]
                out.append(
                    Representative(
                        min_key=quad[0][0],
                        buffered_count=quad[1][0],
                        last_block=quad[2][0] - 1 if quad[2][0] else None,
                        last_block_len=quad[3][0],
                    )
                )
        return out

    def decode_disk(self) -> list[Representative]:
        """Uncharged audit view of the stored representatives."""
        out = []
        for bid in self.blocks:
            payload = self.dev.peek_block(bid)
            for i in range(0, len(payload), REP_SLOTS):
                quad = payload[i : i + REP_SLOTS]
                out.append(
                    Representative(
                        min_key=quad[0][0],
                        buffered_count=quad[1][0],
                        last_block=quad[2][0] - 1 if quad[2][0] else None,
                        last_block_len=quad[3][0],
                    )
                )
        return out

    def free(self) -> None:
        for bid in self.blocks:
            self.dev.free_block(bid)
        self.blocks = []
        self.entries = []

    def __len__(self) -> int:
        return len(self.entries)

    # -- surgery ----------------------------------------------------------

    def split_at_prefix(self, sizes, threshold: int, cause: str = "navlist"):
        """Split so the first list is the shortest prefix whose cumulative
        sub-structure size strictly exceeds the threshold.

        Sizes are supplied by the caller (base-set key counts, not buffered
        counts).  Errors when the threshold is not below the total or when
        no proper split exists (the exceeding prefix would be the whole
        list).
        """
        if len(sizes) != len(self.entries):
            raise NavListError("sizes do not match representatives")
        total = sum(sizes)
        if threshold >= total:
            raise NavListError("split threshold not below total size")
        acc = 0
        cut = None
        for i, s in enumerate(sizes):
            acc += s
            if acc > threshold:
                cut = i + 1
                break
        if cut is None or cut == len(self.entries):
            raise NavListError("cannot split: threshold reached only at the end")
        self.scan(cause)
        first = NavList.build(self.dev, self.entries[:cut], cause)
        second = NavList.build(self.dev, self.entries[cut:], cause)
        self.free_blocks_only()
        return first, second

    def free_blocks_only(self) -> None:
        for bid in self.blocks:
            self.dev.free_block(bid)
        self.blocks = []

    @classmethod
    def attach(cls, front: "NavList", back: "NavList", cause: str = "navlist"):
        """Concatenate two lists, rewriting at most both lists' blocks."""
        if front.entries and back.entries:
            if front.entries[-1].min_key > back.entries[0].min_key:
                raise NavListError("attach order violation")
        dev = front.dev
        merged = cls(dev, front.entries + back.entries)
        merged.rewrite(cause)
        front.free_blocks_only()
        back.free_blocks_only()
        return merged


def flush_via(
    device,
    source,
    nav: NavList,
    sorter,
    cause: str = "flush",
    work_memory: int = 0,
    presorted: bool = False,
) -> list[int]:
    """Distribute a buffer across the navigation list's targets.

    Returns the per-target appended counts.  The source is consumed.  Cost
    is the sort of the source plus a constant number of I/Os per receiving
    target plus the navigation scan itself.
    """
    entries = nav.entries
    src_len = len(source) if isinstance(source, list) else source.count
    if not entries:
        if src_len:
            raise NavListError("flush into empty navigation list")
        return []
    nav.scan(cause="navlist")
    counts = [0] * len(entries)
    if src_len == 0:
        return counts

    if presorted and isinstance(source, list):
        stream = iter(source)
    else:
        stream = sorted_stream(device, source, sorter, cause, work_memory)

    cap = device.cfg.block_capacity_records
    batch_limit = max(64 * cap, 1024)
    i = 0
    t = len(entries)
    batch = []

    def ship():
        nonlocal batch
        if batch:
            entries[i].chain.append(batch, cause)
            counts[i] += len(batch)
            batch = []

    first = True
    for rec in stream:
        v = rec[0]
        if first:
            if v < entries[0].min_key:
                raise NavListError("key under-runs navigation list")
            first = False
        while i + 1 < t and v >= entries[i + 1].min_key:
            ship()
            i += 1
        batch.append(rec)
        if len(batch) >= batch_limit:
            ship()
    ship()
    nav.rewrite(cause="navlist")
    return counts
