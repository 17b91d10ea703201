"""External-memory priority queue built over a pluggable sorting black box.

Keys live in layers shrinking from the full structure size down to a small
in-memory head that always holds the global minimum.  Each on-disk layer
splits into geometrically growing levels of unsorted base sets, with a
buffer at every tier so keys ride downward in bulk: incoming operations
collect in a memory buffer, overflowing buffers flush through navigation
lists, and oversized or undersized levels are rebalanced by moving base-set
pointers rather than keys.  Deletions travel as timestamped signals that
are treated like insertions until they meet their target in the head or at
a global rebuild.

The scheduler runs in three phases whenever the memory buffer overflows:
flush (drain overflowed buffers breadth-first, bottom up), push (rebalance
overflowed levels and layers upward), and pull (apply deletions, refill the
head, and rebalance underflows bottom up).
"""
from __future__ import annotations

import heapq
import logging
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field

from .io_sim import BlockDevice
from .navlist import BufferChain, NavEntry, NavList, flush_via, sorted_stream
from .records import DELETE_SIGNAL, INSERT
from .sorter import RunSlicer, RunWriter, run_reader

log = logging.getLogger("empq")


class InvariantError(RuntimeError):
    """A structural invariant failed; carries a structure dump when known."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class WorkloadContractError(InvariantError):
    """The operation sequence violated the workload contract."""


@dataclass
class PQConfig:
    c: int = 17
    force_layer_plan: list | None = None
    check_invariants: bool = False
    deep_audit_every: int = 256

    def __post_init__(self):
        if self.c < 5:
            raise ValueError("c must be at least 5 (pull-stage flush margin)")
        if self.c < 17 and not self.force_layer_plan:
            raise ValueError(
                "c must be at least 17 (head rebalance margin) unless a "
                "forced layer plan relaxes the constants"
            )
        if self.force_layer_plan:
            sizes = list(self.force_layer_plan)
            if sorted(sizes, reverse=True) != sizes or len(set(sizes)) != len(sizes):
                raise ValueError("forced layer sizes must be strictly decreasing")


@dataclass
class PQStats:
    scheduler_runs: int = 0
    memory_flushes: int = 0
    layer_flushes: int = 0
    level_flushes: int = 0
    base_splits: int = 0
    level_pushes: int = 0
    level_pulls: int = 0
    layer_pushes: int = 0
    layer_pulls: int = 0
    head_pushes: int = 0
    head_pulls: int = 0
    rebuilds: int = 0
    pulls_total: int = 0
    last_head_pull_take: int = 0
    flush_events: list = field(default_factory=list)  # (kind, buffered, targets, ios)
    layer_push_events: list = field(default_factory=list)  # (X, ios)
    rebuild_log: list = field(default_factory=list)  # (total_updates, new_N)


def ceil_log2_ratio(x: int, b: int) -> int:
    """Smallest k with b * 2**k >= x (exact integer arithmetic)."""
    k = 0
    v = b
    while v < x:
        v += v
        k += 1
    return k


def layer_plan(n: int, block: int, c: int) -> list[tuple[int, int]]:
    """Layer sizes and base-set sizes, largest layer first.

    Sizes follow the recurrence X' = B * ceil(log2(X/B)) until the head
    scale; the base-set size of a layer is its lower layer's size, clamped
    up to the head size cB.  Layers too small to carry levels (fewer than
    five base sets) are dropped and absorbed by the head.
    """
    if n <= 2 * c * block:
        return []
    out = []
    x = n
    while True:
        f = block * ceil_log2_ratio(x, block)
        phi = max(f, c * block)
        if x < 5 * phi:
            break
        out.append((x, phi))
        if f <= c * block:
            break
        x = f
    return out


def compute_layer_plan(n: int, block: int, c: int = 17) -> list[int]:
    """Public plan view: the on-disk layer sizes, largest first.

    The head is implicit; an empty result means everything lives in it.
    """
    return [x for x, _ in layer_plan(n, block, c)]


def compute_top_level(ratio) -> int:
    """Largest l with 1 + sum_{j<=l} 4*8^j <= ratio (ratio = X / phi)."""
    if ratio < 5:
        raise ValueError("layer too small for levels")
    l = 0
    acc = 5
    while acc + 4 * 8 ** (l + 1) <= ratio:
        l += 1
        acc += 4 * 8**l
    return l


class _Level:
    __slots__ = ("index", "nav", "buffer", "size")

    def __init__(self, index: int, nav: NavList, buffer: BufferChain, size: int):
        self.index = index
        self.nav = nav
        self.buffer = buffer
        self.size = size

    @property
    def min_key(self):
        return self.nav.entries[0].min_key if self.nav.entries else None


class _Layer:
    __slots__ = ("X", "phi", "levels", "buffer", "level_nav")

    def __init__(self, X, phi, levels, buffer, level_nav):
        self.X = X
        self.phi = phi
        self.levels = levels
        self.buffer = buffer
        self.level_nav = level_nav

    @property
    def min_key(self):
        for lvl in self.levels:
            if lvl.nav.entries:
                return lvl.nav.entries[0].min_key
        return None


class _Lookahead:
    """One-record lookahead over an iterator, for signal-aware cutting."""

    __slots__ = ("_it", "_peeked", "_has")

    def __init__(self, it):
        self._it = iter(it)
        self._peeked = None
        self._has = False

    def peek(self):
        if not self._has:
            try:
                self._peeked = next(self._it)
                self._has = True
            except StopIteration:
                return None
        return self._peeked

    def take(self):
        rec = self.peek()
        if rec is None:
            raise StopIteration
        self._has = False
        return rec


class PriorityQueue:
    """The reduction: insert/delete/findmin over a sorting black box.

    Single-threaded; one operation at a time.  ``findmin`` never performs
    I/O.  The structure is rebuilt from scratch every N/8 updates and
    whenever the largest layer's top level goes out of balance.
    """

    def __init__(self, device: BlockDevice, sorter, config: PQConfig | None = None):
        self.device = device
        self.sorter = sorter
        self.cfg = config or PQConfig()
        self.B = device.cfg.block_capacity_records
        if self.B < 4:
            raise ValueError("block capacity below 4 cannot pack representatives")
        self.cB = self.cfg.c * self.B
        self.work_mem = self.cB

        self.mem_inserts: dict[int, tuple] = {}
        self.mem_signals: list[tuple] = []
        self._mask: set[int] = set()
        self._mem_heap: list = []

        self.head: list[tuple] = []
        self.layers: list[_Layer] = []  # ascending by key range; largest layer last
        self.layer_nav: NavList | None = None

        self.N: int | None = None
        self.updates_since_rebuild = 0
        self.total_updates = 0
        self.seq = 0

        self.stats = PQStats()
        self._level_counts: list[int] | None = None
        self._audit_counter = 0

        if self.cfg.force_layer_plan:
            self._validate_forced_plan()

    # ------------------------------------------------------------------
    # public operations
    # ------------------------------------------------------------------

    def insert(self, value: int) -> None:
        if value in self.mem_inserts:
            raise WorkloadContractError(f"duplicate live insert for value {value}")
        rec = (value, self.seq, INSERT)
        self.seq += 1
        self.mem_inserts[value] = rec
        heapq.heappush(self._mem_heap, (value, rec[1]))
        self._note_update()

    def delete(self, value: int) -> None:
        rec = self.mem_inserts.pop(value, None)
        if rec is not None:
            # both the insert and the deletion cancel in memory, for free
            self._note_update()
            return
        idx = bisect_left(self.head, (value, -1, -1))
        if idx < len(self.head) and self.head[idx][0] == value:
            self.head.pop(idx)
            self._update_pools()
            self._note_update()
            if not self.head and self.layers:
                self._pull_stage()
            return
        sig = (value, self.seq, DELETE_SIGNAL)
        self.seq += 1
        self.mem_signals.append(sig)
        self._mask.add(value)
        self._note_update()

    def findmin(self):
        best = None
        if self.head:
            if not self._mask:
                best = self.head[0][0]
            else:
                for rec in self.head:
                    if rec[0] not in self._mask:
                        best = rec[0]
                        break
        heap = self._mem_heap
        ins = self.mem_inserts
        while heap:
            v, s = heap[0]
            r = ins.get(v)
            if r is not None and r[1] == s:
                if best is None or v < best:
                    best = v
                break
            heapq.heappop(heap)
        return best

    # ------------------------------------------------------------------
    # update plumbing
    # ------------------------------------------------------------------

    def _membuf_len(self) -> int:
        return len(self.mem_inserts) + len(self.mem_signals)

    def _note_update(self):
        self.updates_since_rebuild += 1
        self.total_updates += 1
        self._update_pools()
        if self.N is None:
            if self._membuf_len() > self.cB:
                self._global_rebuild()
                self._audit_stage("rebuild")
            return
        if self.updates_since_rebuild >= max(1, self.N // 8):
            self._global_rebuild()
            self._audit_stage("rebuild")
            return
        if self._membuf_len() > self.cB:
            self._run_stages()

    def _update_pools(self):
        if self.device.cfg.enforce_residency:
            self.device.set_pool("head", len(self.head))
            self.device.set_pool("membuf", self._membuf_len())

    def _run_stages(self):
        self.stats.scheduler_runs += 1
        lo = self._flush_stage()
        if not self._push_stage(lo):
            self._pull_stage()

    # ------------------------------------------------------------------
    # flush stage
    # ------------------------------------------------------------------

    def _merge_into_head(self, batch: list) -> None:
        """Merge records into the head, cancelling signal/insert pairs.

        Every signal in the merged view must find its insert there; a miss
        means routing went wrong somewhere below.
        """
        if not batch:
            return
        merged = sorted(self.head + batch) if self.head else sorted(batch)
        out = []
        for rec in merged:
            if rec[2] == INSERT:
                out.append(rec)
            else:
                if out and out[-1][0] == rec[0] and out[-1][2] == INSERT:
                    out.pop()
                else:
                    raise InvariantError(
                        f"unmatched delete signal for value {rec[0]} at the head",
                        self.dump_structure(),
                    )
        self.head = out
        self._update_pools()

    def _memory_flush(self):
        records = list(self.mem_inserts.values())
        records.extend(self.mem_signals)
        self.mem_inserts.clear()
        self.mem_signals.clear()
        self._mask.clear()
        self._mem_heap = []
        if not records:
            return
        records.sort()
        io0 = self.device.io_total
        self.stats.memory_flushes += 1
        if not self.layers:
            self._merge_into_head(records)
            self.stats.flush_events.append(("memory", len(records), 1, 0))
            return
        boundary = self.layer_nav.entries[0].min_key
        cut = bisect_left(records, (boundary, -1, -1))
        if cut:
            self._merge_into_head(records[:cut])
        if cut < len(records):
            flush_via(
                self.device,
                records[cut:],
                self.layer_nav,
                self.sorter,
                cause="flush",
                work_memory=self.work_mem,
                presorted=True,
            )
        self.stats.flush_events.append(
            ("memory", len(records), len(self.layer_nav.entries), self.device.io_total - io0)
        )
        self._update_pools()

    def _layer_flush(self, i: int):
        layer = self.layers[i]
        io0 = self.device.io_total
        buffered = layer.buffer.count
        self.stats.layer_flushes += 1
        flush_via(
            self.device,
            layer.buffer,
            layer.level_nav,
            self.sorter,
            cause="flush",
            work_memory=self.work_mem,
        )
        self.stats.flush_events.append(
            ("layer", buffered, len(layer.level_nav.entries), self.device.io_total - io0)
        )
        self.layer_nav.rewrite("navlist")

    def _level_flush(self, i: int, j: int):
        layer = self.layers[i]
        lvl = layer.levels[j]
        io0 = self.device.io_total
        buffered = lvl.buffer.count
        self.stats.level_flushes += 1
        counts = flush_via(
            self.device,
            lvl.buffer,
            lvl.nav,
            self.sorter,
            cause="flush",
            work_memory=self.work_mem,
        )
        lvl.size += sum(counts)
        self.stats.flush_events.append(
            ("level", buffered, len(lvl.nav.entries), self.device.io_total - io0)
        )
        layer.level_nav.rewrite("navlist")
        self._rebalance_base_sets(layer, lvl)

    def _rebalance_base_sets(self, layer: _Layer, lvl: _Level):
        phi = layer.phi
        if all(e.chain.count <= 2 * phi for e in lvl.nav.entries):
            return
        new_entries = []
        for e in lvl.nav.entries:
            if e.chain.count > 2 * phi:
                new_entries.extend(self._split_base_set(e, phi))
                self.stats.base_splits += 1
            else:
                new_entries.append(e)
        # all new representatives collected first, then one nav rebuild
        lvl.nav.free_blocks_only()
        lvl.nav = NavList.build(self.device, new_entries, cause="navlist")

    def _split_base_set(self, entry: NavEntry, phi: int) -> list[NavEntry]:
        total = entry.chain.count
        la = _Lookahead(
            sorted_stream(self.device, entry.chain, self.sorter, "rebalance", self.work_mem)
        )
        out = []
        rem = total
        while rem > 0:
            want = rem if rem <= phi + phi // 2 else phi
            chunk = []
            while len(chunk) < want:
                chunk.append(la.take())
            while True:
                nxt = la.peek()
                if nxt is None or nxt[2] != DELETE_SIGNAL:
                    break
                chunk.append(la.take())
            rem -= len(chunk)
            chain = BufferChain(self.device)
            chain.append(chunk, "rebalance")
            out.append(NavEntry(chunk[0][0], chain))
        return out

    def _flush_stage(self):
        self._memory_flush()
        lo = deque()
        if self.layers and len(self.head) > 2 * self.cB:
            lo.append(("head", -1, -1))
        q = deque()
        for i, layer in enumerate(self.layers):
            if 2 * layer.buffer.count > layer.phi:
                q.append(("layer", i, -1))
        while q:
            kind, i, j = q.popleft()
            layer = self.layers[i]
            if kind == "layer":
                if 2 * layer.buffer.count <= layer.phi:
                    continue
                self._layer_flush(i)
                for j2, lvl in enumerate(layer.levels):
                    if lvl.buffer.count > 8**j2 * self.B:
                        q.append(("level", i, j2))
            else:
                lvl = layer.levels[j]
                if lvl.buffer.count <= 8**j * self.B:
                    continue
                self._level_flush(i, j)
                if lvl.size > self._upper_bound(layer, j):
                    lo.append(("level", i, j))
        self._audit_stage("flush")
        return lo

    # ------------------------------------------------------------------
    # push stage
    # ------------------------------------------------------------------

    def _upper_bound(self, layer: _Layer, j: int) -> int:
        if j == len(layer.levels) - 1:
            return 40 * 8**j * layer.phi
        return 6 * 8**j * layer.phi

    def _lower_bound(self, layer: _Layer, j: int) -> int:
        return 2 * 8**j * layer.phi

    def _push_stage(self, lo) -> bool:
        while lo:
            entry = lo.popleft()
            while entry is not None:
                kind, i, j = entry
                if kind == "head":
                    if not self.layers or len(self.head) <= 2 * self.cB:
                        break
                    entry = self._head_push()
                    continue
                layer = self.layers[i]
                top = len(layer.levels) - 1
                if layer.levels[j].size <= self._upper_bound(layer, j):
                    break
                if j == top:
                    if i == len(self.layers) - 1:
                        self._global_rebuild()
                        self._audit_stage("push")
                        return True
                    entry = self._layer_push(i)
                else:
                    entry = self._level_push(i, j)
        self._audit_stage("push")
        return False

    def _sync_level_nav(self, layer: _Layer):
        for idx, lvl in enumerate(layer.levels):
            if lvl.nav.entries:
                layer.level_nav.entries[idx].min_key = lvl.nav.entries[0].min_key
        layer.level_nav.rewrite("navlist")

    def _sync_layer_nav(self):
        for idx, layer in enumerate(self.layers):
            m = layer.min_key
            if m is not None:
                self.layer_nav.entries[idx].min_key = m
        self.layer_nav.rewrite("navlist")

    def _split_buffer(self, chain: BufferChain, boundary: int, other: BufferChain, move_below: bool) -> int:
        """Route one buffer's records around a boundary key.

        Records on the ``move_below`` side (strictly below, or at/above when
        moving up) go to ``other``; the rest are rewritten back into the
        same chain.  Returns the number moved.
        """
        if chain.count == 0:
            return 0
        stream = sorted_stream(self.device, chain, self.sorter, "rebalance", self.work_mem)
        keep = []
        move = []
        moved = 0
        slab = max(8 * self.B, 256)
        for rec in stream:
            below = rec[0] < boundary
            if below == move_below:
                move.append(rec)
                if len(move) >= slab:
                    other.append(move, "rebalance")
                    moved += len(move)
                    move = []
            else:
                keep.append(rec)
                if len(keep) >= slab:
                    chain.append(keep, "rebalance")
                    keep = []
        if move:
            other.append(move, "rebalance")
            moved += len(move)
        if keep:
            chain.append(keep, "rebalance")
        return moved

    def _level_push(self, i: int, j: int):
        layer = self.layers[i]
        phi = layer.phi
        lj = layer.levels[j]
        lu = layer.levels[j + 1]
        self.stats.level_pushes += 1
        threshold = 4 * 8**j * phi
        sizes = [e.chain.count for e in lj.nav.entries]
        keep_nav, move_nav = lj.nav.split_at_prefix(sizes, threshold)
        moved = sum(e.chain.count for e in move_nav.entries)
        lj.nav = keep_nav
        lu.nav = NavList.attach(move_nav, lu.nav)
        lj.size -= moved
        lu.size += moved
        boundary = lu.nav.entries[0].min_key
        self._split_buffer(lj.buffer, boundary, lu.buffer, move_below=False)
        self._sync_level_nav(layer)
        if not threshold <= lj.size <= threshold + 2 * phi:
            raise InvariantError(
                f"level push left level {j} at {lj.size}, outside "
                f"[{threshold}, {threshold + 2 * phi}]",
                self.dump_structure(),
            )
        if lu.buffer.count > 8 ** (j + 1) * self.B:
            self._level_flush(i, j + 1)
        if lu.size > self._upper_bound(layer, j + 1):
            return ("level", i, j + 1)
        return None

    def _level_pull(self, i: int, j: int):
        layer = self.layers[i]
        phi = layer.phi
        lj = layer.levels[j]
        lu = layer.levels[j + 1]
        self.stats.level_pulls += 1
        self.stats.pulls_total += 1
        if lu.size < self._lower_bound(layer, j + 1):
            raise InvariantError(
                f"level pull on level {j}: donor level {j + 1} is underfull "
                f"({lu.size}); pulls must proceed bottom-up",
                self.dump_structure(),
            )
        threshold = (4 * 8**j - 2) * phi - lj.size
        sizes = [e.chain.count for e in lu.nav.entries]
        move_nav, rest_nav = lu.nav.split_at_prefix(sizes, threshold)
        moved = sum(e.chain.count for e in move_nav.entries)
        lj.nav = NavList.attach(lj.nav, move_nav)
        lu.nav = rest_nav
        lj.size += moved
        lu.size -= moved
        boundary = lu.nav.entries[0].min_key
        self._split_buffer(lu.buffer, boundary, lj.buffer, move_below=True)
        self._sync_level_nav(layer)
        if lj.buffer.count > 8**j * self.B:
            self._level_flush(i, j)
        if lj.size > self._upper_bound(layer, j):
            raise InvariantError(
                f"level {j} overflowed to {lj.size} in the pull stage",
                self.dump_structure(),
            )

    def _drain_chain_into(self, writer: RunWriter, chain: BufferChain, cause: str):
        for bid in chain.blocks:
            writer.extend(self.device.read_block(bid, cause))
            self.device.release_block(bid)
            self.device.free_block(bid)
        chain.blocks = []
        chain.count = 0

    def _take_level_sets(self, slicer: RunSlicer, count: int, phi: int):
        """Carve ``count`` records into base sets of ~phi records each."""
        entries = []
        size = 0
        rem = min(count, slicer.remaining)
        while rem > 0:
            want = rem if rem <= phi + phi // 2 else phi
            blocks, got, first = slicer.take_chain(want)
            entries.append(NavEntry(first[0], BufferChain(self.device, blocks, got)))
            size += got
            rem -= got
            if rem < 0:
                rem = 0
        if len(entries) >= 2 and entries[-1].chain.count < phi // 2:
            last = entries.pop()
            recs = last.chain.read_all("rebalance")
            last.chain.free()
            entries[-1].chain.append(recs, "rebalance")
            # size unchanged
        return entries, size

    def _rebuild_joint_levels(self, low_level: _Level, low_phi: int, low_take: int,
                              high_level: _Level, high_phi: int, cause: str):
        """Sort two adjacent levels together and rebuild both.

        The lower level receives the first ``low_take`` keys (extended past
        boundary signals); the upper level receives the rest.
        """
        w = RunWriter(self.device, cause)
        for e in low_level.nav.entries:
            self._drain_chain_into(w, e.chain, cause)
        for e in high_level.nav.entries:
            self._drain_chain_into(w, e.chain, cause)
        low_level.nav.free()
        high_level.nav.free()
        pool = w.close()
        sorted_run, _ = self.sorter.sort_run(pool, cause=cause)
        slicer = RunSlicer(self.device, sorted_run, cause)
        entries, size = self._take_level_sets(slicer, min(low_take, slicer.remaining), low_phi)
        low_level.nav = NavList.build(self.device, entries)
        low_level.size = size
        entries, size = self._take_level_sets(slicer, slicer.remaining, high_phi)
        high_level.nav = NavList.build(self.device, entries)
        high_level.size = size
        slicer.finish()

    def _layer_push(self, i: int):
        layer = self.layers[i]
        upper = self.layers[i + 1]
        top = len(layer.levels) - 1
        lx = layer.levels[top]
        lu0 = upper.levels[0]
        self.stats.layer_pushes += 1
        io0 = self.device.io_total
        self._rebuild_joint_levels(
            lx, layer.phi, 4 * 8**top * layer.phi, lu0, upper.phi, "rebalance"
        )
        boundary = lu0.nav.entries[0].min_key
        self._split_buffer(layer.buffer, boundary, lu0.buffer, move_below=False)
        self._split_buffer(lx.buffer, boundary, lu0.buffer, move_below=False)
        self._sync_level_nav(layer)
        self._sync_level_nav(upper)
        self._sync_layer_nav()
        self.stats.layer_push_events.append((layer.X, self.device.io_total - io0))
        if lu0.buffer.count > self.B:
            self._level_flush(i + 1, 0)
        if lu0.size > self._upper_bound(upper, 0):
            return ("level", i + 1, 0)
        return None

    # ------------------------------------------------------------------
    # pull stage
    # ------------------------------------------------------------------

    def _apply_membuf_signals(self):
        """Cancel memory-buffer signals against their targets in the head."""
        if not self.mem_signals or not self.head:
            return
        remaining = []
        for sig in self.mem_signals:
            v = sig[0]
            idx = bisect_left(self.head, (v, -1, -1))
            if idx < len(self.head) and self.head[idx][0] == v:
                self.head.pop(idx)
                self._mask.discard(v)
            else:
                remaining.append(sig)
        self.mem_signals = remaining
        self._update_pools()

    def _layer_pull(self, i: int):
        layer = self.layers[i]
        upper = self.layers[i + 1]
        top = len(layer.levels) - 1
        lx = layer.levels[top]
        lu0 = upper.levels[0]
        self.stats.layer_pulls += 1
        self.stats.pulls_total += 1
        if lu0.size < self._lower_bound(upper, 0):
            raise InvariantError(
                f"layer pull on X={layer.X}: donor level 0 above is underfull "
                f"({lu0.size})",
                self.dump_structure(),
            )
        self._rebuild_joint_levels(
            lx, layer.phi, 4 * 8**top * layer.phi, lu0, upper.phi, "rebalance"
        )
        boundary = lu0.nav.entries[0].min_key
        moved = self._split_buffer(upper.buffer, boundary, lx.buffer, move_below=True)
        moved += self._split_buffer(lu0.buffer, boundary, lx.buffer, move_below=True)
        if moved > upper.phi // 2 + 8 * self.B:
            raise InvariantError(
                f"layer pull moved {moved} buffered keys, above the "
                f"{upper.phi // 2 + 8 * self.B} accounting bound",
                self.dump_structure(),
            )
        self._sync_level_nav(layer)
        self._sync_level_nav(upper)
        self._sync_layer_nav()
        if lx.buffer.count > 8**top * self.B:
            self._level_flush(i, top)
        if lx.size > 40 * 8**top * layer.phi:
            raise InvariantError(
                f"top level of X={layer.X} overflowed to {lx.size} in the pull stage",
                self.dump_structure(),
            )

    def _head_push(self):
        layer0 = self.layers[0]
        lvl0 = layer0.levels[0]
        self.stats.head_pushes += 1
        w = RunWriter(self.device, "rebalance")
        w.extend(self.head)
        self.head = []
        for e in lvl0.nav.entries:
            self._drain_chain_into(w, e.chain, "rebalance")
        lvl0.nav.free()
        pool = w.close()
        sorted_run, _ = self.sorter.sort_run(pool, cause="rebalance")
        slicer = RunSlicer(self.device, sorted_run, "rebalance")
        head_recs = slicer.take_records(min(self.cB, slicer.remaining), skip_signals=True)
        entries, size = self._take_level_sets(slicer, slicer.remaining, layer0.phi)
        slicer.finish()
        lvl0.nav = NavList.build(self.device, entries)
        lvl0.size = size
        self._merge_into_head(head_recs)
        self._sync_level_nav(layer0)
        self._sync_layer_nav()
        if lvl0.size > self._upper_bound(layer0, 0):
            return ("level", 0, 0)
        return None

    def _head_pull(self):
        layer0 = self.layers[0]
        lvl0 = layer0.levels[0]
        self.stats.head_pulls += 1
        self.stats.pulls_total += 1
        if lvl0.size < self._lower_bound(layer0, 0):
            raise InvariantError(
                f"head pull: donor level 0 is underfull ({lvl0.size})",
                self.dump_structure(),
            )
        w = RunWriter(self.device, "rebalance")
        for e in lvl0.nav.entries:
            self._drain_chain_into(w, e.chain, "rebalance")
        lvl0.nav.free()
        pool = w.close()
        sorted_run, _ = self.sorter.sort_run(pool, cause="rebalance")
        slicer = RunSlicer(self.device, sorted_run, "rebalance")
        head_recs = slicer.take_records(min(self.cB, slicer.remaining), skip_signals=True)
        self.stats.last_head_pull_take = len(head_recs)
        entries, size = self._take_level_sets(slicer, slicer.remaining, layer0.phi)
        slicer.finish()
        lvl0.nav = NavList.build(self.device, entries)
        lvl0.size = size
        if lvl0.nav.entries:
            boundary = lvl0.nav.entries[0].min_key
        elif len(layer0.levels) > 1 and layer0.levels[1].nav.entries:
            boundary = layer0.levels[1].nav.entries[0].min_key
        else:
            boundary = None
        movers = []
        if boundary is not None:
            movers.extend(self._extract_buffer_below(layer0.buffer, boundary))
            movers.extend(self._extract_buffer_below(lvl0.buffer, boundary))
        else:
            movers.extend(self._extract_buffer_below(layer0.buffer, None))
            movers.extend(self._extract_buffer_below(lvl0.buffer, None))
        if len(movers) > layer0.phi // 2 + 8 * self.B:
            raise InvariantError(
                f"head pull moved {len(movers)} buffered keys, above the "
                f"{layer0.phi // 2 + 8 * self.B} accounting bound",
                self.dump_structure(),
            )
        self._merge_into_head(sorted(head_recs + movers))
        head_cap = max(2 * self.cB, self.cB + layer0.phi // 2 + 8 * self.B)
        if len(self.head) > head_cap:
            raise InvariantError(
                f"head overflowed to {len(self.head)} in the pull stage",
                self.dump_structure(),
            )
        self._sync_level_nav(layer0)
        self._sync_layer_nav()

    def _extract_buffer_below(self, chain: BufferChain, boundary) -> list:
        """Remove and return the chain's records strictly below the boundary
        (all of them when the boundary is None)."""
        if chain.count == 0:
            return []
        stream = sorted_stream(self.device, chain, self.sorter, "rebalance", self.work_mem)
        movers = []
        keep = []
        slab = max(8 * self.B, 256)
        for rec in stream:
            if boundary is None or rec[0] < boundary:
                movers.append(rec)
            else:
                keep.append(rec)
                if len(keep) >= slab:
                    chain.append(keep, "rebalance")
                    keep = []
        if keep:
            chain.append(keep, "rebalance")
        return movers

    def _rebalance_underflows(self) -> bool:
        """Bottom-up pulls until every level and layer is balanced.

        Returns True when the cascade escalated into a global rebuild.
        """
        rounds = 0
        while True:
            rounds += 1
            if rounds > 10000:
                raise InvariantError("pull sweep did not converge", self.dump_structure())
            changed = False
            for i, layer in enumerate(self.layers):
                top = len(layer.levels) - 1
                for j in range(len(layer.levels)):
                    lvl = layer.levels[j]
                    if lvl.size >= self._lower_bound(layer, j):
                        continue
                    if j == top:
                        if i == len(self.layers) - 1:
                            self._global_rebuild()
                            return True
                        self._layer_pull(i)
                    else:
                        self._level_pull(i, j)
                    changed = True
            if not changed:
                return False

    def _pull_stage(self):
        self._apply_membuf_signals()
        guard = 0
        while self.layers and not self.head:
            guard += 1
            if guard > 100000:
                raise InvariantError("pull stage did not converge", self.dump_structure())
            self._head_pull()
            if self._rebalance_underflows():
                self._apply_membuf_signals()
                continue
            self._apply_membuf_signals()
        self._audit_stage("pull")

    # ------------------------------------------------------------------
    # global rebuild
    # ------------------------------------------------------------------

    def _validate_forced_plan(self):
        pairs = self._forced_pairs()
        for idx, (x, phi) in enumerate(pairs):
            given = pairs[idx - 1][1] if idx else None
            if given is not None and given < 5 * phi:
                raise ValueError(
                    f"forced layer {x} receives {given} keys but needs at least {5 * phi}"
                )

    def _forced_pairs(self):
        sizes = list(self.cfg.force_layer_plan)
        pairs = []
        for idx, x in enumerate(sizes):
            if idx + 1 < len(sizes):
                phi = sizes[idx + 1]
            else:
                phi = max(self.B * ceil_log2_ratio(x, self.B), self.cB)
            pairs.append((x, phi))
        return pairs

    def _plan(self, n: int) -> list[tuple[int, int]]:
        if self.cfg.force_layer_plan:
            if n <= 2 * self.cB:
                return []
            pairs = self._forced_pairs()
            while pairs and n < 5 * pairs[0][1]:
                pairs.pop(0)
            return pairs
        return layer_plan(n, self.B, self.cfg.c)

    def _annihilate_sorted(self, records: list) -> list:
        out = []
        for rec in records:
            if rec[2] == INSERT:
                out.append(rec)
            else:
                if out and out[-1][0] == rec[0] and out[-1][2] == INSERT:
                    out.pop()
                else:
                    raise WorkloadContractError(
                        f"unmatched delete signal for value {rec[0]}"
                    )
        return out

    def _global_rebuild(self):
        dev = self.device
        self.stats.rebuilds += 1
        mem_records = list(self.mem_inserts.values())
        mem_records.extend(self.mem_signals)
        self.mem_inserts.clear()
        self.mem_signals.clear()
        self._mask.clear()
        self._mem_heap = []

        if not self.layers:
            # everything already lives in internal memory
            records = sorted(self.head + mem_records)
            self.head = []
            live = self._annihilate_sorted(records)
            n_live = len(live)
            clean = None
        else:
            w = RunWriter(dev, "rebuild")
            w.extend(self.head)
            self.head = []
            w.extend(sorted(mem_records))
            for layer in self.layers:
                self._drain_chain_into(w, layer.buffer, "rebuild")
                for lvl in layer.levels:
                    self._drain_chain_into(w, lvl.buffer, "rebuild")
                    for e in lvl.nav.entries:
                        self._drain_chain_into(w, e.chain, "rebuild")
                    lvl.nav.free()
                layer.level_nav.free()
            self.layer_nav.free()
            self.layers = []
            self.layer_nav = None
            run = w.close()
            sorted_run, _ = self.sorter.sort_run(run, cause="rebuild")
            cw = RunWriter(dev, "rebuild")
            pend = []
            cur = None
            for rec in run_reader(dev, sorted_run, "rebuild", free=True):
                if rec[0] != cur:
                    cw.extend(pend)
                    pend = []
                    cur = rec[0]
                if rec[2] == INSERT:
                    pend.append(rec)
                else:
                    if pend:
                        pend.pop()
                    else:
                        raise WorkloadContractError(
                            f"unmatched delete signal for value {rec[0]}"
                        )
            cw.extend(pend)
            clean = cw.close()
            n_live = clean.length
            live = None

        self.N = n_live
        self.updates_since_rebuild = 0
        plan = self._plan(n_live)
        if not plan:
            if clean is not None:
                self.head = list(run_reader(dev, clean, "rebuild", free=True))
            else:
                self.head = live
            self.layers = []
            self.layer_nav = None
        else:
            if clean is None:
                cw = RunWriter(dev, "rebuild")
                cw.extend(live)
                clean = cw.close()
            self._build_layers_from_run(clean, n_live, plan)
        self._level_counts = [len(layer.levels) for layer in self.layers]
        self._update_pools()
        self.stats.rebuild_log.append((self.total_updates, self.N))
        log.debug("global rebuild #%d: N=%d plan=%s", self.stats.rebuilds, self.N, plan)

    def _build_layers_from_run(self, clean, n_live: int, plan):
        """Carve the clean sorted run into head + layers, smallest keys first.

        Block-aligned base sets adopt the run's blocks outright, so the
        construction cost beyond the sort is the compaction pass plus the
        navigation lists.
        """
        dev = self.device
        m = len(plan)
        given = [n_live] + [plan[i - 1][1] for i in range(1, m)]
        own = [given[i] - plan[i][1] for i in range(m)]
        slicer = RunSlicer(dev, clean, "rebuild")
        self.head = slicer.take_records(min(plan[-1][1], slicer.remaining))
        layers_asc = []
        for i in range(m - 1, -1, -1):
            x, phi = plan[i]
            count = own[i] if i > 0 else slicer.remaining
            levels = self._build_layer_levels(slicer, count, phi)
            level_nav = NavList.build(
                dev,
                [NavEntry(lvl.min_key, lvl.buffer) for lvl in levels],
            )
            layers_asc.append(_Layer(x, phi, levels, BufferChain(dev), level_nav))
        slicer.finish()
        self.layers = layers_asc
        self.layer_nav = NavList.build(
            dev, [NavEntry(layer.min_key, layer.buffer) for layer in layers_asc]
        )

    def _build_layer_levels(self, slicer: RunSlicer, own: int, phi: int) -> list[_Level]:
        # set count drives the level plan: 4 * 8^j sets per level until the
        # remainder (at most 36 * 8^j sets) forms the top level
        nsets = 0
        n = own
        while n > phi + phi // 2:
            n -= phi
            nsets += 1
        if n > 0:
            nsets += 1
        levels = []
        j = 0
        r = nsets
        used = 0
        while True:
            top = r <= 36 * 8**j
            count = own - used if top else 4 * 8**j * phi
            entries, size = self._take_level_sets(slicer, count, phi)
            nav = NavList.build(self.device, entries)
            levels.append(_Level(j, nav, BufferChain(self.device), size))
            used += size
            if top:
                break
            r -= 4 * 8**j
            j += 1
        return levels

    # ------------------------------------------------------------------
    # diagnostics
    # ------------------------------------------------------------------

    def dump_structure(self) -> str:
        lines = [
            f"pq N={self.N} layers={len(self.layers)} head={len(self.head)} "
            f"membuf={self._membuf_len()}"
        ]
        for layer in reversed(self.layers):
            lines.append(
                f"layer X={layer.X} phi={layer.phi} buffer={layer.buffer.count} "
                f"levels={len(layer.levels)}"
            )
            for lvl in layer.levels:
                lines.append(
                    f"  level {lvl.index} size={lvl.size} buffer={lvl.buffer.count} "
                    f"sets={len(lvl.nav.entries)}"
                )
                for e in lvl.nav.entries:
                    lines.append(f"    set size={e.chain.count}")
        return "\n".join(lines)

    def _audit_stage(self, tag: str):
        if not self.cfg.check_invariants:
            return
        self._audit_counter += 1
        deep = self._audit_counter % max(1, self.cfg.deep_audit_every) == 0
        self.audit(deep=deep, tag=tag)

    def audit(self, deep: bool = False, tag: str = "") -> None:
        """Check the structure's balance rules and bookkeeping: buffer
        caps, base-set and level size bands, the head cap, the top-level
        inequality, key ordering, and shape stability between rebuilds.

        The cheap pass validates the maintained counters against the size
        bounds; the deep pass additionally rescans every block (uncharged)
        to confirm the counters, navigation mirrors, and key ranges.  At
        the flush-stage boundary the head and level upper bounds are not
        enforced: overflows there are queued for the push stage by design.
        """
        problems = []
        cB = self.cB
        forced = bool(self.cfg.force_layer_plan)
        pending_push = tag == "flush"
        if self.layers:
            if not pending_push and len(self.head) > 2 * cB:
                problems.append(f"head cap: {len(self.head)} > {2 * cB}")
            if self.layer_nav is None or len(self.layer_nav.entries) != len(self.layers):
                problems.append("layer navigation list out of step")
            if self._level_counts is not None and [
                len(layer.levels) for layer in self.layers
            ] != self._level_counts:
                problems.append("shape drift: level counts changed between rebuilds")
            prev_layer_min = None
            for layer in self.layers:
                phi = layer.phi
                if 2 * layer.buffer.count > phi:
                    problems.append(
                        f"buffer cap: layer {layer.X} holds {layer.buffer.count} > {phi // 2}"
                    )
                top = len(layer.levels) - 1
                if not forced and not (
                    4 * 8**top * phi <= layer.X <= 40 * 8**top * phi
                ):
                    problems.append(
                        f"top-level inequality fails for X={layer.X} "
                        f"(l={top}, phi={phi})"
                    )
                m = layer.min_key
                if prev_layer_min is not None and m is not None and m < prev_layer_min:
                    problems.append("layer key order violated")
                prev_layer_min = m
                prev_min = None
                for j, lvl in enumerate(layer.levels):
                    if lvl.buffer.count > 8**j * self.B:
                        problems.append(
                            f"buffer cap: level {j} holds {lvl.buffer.count} > {8**j * self.B}"
                        )
                    lo = self._lower_bound(layer, j)
                    hi = self._upper_bound(layer, j)
                    if lvl.size < lo or (not pending_push and lvl.size > hi):
                        problems.append(
                            f"size band: level {j} of X={layer.X} has {lvl.size}, "
                            f"outside [{lo}, {hi}]"
                        )
                    for e in lvl.nav.entries:
                        c = e.chain.count
                        if not phi // 2 <= c <= 2 * phi:
                            problems.append(
                                f"size band: base set of {c} keys outside "
                                f"[{phi // 2}, {2 * phi}] in X={layer.X} level {j}"
                            )
                        if prev_min is not None and e.min_key < prev_min:
                            problems.append("base set key order violated")
                        prev_min = e.min_key
        if deep:
            problems.extend(self._deep_audit_problems())
        if problems:
            raise InvariantError(
                f"invariant audit failed ({tag}): " + "; ".join(problems),
                self.dump_structure(),
            )

    def _chain_peek_all(self, chain: BufferChain) -> list:
        out = []
        for bid in chain.blocks:
            out.extend(self.device.peek_block(bid))
        return out

    def _deep_audit_problems(self) -> list[str]:
        problems = []
        cap = self.B
        for rec in self.head:
            if rec[2] != INSERT:
                problems.append("delete signal resident in the head")
        if self.head != sorted(self.head):
            problems.append("head is not sorted")

        def check_chain(chain, label):
            recs = self._chain_peek_all(chain)
            if len(recs) != chain.count:
                problems.append(
                    f"{label}: bookkept count {chain.count} != stored {len(recs)}"
                )
            for k, bid in enumerate(chain.blocks[:-1]):
                if len(self.device.peek_block(bid)) != cap:
                    problems.append(f"{label}: non-final block {bid} not full")
            return recs

        def check_nav(nav, label):
            disk = nav.decode_disk()
            if len(disk) != len(nav.entries):
                problems.append(f"{label}: disk mirror has {len(disk)} reps")
                return
            for rep, e in zip(disk, nav.entries):
                if rep.min_key != e.min_key:
                    problems.append(f"{label}: disk min {rep.min_key} != {e.min_key}")
                if rep.buffered_count != e.chain.count:
                    problems.append(
                        f"{label}: disk count {rep.buffered_count} != {e.chain.count}"
                    )

        if self.layer_nav is not None:
            check_nav(self.layer_nav, "layer nav")
        for li, layer in enumerate(self.layers):
            upper_min = (
                self.layers[li + 1].min_key if li + 1 < len(self.layers) else None
            )
            recs = check_chain(layer.buffer, f"layer {layer.X} buffer")
            for rec in recs:
                if layer.min_key is not None and rec[0] < layer.min_key:
                    problems.append(f"key range: layer {layer.X} buffer key under range")
                if upper_min is not None and rec[0] > upper_min:
                    problems.append(f"key range: layer {layer.X} buffer key over range")
            check_nav(layer.level_nav, f"layer {layer.X} level nav")
            for j, lvl in enumerate(layer.levels):
                nxt = (
                    layer.levels[j + 1].min_key
                    if j + 1 < len(layer.levels)
                    else upper_min
                )
                recs = check_chain(lvl.buffer, f"level {j} buffer")
                for rec in recs:
                    if lvl.min_key is not None and rec[0] < lvl.min_key:
                        problems.append(f"key range: level {j} buffer key under range")
                    if nxt is not None and rec[0] > nxt:
                        problems.append(f"key range: level {j} buffer key over range")
                check_nav(lvl.nav, f"level {j} base nav")
                total = 0
                prev_entry_min = None
                for e in lvl.nav.entries:
                    recs = check_chain(e.chain, f"base set in level {j}")
                    total += len(recs)
                    if recs:
                        actual_min = min(recs)[0]
                        if actual_min != e.min_key:
                            problems.append(
                                f"base set min {actual_min} != rep {e.min_key}"
                            )
                        if prev_entry_min is not None and actual_min < prev_entry_min:
                            problems.append("base set order violated (deep)")
                        prev_entry_min = e.min_key
                if total != lvl.size:
                    problems.append(
                        f"level {j} size {lvl.size} != stored {total}"
                    )
        return problems
