import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from empq.io_sim import BlockDevice, DeviceConfig
from empq.sorter import (
    DiskRun,
    InMemorySorter,
    MergeSorter,
    RunSlicer,
    RunWriter,
    SortMemoryError,
    free_run,
    run_reader,
    validate_run,
)

B = 16


def make_device(**kw):
    kw.setdefault("block_capacity_records", B)
    kw.setdefault("internal_memory_records", 8 * 17 * B)
    return BlockDevice(DeviceConfig(**kw))


def write_values(dev, values, cause="sort"):
    w = RunWriter(dev, cause)
    w.extend((v, i, 0) for i, v in enumerate(values))
    return w.close()


def read_values(dev, run):
    return [rec[0] for rec in run_reader(dev, run, "sort")]


def test_small_sort():
    dev = make_device()
    run = write_values(dev, [3, 1, 2])
    out, stats = MergeSorter(dev).sort_run(run)
    assert read_values(dev, out) == [1, 2, 3]
    assert stats.keys_sorted == 3


def test_sorted_input_unchanged():
    dev = make_device()
    values = list(range(100))
    run = write_values(dev, values)
    out, _ = MergeSorter(dev).sort_run(run)
    assert read_values(dev, out) == values
    validate_run(dev, out)


def test_single_load_costs_two_passes():
    # when everything fits in sorter memory: read all + write all
    dev = make_device()
    mem = dev.cfg.internal_memory_records
    n = mem
    run = write_values(dev, [mem - i for i in range(n)])
    before = dev.report().total
    out, stats = MergeSorter(dev).sort_run(run)
    assert stats.ios_used == 2 * -(-n // B)
    assert dev.report().total - before == stats.ios_used
    assert out.length == n


def test_empty_run():
    dev = make_device()
    out, stats = MergeSorter(dev).sort_run(DiskRun([], 0))
    assert out.length == 0 and stats.ios_used == 0


def test_insufficient_memory_rejected():
    dev = make_device()
    run = write_values(dev, [1, 2, 3])
    with pytest.raises(SortMemoryError, match="insufficient sort memory"):
        MergeSorter(dev, memory_records=2 * B).sort_run(run)


def test_multi_pass_sort_with_frees():
    dev = make_device()
    rng = random.Random(0)
    values = [rng.randrange(10**9) for _ in range(1000)]
    run = write_values(dev, values)
    out, stats = MergeSorter(dev, memory_records=3 * B).sort_run(run)
    assert read_values(dev, out) == sorted(values)
    # no leaked blocks: only the output run remains
    assert dev.allocated_blocks == len(out.blocks)


def test_merge_pass_identity():
    dev = make_device()
    run = write_values(dev, [1, 2, 3])
    out = MergeSorter(dev).merge_pass([run], 4)
    assert read_values(dev, out) == [1, 2, 3]


def test_merge_pass_pair():
    dev = make_device()
    r1 = write_values(dev, [1, 4])
    r2 = write_values(dev, [2, 3])
    out = MergeSorter(dev).merge_pass([r1, r2], 4)
    assert read_values(dev, out) == [1, 2, 3, 4]


def test_merge_pass_full_block_io_counts():
    # f runs of m full blocks each: exactly f*m reads and f*m writes
    dev = make_device()
    f, m = 4, 3
    runs = []
    base = 0
    for _ in range(f):
        runs.append(write_values(dev, range(base, base + m * B)))
        base += m * B
    before = dev.report()
    out = MergeSorter(dev).merge_pass(runs, f)
    after = dev.report()
    assert after.reads - before.reads == f * m
    assert after.writes - before.writes == f * m
    assert out.length == f * m * B


def test_merge_pass_detects_unsorted_input():
    dev = make_device()
    run = write_values(dev, [5, 1])
    with pytest.raises(ValueError, match="unsorted"):
        MergeSorter(dev).merge_pass([run], 2, check_sorted=True)


def test_merge_pass_fan_in_limits():
    dev = make_device()
    sorter = MergeSorter(dev, memory_records=3 * B)
    runs = [write_values(dev, [i]) for i in range(3)]
    with pytest.raises(ValueError):
        sorter.merge_pass(runs, 2)
    with pytest.raises(SortMemoryError):
        sorter.merge_pass(runs, 5)


def test_predicted_cost_anchors():
    dev = make_device()
    sorter = MergeSorter(dev)
    mem = sorter.memory
    f = sorter.fan_in
    assert sorter.predicted_per_key_cost(0) == 0
    assert sorter.predicted_per_key_cost(1) == 2
    assert sorter.predicted_per_key_cost(mem) == 2
    assert sorter.predicted_per_key_cost(mem + 1) == 4
    assert sorter.predicted_per_key_cost(f * mem) == 4
    assert sorter.predicted_per_key_cost(f * mem + 1) == 6


def test_predicted_cost_monotone():
    dev = make_device()
    sorter = MergeSorter(dev, memory_records=4 * B)
    grid = [0, 1, 7, B, 63, 64, 65, 1000, 10**4, 10**6, 10**9, 10**12]
    costs = [sorter.predicted_per_key_cost(n) for n in grid]
    assert costs == sorted(costs)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=2**64 - 1), max_size=400), st.integers(0, 3))
def test_sort_run_is_sorted_permutation(values, mem_scale):
    dev = make_device()
    sorter = MergeSorter(dev, memory_records=(3 + mem_scale) * B)
    run = write_values(dev, values)
    out, stats = sorter.sort_run(run)
    got = read_values(dev, out)
    assert got == sorted(values)
    assert stats.keys_sorted == len(values)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=3000))
def test_measured_within_predicted_envelope(n):
    dev = make_device()
    sorter = MergeSorter(dev, memory_records=4 * B)
    rng = random.Random(n)
    run = write_values(dev, [rng.randrange(10**12) for _ in range(n)])
    _, stats = sorter.sort_run(run)
    predicted_total = sorter.predicted_per_key_cost(n) * -(-n // B)
    assert stats.ios_used <= 1.5 * predicted_total


def test_in_memory_sorter_same_interface():
    dev = make_device()
    rng = random.Random(5)
    values = [rng.randrange(10**9) for _ in range(500)]
    run = write_values(dev, values)
    out, stats = InMemorySorter(dev).sort_run(run)
    assert read_values(dev, out) == sorted(values)
    assert stats.ios_used == 2 * -(-500 // B)
    assert InMemorySorter(dev).predicted_per_key_cost(10) == 2


def test_stats_per_key_cost_exact():
    dev = make_device()
    run = write_values(dev, [2, 1])
    _, stats = MergeSorter(dev).sort_run(run)
    assert stats.per_key_block_cost == Fraction(stats.ios_used * B, 2)


def test_run_slicer_adopts_aligned_blocks():
    dev = make_device()
    values = list(range(5 * B))
    run = write_values(dev, values)
    before = dev.report().total
    slicer = RunSlicer(dev, run, "rebuild")
    blocks, count, first = slicer.take_chain(2 * B, skip_signals=False)
    assert count == 2 * B and first[0] == 0
    # adoption costs only the 1-read min probe
    assert dev.report().total - before == 1
    blocks2, count2, first2 = slicer.take_chain(3 * B, skip_signals=False)
    assert count2 == 3 * B and first2[0] == 2 * B
    slicer.finish()


def test_run_slicer_ragged_boundary_repacks():
    dev = make_device()
    run = write_values(dev, list(range(3 * B)))
    slicer = RunSlicer(dev, run, "rebuild")
    blocks, count, first = slicer.take_chain(B + 3, skip_signals=False)
    assert count == B + 3
    rest = slicer.take_records(slicer.remaining)
    assert [r[0] for r in rest] == list(range(B + 3, 3 * B))


def test_run_slicer_extends_past_delete_signals():
    dev = make_device()
    w = RunWriter(dev, "rebuild")
    recs = [(i, i, 0) for i in range(B)]
    recs[5] = (4, 100, 1)  # signal right where a cut would land
    recs.sort()
    w.extend(recs)
    run = w.close()
    slicer = RunSlicer(dev, run, "rebuild")
    blocks, count, first = slicer.take_chain(5)
    # the cut after 5 records would split the signal from its insert
    assert count == 6
    slicer.finish()


def test_free_run_releases_blocks():
    dev = make_device()
    run = write_values(dev, range(100))
    free_run(dev, run)
    assert dev.allocated_blocks == 0
