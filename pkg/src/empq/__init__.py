"""External-memory priority queue over a pluggable sorting black box."""

from .io_sim import BlockDevice, DeviceConfig, IoReport, IoSimError
from .navlist import BufferChain, NavEntry, NavList, Representative, flush_via
from .pq_core import (
    InvariantError,
    PQConfig,
    PriorityQueue,
    WorkloadContractError,
    compute_layer_plan,
    compute_top_level,
)
from .sorter import DiskRun, InMemorySorter, MergeSorter, SortStats

__version__ = "0.1.0"

__all__ = [
    "BlockDevice",
    "BufferChain",
    "DeviceConfig",
    "DiskRun",
    "InMemorySorter",
    "InvariantError",
    "IoReport",
    "IoSimError",
    "MergeSorter",
    "NavEntry",
    "NavList",
    "PQConfig",
    "PriorityQueue",
    "Representative",
    "SortStats",
    "WorkloadContractError",
    "compute_layer_plan",
    "compute_top_level",
    "flush_via",
]
