"""Timing and capacity model of one processing node.

The compute unit is modeled at vector granularity: a job occupies some of
the node's systolic arrays for a closed-form number of cycles. DRAM is a
single FIFO bandwidth pipe with a fixed access latency.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .errors import ConfigError

KiB = 1024
MiB = 1024 * 1024


@dataclass(frozen=True)
class NodeConfig:
    arrays: int = 8
    lanes_per_array: int = 128
    dram_bandwidth_bytes_per_cycle: float = 256.0
    dram_access_granularity: int = 64
    dram_latency_cycles: int = 100
    edge_buffer_bytes: int = 128 * KiB
    agg_buffer_bytes: int = 1 * MiB
    weight_buffer_bytes: int = 2 * MiB
    combination_buffer_bytes: int = 256 * KiB
    routing_buffer_bytes: int = 3 * MiB // 2
    send_buffer_bytes: int = 512 * KiB
    loader_buffer_bytes: int = 896 * KiB

    def __post_init__(self) -> None:
        for name in ("arrays", "lanes_per_array", "dram_access_granularity", "edge_buffer_bytes",
                     "agg_buffer_bytes", "weight_buffer_bytes", "combination_buffer_bytes",
                     "routing_buffer_bytes", "send_buffer_bytes", "loader_buffer_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", key=name)
        if self.dram_bandwidth_bytes_per_cycle <= 0:
            raise ConfigError("must be positive", key="dram_bandwidth")
        if self.dram_latency_cycles < 0:
            raise ConfigError("must be non-negative", key="dram_latency")

    @property
    def peak_ops_per_cycle(self) -> int:
        # a MAC counts as two operations
        return self.arrays * self.lanes_per_array * 2


AGG_PIPELINE_FILL = 3


def aggregate_cost(feature_len: int, edges: int, arrays: int, lanes: int) -> int:
    """Cycles to reduce ``edges`` neighbor vectors of ``feature_len`` elements."""
    if edges <= 0:
        return 0
    return -(-edges * feature_len // (arrays * lanes)) + AGG_PIPELINE_FILL


def combine_cost(f_in: int, f_out: int, arrays: int, lanes: int, vertices: int = 1) -> int:
    """Cycles to push ``vertices`` aggregated vectors through the weight matrix.

    The matrix-vector products stream back to back, so the fill term
    ``f_in + arrays * lanes`` is paid once per batch.
    """
    if vertices <= 0:
        return 0
    macs = 2 * f_in * f_out * vertices
    return -(-macs // (2 * arrays * lanes)) + f_in + arrays * lanes


def schedule_arrays(agg_backlog_ops: int, comb_backlog_ops: int, arrays: int = 8) -> tuple[int, int]:
    """Split the arrays between aggregation and combination by backlog size."""
    if agg_backlog_ops <= 0 and comb_backlog_ops <= 0:
        return arrays, 0
    if comb_backlog_ops <= 0:
        return arrays, 0
    if agg_backlog_ops <= 0:
        return 0, arrays
    a_agg = math.floor(arrays * agg_backlog_ops / (agg_backlog_ops + comb_backlog_ops) + 0.5)
    a_agg = min(max(a_agg, 1), arrays - 1) if arrays > 1 else 1
    return a_agg, arrays - a_agg


class DramDirection(str, Enum):
    READ = "read"
    WRITE = "write"


class DramPurpose(str, Enum):
    FEATURE_LOAD = "feature-load"
    TOPOLOGY_LOAD = "topology-load"
    WEIGHT_LOAD = "weight-load"
    RESULT_WRITE = "result-write"
    REPLICA_SPILL = "replica-spill"
    REPLICA_RELOAD = "replica-reload"


REDUNDANT_PURPOSES = frozenset({DramPurpose.REPLICA_SPILL, DramPurpose.REPLICA_RELOAD})


class DramPipe:
    def __init__(self, bandwidth_bytes_per_cycle: float, granularity: int = 64, latency: int = 100) -> None:
        self.bandwidth = bandwidth_bytes_per_cycle
        self.granularity = granularity
        self.latency = latency
        self.pipe_free = 0
        self.billed_bytes = 0
        self.requested_bytes = 0
        self.busy_cycles = 0

    def billed(self, nbytes: int) -> int:
        g = self.granularity
        return -(-nbytes // g) * g

    def transfer(self, nbytes: int, now: int) -> tuple[int, int]:
        """Queue a request; returns (completion cycle, billed bytes)."""
        if nbytes < 1:
            raise ValueError("DRAM request must move at least one byte")
        billed = self.billed(nbytes)
        service = math.ceil(billed / self.bandwidth)
        start = max(now, self.pipe_free)
        self.pipe_free = start + service
        self.billed_bytes += billed
        self.requested_bytes += nbytes
        self.busy_cycles += service
        return self.pipe_free + self.latency, billed


def dram_transfer(pipe: DramPipe, nbytes: int, now: int) -> int:
    return pipe.transfer(nbytes, now)[0]


class ReserveResult(str, Enum):
    RESIDENT = "resident"
    SPILLED = "spilled"
    STALLED = "stalled"


@dataclass
class BufferEntry:
    nbytes: int
    resident: bool = True
    pins: int = 0
    refcount: int = 0


@dataclass
class AggregationBuffer:
    """Replica and partial-result storage of one node.

    With ``spill`` set, space is made by writing least-recently-used
    unpinned entries to DRAM; the write-backs are collected in
    ``writebacks`` for the caller to bill. Without it a request that does
    not fit stalls instead.
    """

    capacity: int
    spill: bool
    used: int = 0
    peak: int = 0
    entries: dict = field(default_factory=dict)
    lru: OrderedDict = field(default_factory=OrderedDict)
    writebacks: list = field(default_factory=list)

    def free(self) -> int:
        return self.capacity - self.used

    def _claim(self, nbytes: int) -> None:
        self.used += nbytes
        if self.used > self.capacity:
            raise AssertionError("aggregation buffer over capacity")
        if self.used > self.peak:
            self.peak = self.used

    def _make_room(self, nbytes: int) -> bool:
        if not self.spill:
            return self.free() >= nbytes
        while self.free() < nbytes and self.lru:
            key, _ = self.lru.popitem(last=False)
            e = self.entries[key]
            e.resident = False
            self.used -= e.nbytes
            self.writebacks.append((key, e.nbytes))
        return self.free() >= nbytes

    def reserve_replica(self, key, nbytes: int, refcount: int = 1, limit: int | None = None) -> ReserveResult:
        if nbytes > self.capacity:
            raise ConfigError(f"replica of {nbytes} bytes exceeds aggregation buffer", key="agg_buffer")
        if key in self.entries:
            raise KeyError(f"duplicate buffer key {key!r}")
        if not self.spill:
            cap = self.capacity if limit is None else limit
            if self.used + nbytes > cap:
                return ReserveResult.STALLED
            self._claim(nbytes)
            self.entries[key] = BufferEntry(nbytes, refcount=refcount)
            self.lru[key] = None
            return ReserveResult.RESIDENT
        if self._make_room(nbytes):
            self._claim(nbytes)
            self.entries[key] = BufferEntry(nbytes, refcount=refcount)
            self.lru[key] = None
            return ReserveResult.RESIDENT
        self.entries[key] = BufferEntry(nbytes, resident=False, refcount=refcount)
        self.writebacks.append((key, nbytes))
        return ReserveResult.SPILLED

    def fits(self, nbytes: int, limit: int | None = None) -> bool:
        cap = self.capacity if limit is None else limit
        return self.used + nbytes <= cap

    def add_resident(self, key, nbytes: int) -> None:
        """Allocate an entry that must be resident (caller checked space)."""
        if key in self.entries:
            raise KeyError(f"duplicate buffer key {key!r}")
        if self.spill and not self._make_room(nbytes):
            raise AssertionError("no evictable space for a pinned allocation")
        self._claim(nbytes)
        self.entries[key] = BufferEntry(nbytes)
        self.lru[key] = None

    def __contains__(self, key) -> bool:
        return key in self.entries

    def pin(self, keys) -> list:
        """Pin entries for a running job; returns keys that must be reloaded."""
        missing = [k for k in keys if not self.entries[k].resident]
        need = sum(self.entries[k].nbytes for k in missing)
        for k in keys:
            e = self.entries[k]
            if e.pins == 0 and e.resident:
                self.lru.pop(k, None)
            e.pins += 1
        if missing:
            if not self._make_room(need):
                raise AssertionError("pinned working set exceeds aggregation buffer")
            self._claim(need)
            for k in missing:
                self.entries[k].resident = True
        return missing

    def unpin(self, key) -> None:
        e = self.entries[key]
        e.pins -= 1
        if e.pins == 0 and e.resident:
            self.lru[key] = None
            self.lru.move_to_end(key)

    def release(self, key) -> None:
        e = self.entries.pop(key)
        self.lru.pop(key, None)
        if e.resident:
            self.used -= e.nbytes

    def take_writebacks(self) -> list:
        out, self.writebacks = self.writebacks, []
        return out
