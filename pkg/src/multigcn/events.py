"""Deterministic discrete-event kernel.

Events are ordered by (time, kind rank, node id, insertion sequence), which
is a total order, so two runs with identical inputs replay identically.
"""

from __future__ import annotations

import heapq
from enum import IntEnum
from typing import Any, Callable


class EventKind(IntEnum):
    # Tie-break rank among events at the same cycle: resources are released
    # before they are claimed again.
    LINK_FREE = 0
    PACKET_ARRIVAL = 1
    END_SIGNAL_RECEIVED = 2
    DRAM_COMPLETE = 3
    COMPUTE_COMPLETE = 4
    ROUND_START = 5
    STRESS_TICK = 6


class EventQueue:
    def __init__(self) -> None:
        self._heap: list[tuple[int, int, int, int, bool, Callable[..., Any], tuple]] = []
        self._seq = 0
        self.now = 0
        self.live = 0  # pending non-daemon events
        self.processed = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: int, kind: EventKind, node: int, fn: Callable[..., Any], *args: Any,
                 daemon: bool = False) -> None:
        if time < self.now:
            raise ValueError(f"event scheduled in the past ({time} < {self.now})")
        self._seq += 1
        if not daemon:
            self.live += 1
        heapq.heappush(self._heap, (time, int(kind), node, self._seq, daemon, fn, args))

    def run(self, until: int | None = None) -> None:
        heap = self._heap
        pop = heapq.heappop
        while heap:
            if until is not None and heap[0][0] > until:
                break
            time, _, _, _, daemon, fn, args = pop(heap)
            if not daemon:
                self.live -= 1
            self.now = time
            self.processed += 1
            fn(*args)
