"""Event-driven simulation of a multi-node GCN layer under one message-passing model.

Every node runs the same pipeline. A loader streams local vertices (feature
plus outgoing task lists) from DRAM. The sender turns each loaded vertex
into packets, and the receive side stages arriving replicas in the
aggregation buffer. A compute unit splits its arrays between aggregation
and combination jobs. Work proceeds in rounds; a round closes on a node
once the node has finished its own part and heard an end signal from every
other node. Models without rounds run the whole layer as a single round.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from .errors import ConfigError, SimulationDeadlock
from .events import EventKind, EventQueue
from .graph import CsrGraph
from .metrics import MetricsReport, NodeCounters, RateParams, apply_rates, sum_counters
from .node import (AggregationBuffer, DramPipe, NodeConfig, ReserveResult, aggregate_cost, combine_cost,
                   schedule_arrays)
from .partition import (DEFAULT_ALPHA, DEFAULT_MAX_PACKET_NEIGHBORS, PartitionPlan, build_partition_plan,
                        compute_field_widths, flatten_plan, widths_for_rounds)
from .torus import OFFSET_BYTES, NID_BYTES, VID_BYTES, Network, Packet, PacketKind, TorusGeom

ELEMENT_BYTES = 4


class Model(str, Enum):
    OPPE = "OPPE"
    OPPR = "OPPR"
    TMM = "TMM"
    SREM = "SREM"
    TMM_SREM = "TMM+SREM"

    @property
    def uses_rounds(self) -> bool:
        return self in (Model.SREM, Model.TMM_SREM)

    @property
    def multicast(self) -> bool:
        return self in (Model.TMM, Model.TMM_SREM)

    @classmethod
    def parse(cls, name: str) -> Model:
        key = name.strip().upper().replace("_", "+")
        for m in cls:
            if m.value == key:
                return m
        raise ConfigError(f"unknown model {name!r}", key="model")


@dataclass(frozen=True)
class SimConfig:
    geom: TorusGeom = TorusGeom(4, 4)
    node: NodeConfig = NodeConfig()
    link_bandwidth_bytes_per_cycle: float = 150.0
    link_latency_cycles: int = 500
    model: Model = Model.TMM_SREM
    rounds_override: int | None = None
    seed: int = 0
    layers: int = 1
    alpha: float = DEFAULT_ALPHA
    max_packet_neighbors: int = DEFAULT_MAX_PACKET_NEIGHBORS
    stress_period: int = 64
    injection_fraction: float = 0.5
    future_fraction: float = 0.5
    network_pj_per_bit: float = 8.0
    dram_pj_per_bit: float = 7.0
    compute_pj_per_op: float = 0.0
    trace: bool = False
    round_log: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.model, Model):
            object.__setattr__(self, "model", Model.parse(self.model))
        if self.layers < 1:
            raise ConfigError("layers must be >= 1", key="layers")
        if self.link_bandwidth_bytes_per_cycle <= 0:
            raise ConfigError("link bandwidth must be positive", key="network_bandwidth")
        if self.link_latency_cycles < 0:
            raise ConfigError("link latency must be non-negative", key="link_latency")

    def with_(self, **changes: Any) -> SimConfig:
        return replace(self, **changes)


def plan_for(config: SimConfig, graph: CsrGraph) -> PartitionPlan:
    """Partition ``graph`` for ``config``; round-free models get a single round."""
    n = config.geom.num_nodes
    M = config.node.agg_buffer_bytes
    S = graph.feature_len_in * ELEMENT_BYTES
    if config.rounds_override is not None:
        widths = widths_for_rounds(n, graph.num_vertices, config.rounds_override, M, S, config.alpha)
    else:
        widths = compute_field_widths(n, M, S, config.alpha)
    plan = build_partition_plan(graph, widths, config.max_packet_neighbors)
    if not config.model.uses_rounds:
        plan = flatten_plan(plan)
    return plan


@dataclass(frozen=True)
class _Item:
    """One local vertex's work in one round."""

    vid: int
    self_term: bool
    local_nbrs: tuple[int, ...]
    units: tuple[tuple, ...]  # (dest_nodes, offsets, neighbors) per packet
    topo_bytes: int


@dataclass
class _NodeState:
    nid: int
    buf: AggregationBuffer
    dram: DramPipe
    counters: NodeCounters = field(default_factory=NodeCounters)
    # sender
    sending: int | None = None
    sent: int = -1
    items: tuple = ()
    load_idx: int = 0
    loaded: int = 0
    proc_idx: int = 0
    step: int = 0
    pending_pkt: Packet | None = None
    loader_used: int = 0
    blocked: bool = False
    advancing: bool = False
    # rounds
    closed: int = -1
    close_time: int = 0
    done: set = field(default_factory=set)
    end_counts: dict = field(default_factory=dict)
    pending: dict = field(default_factory=dict)
    unalloc: dict = field(default_factory=dict)
    signals: deque = field(default_factory=deque)
    # receive and compute
    remaining: dict = field(default_factory=dict)
    agg_remote: deque = field(default_factory=deque)
    agg_local: deque = field(default_factory=deque)
    agg_staged: deque = field(default_factory=deque)
    agg_pinned: int = 0  # bytes pinned by staged and running aggregations
    agg_backlog_ops: int = 0
    comb_ready: deque = field(default_factory=deque)
    arrays_in_use: int = 0
    agg_busy: bool = False
    comb_busy: bool = False
    weights_layer: int = -1


class Simulator:
    def __init__(self, config: SimConfig, graph: CsrGraph, plan: PartitionPlan | None = None) -> None:
        if plan is None:
            plan = plan_for(config, graph)
        if plan.num_nodes != config.geom.num_nodes:
            raise ConfigError("plan and torus disagree on node count", key="nodes")
        if not config.model.uses_rounds and plan.rounds != 1:
            plan = flatten_plan(plan)
        self.config = config
        self.graph = graph
        self.plan = plan
        self.geom = config.geom
        self.N = config.geom.num_nodes
        self.R = plan.rounds
        self.G = plan.rounds * config.layers
        self.model = config.model
        nc = config.node
        self.arrays = nc.arrays
        self.lanes = nc.lanes_per_array
        self.f_in = [graph.feature_len_in] + [graph.feature_len_out] * (config.layers - 1)
        self.f_out = [graph.feature_len_out] * config.layers
        # Round-based execution keeps every replica on chip; other models (and
        # round counts forced past the buffer rule) fall back to LRU spill.
        self.spill = not (config.model.uses_rounds and plan.widths.fits_buffer)
        self.M = nc.agg_buffer_bytes
        # Spill mode stages several aggregation chunks ahead so their reloads
        # overlap; together the staged chunks pin at most half the buffer.
        self.stage_depth = 8 if self.spill else 1
        self.stage_budget = self.M // (2 * self.stage_depth) if self.spill else 1 << 62
        self.events = EventQueue()
        self.net = Network(
            self.geom, self.events, self,
            link_bandwidth=config.link_bandwidth_bytes_per_cycle,
            link_latency=config.link_latency_cycles,
            buffer_bytes=nc.routing_buffer_bytes,
            stress_period=config.stress_period,
            injection_fraction=config.injection_fraction,
            future_fraction=config.future_fraction,
        )
        self.nodes = [
            _NodeState(i, AggregationBuffer(nc.agg_buffer_bytes, self.spill),
                       DramPipe(nc.dram_bandwidth_bytes_per_cycle, nc.dram_access_granularity,
                                nc.dram_latency_cycles))
            for i in range(self.N)
        ]
        self.trace: list[tuple] = []
        self.round_log: list[dict] = []
        self._seen: set[tuple[int, int, int]] = set()
        self._uid = 0
        self._build_items()

    # -- static work lists ------------------------------------------------------

    def _build_items(self) -> None:
        w = self.plan.widths
        shift = w.n + w.x
        self.round_vertices: dict[tuple[int, int], int] = {}
        own: dict[tuple[int, int], set[int]] = {}
        for node, order in enumerate(self.plan.combine_order):
            for v in order:
                key = (v >> shift, node)
                own.setdefault(key, set()).add(v)
                self.round_vertices[key] = self.round_vertices.get(key, 0) + 1
        self.items: dict[tuple[int, int], tuple[_Item, ...]] = {}
        keys = set(own) | set(self.plan.tasks)
        for key in keys:
            r, node = key
            by_src: dict[int, list] = {}
            for t in self.plan.tasks_for(r, node):
                by_src.setdefault(t.source_vid, []).append(t)
            selfs = own.get(key, set())
            vids = sorted(set(by_src) | selfs, key=lambda v: v >> w.n)
            items = []
            for v in vids:
                tasks = by_src.get(v, [])
                local: list[int] = []
                topo = 0
                units: list[tuple] = []
                per_node: dict[int, list[int]] = {}
                for t in tasks:
                    nd = len(t.dest_nodes)
                    topo += NID_BYTES * nd + OFFSET_BYTES * (nd + 1) + VID_BYTES * len(t.neighbors)
                    remote_idx = []
                    for i, d in enumerate(t.dest_nodes):
                        nbrs = t.neighbors_at(i)
                        if d == node:
                            local.extend(nbrs)
                        else:
                            remote_idx.append(i)
                            per_node.setdefault(d, []).extend(nbrs)
                    if self.model.multicast and remote_idx:
                        dn, offs, nb = [], [0], []
                        for i in remote_idx:
                            dn.append(t.dest_nodes[i])
                            nb.extend(t.neighbors_at(i))
                            offs.append(len(nb))
                        units.append((tuple(dn), tuple(offs), tuple(nb)))
                if not self.model.multicast:
                    for d in sorted(per_node):
                        nbrs = per_node[d]
                        if self.model == Model.OPPR:
                            units.append(((d,), (0, len(nbrs)), tuple(nbrs)))
                        else:
                            units.extend(((d,), (0, 1), (u,)) for u in nbrs)
                items.append(_Item(v, v in selfs, tuple(local), tuple(units), topo))
            self.items[key] = tuple(items)

    # -- helpers ------------------------------------------------------------------

    def _layer(self, g: int) -> int:
        return g // self.R

    def _S(self, g: int) -> int:
        return self.f_in[g // self.R] * ELEMENT_BYTES

    def _dram(self, st: _NodeState, nbytes: int, write: bool, purpose: str) -> int:
        done, billed = st.dram.transfer(nbytes, self.events.now)
        c = st.counters
        if write:
            c.dram_write_bytes += billed
        else:
            c.dram_read_bytes += billed
        if purpose == "replica-spill":
            c.replica_spill_bytes += billed
            c.redundant_dram_bytes += billed
        elif purpose == "replica-reload":
            c.replica_reload_bytes += billed
            c.redundant_dram_bytes += billed
        if self.config.trace:
            self.trace.append(("dram", self.events.now, st.nid, "write" if write else "read", purpose, billed))
        return done

    def _drain_writebacks(self, st: _NodeState) -> None:
        for _, nbytes in st.buf.take_writebacks():
            self._dram(st, nbytes, True, "replica-spill")

    def _protected(self, st: _NodeState) -> int:
        g = st.closed + 1
        while g in st.done:
            g += 1
        return g

    def _unalloc(self, st: _NodeState, g: int) -> int:
        if g not in st.unalloc:
            st.unalloc[g] = self.round_vertices.get((g % self.R, st.nid), 0)
        return st.unalloc[g]

    def _pending(self, st: _NodeState, g: int) -> int:
        if g not in st.pending:
            st.pending[g] = self.round_vertices.get((g % self.R, st.nid), 0)
        return st.pending[g]

    def _admission_limit(self, st: _NodeState, g: int) -> int:
        p = self._protected(st)
        if g <= p:
            return self.M
        reserve = self._unalloc(st, p) * self._S(p) + self._S(p)
        return self.M - reserve

    def _log_round(self, st: _NodeState, g: int, event: str) -> None:
        if not self.config.round_log:
            return
        self.round_log.append({
            "cycle": self.events.now, "node": st.nid, "round": g, "event": event,
            "sent_all_local": st.sent >= g,
            "received_end_signals": st.end_counts.get(g, 0),
            "aggregations_pending": len(st.agg_remote) + len(st.agg_local) + int(st.agg_busy),
            "combinations_pending": self._pending(st, g),
        })

    # -- network host interface ---------------------------------------------------

    def protected_round(self, node: int) -> int | None:
        return self._protected(self.nodes[node]) if self.model.uses_rounds else None

    def on_hop(self, time: int, src: int, dst: int, pkt: Packet) -> None:
        c = self.nodes[src].counters
        first = not pkt.hopped
        pkt.hopped = True
        if pkt.kind == PacketKind.END_SIGNAL:
            c.control_bytes_hops += pkt.size
            c.control_packet_count += first
        else:
            payload = pkt.payload_bytes
            c.payload_bytes_hops += payload
            c.metadata_bytes_hops += pkt.size - payload
            c.packet_count += first
        if self.config.trace:
            self.trace.append(("hop", time, src, dst, pkt.kind.value, pkt.pid, pkt.source_vid, pkt.layer,
                               pkt.round_key, pkt.size, pkt.payload_bytes))

    def on_arrival(self, time: int, node: int, pkt: Packet) -> None:
        if pkt.kind == PacketKind.END_SIGNAL:
            return
        c = self.nodes[node].counters
        c.total_payload_arrivals += 1
        key = (pkt.source_vid, pkt.layer, node)
        if key in self._seen:
            c.redundant_payload_arrivals += 1
        else:
            self._seen.add(key)

    def accept_local(self, node: int, pkt: Packet) -> bool:
        st = self.nodes[node]
        if pkt.kind == PacketKind.END_SIGNAL:
            st.end_counts[pkt.round_key] = st.end_counts.get(pkt.round_key, 0) + 1
            self._try_close(st)
            return True
        if pkt.hops != self.geom.distance(pkt.origin, node):
            raise AssertionError(f"packet {pkt.pid} took {pkt.hops} hops over distance "
                                 f"{self.geom.distance(pkt.origin, node)}")
        if not self._accept_share(st, pkt.round_key, pkt.neighbors, None, remote=True):
            return False
        if self.config.trace:
            self.trace.append(("deliver", self.events.now, node, pkt.pid, pkt.source_vid, pkt.layer,
                               pkt.round_key, len(pkt.neighbors)))
        return True

    def on_space(self, node: int) -> None:
        st = self.nodes[node]
        if st.signals:
            self._flush_signals(st)
        if st.blocked:
            self._advance(st)

    # -- receive ------------------------------------------------------------------

    def _accept_share(self, st: _NodeState, g: int, nbrs: tuple[int, ...], self_vid: int | None,
                      remote: bool) -> bool:
        S = self._S(g)
        buf = st.buf
        targets = list(nbrs)
        if self_vid is not None:
            targets.append(self_vid)
        new = [v for v in dict.fromkeys(targets) if v not in st.remaining]
        if not self.spill:
            need = (S if nbrs else 0) + S * len(new)
            if not buf.fits(need, self._admission_limit(st, g)):
                return False
        rkey = None
        if nbrs:
            self._uid += 1
            rkey = ("r", self._uid)
            res = buf.reserve_replica(rkey, S, refcount=len(nbrs))
            if res == ReserveResult.STALLED:
                raise AssertionError("replica admission stalled after a successful fit check")
        for v in new:
            buf.add_resident(("p", v), S)
            st.remaining[v] = self.plan.dest_counts[v] + 1
        st.unalloc[g] = self._unalloc(st, g) - len(new)
        self._drain_writebacks(st)
        if self_vid is not None:
            self._contribute(st, g, self_vid)
        if nbrs:
            (st.agg_remote if remote else st.agg_local).append([g, rkey, nbrs])
            st.agg_backlog_ops += len(nbrs) * self.f_in[self._layer(g)]
        self._try_compute(st)
        return True

    def _contribute(self, st: _NodeState, g: int, v: int) -> None:
        left = st.remaining[v] - 1
        st.remaining[v] = left
        if left == 0:
            st.comb_ready.append((g, v))

    # -- compute ------------------------------------------------------------------

    def _stage(self, st: _NodeState) -> None:
        """Move queued aggregation work into the staging area, issuing reloads early."""
        while len(st.agg_staged) < self.stage_depth and (st.agg_remote or st.agg_local):
            q = st.agg_remote if st.agg_remote else st.agg_local
            entry = q[0]
            g, rkey, nbrs = entry
            S = self._S(g)
            k = max(1, self.stage_budget // S - 1)
            if self.spill and st.agg_pinned and st.agg_pinned + (min(k, len(nbrs)) + 1) * S > self.M // 2:
                break
            if len(nbrs) > k:
                entry[2] = nbrs[k:]
                nbrs = nbrs[:k]
            else:
                q.popleft()
            keys: list = []
            ready = self.events.now
            if self.spill:
                keys = [rkey] + [("p", v) for v in nbrs]
                st.agg_pinned += len(keys) * S
                ready = self._pin(st, keys)
                if ready > self.events.now:
                    self.events.schedule(ready, EventKind.DRAM_COMPLETE, st.nid, self._try_compute, st)
            st.agg_staged.append((ready, g, rkey, nbrs, keys))

    def _try_compute(self, st: _NodeState) -> None:
        self._stage(st)
        free = self.arrays - st.arrays_in_use
        if free <= 0:
            return
        agg_ok = bool(st.agg_staged) and st.agg_staged[0][0] <= self.events.now and not st.agg_busy
        comb_ok = (bool(st.comb_ready) and not st.comb_busy
                   and st.weights_layer >= self._layer(st.comb_ready[0][0]))
        if not (agg_ok or comb_ok):
            return
        comb_ops = 0
        if st.comb_ready:
            layer = self._layer(st.comb_ready[0][0])
            comb_ops = len(st.comb_ready) * 2 * self.f_in[layer] * self.f_out[layer]
        da, dc = schedule_arrays(st.agg_backlog_ops, comb_ops, self.arrays)
        if agg_ok:
            _, g, _, nbrs, _ = st.agg_staged[0]
            # more arrays than lane-groups of work would sit idle
            need = -(-len(nbrs) * self.f_in[self._layer(g)] // self.lanes)
            a = min(max(da, 1), free, need)
            self._start_aggregate(st, a)
            free -= a
        if comb_ok and free > 0:
            self._start_combine(st, min(max(dc, 1), free))

    def _pin(self, st: _NodeState, keys: list) -> int:
        """Pin keys for a job (spill mode); returns the cycle its data is on chip."""
        ready = self.events.now
        missing = st.buf.pin(keys)
        self._drain_writebacks(st)
        for k in missing:
            ready = max(ready, self._dram(st, st.buf.entries[k].nbytes, False, "replica-reload"))
        return ready

    def _start_aggregate(self, st: _NodeState, arrays: int) -> None:
        _, g, rkey, nbrs, keys = st.agg_staged.popleft()
        f = self.f_in[self._layer(g)]
        st.agg_backlog_ops -= len(nbrs) * f
        start = self.events.now
        dur = aggregate_cost(f, len(nbrs), arrays, self.lanes)
        st.agg_busy = True
        st.arrays_in_use += arrays
        self.events.schedule(start + dur, EventKind.COMPUTE_COMPLETE, st.nid, self._aggregate_done,
                             st, g, rkey, nbrs, keys, arrays, start, start + dur)

    def _aggregate_done(self, st, g, rkey, nbrs, keys, arrays, start, end) -> None:
        f = self.f_in[self._layer(g)]
        for k in keys:
            st.buf.unpin(k)
        st.agg_pinned -= len(keys) * self._S(g)
        entry = st.buf.entries[rkey]
        entry.refcount -= len(nbrs)
        if entry.refcount == 0:
            st.buf.release(rkey)
        for v in nbrs:
            self._contribute(st, g, v)
        ops = len(nbrs) * f
        c = st.counters
        c.aggregations += len(nbrs)
        c.compute_ops += ops
        c.compute_busy_array_cycles += (end - start) * arrays
        if self.config.trace:
            self.trace.append(("compute", start, end, st.nid, "aggregate", arrays, ops, len(nbrs), 0))
        st.agg_busy = False
        st.arrays_in_use -= arrays
        self._buffer_freed(st)

    def _start_combine(self, st: _NodeState, arrays: int) -> None:
        g0 = st.comb_ready[0][0]
        layer = self._layer(g0)
        f_in, f_out = self.f_in[layer], self.f_out[layer]
        S = f_in * ELEMENT_BYTES
        cap = max(1, self.config.node.combination_buffer_bytes // (f_out * ELEMENT_BYTES))
        if self.spill:
            cap = min(cap, max(1, (self.M // 4) // S))
        batch = []
        while st.comb_ready and len(batch) < cap and self._layer(st.comb_ready[0][0]) == layer:
            batch.append(st.comb_ready.popleft())
        keys = [("p", v) for _, v in batch]
        start = self._pin(st, keys) if self.spill else self.events.now
        dur = combine_cost(f_in, f_out, arrays, self.lanes, len(batch))
        st.comb_busy = True
        st.arrays_in_use += arrays
        self.events.schedule(start + dur, EventKind.COMPUTE_COMPLETE, st.nid, self._combine_done,
                             st, batch, keys, arrays, start, start + dur, layer)

    def _combine_done(self, st, batch, keys, arrays, start, end, layer) -> None:
        f_in, f_out = self.f_in[layer], self.f_out[layer]
        for k in keys:
            if self.spill:
                st.buf.unpin(k)
            st.buf.release(k)
        for _, v in batch:
            del st.remaining[v]
        ops = 2 * f_in * f_out * len(batch)
        c = st.counters
        c.combinations += len(batch)
        c.compute_ops += ops
        c.compute_busy_array_cycles += (end - start) * arrays
        if self.config.trace:
            self.trace.append(("compute", start, end, st.nid, "combine", arrays, ops, 0, len(batch)))
        st.comb_busy = False
        st.arrays_in_use -= arrays
        done = self._dram(st, len(batch) * f_out * ELEMENT_BYTES, True, "result-write")
        self.events.schedule(done, EventKind.DRAM_COMPLETE, st.nid, self._results_written, st, batch)
        self._buffer_freed(st)

    def _results_written(self, st: _NodeState, batch: list) -> None:
        for g, _ in batch:
            st.pending[g] = self._pending(st, g) - 1
        for g in sorted({g for g, _ in batch}):
            self._check_done(st, g)

    def _buffer_freed(self, st: _NodeState) -> None:
        self.net.retry_local(st.nid)
        if st.blocked:
            self._advance(st)
        self._try_compute(st)

    # -- send ---------------------------------------------------------------------

    def _maybe_start_next(self, st: _NodeState) -> None:
        g = st.sent + 1
        if st.sending is not None or g >= self.G:
            return
        if st.closed < g - 2:
            return
        if g % self.R == 0 and g > 0 and st.closed < g - 1:
            return
        st.sending = g
        self.events.schedule(self.events.now, EventKind.ROUND_START, st.nid, self._begin_round, st, g)

    def _begin_round(self, st: _NodeState, g: int) -> None:
        layer = self._layer(g)
        st.items = self.items.get((g % self.R, st.nid), ())
        st.load_idx = st.loaded = st.proc_idx = st.step = 0
        self._log_round(st, g, "start")
        if g % self.R == 0:
            wbytes = self.f_in[layer] * self.f_out[layer] * ELEMENT_BYTES
            done = self._dram(st, wbytes, False, "weight-load")
            self.events.schedule(done, EventKind.DRAM_COMPLETE, st.nid, self._weights_loaded, st, layer)
        self._kick_loader(st)
        self._advance(st)

    def _weights_loaded(self, st: _NodeState, layer: int) -> None:
        st.weights_layer = layer
        self._try_compute(st)

    def _item_bytes(self, g: int, item: _Item) -> int:
        return self._S(g) + item.topo_bytes

    def _kick_loader(self, st: _NodeState) -> None:
        g = st.sending
        cap = self.config.node.loader_buffer_bytes
        while st.load_idx < len(st.items):
            item = st.items[st.load_idx]
            b = self._item_bytes(g, item)
            if st.loader_used and st.loader_used + b > cap:
                break
            st.loader_used += b
            done = self._dram(st, self._S(g), False, "feature-load")
            if item.topo_bytes:
                done = max(done, self._dram(st, item.topo_bytes, False, "topology-load"))
            self.events.schedule(done, EventKind.DRAM_COMPLETE, st.nid, self._item_loaded, st)
            st.load_idx += 1

    def _item_loaded(self, st: _NodeState) -> None:
        st.loaded += 1
        self._advance(st)

    def _advance(self, st: _NodeState) -> None:
        if st.advancing or st.sending is None:
            return
        st.advancing = True
        st.blocked = False
        try:
            g = st.sending
            layer = self._layer(g)
            while st.proc_idx < st.loaded:
                item = st.items[st.proc_idx]
                if st.step == 0:
                    if item.self_term or item.local_nbrs:
                        ok = self._accept_share(st, g, item.local_nbrs, item.vid if item.self_term else None,
                                                remote=False)
                        if not ok:
                            st.blocked = True
                            return
                    st.step = 1
                while st.step <= len(item.units):
                    pkt = st.pending_pkt
                    if pkt is None:
                        dn, offs, nb = item.units[st.step - 1]
                        kind = PacketKind.MULTICAST if self.model.multicast else PacketKind.UNICAST
                        pkt = Packet(self.net.new_pid(), kind, dn[0], item.vid, g, layer, dn, offs, nb,
                                     self.f_in[layer], st.nid)
                        st.pending_pkt = pkt
                    if not self.net.inject(st.nid, pkt):
                        st.blocked = True
                        return
                    st.pending_pkt = None
                    st.step += 1
                st.proc_idx += 1
                st.step = 0
                st.loader_used -= self._item_bytes(g, item)
                self._kick_loader(st)
            if st.proc_idx == len(st.items):
                st.sending = None
                st.sent = g
                self._check_done(st, g)
                self._maybe_start_next(st)
        finally:
            st.advancing = False

    # -- synchronization ----------------------------------------------------------

    def _check_done(self, st: _NodeState, g: int) -> None:
        if g in st.done or st.sent < g or self._pending(st, g) > 0:
            return
        st.done.add(g)
        for k in range(self.N):
            if k != st.nid:
                st.signals.append((g, k))
        self._flush_signals(st)
        self._try_close(st)
        if self.model.uses_rounds:
            # the protected round moved on: held and blocked traffic may fit now
            self.net.kick(st.nid)
            self.net.retry_local(st.nid)

    def _flush_signals(self, st: _NodeState) -> None:
        while st.signals:
            g, k = st.signals[0]
            pkt = Packet(self.net.new_pid(), PacketKind.END_SIGNAL, k, round_key=g, layer=self._layer(g),
                         origin=st.nid)
            if not self.net.inject(st.nid, pkt):
                return
            st.signals.popleft()

    def _try_close(self, st: _NodeState) -> None:
        while True:
            g = st.closed + 1
            if g >= self.G or g not in st.done or st.end_counts.get(g, 0) < self.N - 1:
                return
            st.closed = g
            st.close_time = self.events.now
            self._log_round(st, g, "close")
            self._maybe_start_next(st)

    # -- driver -------------------------------------------------------------------

    def run(self) -> MetricsReport:
        for st in self.nodes:
            self._maybe_start_next(st)
        self.events.run()
        stuck = [st for st in self.nodes if st.closed < self.G - 1]
        if stuck:
            raise SimulationDeadlock(
                f"event queue drained with {len(stuck)} node(s) short of the final round", self._dump())
        cycles = max(st.close_time for st in self.nodes)
        if self.config.trace:
            self.trace.append(("end", len(self.trace), cycles))
        return self._report(cycles)

    def _dump(self) -> dict:
        return {
            "cycle": self.events.now,
            "nodes": [
                {
                    "node": st.nid, "sending": st.sending, "sent": st.sent, "closed": st.closed,
                    "done": sorted(st.done), "end_counts": dict(st.end_counts), "blocked": st.blocked,
                    "items": f"{st.proc_idx}/{len(st.items)}", "agg_queue": len(st.agg_remote) + len(st.agg_local),
                    "comb_ready": len(st.comb_ready), "buffer_used": st.buf.used,
                    "router_occupied": self.net.routers[st.nid].occupied,
                    "router_held": len(self.net.routers[st.nid].held),
                    "pending_signals": len(st.signals),
                }
                for st in self.nodes
            ],
        }

    def rate_params(self) -> RateParams:
        c = self.config
        return RateParams(c.link_bandwidth_bytes_per_cycle, len(self.geom.ports()),
                          c.node.dram_bandwidth_bytes_per_cycle, c.node.arrays,
                          c.network_pj_per_bit, c.dram_pj_per_bit, c.compute_pj_per_op)

    def _report(self, cycles: int) -> MetricsReport:
        params = self.rate_params()
        nodes = [st.counters for st in self.nodes]
        for n in nodes:
            apply_rates(n, cycles, params)
        total = sum_counters(nodes)
        apply_rates(total, cycles, params, len(nodes))
        c = self.config
        config = {
            "nodes": self.N,
            "torus": [self.geom.width, self.geom.height],
            "network_bandwidth_gbps": c.link_bandwidth_bytes_per_cycle * len(self.geom.ports()),
            "link_bandwidth_bytes_per_cycle": c.link_bandwidth_bytes_per_cycle,
            "links_per_node": len(self.geom.ports()),
            "dram_bandwidth_gbps": c.node.dram_bandwidth_bytes_per_cycle,
            "dram_bandwidth_bytes_per_cycle": c.node.dram_bandwidth_bytes_per_cycle,
            "link_latency_cycles": c.link_latency_cycles,
            "peak_ops_per_cycle": c.node.peak_ops_per_cycle,
            "arrays": c.node.arrays,
            "routing_buffer_bytes": c.node.routing_buffer_bytes,
            "agg_buffer_bytes": c.node.agg_buffer_bytes,
            "rounds_override": c.rounds_override,
            "feature_len_in": self.graph.feature_len_in,
            "feature_len_out": self.graph.feature_len_out,
            "num_vertices": self.graph.num_vertices,
            "num_edges": self.graph.num_edges,
            "layers": c.layers,
            "network_pj_per_bit": c.network_pj_per_bit,
            "dram_pj_per_bit": c.dram_pj_per_bit,
            "compute_pj_per_op": c.compute_pj_per_op,
            "spill": self.spill,
            "agg_buffer_peak_bytes": max(st.buf.peak for st in self.nodes),
        }
        return MetricsReport(c.model.value, c.seed, cycles, self.R, config, total, nodes)


def run(config: SimConfig, graph: CsrGraph, plan: PartitionPlan | None = None) -> MetricsReport:
    return Simulator(config, graph, plan).run()
