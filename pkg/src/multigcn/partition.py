"""Interleaved graph mapping and round partitioning by vertex-id bit fields.

A vertex id is split, from the least significant bit, into a node field of
``n`` bits, a slot field of ``x`` bits and a round field holding the rest.
Every edge ``u -> v`` is executed in the round of its destination ``v``;
per round the edges leaving a source are gathered into multicast tasks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ConfigError, ParseError
from .graph import CsrGraph

DEFAULT_ALPHA = 0.75
DEFAULT_MAX_PACKET_NEIGHBORS = 1024

PLAN_MAGIC = b"MGPP"
PLAN_VERSION = 1
_PLAN_HEADER = struct.Struct("<4sIIIIQQdIIIQQ")


def is_power_of_two(k: int) -> bool:
    return k >= 1 and k & (k - 1) == 0


@dataclass(frozen=True)
class FieldWidths:
    n: int
    x: int
    num_nodes: int
    agg_buffer_bytes: int
    replica_bytes: int
    alpha: float = DEFAULT_ALPHA

    @property
    def slots(self) -> int:
        return 1 << self.x

    @property
    def fits_buffer(self) -> bool:
        """True when one round's partial results fit in ``alpha * M``."""
        return self.slots * self.replica_bytes <= Fraction(self.alpha) * self.agg_buffer_bytes

    def rounds_for(self, num_vertices: int) -> int:
        per_round = self.num_nodes << self.x
        return max(1, -(-num_vertices // per_round))


@dataclass(frozen=True)
class VidDecode:
    node_id: int
    slot: int
    round_id: int


def _check_nodes(num_nodes: int) -> None:
    if not is_power_of_two(num_nodes):
        raise ConfigError(f"node count must be a power of two, got {num_nodes}", key="nodes")


def compute_field_widths(num_nodes: int, M: int, S: int, alpha: float = DEFAULT_ALPHA) -> FieldWidths:
    _check_nodes(num_nodes)
    if M <= 0 or S <= 0:
        raise ConfigError("aggregation buffer and replica size must be positive", key="agg_buffer")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}", key="alpha")
    ratio = Fraction(alpha) * M / S
    if ratio < 1:
        raise ConfigError("aggregation buffer cannot hold one replica", key="agg_buffer")
    x = int(ratio).bit_length() - 1
    n = num_nodes.bit_length() - 1
    return FieldWidths(n=n, x=x, num_nodes=num_nodes, agg_buffer_bytes=M, replica_bytes=S, alpha=alpha)


def widths_for_rounds(
    num_nodes: int, num_vertices: int, rounds: int, M: int, S: int, alpha: float = DEFAULT_ALPHA
) -> FieldWidths:
    """Smallest slot field giving at most ``rounds`` rounds (capacity rule not enforced)."""
    _check_nodes(num_nodes)
    if rounds < 1:
        raise ConfigError("rounds must be >= 1", key="rounds_override")
    n = num_nodes.bit_length() - 1
    x = 0
    while (-(-num_vertices // (num_nodes << x))) > rounds:
        x += 1
    return FieldWidths(n=n, x=x, num_nodes=num_nodes, agg_buffer_bytes=M, replica_bytes=S, alpha=alpha)


def decode_vid(vid: int, widths: FieldWidths) -> VidDecode:
    node = vid & ((1 << widths.n) - 1)
    slot = (vid >> widths.n) & ((1 << widths.x) - 1)
    return VidDecode(node, slot, vid >> (widths.n + widths.x))


def encode_vid(d: VidDecode, widths: FieldWidths) -> int:
    return (d.round_id << (widths.n + widths.x)) | (d.slot << widths.n) | d.node_id


def home_node(vid: int, widths: FieldWidths) -> int:
    return vid & ((1 << widths.n) - 1)


def round_of(vid: int, widths: FieldWidths) -> int:
    return vid >> (widths.n + widths.x)


@dataclass(frozen=True)
class MulticastTask:
    source_vid: int
    round_id: int
    dest_nodes: tuple[int, ...]
    offsets: tuple[int, ...]
    neighbors: tuple[int, ...]

    def neighbors_at(self, i: int) -> tuple[int, ...]:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]

    def pairs(self) -> Iterable[tuple[int, int]]:
        return ((self.source_vid, v) for v in self.neighbors)


@dataclass
class PartitionPlan:
    widths: FieldWidths
    num_vertices: int
    rounds: int
    tasks: dict[tuple[int, int], list[MulticastTask]]
    dest_counts: dict[int, int]
    max_packet_neighbors: int = DEFAULT_MAX_PACKET_NEIGHBORS
    combine_order: list[list[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.combine_order:
            self.combine_order = build_combine_order(self)

    @property
    def num_nodes(self) -> int:
        return self.widths.num_nodes

    def tasks_for(self, round_id: int, node: int) -> list[MulticastTask]:
        return self.tasks.get((round_id, node), [])

    def all_tasks(self) -> Iterable[MulticastTask]:
        for key in sorted(self.tasks):
            yield from self.tasks[key]

    def edge_pairs(self) -> list[tuple[int, int]]:
        return [p for t in self.all_tasks() for p in t.pairs()]

    def num_edges(self) -> int:
        return sum(len(t.neighbors) for t in self.all_tasks())


def _group_tasks(
    pairs: np.ndarray, widths: FieldWidths, max_packet_neighbors: int
) -> dict[tuple[int, int], list[MulticastTask]]:
    tasks: dict[tuple[int, int], list[MulticastTask]] = {}
    if len(pairs) == 0:
        return tasks
    src = pairs[:, 0]
    dst = pairs[:, 1]
    node_mask = (1 << widths.n) - 1
    shift = widths.n + widths.x
    rnd = dst >> shift
    dnode = dst & node_mask
    # Sort by (round, source, dest node, dest vid).
    order = np.lexsort((dst, dnode, src, rnd))
    src, dst, rnd, dnode = src[order], dst[order], rnd[order], dnode[order]
    boundaries = np.flatnonzero((np.diff(src) != 0) | (np.diff(rnd) != 0)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(src)]))
    for s, e in zip(starts.tolist(), ends.tolist()):
        u = int(src[s])
        r = int(rnd[s])
        nbrs = dst[s:e].tolist()
        nodes = dnode[s:e].tolist()
        key = (r, u & node_mask)
        bucket = tasks.setdefault(key, [])
        for c in range(0, len(nbrs), max_packet_neighbors):
            bucket.append(_make_task(u, r, nodes[c:c + max_packet_neighbors], nbrs[c:c + max_packet_neighbors]))
    return tasks


def _make_task(u: int, r: int, nodes: list[int], nbrs: list[int]) -> MulticastTask:
    dest_nodes: list[int] = []
    offsets: list[int] = []
    for i, nd in enumerate(nodes):
        if not dest_nodes or dest_nodes[-1] != nd:
            dest_nodes.append(nd)
            offsets.append(i)
    offsets.append(len(nbrs))
    return MulticastTask(u, r, tuple(dest_nodes), tuple(offsets), tuple(nbrs))


def _plan_from_pairs(
    pairs: np.ndarray,
    widths: FieldWidths,
    num_vertices: int,
    dest_counts: dict[int, int],
    max_packet_neighbors: int,
) -> PartitionPlan:
    if max_packet_neighbors < 1:
        raise ConfigError("max_packet_neighbors must be >= 1", key="max_packet_neighbors")
    tasks = _group_tasks(pairs, widths, max_packet_neighbors)
    rounds = 1 + max(
        [k[0] for k in tasks] + [round_of(v, widths) for v in dest_counts] + [0]
    )
    return PartitionPlan(widths, num_vertices, rounds, tasks, dest_counts, max_packet_neighbors)


def build_partition_plan(
    g: CsrGraph, widths: FieldWidths, max_packet_neighbors: int = DEFAULT_MAX_PACKET_NEIGHBORS
) -> PartitionPlan:
    if g.num_vertices > (1 << 32):
        raise ConfigError("vertex ids must fit in u32")
    pairs = g.edge_pairs()
    deg = g.in_degrees().tolist()
    dest_counts = dict(enumerate(deg))
    return _plan_from_pairs(pairs, widths, g.num_vertices, dest_counts, max_packet_neighbors)


def build_combine_order(plan: PartitionPlan) -> list[list[int]]:
    """Per node, its local destination vertices ordered by (round, slot)."""
    order: list[list[int]] = [[] for _ in range(plan.widths.num_nodes)]
    node_mask = (1 << plan.widths.n) - 1
    # (round, slot) order equals the order of vid >> n within one node.
    for v in sorted(plan.dest_counts):
        order[v & node_mask].append(v)
    return order


def restrict_plan(plan: PartitionPlan, keep: set[int]) -> PartitionPlan:
    """Keep only edges whose destination vertex is in ``keep``."""
    pairs = np.array([p for p in plan.edge_pairs() if p[1] in keep], dtype=np.int64).reshape(-1, 2)
    counts = {v: 0 for v in plan.dest_counts if v in keep}
    for v in pairs[:, 1].tolist():
        counts[v] += 1
    return _plan_from_pairs(pairs, plan.widths, plan.num_vertices, counts, plan.max_packet_neighbors)


def flatten_plan(plan: PartitionPlan) -> PartitionPlan:
    """Re-partition the same workload into a single round (same node mapping)."""
    if plan.rounds == 1:
        return plan
    w = plan.widths
    flat = widths_for_rounds(w.num_nodes, plan.num_vertices, 1, w.agg_buffer_bytes, w.replica_bytes, w.alpha)
    pairs = np.array(plan.edge_pairs(), dtype=np.int64).reshape(-1, 2)
    return _plan_from_pairs(pairs, flat, plan.num_vertices, dict(plan.dest_counts), plan.max_packet_neighbors)


# -- binary dump / restore ---------------------------------------------------
#
# header: magic, version, n, x, num_nodes, M (u64), S (u64), alpha (f64),
#         num_vertices, rounds, max_packet_neighbors, num_dest (u64), num_tasks (u64)
# dest table: num_dest x (vid u32, count u32)
# tasks:   per task (source u32, round u32, ndest u32, nnbr u32),
#          dest_nodes u16[ndest], offsets u32[ndest + 1], neighbors u32[nnbr]


def dump_plan(plan: PartitionPlan, sink: BinaryIO) -> None:
    w = plan.widths
    tasks = list(plan.all_tasks())
    sink.write(_PLAN_HEADER.pack(
        PLAN_MAGIC, PLAN_VERSION, w.n, w.x, w.num_nodes, w.agg_buffer_bytes, w.replica_bytes,
        float(w.alpha), plan.num_vertices, plan.rounds, plan.max_packet_neighbors,
        len(plan.dest_counts), len(tasks),
    ))
    dests = np.array(sorted(plan.dest_counts.items()), dtype="<u4").reshape(-1, 2)
    sink.write(dests.tobytes())
    for t in tasks:
        sink.write(struct.pack("<IIII", t.source_vid, t.round_id, len(t.dest_nodes), len(t.neighbors)))
        sink.write(np.asarray(t.dest_nodes, dtype="<u2").tobytes())
        sink.write(np.asarray(t.offsets, dtype="<u4").tobytes())
        sink.write(np.asarray(t.neighbors, dtype="<u4").tobytes())


def load_plan(source: BinaryIO | bytes) -> PartitionPlan:
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    data = bytes(data)
    if len(data) < _PLAN_HEADER.size or data[:4] != PLAN_MAGIC:
        raise ParseError("not an MGPP plan file", 0)
    (_, version, n, x, num_nodes, M, S, alpha, num_vertices, rounds, mpn,
     num_dest, num_tasks) = _PLAN_HEADER.unpack_from(data)
    if version != PLAN_VERSION:
        raise ParseError(f"unsupported MGPP version {version}", 4)
    widths = FieldWidths(n, x, num_nodes, M, S, alpha)
    pos = _PLAN_HEADER.size
    need = pos + 8 * num_dest
    if len(data) < need:
        raise ParseError("truncated destination table", len(data))
    dests = np.frombuffer(data, dtype="<u4", count=2 * num_dest, offset=pos).reshape(-1, 2)
    dest_counts = {int(v): int(c) for v, c in dests.tolist()}
    pos = need
    tasks: dict[tuple[int, int], list[MulticastTask]] = {}
    mask = (1 << n) - 1
    for _ in range(num_tasks):
        if len(data) < pos + 16:
            raise ParseError("truncated task record", pos)
        u, r, nd, nn = struct.unpack_from("<IIII", data, pos)
        pos += 16
        size = 2 * nd + 4 * (nd + 1) + 4 * nn
        if len(data) < pos + size:
            raise ParseError("truncated task body", pos)
        dn = np.frombuffer(data, dtype="<u2", count=nd, offset=pos).tolist()
        pos += 2 * nd
        off = np.frombuffer(data, dtype="<u4", count=nd + 1, offset=pos).tolist()
        pos += 4 * (nd + 1)
        nb = np.frombuffer(data, dtype="<u4", count=nn, offset=pos).tolist()
        pos += 4 * nn
        tasks.setdefault((r, u & mask), []).append(MulticastTask(u, r, tuple(dn), tuple(off), tuple(nb)))
    if pos != len(data):
        raise ParseError("trailing bytes after plan", pos)
    return PartitionPlan(widths, num_vertices, rounds, tasks, dest_counts, mpn)
