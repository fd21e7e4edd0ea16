"""2D torus fabric: DyXY adaptive routing and topology-aware multicast splitting.

Relative coordinates put the current node at the origin, with x growing
east (increasing column) and y growing north (decreasing row). Wrapped
distances lie in (-W/2, W/2]; on an exact half-way tie the positive
direction wins.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable, Protocol

from .events import EventKind, EventQueue
from .partition import MulticastTask

HEADER_BYTES = 16
NID_BYTES = 2
OFFSET_BYTES = 4
VID_BYTES = 4
ELEMENT_BYTES = 4


class Port(IntEnum):
    E = 0
    W = 1
    N = 2
    S = 3
    LOCAL = 4


class PacketKind(str, Enum):
    MULTICAST = "replica-multicast"
    UNICAST = "replica-unicast"
    END_SIGNAL = "end-signal"


@dataclass(frozen=True)
class TorusGeom:
    width: int
    height: int

    @classmethod
    def for_nodes(cls, num_nodes: int) -> TorusGeom:
        """Near-square power-of-two layout, wider than tall (16 -> 4x4, 32 -> 8x4)."""
        k = num_nodes.bit_length() - 1
        w = 1 << ((k + 1) // 2)
        return cls(w, num_nodes // w)

    @property
    def num_nodes(self) -> int:
        return self.width * self.height

    def coord(self, node: int) -> tuple[int, int]:
        return node % self.width, node // self.width

    def node_at(self, col: int, row: int) -> int:
        return (row % self.height) * self.width + (col % self.width)

    def neighbor(self, node: int, port: Port) -> int:
        col, row = self.coord(node)
        if port == Port.E:
            return self.node_at(col + 1, row)
        if port == Port.W:
            return self.node_at(col - 1, row)
        if port == Port.N:
            return self.node_at(col, row - 1)
        if port == Port.S:
            return self.node_at(col, row + 1)
        return node

    def ports(self) -> list[Port]:
        """Ports that carry links (a dimension of size 1 has none)."""
        out = []
        if self.width > 1:
            out += [Port.E, Port.W]
        if self.height > 1:
            out += [Port.N, Port.S]
        return out

    def distance(self, a: int, b: int) -> int:
        x, y = rel_coord(a, b, self)
        return abs(x) + abs(y)


def _wrap(d: int, k: int) -> int:
    d %= k
    return d - k if d > k // 2 else d


def rel_coord(current: int, target: int, geom: TorusGeom) -> tuple[int, int]:
    w = geom.width
    cc, cr = current % w, current // w
    tc, tr = target % w, target // w
    return _wrap(tc - cc, w), _wrap(cr - tr, geom.height)


def abs_node(current: int, rel: tuple[int, int], geom: TorusGeom) -> int:
    col, row = geom.coord(current)
    return geom.node_at(col + rel[0], row - rel[1])


# -- region predicates for multicast splitting --------------------------------

REGION_PREDICATES: tuple[Callable[[int, int], bool], ...] = (
    lambda x, y: x == 0 and y == 0,
    lambda x, y: y > 0 and y <= x,
    lambda x, y: y <= 0 and y > -x,
    lambda x, y: x > 0 and y <= -x,
    lambda x, y: x <= 0 and y < x,
    lambda x, y: y < 0 and y >= x,
    lambda x, y: y >= 0 and y < -x,
    lambda x, y: y >= -x and x < 0,
    lambda x, y: x >= 0 and y > x,
)


def region_of(x: int, y: int) -> int:
    for i, pred in enumerate(REGION_PREDICATES):
        if pred(x, y):
            return i
    raise AssertionError(f"coordinate ({x}, {y}) matches no region")


def region_targets(parts: list[list[tuple[int, int]]]) -> list[tuple[tuple[int, int], list[int]]]:
    """Representative target and member regions for each forwarded group.

    ``parts[i]`` holds the relative coordinates in region i (index 0 unused).
    """
    out: list[tuple[tuple[int, int], list[int]]] = []

    def xs(*ids: int) -> list[int]:
        return [c[0] for i in ids for c in parts[i]]

    def ys(*ids: int) -> list[int]:
        return [c[1] for i in ids for c in parts[i]]

    p = parts
    if p[1] and p[2]:
        out.append(((min(xs(1, 2)), 0), [1, 2]))
    else:
        if p[1]:
            out.append(((min(xs(1)), min(ys(1))), [1]))
        if p[2]:
            out.append(((min(xs(2)), max(ys(2))), [2]))
    if p[3] and p[4]:
        out.append(((0, max(ys(3, 4))), [3, 4]))
    else:
        if p[3]:
            out.append(((min(xs(3)), max(ys(3))), [3]))
        if p[4]:
            out.append(((max(xs(4)), max(ys(4))), [4]))
    if p[5] and p[6]:
        out.append(((max(xs(5, 6)), 0), [5, 6]))
    else:
        if p[5]:
            out.append(((max(xs(5)), max(ys(5))), [5]))
        if p[6]:
            out.append(((max(xs(6)), min(ys(6))), [6]))
    if p[7] and p[8]:
        out.append(((0, min(ys(7, 8))), [7, 8]))
    else:
        if p[7]:
            out.append(((max(xs(7)), min(ys(7))), [7]))
        if p[8]:
            out.append(((min(xs(8)), min(ys(8))), [8]))
    return out


# -- packets --------------------------------------------------------------------


@dataclass(eq=False)
class Packet:
    pid: int
    kind: PacketKind
    next_dest: int
    source_vid: int = -1
    round_key: int = 0
    layer: int = 0
    dest_nodes: tuple[int, ...] = ()
    offsets: tuple[int, ...] = ()
    neighbors: tuple[int, ...] = ()
    payload_elements: int = 0
    origin: int = 0
    hops: int = 0
    size: int = 0
    hopped: bool = False
    split_cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind != PacketKind.END_SIGNAL and not self.dest_nodes:
            raise ValueError("replica packet needs at least one destination node")
        self.size = packet_size(self)

    @property
    def payload_bytes(self) -> int:
        return 0 if self.kind == PacketKind.END_SIGNAL else self.payload_elements * ELEMENT_BYTES

    @property
    def metadata_bytes(self) -> int:
        return self.size - self.payload_bytes

    def neighbors_at(self, i: int) -> tuple[int, ...]:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]


def packet_size(pkt: Packet) -> int:
    if pkt.kind == PacketKind.END_SIGNAL:
        return HEADER_BYTES
    nd = len(pkt.dest_nodes)
    return (HEADER_BYTES + NID_BYTES * nd + OFFSET_BYTES * (nd + 1)
            + VID_BYTES * len(pkt.neighbors) + ELEMENT_BYTES * pkt.payload_elements)


def slice_task(task: MulticastTask, indices: Iterable[int]) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Sub-lists (dest_nodes, offsets, neighbors) for the given nID positions."""
    return _slice(task.dest_nodes, task.offsets, task.neighbors, indices)


def _slice(dest_nodes, offsets, neighbors, indices):
    nodes: list[int] = []
    offs = [0]
    nbrs: list[int] = []
    for i in indices:
        nodes.append(dest_nodes[i])
        nbrs.extend(neighbors[offsets[i]:offsets[i + 1]])
        offs.append(len(nbrs))
    return tuple(nodes), tuple(offs), tuple(nbrs)


def _child(pkt: Packet, pid: int, next_dest: int, indices: list[int]) -> Packet:
    nodes, offs, nbrs = _slice(pkt.dest_nodes, pkt.offsets, pkt.neighbors, indices)
    return Packet(pid, pkt.kind, next_dest, pkt.source_vid, pkt.round_key, pkt.layer, nodes, offs, nbrs,
                  pkt.payload_elements, pkt.origin, pkt.hops)


def split_multicast(pkt: Packet, current: int, geom: TorusGeom,
                    new_pid: Callable[[], int] | None = None) -> tuple[Packet | None, list[Packet]]:
    """Split a replica packet that reached ``current`` (its next destination).

    Returns the share consumed at ``current`` (or None) and the packets
    forwarded toward their representative next destinations.
    """
    if pkt.next_dest != current:
        raise ValueError("packet split away from its next destination")
    if new_pid is None:
        new_pid = itertools.count(1).__next__
    parts: list[list[tuple[int, int]]] = [[] for _ in range(9)]
    members: list[list[int]] = [[] for _ in range(9)]
    for i, nd in enumerate(pkt.dest_nodes):
        rc = rel_coord(current, nd, geom)
        r = region_of(*rc)
        parts[r].append(rc)
        members[r].append(i)
    local = None
    if members[0]:
        if len(pkt.dest_nodes) == 1:
            local = pkt
        else:
            local = _child(pkt, new_pid(), current, members[0])
    forwarded = []
    for target, regions in region_targets(parts):
        idx = sorted(i for r in regions for i in members[r])
        forwarded.append(_child(pkt, new_pid(), abs_node(current, target, geom), idx))
    return local, forwarded


# -- routing --------------------------------------------------------------------


@dataclass
class RouterState:
    node_id: int
    capacity: int
    occupied: int = 0
    neighbor_stress: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    queues: list[deque] = field(default_factory=lambda: [deque() for _ in range(4)])
    link_busy: list[bool] = field(default_factory=lambda: [False] * 4)
    held: list[Packet] = field(default_factory=list)

    @property
    def stress(self) -> float:
        return self.occupied / self.capacity


def dyxy_next_hop(router: RouterState, dest: int, geom: TorusGeom) -> Port:
    x, y = rel_coord(router.node_id, dest, geom)
    if x == 0 and y == 0:
        return Port.LOCAL
    xport = Port.E if x > 0 else Port.W
    yport = Port.N if y > 0 else Port.S
    if y == 0:
        return xport
    if x == 0:
        return yport
    if router.neighbor_stress[yport] < router.neighbor_stress[xport]:
        return yport
    return xport


def stress_tick(routers: list[RouterState], geom: TorusGeom) -> None:
    for r in routers:
        for port in geom.ports():
            r.neighbor_stress[port] = routers[geom.neighbor(r.node_id, port)].stress


class NetworkHost(Protocol):
    def accept_local(self, node: int, pkt: Packet) -> bool: ...
    def on_space(self, node: int) -> None: ...
    def on_hop(self, time: int, src: int, dst: int, pkt: Packet) -> None: ...
    def on_arrival(self, time: int, node: int, pkt: Packet) -> None: ...
    def protected_round(self, node: int) -> int | None: ...


class Network:
    """Store-and-forward packet fabric with credit-based backpressure.

    Each node has one shared routing buffer. A hop starts only when the
    downstream buffer can hold the packet (or, at the packet's next
    destination, all pieces it splits into). Packets travel one link at a
    time; serialization takes ceil(size / bandwidth) cycles and delivery a
    further ``link_latency`` cycles.
    """

    def __init__(
        self,
        geom: TorusGeom,
        events: EventQueue,
        host: NetworkHost,
        *,
        link_bandwidth: float,
        link_latency: int,
        buffer_bytes: int,
        stress_period: int = 64,
        injection_fraction: float = 0.5,
        future_fraction: float = 0.5,
        scan_depth: int = 16,
    ) -> None:
        if link_bandwidth <= 0:
            raise ValueError("link bandwidth must be positive")
        self.geom = geom
        self.events = events
        self.host = host
        self.bandwidth = link_bandwidth
        self.latency = link_latency
        self.capacity = buffer_bytes
        self.stress_period = stress_period
        self.control_reserve = min(buffer_bytes // 4, HEADER_BYTES * 4 * max(geom.num_nodes, 1))
        self.data_limit = buffer_bytes - self.control_reserve
        self.injection_limit = min(self.data_limit, int(buffer_bytes * injection_fraction))
        self.future_limit = min(self.data_limit, int(buffer_bytes * future_fraction))
        self.scan_depth = scan_depth
        self.routers = [RouterState(i, buffer_bytes) for i in range(geom.num_nodes)]
        self.ports = geom.ports()
        self.nbr = [[geom.neighbor(i, Port(p)) for p in range(4)] for i in range(geom.num_nodes)]
        # (upstream node, port) pairs whose link ends at each node
        self.upstream: list[list[tuple[int, int]]] = [[] for _ in range(geom.num_nodes)]
        for i in range(geom.num_nodes):
            for p in self.ports:
                self.upstream[self.nbr[i][p]].append((i, int(p)))
        self._pid = 0
        self._ticking = False

    # -- packet ids / construction --

    def new_pid(self) -> int:
        self._pid += 1
        return self._pid

    def _split_at(self, pkt: Packet, node: int) -> tuple[Packet | None, list[Packet]]:
        cached = pkt.split_cache
        if cached is not None and cached[0] == node:
            return cached[1], cached[2]
        local, fwd = split_multicast(pkt, node, self.geom, self.new_pid)
        pkt.split_cache = (node, local, fwd)
        return local, fwd

    def _footprint(self, pkt: Packet, node: int) -> int:
        if pkt.kind == PacketKind.END_SIGNAL or pkt.next_dest != node:
            return pkt.size
        if pkt.kind == PacketKind.UNICAST:
            return pkt.size
        local, fwd = self._split_at(pkt, node)
        return (local.size if local is not None else 0) + sum(p.size for p in fwd)

    def _limit(self, node: int, pkt: Packet) -> int:
        if pkt.kind == PacketKind.END_SIGNAL:
            return self.capacity
        protected = self.host.protected_round(node)
        if protected is not None and pkt.round_key > protected:
            return self.future_limit
        return self.data_limit

    # -- injection --

    def inject(self, node: int, pkt: Packet) -> bool:
        """Place a locally created packet into ``node``'s routing buffer."""
        self._ensure_ticking()
        router = self.routers[node]
        if pkt.kind == PacketKind.MULTICAST:
            pkt.next_dest = node
            local, children = self._split_at(pkt, node)
            if local is not None:
                raise ValueError("multicast injected with a destination at its home node")
        else:
            children = [pkt]
        footprint = sum(c.size for c in children)
        limit = self.capacity if pkt.kind == PacketKind.END_SIGNAL else min(self.injection_limit, self._limit(node, pkt))
        if router.occupied + footprint > limit:
            return False
        router.occupied += footprint
        for c in children:
            if c.next_dest == node:
                # zero-hop unicast: not routed
                self._deliver_local(node, c)
            else:
                self._enqueue(node, c)
        return True

    def _enqueue(self, node: int, pkt: Packet) -> None:
        router = self.routers[node]
        port = dyxy_next_hop(router, pkt.next_dest, self.geom)
        router.queues[port].append(pkt)
        self._try_dispatch(node, port)

    def _try_dispatch(self, node: int, port: int) -> None:
        router = self.routers[node]
        if router.link_busy[port]:
            return
        q = router.queues[port]
        if not q:
            return
        down = self.nbr[node][port]
        drouter = self.routers[down]
        for i in range(min(len(q), self.scan_depth)):
            pkt = q[i]
            fp = self._footprint(pkt, down)
            if drouter.occupied + fp <= self._limit(down, pkt):
                del q[i]
                self._start(node, port, down, pkt, fp)
                return

    def _start(self, node: int, port: int, down: int, pkt: Packet, footprint: int) -> None:
        now = self.events.now
        self.routers[down].occupied += footprint
        self.routers[node].link_busy[port] = True
        ser = math.ceil(pkt.size / self.bandwidth)
        self.host.on_hop(now, node, down, pkt)
        self.events.schedule(now + ser, EventKind.LINK_FREE, node, self._link_free, node, port, pkt)
        kind = EventKind.END_SIGNAL_RECEIVED if pkt.kind == PacketKind.END_SIGNAL else EventKind.PACKET_ARRIVAL
        self.events.schedule(now + ser + self.latency, kind, down, self._arrive, down, pkt)

    def _link_free(self, node: int, port: int, pkt: Packet) -> None:
        router = self.routers[node]
        router.link_busy[port] = False
        router.occupied -= pkt.size
        self._try_dispatch(node, port)
        self._space_freed(node)

    def kick(self, node: int) -> None:
        """Re-evaluate stalled hops into ``node`` after its admission limits changed."""
        self._space_freed(node)

    def _space_freed(self, node: int) -> None:
        for up, p in self.upstream[node]:
            self._try_dispatch(up, p)
        self.host.on_space(node)

    def _arrive(self, node: int, pkt: Packet) -> None:
        pkt.hops += 1
        self.host.on_arrival(self.events.now, node, pkt)
        if pkt.next_dest != node:
            self._enqueue(node, pkt)
            return
        if pkt.kind == PacketKind.MULTICAST:
            local, fwd = self._split_at(pkt, node)
            pkt.split_cache = None
            for c in fwd:
                c.hops = pkt.hops
                self._enqueue(node, c)
            if local is not None:
                local.hops = pkt.hops
                self._deliver_local(node, local)
        else:
            self._deliver_local(node, pkt)

    def _deliver_local(self, node: int, pkt: Packet) -> None:
        router = self.routers[node]
        if self.host.accept_local(node, pkt):
            router.occupied -= pkt.size
            self._space_freed(node)
        else:
            router.held.append(pkt)

    def retry_local(self, node: int) -> None:
        router = self.routers[node]
        if not router.held:
            return
        freed = False
        keep = []
        for pkt in router.held:
            if self.host.accept_local(node, pkt):
                router.occupied -= pkt.size
                freed = True
            else:
                keep.append(pkt)
        router.held = keep
        if freed:
            self._space_freed(node)

    # -- stress exchange --

    def _ensure_ticking(self) -> None:
        if not self._ticking and self.stress_period > 0:
            self._ticking = True
            self.events.schedule(self.events.now + self.stress_period, EventKind.STRESS_TICK, 0,
                                 self._tick, daemon=True)

    def _tick(self) -> None:
        stress_tick(self.routers, self.geom)
        if self.events.live > 0:
            self.events.schedule(self.events.now + self.stress_period, EventKind.STRESS_TICK, 0,
                                 self._tick, daemon=True)
        else:
            self._ticking = False

    def occupancy(self) -> list[int]:
        return [r.occupied for r in self.routers]

    def idle(self) -> bool:
        return all(r.occupied == 0 for r in self.routers)
