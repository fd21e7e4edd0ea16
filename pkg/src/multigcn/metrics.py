"""Counters, trace-driven oracles, energy accounting and report I/O.

Transmission volume is measured in bytes-hops: every link traversal adds
the packet's bytes. Payload (feature replica), metadata (header, nID,
offset and neighbor lists) and control (end signals) are kept apart.

A payload arrival is redundant when the same source vertex's replica of
the same layer already reached that node earlier, as a destination or in
transit. DRAM traffic is redundant when it only exists because a replica
or partial result was pushed off-chip (spill writes and their reloads).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Iterator, TextIO

from .errors import OracleError

NETWORK_PJ_PER_BIT = 8.0
DRAM_PJ_PER_BIT = 7.0

TRACE_FIELDS = {
    "hop": ("cycle", "src", "dst", "kind", "pkt", "vid", "layer", "round", "bytes", "payload"),
    "dram": ("cycle", "node", "dir", "purpose", "bytes"),
    "deliver": ("cycle", "node", "pkt", "vid", "layer", "round", "neighbors"),
    "compute": ("start", "end", "node", "job", "arrays", "ops", "edges", "vertices"),
    "end": ("records", "cycles"),
}

REDUNDANT_DRAM_PURPOSES = ("replica-spill", "replica-reload")


@dataclass
class NodeCounters:
    payload_bytes_hops: int = 0
    metadata_bytes_hops: int = 0
    control_bytes_hops: int = 0
    packet_count: int = 0
    control_packet_count: int = 0
    total_payload_arrivals: int = 0
    redundant_payload_arrivals: int = 0
    dram_read_bytes: int = 0
    dram_write_bytes: int = 0
    replica_spill_bytes: int = 0
    replica_reload_bytes: int = 0
    redundant_dram_bytes: int = 0
    aggregations: int = 0
    combinations: int = 0
    compute_ops: int = 0
    compute_busy_array_cycles: int = 0
    util_network: float = 0.0
    util_dram: float = 0.0
    util_compute: float = 0.0
    energy_network_pj: float = 0.0
    energy_dram_pj: float = 0.0
    energy_compute_pj: float = 0.0

    @property
    def bytes_hops(self) -> int:
        return self.payload_bytes_hops + self.metadata_bytes_hops + self.control_bytes_hops

    @property
    def transmission_bytes_hops(self) -> int:
        """Payload plus metadata, the volume compared across message-passing models."""
        return self.payload_bytes_hops + self.metadata_bytes_hops

    @property
    def dram_bytes(self) -> int:
        return self.dram_read_bytes + self.dram_write_bytes

    @property
    def energy_pj(self) -> float:
        return self.energy_network_pj + self.energy_dram_pj + self.energy_compute_pj

    def counts(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.type in ("int", int)}


COUNT_FIELDS = tuple(f.name for f in fields(NodeCounters) if f.type in ("int", int))
RATE_FIELDS = tuple(f.name for f in fields(NodeCounters) if f.type in ("float", float))


def sum_counters(nodes: Iterable[NodeCounters]) -> NodeCounters:
    total = NodeCounters()
    for n in nodes:
        for name in COUNT_FIELDS:
            setattr(total, name, getattr(total, name) + getattr(n, name))
    return total


@dataclass(frozen=True)
class RateParams:
    link_bandwidth: float
    links_per_node: int
    dram_bandwidth: float
    arrays: int
    network_pj_per_bit: float = NETWORK_PJ_PER_BIT
    dram_pj_per_bit: float = DRAM_PJ_PER_BIT
    compute_pj_per_op: float = 0.0


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def apply_rates(c: NodeCounters, cycles: int, p: RateParams, nodes: int = 1) -> None:
    """Fill utilization and energy fields of ``c`` (``nodes`` > 1 for an aggregate)."""
    c.util_network = _ratio(c.bytes_hops, p.link_bandwidth * p.links_per_node * nodes * cycles)
    c.util_dram = _ratio(c.dram_bytes, p.dram_bandwidth * nodes * cycles)
    c.util_compute = _ratio(c.compute_busy_array_cycles, p.arrays * nodes * cycles)
    e = energy(c, p.network_pj_per_bit, p.dram_pj_per_bit, p.compute_pj_per_op)
    c.energy_network_pj = e["network"]
    c.energy_dram_pj = e["dram"]
    c.energy_compute_pj = e["compute"]


def energy(c: NodeCounters, network_pj_per_bit: float = NETWORK_PJ_PER_BIT,
           dram_pj_per_bit: float = DRAM_PJ_PER_BIT, compute_pj_per_op: float = 0.0) -> dict[str, float]:
    return {
        "network": c.bytes_hops * 8 * network_pj_per_bit,
        "dram": c.dram_bytes * 8 * dram_pj_per_bit,
        "compute": c.compute_ops * compute_pj_per_op,
    }


@dataclass
class MetricsReport:
    model: str
    seed: int
    cycles: int
    rounds: int
    config: dict
    total: NodeCounters
    nodes: list[NodeCounters] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "cycles": self.cycles,
            "rounds": self.rounds,
            "config": self.config,
            "total": asdict(self.total),
            "nodes": [asdict(n) for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(
            model=d["model"], seed=d["seed"], cycles=d["cycles"], rounds=d["rounds"], config=d["config"],
            total=NodeCounters(**d["total"]), nodes=[NodeCounters(**n) for n in d["nodes"]],
        )

    @property
    def redundancy_ratio(self) -> float:
        return _ratio(self.total.redundant_payload_arrivals, self.total.total_payload_arrivals)


# -- report serialization --------------------------------------------------------

CONFIG_COLUMNS = (
    "nodes", "network_bandwidth_gbps", "dram_bandwidth_gbps", "link_latency_cycles", "peak_ops_per_cycle",
    "routing_buffer_bytes", "agg_buffer_bytes", "rounds_override", "feature_len_in", "feature_len_out",
    "num_vertices", "num_edges", "layers",
)
CSV_COLUMNS = ("model", "seed", "cycles", "rounds") + CONFIG_COLUMNS + COUNT_FIELDS + RATE_FIELDS


def emit_report(report: MetricsReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(csv_row(report))
        return buf.getvalue().encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def csv_row(report: MetricsReport) -> list:
    row: list = [report.model, report.seed, report.cycles, report.rounds]
    row += [_fmt(report.config.get(k)) for k in CONFIG_COLUMNS]
    row += [getattr(report.total, k) for k in COUNT_FIELDS]
    row += [repr(getattr(report.total, k)) for k in RATE_FIELDS]
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_report(data: bytes | str) -> MetricsReport:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    return MetricsReport.from_dict(json.loads(text))


def parse_csv_rows(data: bytes | str) -> list[dict[str, str]]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    return list(csv.DictReader(io.StringIO(text)))


# -- trace I/O ------------------------------------------------------------------------


def trace_to_dicts(records: Iterable[tuple]) -> Iterator[dict]:
    for rec in records:
        names = TRACE_FIELDS[rec[0]]
        d = {"t": rec[0]}
        d.update(zip(names, rec[1:]))
        yield d


def write_trace(records: Iterable[tuple], sink: TextIO) -> None:
    for d in trace_to_dicts(records):
        sink.write(json.dumps(d, separators=(",", ":")))
        sink.write("\n")


def read_trace(source: TextIO) -> list[tuple]:
    out = []
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            d = json.loads(line)
            names = TRACE_FIELDS[d["t"]]
            out.append((d["t"],) + tuple(d[n] for n in names))
        except (KeyError, ValueError) as exc:
            raise OracleError(f"malformed trace record on line {lineno}: {exc}") from None
    return out


def _check_complete(trace: list[tuple]) -> None:
    if not trace or trace[-1][0] != "end":
        raise OracleError("trace is truncated: missing end record")
    if trace[-1][1] != len(trace) - 1:
        raise OracleError(f"trace is truncated: end record expects {trace[-1][1]} records, found {len(trace) - 1}")


# -- oracles --------------------------------------------------------------------------


def classify_transmission_redundancy(trace: list[tuple]) -> tuple[int, int]:
    """(redundant, total) payload arrivals over a complete trace."""
    _check_complete(trace)
    seen: set[tuple[int, int, int]] = set()
    redundant = total = 0
    for rec in trace:
        if rec[0] != "hop" or rec[4] == "end-signal":
            continue
        key = (rec[6], rec[7], rec[3])
        total += 1
        if key in seen:
            redundant += 1
        else:
            seen.add(key)
    return redundant, total


def classify_dram_redundancy(dram_log: Iterable[tuple]) -> tuple[int, int]:
    """(redundant_bytes, total_bytes) over DRAM records (trace tuples of type "dram")."""
    redundant = total = 0
    for rec in dram_log:
        if rec[0] != "dram":
            continue
        total += rec[5]
        if rec[4] in REDUNDANT_DRAM_PURPOSES:
            redundant += rec[5]
    return redundant, total


def delivered_copies(trace: list[tuple]) -> dict[tuple[int, int, int, int], int]:
    """Payload copies handed to each destination, keyed by (vid, layer, round, node)."""
    _check_complete(trace)
    out: dict[tuple[int, int, int, int], int] = {}
    for rec in trace:
        if rec[0] == "deliver":
            key = (rec[4], rec[5], rec[6], rec[2])
            out[key] = out.get(key, 0) + 1
    return out


def counters_from_trace(trace: list[tuple], num_nodes: int) -> list[NodeCounters]:
    """Recompute every per-node count from the trace alone."""
    _check_complete(trace)
    nodes = [NodeCounters() for _ in range(num_nodes)]
    seen_pkt: set[int] = set()
    seen_arrival: set[tuple[int, int, int]] = set()
    for rec in trace:
        kind = rec[0]
        if kind == "hop":
            _, _, src, dst, pkind, pid, vid, layer, _, nbytes, payload = rec
            s = nodes[src]
            first = pid not in seen_pkt
            if first:
                seen_pkt.add(pid)
            if pkind == "end-signal":
                s.control_bytes_hops += nbytes
                s.control_packet_count += first
                continue
            s.payload_bytes_hops += payload
            s.metadata_bytes_hops += nbytes - payload
            s.packet_count += first
            d = nodes[dst]
            d.total_payload_arrivals += 1
            key = (vid, layer, dst)
            if key in seen_arrival:
                d.redundant_payload_arrivals += 1
            else:
                seen_arrival.add(key)
        elif kind == "dram":
            _, _, node, direction, purpose, nbytes = rec
            n = nodes[node]
            if direction == "read":
                n.dram_read_bytes += nbytes
            else:
                n.dram_write_bytes += nbytes
            if purpose == "replica-spill":
                n.replica_spill_bytes += nbytes
            elif purpose == "replica-reload":
                n.replica_reload_bytes += nbytes
            if purpose in REDUNDANT_DRAM_PURPOSES:
                n.redundant_dram_bytes += nbytes
        elif kind == "compute":
            _, start, end, node, job, arrays, ops, edges, vertices = rec
            n = nodes[node]
            n.compute_ops += ops
            n.compute_busy_array_cycles += (end - start) * arrays
            if job == "aggregate":
                n.aggregations += edges
            else:
                n.combinations += vertices
    return nodes


def verify_report(trace: list[tuple], report: MetricsReport) -> list[str]:
    """Compare engine counters against the trace; returns mismatch descriptions."""
    recomputed = counters_from_trace(trace, len(report.nodes))
    problems = []
    for i, (mine, theirs) in enumerate(zip(recomputed, report.nodes)):
        for name in COUNT_FIELDS:
            a, b = getattr(mine, name), getattr(theirs, name)
            if a != b:
                problems.append(f"node {i} {name}: trace={a} report={b}")
    total = sum_counters(recomputed)
    for name in COUNT_FIELDS:
        a, b = getattr(total, name), getattr(report.total, name)
        if a != b:
            problems.append(f"total {name}: trace={a} report={b}")
    if trace[-1][2] != report.cycles:
        problems.append(f"cycles: trace={trace[-1][2]} report={report.cycles}")
    cfg = report.config
    params = RateParams(cfg["link_bandwidth_bytes_per_cycle"], cfg["links_per_node"],
                        cfg["dram_bandwidth_bytes_per_cycle"], cfg["arrays"],
                        cfg["network_pj_per_bit"], cfg["dram_pj_per_bit"], cfg["compute_pj_per_op"])
    apply_rates(total, report.cycles, params, len(report.nodes))
    for name in RATE_FIELDS:
        a, b = getattr(total, name), getattr(report.total, name)
        if a != b:
            problems.append(f"total {name}: trace={a} report={b}")
    return problems
