"""Sweep execution, result files and run manifests."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import __version__
from .config import LANES, ExperimentSpec, parse_config, rmat_probs
from .engine import Model, SimConfig, Simulator, plan_for
from .errors import MultiGCNError
from .graph import CsrGraph, build_csr, generate_rmat, load_edge_list
from .metrics import CSV_COLUMNS, MetricsReport, csv_row, emit_report, write_trace
from .node import NodeConfig
from .partition import PartitionPlan, restrict_plan
from .torus import TorusGeom

RESULT_COLUMNS = ("run", "point", "repetition") + CSV_COLUMNS + ("speedup",)


def subsample_vertices(plan: PartitionPlan, fraction: Fraction | float, seed: int) -> PartitionPlan:
    """Keep the work of a seed-stable pseudo-random subset of destination vertices."""
    fraction = Fraction(fraction)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return plan
    rng = np.random.default_rng([seed, 0x5A3B1E])
    draws = rng.random(plan.num_vertices)
    keep = {v for v in plan.dest_counts if draws[v] < float(fraction)}
    return restrict_plan(plan, keep)


_GRAPH_CACHE: dict[tuple, CsrGraph] = {}


def load_graph(point: dict) -> CsrGraph:
    key = (point["graph"], point["graph_format"], point["vertex_scale"], point["avg_degree"],
           point["rmat_probs"], point["seed"], point["feature_len"], point["feature_len_out"])
    g = _GRAPH_CACHE.get(key)
    if g is None:
        if point["graph"] == "rmat":
            edges = generate_rmat(point["vertex_scale"], point["avg_degree"], rmat_probs(point["rmat_probs"]),
                                  seed=point["seed"])
        else:
            with open(point["graph"], "rb") as fh:
                edges = load_edge_list(fh, point["graph_format"])
        g = build_csr(edges, point["feature_len"], point["feature_len_out"])
        _GRAPH_CACHE.clear()
        _GRAPH_CACHE[key] = g
    return g


def sim_config(point: dict, model: str, *, trace: bool = False, round_log: bool = False) -> SimConfig:
    geom = TorusGeom.for_nodes(point["nodes"])
    ports = max(1, len(geom.ports()))
    node = NodeConfig(
        arrays=point["peak_ops"] // (2 * LANES),
        lanes_per_array=LANES,
        dram_bandwidth_bytes_per_cycle=float(point["dram_bandwidth"]),
        dram_latency_cycles=point["dram_latency"],
        agg_buffer_bytes=point["agg_buffer"],
        routing_buffer_bytes=point["routing_buffer"],
    )
    return SimConfig(
        geom=geom, node=node,
        link_bandwidth_bytes_per_cycle=float(point["network_bandwidth"]) / ports,
        link_latency_cycles=point["link_latency"],
        model=Model.parse(model),
        rounds_override=point["rounds_override"],
        seed=point["seed"],
        layers=point["layers"],
        alpha=point["alpha"],
        max_packet_neighbors=point["max_packet_neighbors"],
        trace=trace, round_log=round_log,
    )


@dataclass(frozen=True)
class RunItem:
    index: int
    point_index: int
    repetition: int
    model: str
    point: dict


def expand(spec: ExperimentSpec, models: Iterable[str] | None = None) -> list[RunItem]:
    models = list(models) if models else list(spec.models)
    items = []
    for p_idx, point in enumerate(spec.points()):
        for model in models:
            for rep in range(spec.repetitions):
                items.append(RunItem(len(items), p_idx, rep, Model.parse(model).value, point))
    return items


def simulate_point(point: dict, model: str, *, trace: bool = False,
                   round_log: bool = False) -> tuple[MetricsReport, Simulator]:
    g = load_graph(point)
    cfg = sim_config(point, model, trace=trace, round_log=round_log)
    plan = subsample_vertices(plan_for(cfg, g), point["sample_fraction"], point["seed"])
    sim = Simulator(cfg, g, plan)
    return sim.run(), sim


def _execute(item: RunItem, artifacts: str | None, trace: bool, round_log: bool) -> tuple[int, str, list | None]:
    try:
        report, sim = simulate_point(item.point, item.model, trace=trace, round_log=round_log)
    except MultiGCNError as exc:
        return item.index, f"failed: {type(exc).__name__}: {exc}", None
    if artifacts is not None and (trace or round_log):
        stem = f"{artifacts}.run{item.index}"
        with open(stem + ".report.json", "wb") as fh:
            fh.write(emit_report(report, "json"))
        if trace:
            with open(stem + ".trace.jsonl", "w", encoding="utf-8") as fh:
                write_trace(sim.trace, fh)
        if round_log:
            with open(stem + ".rounds.jsonl", "w", encoding="utf-8") as fh:
                for rec in sim.round_log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return item.index, "ok", csv_row(report)


def run_experiments(spec: ExperimentSpec, output: str | None = None, *, models: Iterable[str] | None = None,
                    jobs: int = 1, trace: bool = False, round_log: bool = False) -> dict:
    """Run every sweep point for every model; returns the manifest.

    Rows are written in run order by this process alone, each as soon as it
    and all earlier rows are available. The manifest goes next to the output
    once every run has finished or failed.
    """
    output = output or spec.output
    items = expand(spec, models)
    artifacts = os.path.splitext(output)[0]
    results: dict[int, tuple[str, list | None]] = {}
    base_cycles: dict[str, int] = {}
    runs = []
    row_count = 0
    with open(output, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        fh.flush()
        next_idx = 0

        def drain() -> None:
            nonlocal next_idx, row_count
            while next_idx in results:
                it = items[next_idx]
                status, row = results.pop(next_idx)
                entry = {"index": it.index, "point": it.point_index, "repetition": it.repetition,
                         "model": it.model, "status": status, "row": None}
                if row is not None:
                    cycles = row[CSV_COLUMNS.index("cycles")]
                    base = base_cycles.setdefault(it.model, cycles)
                    speedup = base / cycles if cycles else 0.0
                    w.writerow([it.index, it.point_index, it.repetition] + row + [repr(speedup)])
                    fh.flush()
                    entry["row"] = row_count
                    row_count += 1
                runs.append(entry)
                next_idx += 1

        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_execute, it, artifacts, trace, round_log) for it in items]
                for fut in futures:
                    idx, status, row = fut.result()
                    results[idx] = (status, row)
                    drain()
        else:
            for it in items:
                idx, status, row = _execute(it, artifacts, trace, round_log)
                results[idx] = (status, row)
                drain()
    manifest = {
        "tool_version": __version__,
        "config_hash": spec.config_hash(),
        "seed": spec.seed,
        "config": spec.to_text(),
        "models": list(dict.fromkeys(it.model for it in items)),
        "output": output,
        "runs": runs,
    }
    with open(manifest_path(output), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def manifest_path(output: str) -> str:
    return os.path.splitext(output)[0] + ".manifest.json"


def reproduce(manifest_file: str, output: str, jobs: int = 1) -> dict:
    """Re-run a manifest's configuration into ``output``."""
    with open(manifest_file, encoding="utf-8") as fh:
        manifest = json.load(fh)
    spec = parse_config(manifest["config"], env={})
    if spec.config_hash() != manifest["config_hash"]:
        raise MultiGCNError("manifest config does not match its hash")
    return run_experiments(spec, output, models=manifest.get("models") or None, jobs=jobs)


def read_results(path: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(io.StringIO(fh.read())))
