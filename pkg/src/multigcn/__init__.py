"""Simulator for multi-node GCN acceleration with multicast and round-based execution."""

from .engine import Model, SimConfig, Simulator, plan_for, run
from .errors import ConfigError, MultiGCNError, OracleError, ParseError, SimulationDeadlock
from .graph import CsrGraph, EdgeList, build_csr, generate_rmat, graph_stats, load_edge_list
from .metrics import MetricsReport, NodeCounters
from .node import NodeConfig
from .partition import PartitionPlan, build_partition_plan, compute_field_widths
from .torus import TorusGeom

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CsrGraph", "EdgeList", "MetricsReport", "Model", "MultiGCNError", "NodeConfig",
    "NodeCounters", "OracleError", "ParseError", "PartitionPlan", "SimConfig", "SimulationDeadlock",
    "Simulator", "TorusGeom", "build_csr", "build_partition_plan", "compute_field_widths",
    "generate_rmat", "graph_stats", "load_edge_list", "plan_for", "run",
]
