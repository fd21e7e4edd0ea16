import json

import pytest

from multigcn.cli import main
from multigcn.engine import Simulator
from multigcn.graph import load_edge_list
from multigcn.partition import load_plan

SMALL = "vertex_scale = 8\navg_degree = 8\nfeature_len = 64\nfeature_len_out = 16\n"


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(SMALL + "network_bandwidth = [300, 600] GB/s\nmodels = OPPE, TMM+SREM\n")
    return path


def test_simulate_trace_then_oracle(tmp_path, config, capsys):
    out = tmp_path / "res.csv"
    assert main(["simulate", "--config", str(config), "--out", str(out), "--trace", "--round-log"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 4
    manifest = json.loads((tmp_path / "res.manifest.json").read_text())
    assert [r["status"] for r in manifest["runs"]] == ["ok"] * 4
    assert (tmp_path / "res.run3.rounds.jsonl").exists()
    rc = main(["oracle", "--trace", str(tmp_path / "res.run1.trace.jsonl"),
               "--report", str(tmp_path / "res.run1.report.json")])
    assert rc == 0
    assert "all counters reproduced" in capsys.readouterr().out


def test_oracle_mismatch_exits_1(tmp_path, config):
    out = tmp_path / "res.csv"
    main(["simulate", "--config", str(config), "--out", str(out), "--trace", "--model", "OPPE"])
    report = tmp_path / "res.run0.report.json"
    d = json.loads(report.read_text())
    d["total"]["packet_count"] += 1
    report.write_text(json.dumps(d))
    assert main(["oracle", "--trace", str(tmp_path / "res.run0.trace.jsonl"), "--report", str(report)]) == 1


def test_model_filter(tmp_path, config):
    out = tmp_path / "res.csv"
    assert main(["simulate", "--config", str(config), "--out", str(out), "--model", "tmm+srem"]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_config_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nodes = 12\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2
    assert "nodes" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.cfg")]) == 1


def test_deadlock_exits_3(tmp_path, config, monkeypatch):
    monkeypatch.setattr(Simulator, "accept_local", lambda self, node, pkt: False)
    out = tmp_path / "res.csv"
    assert main(["simulate", "--config", str(config), "--out", str(out), "--model", "OPPE"]) == 3
    manifest = json.loads((tmp_path / "res.manifest.json").read_text())
    assert all(r["status"].startswith("failed: SimulationDeadlock") for r in manifest["runs"])
    assert len(out.read_text().splitlines()) == 1


def test_reproduce_is_byte_identical(tmp_path, config):
    out = tmp_path / "res.csv"
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
    again = tmp_path / "again.csv"
    assert main(["reproduce", "--manifest", str(tmp_path / "res.manifest.json"), "--out", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_parallel_jobs_match_serial(tmp_path, config):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(config), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(config), "--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_and_partition(tmp_path, capsys):
    graph = tmp_path / "g.bin"
    assert main(["generate", "--scale", "8", "--degree", "4", "--out", str(graph)]) == 0
    edges = load_edge_list(graph.read_bytes(), "binary")
    assert len(edges) == 1024 and edges.num_vertices == 256
    plan_file = tmp_path / "g.plan"
    assert main(["partition", "--graph", str(graph), "--format", "binary", "--nodes", "16",
                 "--agg-buffer", "64 KB", "--feature-len", "512", "--out", str(plan_file)]) == 0
    plan = load_plan(plan_file.read_bytes())
    # 0.75 * 64 KiB / 2 KiB = 24 -> x = 4
    assert (plan.widths.n, plan.widths.x) == (4, 4)
    assert plan.rounds == 1
    assert "x=4" in capsys.readouterr().out
    assert main(["partition", "--graph", str(graph), "--format", "binary", "--nodes", "12",
                 "--agg-buffer", "64KB", "--out", str(plan_file)]) == 2
