import io
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multigcn.errors import ConfigError, ParseError
from multigcn.graph import EdgeList, build_csr, generate_rmat
from multigcn.partition import (VidDecode, build_partition_plan, compute_field_widths, decode_vid, dump_plan,
                                encode_vid, flatten_plan, load_plan, restrict_plan, round_of, widths_for_rounds)


def small_widths():
    # 16 nodes, 0.75 * M / S = 3 -> one slot bit
    return compute_field_widths(16, 4 * 2048, 2048)


def test_field_widths_small_torus():
    w = small_widths()
    assert (w.n, w.x) == (4, 1)


def test_field_widths_default_buffer():
    w = compute_field_widths(16, 1 << 20, 512 * 4)
    assert (w.n, w.x) == (4, 8)
    assert w.fits_buffer


@pytest.mark.parametrize("vid, expected", [(54, (6, 1, 1)), (15, (15, 0, 0)), (44, (12, 0, 1))])
def test_decode_examples(vid, expected):
    d = decode_vid(vid, small_widths())
    assert (d.node_id, d.slot, d.round_id) == expected


def test_field_width_errors():
    with pytest.raises(ConfigError) as exc:
        compute_field_widths(12, 1 << 20, 2048)
    assert exc.value.key == "nodes"
    with pytest.raises(ConfigError) as exc:
        compute_field_widths(16, 1024, 2048)
    assert exc.value.key == "agg_buffer"


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 16, 64, 1024]), st.integers(0, 10))
def test_encode_decode_inverse(vid, nodes, x):
    w = widths_for_rounds(nodes, 1, 1, 1 << 20, 2048)
    w = type(w)(w.n, x, nodes, w.agg_buffer_bytes, w.replica_bytes)
    d = decode_vid(vid, w)
    assert encode_vid(d, w) == vid
    assert d.node_id < nodes and d.slot < (1 << x)
    assert encode_vid(VidDecode(d.node_id, d.slot, d.round_id), w) == vid


def test_single_edge_task():
    g = build_csr(EdgeList.from_pairs([(0, 17)]), 512, 128)
    plan = build_partition_plan(g, small_widths())
    tasks = list(plan.all_tasks())
    assert len(tasks) == 1
    t = tasks[0]
    assert t.source_vid == 0 and t.round_id == round_of(17, plan.widths) == 0
    assert t.dest_nodes == (1,) and t.offsets == (0, 1) and t.neighbors == (17,)
    assert plan.tasks_for(0, 0) == [t]


def test_multicast_task_groups_by_destination_node():
    g = build_csr(EdgeList.from_pairs([(1, 39), (1, 54), (1, 51), (1, 35)]), 512, 128)
    plan = build_partition_plan(g, small_widths())
    (t,) = plan.all_tasks()
    assert t.dest_nodes == (3, 6, 7)
    assert t.offsets == (0, 2, 3, 4)
    assert t.neighbors == (35, 51, 54, 39)
    assert t.neighbors_at(0) == (35, 51)


def brute_force_tasks(pairs, w):
    """Group (u, v) by (round(v), u); then by home node of v."""
    out = {}
    for u, v in sorted(set(pairs)):
        r = v >> (w.n + w.x)
        out.setdefault((r, u), {}).setdefault(v & (w.num_nodes - 1), []).append(v)
    return out


def test_plan_matches_brute_force_rmat8():
    e = generate_rmat(8, 8, seed=4)
    g = build_csr(e, 64, 16)
    w = compute_field_widths(4, 4 * 256, 256)  # x = 1 -> 32 rounds over 256 vertices
    plan = build_partition_plan(g, w)
    assert plan.rounds == 32
    assert sorted(plan.edge_pairs()) == sorted(map(tuple, g.edge_pairs().tolist()))
    expect = brute_force_tasks(e.edges, w)
    got = {}
    for (r, node), tasks in plan.tasks.items():
        for t in tasks:
            assert t.round_id == r and t.source_vid % 4 == node
            for i, d in enumerate(t.dest_nodes):
                got.setdefault((r, t.source_vid), {}).setdefault(d, []).extend(t.neighbors_at(i))
    assert got == expect
    # each round holds at most nodes * slots destination vertices
    per_round = {}
    for v in plan.dest_counts:
        per_round.setdefault(round_of(v, w), set()).add(v)
    assert max(len(s) for s in per_round.values()) <= 4 * w.slots


@pytest.mark.parametrize("cap", [1, 3, 7])
def test_max_packet_neighbors_splits_tasks(cap):
    pairs = [(0, v) for v in range(1, 40)] + [(5, 9)]
    g = build_csr(EdgeList.from_pairs(pairs), 8, 8)
    w = compute_field_widths(4, 1 << 20, 32)
    plan = build_partition_plan(g, w, max_packet_neighbors=cap)
    assert sorted(plan.edge_pairs()) == sorted(pairs)
    for t in plan.all_tasks():
        assert 1 <= len(t.neighbors) <= cap
        assert t.offsets[0] == 0 and t.offsets[-1] == len(t.neighbors)
        assert list(t.offsets) == sorted(t.offsets)


def test_combine_order_round_then_slot():
    g = build_csr(EdgeList.from_pairs([(0, 54), (0, 6)]), 512, 128)
    plan = build_partition_plan(g, small_widths())
    order = plan.combine_order
    # vertex 54 lives on node 6; combine order lists every vertex homed there
    assert [v for v in order[6] if v in (6, 54)] == [6, 54]
    assert order[5] == [v for v in range(plan.num_vertices) if v % 16 == 5]


def test_combine_order_is_a_partition():
    g = build_csr(generate_rmat(9, 8, seed=2), 64, 16)
    w = compute_field_widths(8, 4 * 256, 256)
    plan = build_partition_plan(g, w)
    flat = list(itertools.chain.from_iterable(plan.combine_order))
    assert sorted(flat) == list(range(g.num_vertices))
    for node, vs in enumerate(plan.combine_order):
        keys = [(decode_vid(v, w).round_id, decode_vid(v, w).slot) for v in vs]
        assert keys == sorted(keys)
        assert all(v % 8 == node for v in vs)


def test_empty_node_has_no_tasks():
    g = build_csr(EdgeList.from_pairs([(0, 2), (2, 0)], num_vertices=4), 8, 8)
    plan = build_partition_plan(g, compute_field_widths(4, 1 << 20, 32))
    assert plan.tasks_for(0, 1) == [] and plan.tasks_for(0, 3) == []


def test_dump_load_round_trip():
    g = build_csr(generate_rmat(8, 8, seed=1), 64, 16)
    plan = build_partition_plan(g, compute_field_widths(4, 4 * 256, 256), max_packet_neighbors=5)
    buf = io.BytesIO()
    dump_plan(plan, buf)
    back = load_plan(buf.getvalue())
    assert back.widths == plan.widths
    assert back.rounds == plan.rounds and back.num_vertices == plan.num_vertices
    assert back.dest_counts == plan.dest_counts
    assert list(back.all_tasks()) == list(plan.all_tasks())
    assert back.combine_order == plan.combine_order


@pytest.mark.parametrize("cut", [3, 40, -1])
def test_load_truncated_plan(cut):
    g = build_csr(generate_rmat(6, 4, seed=1), 8, 8)
    buf = io.BytesIO()
    dump_plan(build_partition_plan(g, compute_field_widths(4, 1 << 20, 32)), buf)
    with pytest.raises(ParseError):
        load_plan(buf.getvalue()[:cut])


def test_restrict_and_flatten_keep_edges():
    g = build_csr(generate_rmat(8, 8, seed=5), 64, 16)
    plan = build_partition_plan(g, compute_field_widths(4, 4 * 256, 256))
    keep = set(range(0, 256, 3))
    sub = restrict_plan(plan, keep)
    assert sorted(sub.edge_pairs()) == sorted(p for p in plan.edge_pairs() if p[1] in keep)
    assert set(sub.dest_counts) == {v for v in plan.dest_counts if v in keep}
    flat = flatten_plan(plan)
    assert flat.rounds == 1
    assert sorted(flat.edge_pairs()) == sorted(plan.edge_pairs())
    assert flat.widths.n == plan.widths.n


def test_widths_for_rounds():
    for rounds in (1, 2, 4, 8):
        w = widths_for_rounds(16, 4096, rounds, 1 << 20, 2048)
        assert w.rounds_for(4096) <= rounds
        assert np.ceil(4096 / (16 << max(0, w.x - 1))) > rounds or w.x == 0
