import pytest

from multigcn.errors import ConfigError
from multigcn.node import (AggregationBuffer, DramPipe, NodeConfig, ReserveResult, aggregate_cost, combine_cost,
                           schedule_arrays)


def test_defaults_peak_ops():
    cfg = NodeConfig()
    assert cfg.peak_ops_per_cycle == 2048  # 8 arrays x 128 lanes x 2 ops per MAC
    with pytest.raises(ConfigError) as exc:
        NodeConfig(agg_buffer_bytes=0)
    assert exc.value.key == "agg_buffer_bytes"


@pytest.mark.parametrize("args, cycles", [
    ((512, 1, 8, 128), 4),       # half an array pass plus pipeline fill
    ((512, 490, 8, 128), 248),
    ((512, 0, 8, 128), 0),
    ((128, 1, 1, 128), 4),
])
def test_aggregate_cost(args, cycles):
    assert aggregate_cost(*args) == cycles


def test_combine_cost():
    # 512x128 MACs over 1024 lanes plus one fill of f_in + lanes
    assert combine_cost(512, 128, 8, 128) == 64 + 512 + 1024
    assert combine_cost(512, 128, 8, 128, vertices=10) == 640 + 512 + 1024
    assert combine_cost(512, 128, 8, 128, vertices=0) == 0


@pytest.mark.parametrize("agg, comb, split", [(100, 0, (8, 0)), (0, 0, (8, 0)), (0, 5, (0, 8)),
                                              (100, 100, (4, 4)), (300, 100, (6, 2)), (1, 10**6, (1, 7))])
def test_schedule_arrays(agg, comb, split):
    assert schedule_arrays(agg, comb, 8) == split


def test_dram_granularity_and_fifo():
    pipe = DramPipe(256.0, granularity=64, latency=100)
    done, billed = pipe.transfer(1, 0)
    assert billed == 64 and done == 1 + 100
    done2, billed2 = pipe.transfer(65, 0)  # queued behind the first request
    assert billed2 == 128 and done2 == 1 + 1 + 100
    with pytest.raises(ValueError):
        pipe.transfer(0, 0)


def test_dram_bulk_transfer_time():
    pipe = DramPipe(256.0)
    done, billed = pipe.transfer(128_000_000, 0)
    assert billed == 128_000_000
    assert done == 500_000 + 100
    assert pipe.busy_cycles == 500_000


def test_buffer_resident_then_stall_without_spill():
    buf = AggregationBuffer(4096, spill=False)
    assert buf.reserve_replica("a", 2048) == ReserveResult.RESIDENT
    assert buf.reserve_replica("b", 2048) == ReserveResult.RESIDENT
    assert buf.reserve_replica("c", 1) == ReserveResult.STALLED
    assert buf.reserve_replica("c", 1, limit=2048) == ReserveResult.STALLED
    buf.release("a")
    assert buf.reserve_replica("c", 2048) == ReserveResult.RESIDENT
    assert buf.peak == 4096 and buf.take_writebacks() == []


def test_buffer_spills_lru_and_reloads_on_pin():
    buf = AggregationBuffer(4096, spill=True)
    buf.reserve_replica("a", 2048)
    buf.reserve_replica("b", 2048)
    buf.pin(["b"])
    assert buf.reserve_replica("c", 2048) == ReserveResult.RESIDENT
    assert buf.take_writebacks() == [("a", 2048)]  # oldest unpinned entry
    buf.unpin("b")
    missing = buf.pin(["a"])
    assert missing == ["a"]
    assert buf.take_writebacks() == [("c", 2048)]
    assert buf.used == 4096


def test_buffer_spills_new_entry_when_everything_pinned():
    buf = AggregationBuffer(2048, spill=True)
    buf.reserve_replica("a", 2048)
    buf.pin(["a"])
    assert buf.reserve_replica("b", 1024) == ReserveResult.SPILLED
    assert buf.take_writebacks() == [("b", 1024)]
    with pytest.raises(AssertionError):
        buf.pin(["b"])


def test_buffer_rejects_oversized_and_duplicate():
    buf = AggregationBuffer(1024, spill=False)
    with pytest.raises(ConfigError):
        buf.reserve_replica("big", 2048)
    buf.reserve_replica("a", 8)
    with pytest.raises(KeyError):
        buf.reserve_replica("a", 8)
    with pytest.raises(AssertionError):
        buf._claim(2048)
