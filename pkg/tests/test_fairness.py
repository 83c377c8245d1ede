import itertools
import math
from types import SimpleNamespace

import pytest

from conftest import linear_dag, make_catalog
from errors import BufferOverflow, InfeasibleDemand
from fairness import (AdmissionPump, DemandVector, DrfqQueue, FairnessEngine, IngressShaper, LoadMonitor,
                      PathRoute, ResourceTotals, TokenBucket, apply_ingress_limits, drf_space_allocate,
                      drf_task_allocate, drfq_time_allocate, fluid_throughput, split_intended,
                      static_throughput)


def _pkt(user="U1", size=1000):
    return SimpleNamespace(user=user, size=size)


def test_drf_task_allocation_classic_example():
    assert drf_task_allocate({"x": (1, 4), "y": (3, 1)}, (9, 18)) == {"x": 3, "y": 2}


def test_drf_task_rejects_oversized_task():
    with pytest.raises(InfeasibleDemand):
        drf_task_allocate({"x": (10, 1)}, (9, 18))


def test_drf_space_caps_small_demand_and_fills_the_rest():
    totals = ResourceTotals(fpga=30.0, memory=math.inf, ingress=math.inf, egress=math.inf)
    demands = [DemandVector("U1", 10.0, 1.0, 10.0), DemandVector("U2", 40.0, 1.0, 40.0)]
    space = drf_space_allocate(demands, totals, region_units=10.0, region_count=3)
    assert space.users["U1"].allocation["fpga"] == pytest.approx(10.0)
    assert space.users["U2"].allocation["fpga"] == pytest.approx(20.0)
    assert space.users["U2"].dominant_share == pytest.approx(2 / 3)
    assert space.users["U2"].dominant_resource == "fpga"
    assert (space.users["U1"].whole_regions, space.users["U2"].whole_regions) == (1, 2)


def test_drf_space_rejects_dag_larger_than_board():
    totals = ResourceTotals(fpga=30.0, memory=math.inf, ingress=math.inf, egress=math.inf, area=2)
    with pytest.raises(InfeasibleDemand):
        drf_space_allocate([DemandVector("U1", 1.0, 3.0, 3.0)], totals, 10.0, 3)


def test_demand_vector_forms(catalog):
    dag = linear_dag("d", "U1", ["NT1", "NT2"], requested=5.0)
    assert DemandVector.from_dag(dag, catalog).fpga_demand == pytest.approx(10.0)
    assert DemandVector.from_dag(dag, catalog, form="ratio").fpga_demand == pytest.approx(1.0)


def test_time_step_splits_by_intended_load():
    shares = drfq_time_allocate({"U1": 8.0, "U2": 3.0}, 10.0, {"U1": 8.0, "U2": 4.0})
    assert shares["U1"] == pytest.approx(80 / 11)
    assert shares["U2"] == pytest.approx(30 / 11)


def test_time_step_uncontended_gives_intended():
    assert drfq_time_allocate({"U1": 4.0, "U2": 3.0}, 10.0) == {"U1": 4.0, "U2": 3.0}


def test_time_step_caps_proportional_shares_at_entitlements():
    # 20/3 : 10/3 exceeds U1's entitlement; the excess goes to U2 up to its load, the rest back to U1
    shares = drfq_time_allocate({"U1": 8.0, "U2": 4.0}, 10.0, {"U1": 5.0, "U2": 5.0})
    assert shares == pytest.approx({"U1": 6.0, "U2": 4.0})


@pytest.mark.parametrize("intended,entitlements,expected", [
    ({"U1": 6.0, "U2": 6.0}, {"U1": 6.0, "U2": 6.0}, {"U1": 5.0, "U2": 5.0}),
    ({"U1": 6.0, "U2": 6.0}, {"U1": 6.0, "U2": 4.0}, {"U1": 6.0, "U2": 4.0}),
    ({"U1": 9.0, "U2": 3.0}, {"U1": 5.0, "U2": 5.0}, {"U1": 7.0, "U2": 3.0}),
    ({"U1": 12.0, "U2": 12.0}, {"U1": 3.0, "U2": 3.0}, {"U1": 5.0, "U2": 5.0}),
])
def test_time_step_matches_capped_proportional_rule(intended, entitlements, expected):
    shares = drfq_time_allocate(intended, 10.0, entitlements)
    assert shares == pytest.approx(expected)
    assert sum(shares.values()) <= 10.0 + 1e-9


def test_time_step_requested_ratio_rule():
    shares = drfq_time_allocate({"U1": 8.0, "U2": 8.0}, 10.0, rule="requested_ratio",
                                requested={"U1": 3.0, "U2": 1.0})
    assert shares == pytest.approx({"U1": 7.5, "U2": 2.5})


@pytest.mark.parametrize("requested", [(5.0, 5.0), (10.0, 20.0), (15.0, 15.0), (8.0, 14.0)])
def test_fluid_allocation_properties(requested):
    levels = [0.0, 2.0, 5.0, 8.0, 12.0, 15.0, 20.0, 30.0]
    for o1, o2 in itertools.product(levels, levels):
        offered = {"U1": o1, "U2": o2}
        got = fluid_throughput(offered, {"U1": requested[0], "U2": requested[1]})
        assert sum(got.values()) == pytest.approx(min(o1 + o2, 30.0), abs=1e-6)
        for user, req in zip(("U1", "U2"), requested):
            assert got[user] <= offered[user] + 1e-6
            assert got[user] >= min(offered[user], req) - 1e-6


def test_fluid_beats_static_when_one_user_is_light():
    offered = {"U1": 8.0, "U2": 2.0}
    fluid = fluid_throughput(offered, {"U1": 5.0, "U2": 5.0}, regions=1)
    static = static_throughput(offered, regions=1)
    assert sum(fluid.values()) == pytest.approx(10.0)
    assert sum(static.values()) == pytest.approx(7.0)


def test_split_intended_fills_whole_routes_first():
    routes = [PathRoute("U2", "d", ("a",), 4.0, False), PathRoute("U2", "d", ("b",), 10.0, True)]
    assert split_intended(12.0, routes) == pytest.approx([2.0, 10.0])
    assert split_intended(20.0, routes) == pytest.approx([10.0, 10.0])


def test_ingress_limits_follow_shares_or_leftover():
    routes = [PathRoute("U1", "d1", ("i",), 10.0, True), PathRoute("U2", "d2", ("i",), 10.0, True)]
    loads = {"i": {"U1": 8.0, "U2": 3.0}}
    shares = {"i": drfq_time_allocate(loads["i"], 10.0)}
    limits, caps = apply_ingress_limits(routes, shares, loads, {"i": 10.0})
    assert limits["U1"] == pytest.approx(80 / 11)
    assert caps[1] == pytest.approx(30 / 11)

    light = {"i": {"U1": 4.0, "U2": 3.0}}
    limits, _ = apply_ingress_limits(routes, {}, light, {"i": 10.0})
    assert limits == pytest.approx({"U1": 7.0, "U2": 6.0})


def _engine(mode):
    totals = ResourceTotals(fpga=30.0, memory=math.inf, ingress=100.0, egress=100.0)
    engine = FairnessEngine(totals, region_units=10.0, region_count=3, mode=mode)
    catalog = make_catalog()
    engine.space_step([linear_dag("d1", "U1", ["NT1"], 8.0), linear_dag("d2", "U2", ["NT1"], 4.0)], catalog)
    routes = [PathRoute("U1", "d1", ("i",), 10.0, True, entitlement=8.0, intended=8.0),
              PathRoute("U2", "d2", ("i",), 10.0, True, entitlement=4.0, intended=3.0)]
    return engine, engine.time_step(routes, {"i": 10.0})


def test_engine_snic_mode():
    engine, updates = _engine("snic")
    assert updates[0].instance == "i"
    assert engine.limits == pytest.approx({"U1": 80 / 11, "U2": 30 / 11})
    assert engine.dominant_shares({"i": 10.0})["U1"] == pytest.approx(8 / 11)


def test_engine_static_mode_splits_equally():
    engine, updates = _engine("static")
    assert updates[0].shares == {"U1": 5.0, "U2": 5.0}
    assert engine.limits == pytest.approx({"U1": 5.0, "U2": 5.0})


def test_engine_drf_only_uses_ingress_entitlements():
    engine, _ = _engine("drf_only")
    assert engine.limits == pytest.approx({"U1": 8.0, "U2": 4.0})


def test_load_monitor_ewma():
    monitor = LoadMonitor(epoch_ns=1000.0, keep=0.25)
    monitor.record_intended_load("U1", "d", 1000)
    monitor.close_epoch()
    assert monitor.intended("U1", "d") == pytest.approx(6.0)
    monitor.close_epoch()
    assert monitor.intended("U1", "d") == pytest.approx(1.5)
    monitor.forget("d")
    assert monitor.intended("U1", "d") == 0.0


def test_token_bucket():
    bucket = TokenBucket(8.0, burst_bytes=1000)
    assert bucket.wait_ns(500, 0.0) == 0.0
    bucket.consume(500)
    assert bucket.wait_ns(1000, 0.0) == pytest.approx(500.0)
    assert bucket.wait_ns(1000, 500.0) == 0.0


def test_shaper_paces_packets(clock):
    released = []
    shaper = IngressShaper(clock, 8.0, lambda d: released.append(clock.now), burst_bytes=1000)
    for _ in range(3):
        shaper.offer(_pkt())
    clock.run_until(1000)
    assert released == [0, 250, 500]


def test_shaper_overflow(clock):
    shaper = IngressShaper(clock, 0.0, lambda d: None, depth=1, burst_bytes=0)
    shaper.offer(_pkt())
    with pytest.raises(BufferOverflow):
        shaper.offer(_pkt())


def test_drfq_orders_by_virtual_start():
    queue = DrfqQueue()
    for _ in range(3):
        queue.push("U1", "a", [10.0])
    queue.push("U2", "b", [10.0, 4.0])
    assert [queue.pop()[0] for _ in range(4)] == ["U1", "U2", "U1", "U1"]


def test_admission_pump_respects_store_bandwidth(clock):
    delivered = []
    pump = AdmissionPump(clock, 8.0, lambda d: delivered.append(clock.now))
    pump.admit(_pkt(), [1.0])
    pump.admit(_pkt(), [1.0])
    clock.run_until(1000)
    assert delivered == [0, 250]
