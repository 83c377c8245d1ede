import pytest

from conftest import dag_a, linear_dag, make_catalog
from core_model import NtDag
from dag_planner import (AutoscaleState, apply_delta, autoscale_step, parallel_stages, plan_parallelism,
                         serial_stages)
from errors import BitstreamTooLarge, InsufficientShare


def _ids(stages):
    return [[c.id for c in s] for s in stages]


def test_serial_and_parallel_stages_of_dag_a():
    catalog = make_catalog(latency=50)
    assert _ids(serial_stages(dag_a(), catalog, 2)) == [["NT1>NT2"], ["NT3>NT4"]]
    assert _ids(parallel_stages(dag_a(), catalog, 2)) == [["NT1>NT2", "NT3"], ["NT4"]]


def test_serial_chains_are_execution_orders():
    catalog = make_catalog(ids=("NT1", "NT2", "NT3"))
    dag = NtDag("fork", "U1", ["NT1", "NT2", "NT3"], [("NT1", "NT3")], 1.0)
    stages = serial_stages(dag, catalog, 2)
    # NT1 and NT2 share a chain although no edge joins them
    assert _ids(stages) == [["NT1>NT2"], ["NT3"]]
    order = [n for stage in stages for chain in stage for n in chain.nts]
    assert order == dag.linearize()
    assert all(order.index(a) < order.index(b) for a, b in dag.edges)


def test_planner_honours_the_bitstream_limit():
    catalog = make_catalog(latency=50)
    with pytest.raises(BitstreamTooLarge):
        plan_parallelism(dag_a(), catalog, 2, 4, 1.0, "off", 16, region_bitstream_mb=6.0)
    plan = plan_parallelism(dag_a(), catalog, 2, 4, 1.0, "off", 16, region_bitstream_mb=6.0, max_bitstream_mb=8.0)
    assert max(g.chain.bitstream_size for s in plan.stages for g in s.groups) == pytest.approx(6.0)


def test_auto_picks_parallel_for_slow_nts():
    catalog = make_catalog(latency=50)
    plan = plan_parallelism(dag_a(), catalog, 2, fair_share=3.0, monitored_load=1.0, mode="auto")
    assert plan.parallel
    assert plan.critical_path_units == 3
    assert plan.sync_points == [0]
    assert plan.estimated_latency(catalog) == 198


def test_auto_keeps_serial_when_fork_visit_dominates():
    catalog = make_catalog(latency=10)
    plan = plan_parallelism(dag_a(), catalog, 2, fair_share=3.0, monitored_load=1.0, mode="auto")
    assert not plan.parallel
    assert plan.critical_path_units == 4
    assert plan.estimated_latency(catalog) == 72


def test_auto_stays_serial_when_share_too_small():
    catalog = make_catalog(latency=50)
    plan = plan_parallelism(dag_a(), catalog, 2, fair_share=2.0, monitored_load=1.0, mode="auto")
    assert not plan.parallel
    assert len(plan.chains()) == 2


def test_mode_on_and_off_are_forced():
    catalog = make_catalog(latency=10)
    assert plan_parallelism(dag_a(), catalog, 2, 3.0, 1.0, mode="on").parallel
    assert not plan_parallelism(dag_a(), catalog, 2, 3.0, 1.0, mode="off").parallel


def test_instances_fill_the_fair_share():
    catalog = make_catalog(latency=50)
    plan = plan_parallelism(dag_a(), catalog, 2, fair_share=3.0, monitored_load=1.0, mode="on")
    assert [g.instances for g in plan.groups()] == pytest.approx([1.0, 1.0, 1.0])


def test_high_load_asks_for_more_instances():
    catalog = make_catalog()
    dag = linear_dag("d", "U1", ["NT1"])
    plan = plan_parallelism(dag, catalog, 2, fair_share=2.5, monitored_load=25.0)
    assert plan.total_instances() == pytest.approx(2.5)
    group = plan.groups()[0]
    assert group.whole == 2
    assert group.fraction == pytest.approx(0.5)


def test_insufficient_share_raises():
    catalog = make_catalog()
    with pytest.raises(InsufficientShare):
        plan_parallelism(dag_a(), catalog, 2, fair_share=0.5, monitored_load=10.0)


def test_autoscale_grows_within_share_and_queues_the_rest():
    catalog = make_catalog()
    dag = linear_dag("d", "U1", ["NT1"])
    plan = plan_parallelism(dag, catalog, 2, fair_share=3.0, monitored_load=1.0, instances=1)

    delta = autoscale_step(plan, 9.5, 3.0, catalog)
    assert delta.changes == {"NT1": 1}
    assert apply_delta(plan, delta).total_instances() == pytest.approx(2.0)

    capped = autoscale_step(plan, 9.5, 1.0, catalog)
    assert capped.empty
    assert capped.queued == {"NT1": 1}


def test_autoscale_shrinks_and_respects_sustain():
    catalog = make_catalog()
    dag = linear_dag("d", "U1", ["NT1"])
    plan = plan_parallelism(dag, catalog, 2, fair_share=3.0, monitored_load=1.0, instances=3)

    state = AutoscaleState()
    assert autoscale_step(plan, 5.0, 3.0, catalog, state, sustain=2).empty
    assert autoscale_step(plan, 5.0, 3.0, catalog, state, sustain=2).changes == {"NT1": -2}


def test_autoscale_holds_inside_the_band():
    catalog = make_catalog()
    plan = plan_parallelism(linear_dag("d", "U1", ["NT1"]), catalog, 2, 3.0, 1.0, instances=1)
    assert autoscale_step(plan, 7.0, 3.0, catalog).empty
