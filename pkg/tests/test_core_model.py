import itertools

import numpy as np
import pytest

from conftest import dag_a, linear_dag, make_catalog, nt
from core_model import (DeployedChain, DeploymentStore, NtDag, compute_skip_plan, enumerate_chain_subsets,
                        make_chain, validate_dag)
from errors import BitstreamTooLarge, CyclicDag, InvalidNetworkTask, NonPositiveBandwidth, NtTooLarge, UnknownNt


@pytest.mark.parametrize("kwargs", [
    {"area": 0}, {"bw": 0.0}, {"latency": 0}, {"stateful": True},
])
def test_network_task_rejects_bad_fields(kwargs):
    with pytest.raises(InvalidNetworkTask):
        nt("x", **kwargs)


def test_validate_accepts_dag_a(catalog):
    report = validate_dag(dag_a(), catalog)
    assert report.valid
    assert report.to_dict()["errors"] == []


def test_validate_reports_cycle_and_self_loop(catalog):
    cyclic = NtDag("c", "U1", ["NT1", "NT2"], [("NT1", "NT2"), ("NT2", "NT1")], 1.0)
    self_loop = NtDag("s", "U1", ["NT1"], [("NT1", "NT1")], 1.0)
    assert isinstance(validate_dag(cyclic, catalog).errors[0], CyclicDag)
    assert isinstance(validate_dag(self_loop, catalog).errors[0], CyclicDag)


def test_validate_unknown_nt_suggests_closest(catalog):
    report = validate_dag(NtDag("u", "U1", ["NT1", "NTX2"], [("NT1", "NTX2")], 1.0), catalog)
    assert isinstance(report.errors[0], UnknownNt)
    assert "did you mean" in str(report.errors[0])


def test_validate_rejects_non_positive_bandwidth(catalog):
    report = validate_dag(NtDag("z", "U1", ["NT1"], [], 0.0), catalog)
    assert any(isinstance(e, NonPositiveBandwidth) for e in report.errors)
    with pytest.raises(NonPositiveBandwidth):
        report.raise_for_errors()


def test_paths_and_linearize(catalog):
    dag = dag_a()
    assert dag.paths() == [["NT1", "NT2", "NT4"], ["NT3", "NT4"]]
    order = dag.linearize()
    assert order == ["NT1", "NT2", "NT3", "NT4"]
    for u, v in dag.edges:
        assert order.index(u) < order.index(v)


def test_chain_subsets_of_dag_a(catalog):
    chains = {c.id for c in enumerate_chain_subsets(dag_a(), catalog, 2)}
    assert chains == {"NT1", "NT2", "NT3", "NT4", "NT1>NT2", "NT2>NT4", "NT3>NT4"}


def test_chain_subsets_match_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ids = [f"N{i}" for i in range(5)]
        catalog = {i: nt(i, area=int(rng.integers(1, 3))) for i in ids}
        dag = linear_dag("d", "U1", ids)
        cap = int(rng.integers(2, 5))
        expected = set()
        for i, j in itertools.combinations(range(len(ids) + 1), 2):
            seg = ids[i:j]
            if sum(catalog[n].area for n in seg) <= cap:
                expected.add(">".join(seg))
        assert {c.id for c in enumerate_chain_subsets(dag, catalog, cap)} == expected


def test_chain_subsets_reject_oversized_nt():
    catalog = {"big": nt("big", area=3)}
    with pytest.raises(NtTooLarge):
        enumerate_chain_subsets(NtDag("b", "U1", ["big"], [], 1.0), catalog, 2)


def test_bitstream_size_scales_with_area(catalog):
    assert make_chain(["NT1"], catalog, 2).bitstream_size == pytest.approx(2.0)
    assert make_chain(["NT1", "NT2"], catalog, 2).bitstream_size == pytest.approx(4.0)


def test_bitstream_over_the_reconfiguration_limit_is_refused(catalog):
    assert make_chain(["NT1", "NT2"], catalog, 2, region_bitstream_mb=5.0).bitstream_size == pytest.approx(5.0)
    # a half-full region still fits
    assert make_chain(["NT1"], catalog, 2, region_bitstream_mb=6.0).bitstream_size == pytest.approx(3.0)
    with pytest.raises(BitstreamTooLarge):
        make_chain(["NT1", "NT2"], catalog, 2, region_bitstream_mb=6.0)


def test_skip_plan_masks_unused_nts(catalog):
    deployed = [DeployedChain(0, make_chain(["NT1", "NT2"], catalog, 2)),
                DeployedChain(1, make_chain(["NT3", "NT4"], catalog, 2))]
    plan = compute_skip_plan(["NT2", "NT4"], deployed)
    assert [s.region_id for s in plan.steps] == [0, 1]
    assert [s.mask for s in plan.steps] == [frozenset({0}), frozenset({0})]
    assert plan.serviced_path() == ["NT2", "NT4"]


def test_skip_plan_prefers_longest_cover_then_lowest_region(catalog):
    deployed = [DeployedChain(2, make_chain(["NT1", "NT2"], catalog, 2)),
                DeployedChain(1, make_chain(["NT1"], catalog, 2)),
                DeployedChain(0, make_chain(["NT1", "NT2"], catalog, 2))]
    plan = compute_skip_plan(["NT1", "NT2"], deployed)
    assert len(plan.steps) == 1
    assert plan.steps[0].region_id == 0


def test_skip_plan_none_when_uncovered(catalog):
    deployed = [DeployedChain(0, make_chain(["NT1", "NT2"], catalog, 2))]
    assert compute_skip_plan(["NT3"], deployed) is None


def test_skip_plan_honours_bandwidth_and_shareability():
    catalog = {"a": nt("a"), "b": nt("b", shareable=False)}
    chain = make_chain(["a", "b"], catalog, 2)
    assert compute_skip_plan(["a"], [DeployedChain(0, chain, spare_bandwidth=1.0)], catalog, 2.0) is None
    theirs = [DeployedChain(0, chain, owner="U1")]
    assert compute_skip_plan(["b"], theirs, catalog, 0.0, "U2") is None
    assert compute_skip_plan(["b"], theirs, catalog, 0.0, "U1") is not None


def test_skip_plan_round_trip_on_random_chains():
    rng = np.random.default_rng(11)
    ids = [f"N{i}" for i in range(6)]
    catalog = {i: nt(i) for i in ids}
    for _ in range(50):
        deployed = []
        for region in range(4):
            k = int(rng.integers(1, 4))
            picked = sorted(rng.choice(len(ids), size=k, replace=False))
            deployed.append(DeployedChain(region, make_chain([ids[p] for p in picked], catalog, 3)))
        path = [ids[p] for p in sorted(rng.choice(len(ids), size=int(rng.integers(1, 4)), replace=False))]
        plan = compute_skip_plan(path, deployed)
        if plan is not None:
            assert plan.serviced_path() == path


def test_deployment_store_round_trip(tmp_path):
    catalog = make_catalog()
    store = DeploymentStore(catalog)
    assert store.admit(dag_a(4.0)).valid
    path = tmp_path / "store.json"
    store.save_to_file(str(path))

    restored = DeploymentStore()
    restored.load_from_file(str(path))
    assert restored.get_dag("dag-a").edges == dag_a().edges
    assert restored.get_statistics() == {"catalog_size": 4, "deployed_dags": 1, "dags_by_owner": {"U1": 1}}
    assert [d.uid for d in restored.dags_of("U1")] == ["dag-a"]
