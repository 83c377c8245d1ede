"""End-to-end runs of small scenarios against hand-derived expectations."""

import numpy as np
import pytest

from conftest import load_raw, make_config, run_config, single_chain_raw


def _mean_latency(summary, user="U1"):
    return summary["users"][user]["latency_ns"]["mean"]


def _window_gbps(rack, first_epoch, last_epoch, users=("U1", "U2")):
    """Mean per-epoch throughput of the given users over epochs [first, last]."""
    totals = []
    for epoch in range(first_epoch, last_epoch + 1):
        totals.append(sum(rack.metrics.user_throughput_by_epoch(u).get(epoch, 0.0) for u in users))
    return float(np.mean(totals))


# ---------- latency ----------
@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_unloaded_chain_latency(n):
    summary, _ = run_config(make_config(single_chain_raw(n)))
    # host link in and out (45 cycles each), one scheduler visit, n NTs of 10 cycles
    assert _mean_latency(summary) == pytest.approx((45 + 16 + 10 * n + 45) * 4.0)
    assert summary["visit_histogram"] == {"1": 1}
    assert summary["users"]["U1"]["delivered"] == 1


@pytest.mark.parametrize("n", range(2, 8))
def test_per_nt_scheduling_pays_a_visit_per_hop(n):
    chain, _ = run_config(make_config(single_chain_raw(n)))
    per_nt, _ = run_config(make_config(single_chain_raw(n, mode="per_nt")))
    assert _mean_latency(per_nt) - _mean_latency(chain) == pytest.approx(16 * (n - 1) * 4.0)
    assert per_nt["visit_histogram"] == {str(n): 1}


# ---------- fairness ----------
def test_shared_instance_split_follows_intended_load():
    _, rack = run_config(make_config(load_raw("shared_nts")))
    shares = rack.metrics.last_allocation((0, 1, 1))
    assert shares == pytest.approx({"U1": 80 / 11, "U2": 30 / 11}, abs=1e-3)


@pytest.mark.parametrize("mode,phase1", [("snic", 10.0), ("drf_only", 7.0), ("static", 7.0)])
def test_fairness_dynamics(mode, phase1):
    _, rack = run_config(make_config(load_raw("fairness_dynamics"), fairness__mode=mode))
    # epochs are 20 us: U2 steps up at epoch 10
    assert _window_gbps(rack, 3, 9) == pytest.approx(phase1, abs=0.3)
    assert _window_gbps(rack, 13, 19, ("U1",)) == pytest.approx(5.0, abs=0.3)
    assert _window_gbps(rack, 13, 19, ("U2",)) == pytest.approx(5.0, abs=0.3)


# ---------- parallelism ----------
def _dag_a_latency(parallelism, latency):
    updates = {f"catalog__{i}__proc_latency_cycles": latency for i in range(4)}
    summary, _ = run_config(make_config(load_raw("parallelism"), snic__parallelism=parallelism, **updates))
    return _mean_latency(summary)


def test_dag_parallelism_helps_long_nts():
    serial = _dag_a_latency("off", 50)
    parallel = _dag_a_latency("on", 50)
    assert serial == pytest.approx((122 + 4 * 50) * 4.0)
    assert parallel == pytest.approx((138 + 3 * 50) * 4.0)
    assert parallel < serial
    assert _dag_a_latency("auto", 50) == pytest.approx(parallel)


def test_dag_parallelism_not_worth_it_for_short_nts():
    assert _dag_a_latency("on", 10) >= _dag_a_latency("off", 10)
    assert _dag_a_latency("auto", 10) == pytest.approx(_dag_a_latency("off", 10))


def test_instance_parallelism():
    raw = load_raw("instance_parallelism")
    single, _ = run_config(make_config(raw, snic__instances=1, workloads__1__rate_gbps=0))
    double, _ = run_config(make_config(raw, workloads__1__rate_gbps=0))
    shared, _ = run_config(make_config(raw))
    one = single["users"]["U1"]["throughput_gbps"]
    two = double["users"]["U1"]["throughput_gbps"]
    assert one == pytest.approx(10.0, rel=0.05)
    assert two == pytest.approx(20.0, rel=0.05)
    assert shared["users"]["U1"]["throughput_gbps"] < two
    assert shared["users"]["U1"]["throughput_gbps"] / one < 2.0


# ---------- credits ----------
def test_credits_bound_saturation_throughput():
    raw = load_raw("credit_sweep")
    starved, _ = run_config(make_config(raw, snic__credits=1))
    full, _ = run_config(make_config(raw, snic__credits=8))
    small, _ = run_config(make_config(raw, snic__credits=8, workloads__0__size_bytes=64))
    assert starved["total_throughput_gbps"] == pytest.approx(41.0, rel=0.1)
    assert full["total_throughput_gbps"] > 90.0
    assert small["total_throughput_gbps"] < full["total_throughput_gbps"]


# ---------- victim cache ----------
def test_victim_cache_skips_reconfiguration():
    raw = load_raw("victim_cache")
    warm, _ = run_config(make_config(raw))
    cold, _ = run_config(make_config(raw, snic__victim__keep_fraction=0.0))
    assert warm["snics"][0]["region_counters"]["pr_events"] == 0
    assert warm["snics"][0]["region_counters"]["victim_hits"] >= 1
    assert cold["snics"][0]["region_counters"]["pr_events"] == 1
    warm_stall = warm["deploy_stalls"][-1]["stall_ns"]
    cold_stall = cold["deploy_stalls"][-1]["stall_ns"]
    assert cold_stall - warm_stall == pytest.approx(2_500_000.0, abs=20_000.0)


# ---------- rack ----------
def test_overload_moves_flows_to_a_peer():
    raw = load_raw("migration")
    summary, rack = run_config(make_config(raw))
    requests = [m for m in summary["migrations"] if m["kind"] == "request"]
    assert requests[0]["percent"] == 38
    assert requests[0]["mode"] == "remote_launch"
    assert any(m["kind"] == "state_transfer" for m in summary["migrations"])
    assert summary["exactly_once_violations"] == 0
    assert summary["total_throughput_gbps"] == pytest.approx(16.0, rel=0.05)

    alone, _ = run_config(make_config(raw, rack__distribution=False))
    assert alone["migrations"] == []
    assert alone["total_throughput_gbps"] == pytest.approx(10.0, rel=0.05)


def test_overload_in_the_other_direction():
    raw = load_raw("migration")
    config = make_config(raw, dags__0__snic=1, workloads__0__snic=1, rack__overrides={1: {"usable_regions": 1}})
    summary, _ = run_config(config)
    request = next(m for m in summary["migrations"] if m["kind"] == "request")
    assert (request["src"], request["dst"], request["percent"]) == (1, 0, 38)
    assert summary["exactly_once_violations"] == 0
    assert summary["total_throughput_gbps"] == pytest.approx(16.0, rel=0.05)


def test_falling_load_reclaims_the_offloaded_flows():
    raw = load_raw("migration")
    config = make_config(raw, duration_us=6000, workloads__0__timeline=[{"at_us": 3500, "rate_gbps": 4}])
    summary, rack = run_config(config)
    kinds = [m["kind"] for m in summary["migrations"]]
    assert kinds.index("redirect") < kinds.index("reclaim") < kinds.index("reclaimed")
    reclaimed = next(m for m in summary["migrations"] if m["kind"] == "reclaimed")
    assert reclaimed["time_ns"] > 3_500_000
    assert rack.agents[0].offloads == {}
    assert "d-nat" not in rack.snics[0].mat.redirects
    assert "d-nat" not in rack.snics[1].store.dags
    assert summary["exactly_once_violations"] == 0


def test_resident_memory_stays_within_the_allocation():
    raw = load_raw("migration")
    summary, _ = run_config(make_config(raw, dags__0__memory_bytes=1_000_000))
    for snic in summary["snics"]:
        assert snic["memory_quotas"]["U1"] == 2 * 1024 * 1024
        assert snic["resident_bytes"]["U1"] == 2 * 1024 * 1024
        for user, resident in snic["resident_bytes"].items():
            assert resident <= snic["memory_quotas"].get(user, resident)
    assert summary["counters"].get("memory_over_allocation", 0) == 0
