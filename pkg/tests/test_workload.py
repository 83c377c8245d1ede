import numpy as np
import pandas as pd
import pytest

from errors import BadTrace
from workload import LoadStep, SizeSampler, WorkloadGenerator, WorkloadSpec, generate_workload, load_trace, offered_gbps


def _times(arrivals):
    return [a.time_ns for a in arrivals]


def test_constant_rate_spacing_and_offered_load():
    spec = WorkloadSpec(user="U1", dag_uid="d", rate_gbps=8.0, size_bytes=1000)
    arrivals = generate_workload(spec, seed=1, end_ns=10_000)
    assert _times(arrivals) == pytest.approx([i * 1000.0 for i in range(11)])
    assert offered_gbps(arrivals, 0, 10_000) == pytest.approx(8.0)


def test_flows_cycle():
    spec = WorkloadSpec(user="U1", rate_gbps=8.0, size_bytes=1000, flows=3)
    assert [a.flow_id for a in generate_workload(spec, 1, 5000)] == [0, 1, 2, 0, 1, 2]


def test_timeline_changes_rate_and_size():
    spec = WorkloadSpec(user="U1", rate_gbps=8.0, size_bytes=1000,
                        timeline=[LoadStep(at_us=5.0, rate_gbps=16.0, size_bytes=500)])
    arrivals = generate_workload(spec, 1, 6000)
    before = [a for a in arrivals if a.time_ns < 5000]
    after = [a for a in arrivals if a.time_ns >= 5000]
    assert len(before) == 5
    assert _times(after) == pytest.approx([5000.0, 5250.0, 5500.0, 5750.0, 6000.0])
    assert {a.size for a in after} == {500}


def test_zero_rate_waits_for_next_step():
    spec = WorkloadSpec(user="U1", rate_gbps=0.0, size_bytes=1000, timeline=[LoadStep(2.0, 8.0)])
    assert generate_workload(spec, 1, 10_000)[0].time_ns == pytest.approx(2000.0)


def test_start_and_stop():
    spec = WorkloadSpec(user="U1", rate_gbps=8.0, size_bytes=1000, start_us=3.0, stop_us=5.0)
    assert _times(generate_workload(spec, 1, 100_000)) == pytest.approx([3000.0, 4000.0])


def test_on_off_skips_off_periods():
    spec = WorkloadSpec(user="U1", process="on_off", rate_gbps=8.0, size_bytes=1000, on_us=10.0, off_us=10.0)
    times = _times(generate_workload(spec, 1, 25_000))
    assert len([t for t in times if t < 10_000]) == 10
    assert not [t for t in times if 10_000 <= t < 20_000]
    assert times[10] == pytest.approx(20_000.0)


def test_poisson_is_seeded():
    spec = WorkloadSpec(user="U1", process="poisson", rate_gbps=8.0, size_bytes=1000)
    first = _times(generate_workload(spec, 5, 200_000))
    again = _times(generate_workload(spec, 5, 200_000))
    other = _times(generate_workload(spec, 5, 200_000, index=1))
    assert first == again
    assert first != other
    assert offered_gbps(generate_workload(spec, 5, 2_000_000), 0, 2_000_000) == pytest.approx(8.0, rel=0.1)


def test_unknown_process():
    with pytest.raises(ValueError):
        WorkloadGenerator(WorkloadSpec(process="burst"), 1)


def test_facebook_size_distribution():
    sampler = SizeSampler(np.random.default_rng(0), "facebook")
    sizes = {sampler.sample() for _ in range(500)}
    assert sizes <= {64, 128, 192, 256, 384, 512, 768, 1024, 1280, 1500}
    assert 64 < sampler.mean < 1500
    assert sampler.sample(override=77) == 77


def test_bad_size_table(tmp_path):
    path = tmp_path / "sizes.csv"
    pd.DataFrame({"size_bytes": [64, 128], "cdf": [0.6, 0.5]}).to_csv(path, index=False)
    with pytest.raises(ValueError):
        SizeSampler(np.random.default_rng(0), str(path))


def _trace(tmp_path, rows, columns=("timestamp_ns", "user", "dag_uid", "size_bytes")):
    path = tmp_path / "trace.csv"
    pd.DataFrame(rows, columns=list(columns)).to_csv(path, index=False)
    return str(path)


def test_trace_replay(tmp_path):
    path = _trace(tmp_path, [(0, "U1", "d", 100), (50, "U2", "e", 200)])
    spec = WorkloadSpec(process="trace", trace_path=path)
    arrivals = generate_workload(spec, 1, 1000)
    assert [(a.time_ns, a.user, a.dag_uid, a.size) for a in arrivals] == [(0.0, "U1", "d", 100),
                                                                          (50.0, "U2", "e", 200)]


@pytest.mark.parametrize("rows", [
    [(10, "U1", "d", 100), (5, "U1", "d", 100)],
    [(-1, "U1", "d", 100)],
    [(0, "U1", "d", 0)],
    [("soon", "U1", "d", 100)],
])
def test_bad_traces(tmp_path, rows):
    with pytest.raises(BadTrace):
        load_trace(_trace(tmp_path, rows))


def test_trace_missing_column(tmp_path):
    path = _trace(tmp_path, [(0, "U1", 100)], columns=("timestamp_ns", "user", "size_bytes"))
    with pytest.raises(BadTrace):
        load_trace(path)
