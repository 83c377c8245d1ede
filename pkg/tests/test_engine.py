import numpy as np
import pytest

from engine import Link, LinkModel, SimClock, cycles_to_ns, ns_to_cycles
from errors import EventOverflow


def test_unit_conversions():
    assert ns_to_cycles(100) == pytest.approx(25.0)
    assert cycles_to_ns(16) == pytest.approx(64.0)
    assert cycles_to_ns(16, 2000.0) == pytest.approx(8.0)


def test_host_link_delay_for_1000_byte_packet():
    model = LinkModel()
    assert model.transfer_ns(1000) == pytest.approx(180.0)
    assert model.delay_cycles(1000) == 45


def test_events_run_in_time_then_insertion_order(clock):
    seen = []
    clock.schedule(5, seen.append, "b")
    clock.schedule(2, seen.append, "a")
    clock.schedule(5, seen.append, "c")
    clock.schedule_at(5, seen.append, "d")
    clock.run_until(10)
    assert seen == ["a", "b", "c", "d"]
    assert clock.events_executed == 4


def test_run_until_is_inclusive_and_resumable(clock):
    seen = []
    clock.schedule(10, seen.append, 10)
    clock.schedule(11, seen.append, 11)
    clock.run_until(10)
    assert seen == [10]
    clock.run_until(20)
    assert seen == [10, 11]
    assert clock.ns() == pytest.approx(clock.now * 4.0)


def test_fractional_delays_round_up(clock):
    fired = []
    assert clock.schedule(2.2, lambda: fired.append(clock.now)) == 3
    clock.run_until(5)
    assert fired == [3]


def test_event_overflow():
    clock = SimClock(max_events=3)

    def again():
        clock.schedule(1, again)

    clock.schedule(0, again)
    with pytest.raises(EventOverflow):
        clock.run_until(100)


def test_link_serializes_back_to_back_packets(clock):
    link = Link(clock, LinkModel())
    arrivals = []
    link.send(1000, lambda: arrivals.append(clock.now))
    link.send(1000, lambda: arrivals.append(clock.now))
    clock.run_until(200)
    assert arrivals == [45, 65]
    assert link.bytes_sent == 2000


def test_lossy_link_drops():
    clock = SimClock()
    link = Link(clock, LinkModel(loss_rate=1.0), rng=np.random.default_rng(0))
    assert link.send(100, lambda: None) is False
    assert link.packets_lost == 1
