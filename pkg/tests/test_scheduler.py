import pytest

from conftest import make_catalog
from core_model import make_chain
from errors import UnknownDagUid
from nt_library import Firewall, KvCache, NtBehavior
from scheduler import (Branch, CentralScheduler, CreditStore, DagRoute, Mat, PacketDescriptor, RoundRobin,
                       RouteAlt, RouteKind, SmoothWeightedRoundRobin, StepRoute, SyncBuffer)


def _alt(catalog, region, nts, capacity=10.0):
    chain = make_chain(nts, catalog, 2)
    return RouteAlt([StepRoute(region, 1, chain, tuple(range(len(nts))))], capacity, True, capacity)


def _route(catalog, stages, uid="d"):
    """stages: list of stages, each a list of (region, nts) branches."""
    return DagRoute(uid, "U1", [[Branch(tuple(nts), [_alt(catalog, r, nts)]) for r, nts in stage]
                                for stage in stages])


class Harness:
    def __init__(self, clock, catalog, behaviors=None, **kwargs):
        behaviors = behaviors or {}
        self.out = []
        self.drops = []
        self.unplaced = []
        self.serving = {}
        self.sched = CentralScheduler(
            clock, catalog, lambda nt: behaviors.get(nt, NtBehavior()),
            is_serving=lambda r, g: self.serving.get(r, True),
            on_egress=lambda d: self.out.append((d.pkt_id, clock.now, d.visits)),
            on_drop=lambda d, reason: self.drops.append((d.pkt_id, reason)),
            on_unplaced=self.unplaced.append, **kwargs)

    def send(self, pkt_id=1, size=1000, flow_id=0):
        self.sched.schedule_packet(PacketDescriptor(pkt_id, "U1", "d", size, flow_id))


def test_chain_reservation_costs_one_visit(clock, catalog):
    h = Harness(clock, catalog)
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"])]]))
    h.send()
    clock.run_until(1000)
    assert h.out == [(1, 36, 1)]
    assert h.sched.busy_regions() == {}


def test_per_nt_mode_returns_between_nts(clock, catalog):
    h = Harness(clock, catalog, mode="per_nt")
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"])]]))
    h.send()
    clock.run_until(1000)
    assert h.out == [(1, 52, 2)]


def test_fork_and_join_of_parallel_stage(clock, catalog):
    h = Harness(clock, catalog)
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"]), (1, ["NT3"])], [(2, ["NT4"])]]))
    h.send()
    clock.run_until(1000)
    assert [(pkt, t) for pkt, t, _ in h.out] == [(1, 78)]
    assert len(h.sched.sync) == 0


def test_out_of_credits_waits_then_completes(clock):
    catalog = make_catalog(bw=1000.0)
    h = Harness(clock, catalog, credits=1)
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"])]]))
    for pkt in range(1, 6):
        h.send(pkt)
    clock.run_until(10_000)
    assert sorted(p for p, _, _ in h.out) == [1, 2, 3, 4, 5]
    assert h.sched.busy_regions() == {}
    assert h.sched.waiting() == 0
    assert all(v == 1 for v in h.sched.credits.available.values())


def test_nt_drop_returns_credits(clock, catalog):
    h = Harness(clock, catalog, behaviors={"NT1": Firewall([{"user": "U1"}])})
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"])]]))
    h.send()
    clock.run_until(1000)
    assert h.drops == [(1, "nt_drop:NT1")]
    assert h.out == []
    assert h.sched.busy_regions() == {}


def test_kv_hit_answers_early(clock, catalog):
    cache = KvCache(entries=4)
    cache.access(7)
    h = Harness(clock, catalog, behaviors={"NT1": cache})
    h.sched.set_route(_route(catalog, [[(0, ["NT1", "NT2"])]]))
    desc = PacketDescriptor(1, "U1", "d", 1000, key=7)
    h.sched.schedule_packet(desc)
    clock.run_until(1000)
    assert h.out == [(1, 26, 1)]
    assert desc.responded
    assert h.sched.busy_regions() == {}


def test_packets_wait_for_region_to_serve(clock, catalog):
    h = Harness(clock, catalog)
    h.serving[0] = False
    h.sched.set_route(_route(catalog, [[(0, ["NT1"])]]))
    h.send()
    clock.run_until(100)
    assert h.out == []
    assert h.sched.waiting() == 1
    h.serving[0] = True
    h.sched.region_ready(0)
    clock.run_until(200)
    assert [p for p, _, _ in h.out] == [1]
    assert h.out[0][1] == 111  # run_until leaves the clock one cycle past its bound


def test_unplaced_dag_parks_until_released(clock, catalog):
    h = Harness(clock, catalog)
    route = DagRoute("d", "U1", [[Branch(("NT1",))]])
    h.sched.set_route(route)
    h.send(1, flow_id=5)
    h.send(2, flow_id=60)
    clock.run_until(100)
    assert h.unplaced == ["d", "d"]
    assert h.sched.parked("d") == 2
    assert h.sched.parked("d", lambda f: f < 50) == 1

    taken = h.sched.take_pending("d", lambda f: f < 50)
    assert [d.pkt_id for d in taken] == [1]
    route.stages[0][0].alternatives.append(_alt(catalog, 0, ["NT1"]))
    h.sched.release_dag("d")
    clock.run_until(300)
    assert [p for p, _, _ in h.out] == [2]
    assert h.sched.waiting() == 0


def test_buffer_overflow_drops(clock, catalog):
    h = Harness(clock, catalog, buffer_depth=1)
    h.sched.set_route(DagRoute("d", "U1", [[Branch(("NT1",))]]))
    h.send(1)
    h.send(2)
    clock.run_until(100)
    assert h.drops == [(2, "buffer_overflow")]


def test_removed_route_drops_parked_packets(clock, catalog):
    h = Harness(clock, catalog)
    h.sched.set_route(DagRoute("d", "U1", [[Branch(("NT1",))]]))
    h.send(1)
    clock.run_until(100)
    h.sched.remove_route("d")
    assert h.drops == [(1, "descheduled")]


def test_unknown_scheduling_mode(clock, catalog):
    with pytest.raises(ValueError):
        CentralScheduler(clock, catalog, lambda nt: NtBehavior(), mode="batch")


def test_mat_routing():
    mat = Mat()
    mat.install("d", "U1")
    assert mat.parse_and_route(PacketDescriptor(1, "U1", "d", 64)).kind is RouteKind.SCHEDULE
    assert mat.parse_and_route(PacketDescriptor(1, "U1", None, 64)).kind is RouteKind.PASSTHROUGH
    assert mat.parse_and_route(PacketDescriptor(1, "U1", "d", 64, control=True)).kind is RouteKind.CONTROL
    with pytest.raises(UnknownDagUid):
        mat.parse_and_route(PacketDescriptor(1, "U1", "other", 64))
    with pytest.raises(UnknownDagUid):
        mat.parse_and_route(PacketDescriptor(1, "U2", "d", 64))


def test_mat_redirects_selected_flows_once():
    mat = Mat()
    mat.install("d", "U1")
    mat.set_redirect("d", 1, 38)
    moved = mat.parse_and_route(PacketDescriptor(1, "U1", "d", 64, flow_id=137))
    assert (moved.kind, moved.peer) == (RouteKind.REDIRECT, 1)
    assert mat.parse_and_route(PacketDescriptor(2, "U1", "d", 64, flow_id=38)).kind is RouteKind.SCHEDULE
    forwarded = PacketDescriptor(3, "U1", "d", 64, flow_id=1, redirected_from=0)
    assert mat.parse_and_route(forwarded).kind is RouteKind.SCHEDULE
    mat.clear_redirect("d")
    assert mat.parse_and_route(PacketDescriptor(4, "U1", "d", 64, flow_id=1)).kind is RouteKind.SCHEDULE


def test_credit_store_is_atomic_and_bounded():
    store = CreditStore(1)
    assert store.take_all(["a", "b"])
    assert not store.take_all(["a", "c"])
    assert store.in_flight("c") == 0
    store.give("a")
    with pytest.raises(AssertionError):
        store.give("a")
    with pytest.raises(ValueError):
        CreditStore(0)


def test_sync_buffer_joins_after_every_branch():
    sync = SyncBuffer()
    parent = PacketDescriptor(1, "U1", "d", 64)
    a, b = sync.fork(parent, 2)
    a.visits, b.visits = 2, 3
    assert sync.arrive(b) is None
    joined = sync.arrive(a)
    assert joined is parent
    assert joined.visits == 5
    assert sync.fork(parent, 1) == [parent]


def test_round_robin_selectors():
    rr = RoundRobin()
    assert [rr.select_instance("U1", "c", 3) for _ in range(4)] == [0, 1, 2, 0]
    swrr = SmoothWeightedRoundRobin()
    assert [swrr.pick([2.0, 1.0]) for _ in range(3)] == [0, 1, 0]
    equal = SmoothWeightedRoundRobin()
    assert [equal.pick([1.0, 1.0, 1.0]) for _ in range(3)] == [0, 1, 2]
