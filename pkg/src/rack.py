"""
Rack of sNICs: topology, stats gossip, overload redirection, remote chain
launch, stateful migration and reclaim.

Every sNIC runs its own RackAgent and decides from its own (possibly stale)
view of the rack. Agents only talk through messages on the simulated fabric;
the Rack object builds the boards, feeds the workloads and runs the clock.
"""

import itertools
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Set, Tuple

import networkx as nx
import numpy as np

from core_model import NtDag
from engine import Link, LinkModel, SimClock
from errors import DstRevoked, OutOfMemory
from metrics import MetricsLog, collect_metrics
from scheduler import PacketDescriptor
from sim_config import ScenarioConfig
from snic import Snic
from vmem import RemoteMemoryPool
from workload import Arrival, WorkloadGenerator

logger = logging.getLogger(__name__)

# Configuration
MESSAGE_BYTES = 64
OVERLOAD_EPOCHS = 1
RECLAIM_LOAD_FRACTION = 0.9
DRAIN_POLL_NS = 1000.0
REDIRECT_EXISTING = "redirect_existing"
REMOTE_LAUNCH = "remote_launch"


@dataclass
class SnicStats:
    snic_id: int
    free_regions: int
    chain_residual: Dict[str, float]
    free_memory: int
    port_headroom: float
    timestamp_ns: float


class RackTopology:
    """sNIC adjacency (ring, line, full mesh or star) with shortest-path hop counts."""

    def __init__(self, count: int, kind: str = "ring", link: Optional[LinkModel] = None):
        self.count = count
        self.kind = kind
        self.link = link or LinkModel(100.0, 500.0)
        if count <= 2 or kind == "line":
            graph = nx.path_graph(count)
        elif kind == "ring":
            graph = nx.cycle_graph(count)
        elif kind == "full":
            graph = nx.complete_graph(count)
        elif kind == "star":
            graph = nx.star_graph(count - 1)
        else:
            raise ValueError(f"unknown topology '{kind}'")
        if not nx.is_connected(graph):
            raise ValueError("rack topology must be connected")
        self.graph = graph
        self.hops: Dict[int, Dict[int, int]] = {a: dict(d) for a, d in nx.all_pairs_shortest_path_length(graph)}

    def hop_count(self, a: int, b: int) -> int:
        return self.hops[a][b]

    def message_ns(self, a: int, b: int, payload_bytes: int = 0) -> float:
        return self.hop_count(a, b) * self.link.latency_ns + payload_bytes * 8.0 / self.link.bandwidth_gbps


def offload_percent(load: float, capacity: float) -> int:
    """Share of flows to move so the local route carries no more than its capacity."""
    if load <= 0:
        return 0
    return max(1, min(100, math.ceil(100.0 * (load - capacity) / load - 1e-9)))


def swap_user(snic_id: int) -> str:
    return f"swap:snic{snic_id}"


def select_remote_snic(chain_ids: Iterable[str], view: Mapping[int, SnicStats],
                       hops: Mapping[int, int], exclude: Iterable[int] = ()) -> Optional[Tuple[int, str]]:
    """
    Pick a peer for an overloaded DAG from the local view.

    Peers already running every chain with residual bandwidth win (fewest hops,
    then lowest id); otherwise the closest peer with a free region gets a
    remote launch.
    """
    chains = list(chain_ids)
    skip = set(exclude)
    peers = sorted((s for s in view.values() if s.snic_id not in skip), key=lambda s: (hops[s.snic_id], s.snic_id))
    for stats in peers:
        if chains and all(stats.chain_residual.get(c, 0.0) > 0 for c in chains):
            return stats.snic_id, REDIRECT_EXISTING
    for stats in peers:
        if stats.free_regions > 0:
            return stats.snic_id, REMOTE_LAUNCH
    return None


class RackFabric:
    """FIFO links between every ordered pair of sNICs; latency scales with hop count."""

    def __init__(self, clock: SimClock, topology: RackTopology, rng: Optional[np.random.Generator] = None):
        self.clock = clock
        self.topology = topology
        self.links: Dict[Tuple[int, int], Link] = {}
        for a, b in itertools.permutations(range(topology.count), 2):
            model = LinkModel(topology.link.bandwidth_gbps, topology.hop_count(a, b) * topology.link.latency_ns)
            self.links[(a, b)] = Link(clock, model, rng, f"rack.{a}->{b}")

    def send(self, src: int, dst: int, size_bytes: int, handler, *args) -> None:
        self.links[(src, dst)].send(max(1, int(size_bytes)), handler, *args)


class PeerMemoryPool(RemoteMemoryPool):
    """
    Swap targets as the gossip view advertises them. A page swapped out to a
    peer holds a frame there until it is swapped back in.
    """

    def __init__(self, agent: "RackAgent"):
        super().__init__()
        self.agent = agent

    def advertise(self, peer: int, free_bytes: int, page_size: int) -> None:
        self.free_frames[peer] = free_bytes // page_size

    def take(self, peer: Hashable) -> None:
        super().take(peer)
        self.agent.store_page(peer)

    def give_back(self, peer: Hashable) -> None:
        super().give_back(peer)
        self.agent.release_page(peer)


@dataclass
class Offload:
    dag_uid: str
    peer: int
    percent: int
    mode: str
    state: str = "requested"  # requested | draining | active | reclaiming
    started_ns: float = 0.0
    excluded: Set[int] = field(default_factory=set)


class RackAgent:
    """The distributed control plane of one sNIC."""

    def __init__(self, snic: Snic, fabric: RackFabric, topology: RackTopology, metrics: MetricsLog,
                 enabled: bool = False, gossip_ns: float = 100_000.0):
        self.snic = snic
        self.id = snic.id
        self.fabric = fabric
        self.topology = topology
        self.metrics = metrics
        self.enabled = enabled
        self.gossip_ns = gossip_ns
        self.clock = snic.clock
        self.peers: Dict[int, "RackAgent"] = {}
        self.view: Dict[int, SnicStats] = {}
        self.offloads: Dict[str, Offload] = {}
        self.overloaded: Counter = Counter()
        self.in_transit: Counter = Counter()
        self.hosted_pages: Dict[int, List[int]] = defaultdict(list)
        snic.rack = self
        snic.vmem.peers = PeerMemoryPool(self)
        snic.vmem.swap_link = topology.link

    # ---------- gossip ----------
    def start(self) -> None:
        self.exchange_stats()

    def snapshot(self) -> SnicStats:
        stats = self.snic.stats()
        return SnicStats(self.id, stats["free_regions"], stats["chain_residual"], stats["free_memory"],
                         stats["port_headroom"], self.clock.ns())

    def exchange_stats(self) -> None:
        """Broadcast the local snapshot to every peer, then re-arm."""
        stats = self.snapshot()
        for peer in sorted(self.peers):
            if peer != self.id:
                self.fabric.send(self.id, peer, MESSAGE_BYTES, self.peers[peer].on_stats, stats)
        self.clock.schedule(self.clock.cycles(self.gossip_ns), self.exchange_stats)

    def on_stats(self, stats: SnicStats) -> None:
        current = self.view.get(stats.snic_id)
        if current is None or current.timestamp_ns <= stats.timestamp_ns:
            self.view[stats.snic_id] = stats
            self.snic.vmem.peers.advertise(stats.snic_id, stats.free_memory, self.snic.vmem.memory.page_size)

    def _choose(self, dag_uid: str, exclude: Iterable[int] = ()) -> Optional[Tuple[int, str]]:
        return select_remote_snic(self.snic.chain_ids(dag_uid), self.view, self.topology.hops[self.id], exclude)

    def remote_offer(self, dag_uid: str) -> Optional[int]:
        """First-access ladder hook: a peer that can take the whole DAG, if the view has one."""
        choice = self._choose(dag_uid)
        return choice[0] if choice else None

    # ---------- remote memory ----------
    def store_page(self, peer: int) -> None:
        page = self.snic.vmem.memory.page_size
        self.fabric.send(self.id, peer, page, self.peers[peer].on_page_stored, self.id)

    def release_page(self, peer: int) -> None:
        self.fabric.send(self.id, peer, MESSAGE_BYTES, self.peers[peer].on_page_released, self.id)

    def on_page_stored(self, src: int) -> None:
        try:
            frame = self.snic.vmem.memory.take(swap_user(src))
        except OutOfMemory:
            # the advertisement was stale; the page is counted but not backed here
            self.metrics.counters["swap_store_failures"] += 1
            logger.warning("snic%d: no frame for a page swapped in from snic%d", self.id, src)
            return
        self.hosted_pages[src].append(frame)

    def on_page_released(self, src: int) -> None:
        frames = self.hosted_pages.get(src)
        if frames:
            self.snic.vmem.memory.give_back(swap_user(src), frames.pop())

    # ---------- overload ----------
    def offered_load(self, user: str, dag_uid: str) -> float:
        """The DAG's intended load here: the larger of the smoothed and the last raw epoch sample."""
        monitor = self.snic.fairness.monitor
        return max(monitor.intended(user, dag_uid), monitor.last_sample(user, dag_uid))

    def on_epoch(self) -> None:
        if not self.enabled:
            return
        snic = self.snic
        for uid in sorted(snic.scheduler.routes):
            if uid in snic.hosted_for:
                continue
            dag = snic.store.get_dag(uid)
            load = self.offered_load(dag.owner, uid)
            capacity = snic.local_capacity(uid)
            overloaded = capacity > 0 and load > capacity * (1 + 1e-6) and snic.regions.free_regions() == 0
            offload = self.offloads.get(uid)
            if offload is not None:
                if offload.state != "active":
                    continue
                if snic.regions.free_regions() > 0 or (
                        snic.fairness.monitor.intended(dag.owner, uid) <= RECLAIM_LOAD_FRACTION * capacity):
                    self.reclaim(uid)
                elif overloaded and offload_percent(load, capacity) > offload.percent:
                    self.resize(uid, offload_percent(load, capacity))
                continue
            if overloaded:
                self.overloaded[uid] += 1
            else:
                self.overloaded[uid] = 0
                continue
            if self.overloaded[uid] >= OVERLOAD_EPOCHS:
                choice = self._choose(uid)
                if choice is None:
                    continue
                self.offload(uid, choice[0], offload_percent(load, capacity), choice[1])

    def resize(self, dag_uid: str, percent: int) -> None:
        """Widen an active redirect; newly covered flows of a stateful DAG drain before they move."""
        offload = self.offloads[dag_uid]
        offload.percent = percent
        offload.started_ns = self.clock.ns()
        self.metrics.record_migration(self.clock.ns(), "resize", dag_uid=dag_uid, src=self.id,
                                      dst=offload.peer, percent=percent)
        self.on_remote_ready(dag_uid, offload.peer)

    # ---------- migration: source side ----------
    def offload(self, dag_uid: str, peer: int, percent: int, mode: Optional[str] = None) -> None:
        """Ask a peer to host the DAG; the bitstream travels with a remote-launch request."""
        dag = self.snic.store.get_dag(dag_uid)
        if mode is None:
            choice = self._choose(dag_uid)
            mode = choice[1] if choice and choice[0] == peer else REMOTE_LAUNCH
        previous = self.offloads.get(dag_uid)
        offload = Offload(dag_uid, peer, percent, mode, started_ns=self.clock.ns(),
                          excluded=previous.excluded if previous else set())
        self.offloads[dag_uid] = offload
        payload = MESSAGE_BYTES
        if mode == REMOTE_LAUNCH:
            payload += int(sum(c.bitstream_size for c in self.snic.plans[dag_uid].chains()) * 1024 * 1024)
        self.metrics.record_migration(self.clock.ns(), "request", dag_uid=dag_uid, src=self.id, dst=peer,
                                      mode=mode, percent=percent, payload_bytes=payload)
        self.fabric.send(self.id, peer, payload, self.peers[peer].on_offload_request, self.id, dag, mode)

    def on_revoked(self, dag_uid: str, peer: int) -> None:
        offload = self.offloads.get(dag_uid)
        if offload is None:
            return
        offload.excluded.add(peer)
        self.metrics.record_migration(self.clock.ns(), "revoked", dag_uid=dag_uid, src=self.id, dst=peer)
        choice = self._choose(dag_uid, offload.excluded)
        if choice is None:
            del self.offloads[dag_uid]
            self.snic.offloading.discard(dag_uid)
            self.overloaded[dag_uid] = 0
            return
        self.offload(dag_uid, choice[0], offload.percent, choice[1])

    def on_remote_ready(self, dag_uid: str, peer: int) -> None:
        offload = self.offloads.get(dag_uid)
        dag = self.snic.store.get_dag(dag_uid)
        if offload is None or dag is None:
            return
        self.snic.mat.set_redirect(dag_uid, peer, offload.percent)
        moved = self.snic.mat.redirects[dag_uid].covers
        held = self.snic.scheduler.take_pending(dag_uid, moved)
        for desc in held:
            self.snic.untrack(desc)
        if any(self.snic.catalog[n].stateful for n in dag.nodes):
            # hold redirected flows until their local in-flight packets drain and the state has moved
            self.snic.paused[dag_uid] = held
            offload.state = "draining"
            self._await_drain(dag_uid)
        else:
            for desc in held:
                self.forward(desc, peer)
            self._activate(dag_uid)

    def _await_drain(self, dag_uid: str) -> None:
        offload = self.offloads.get(dag_uid)
        rule = self.snic.mat.redirects.get(dag_uid)
        if offload is None or rule is None:
            return
        if self.snic.inflight(dag_uid, rule.covers) - self.snic.scheduler.parked(dag_uid, rule.covers) > 0:
            self.clock.schedule(self.clock.cycles(DRAIN_POLL_NS), self._await_drain, dag_uid)
            return
        dag = self.snic.store.get_dag(dag_uid)
        state_bytes = sum(self.snic.catalog[n].state_size for n in dag.nodes if self.snic.catalog[n].stateful)
        self.metrics.record_migration(self.clock.ns(), "state_transfer", dag_uid=dag_uid, src=self.id,
                                      dst=offload.peer, state_bytes=state_bytes)
        self.fabric.send(self.id, offload.peer, state_bytes, self.peers[offload.peer].on_state, dag_uid, self.id)
        held = self.snic.paused.pop(dag_uid, [])
        for desc in held:
            self.forward(desc, offload.peer)
        self._activate(dag_uid)

    def _activate(self, dag_uid: str) -> None:
        offload = self.offloads[dag_uid]
        offload.state = "active"
        self.metrics.record_migration(self.clock.ns(), "redirect", dag_uid=dag_uid, src=self.id,
                                      dst=offload.peer, percent=offload.percent,
                                      setup_ns=self.clock.ns() - offload.started_ns)

    def forward(self, desc: PacketDescriptor, peer: int) -> None:
        """Pass a packet through to the peer hosting its DAG."""
        desc.redirected_from = self.id
        self.in_transit[desc.dag_uid] += 1
        self.metrics.counters["redirected_packets"] += 1
        self.fabric.send(self.id, peer, desc.size, self._hand_over, peer, desc)

    def _hand_over(self, peer: int, desc: PacketDescriptor) -> None:
        self.in_transit[desc.dag_uid] -= 1
        self.peers[peer].snic.receive(desc)

    def reclaim(self, dag_uid: str) -> None:
        """Move the DAG's redirected flows back: pause, let the peer drain, pull the state back."""
        offload = self.offloads[dag_uid]
        offload.state = "reclaiming"
        self.snic.paused[dag_uid] = []
        self.metrics.record_migration(self.clock.ns(), "reclaim", dag_uid=dag_uid, src=self.id, dst=offload.peer)
        self.fabric.send(self.id, offload.peer, MESSAGE_BYTES, self.peers[offload.peer].on_reclaim,
                         dag_uid, self.id)

    def on_reclaimed(self, dag_uid: str, peer: int) -> None:
        self.offloads.pop(dag_uid, None)
        self.overloaded[dag_uid] = 0
        self.snic.mat.clear_redirect(dag_uid)
        self.snic.offloading.discard(dag_uid)
        self.metrics.record_migration(self.clock.ns(), "reclaimed", dag_uid=dag_uid, src=self.id, dst=peer)
        for desc in self.snic.paused.pop(dag_uid, []):
            self.snic.receive(desc)

    # ---------- migration: destination side ----------
    def on_offload_request(self, src: int, dag: NtDag, mode: str) -> None:
        """
        Raises nothing to the sender: a request that no longer fits (the free
        region went to someone else) is answered with a revoke.
        """
        try:
            if dag.uid not in self.snic.store.dags:
                if mode == REMOTE_LAUNCH and self.snic.regions.free_regions() == 0:
                    raise DstRevoked(f"snic{self.id}: no free region left for {dag.uid}")
                if not self.snic.deploy(dag, boot=False, hosted_for=src):
                    raise DstRevoked(f"snic{self.id}: rejected {dag.uid}")
        except DstRevoked as exc:
            logger.info("%s", exc)
            self.fabric.send(self.id, src, MESSAGE_BYTES, self.peers[src].on_revoked, dag.uid, self.id)
            return
        self.snic.when_ready(dag.uid, lambda: self.fabric.send(
            self.id, src, MESSAGE_BYTES, self.peers[src].on_remote_ready, dag.uid, self.id))

    def on_state(self, dag_uid: str, src: int) -> None:
        self.metrics.record_migration(self.clock.ns(), "state_arrived", dag_uid=dag_uid, src=src, dst=self.id)

    def on_reclaim(self, dag_uid: str, src: int) -> None:
        if self.snic.inflight(dag_uid) > 0:
            self.clock.schedule(self.clock.cycles(DRAIN_POLL_NS), self.on_reclaim, dag_uid, src)
            return
        dag = self.snic.store.get_dag(dag_uid)
        state_bytes = 0
        if dag is not None:
            state_bytes = sum(self.snic.catalog[n].state_size for n in dag.nodes if self.snic.catalog[n].stateful)
            self.snic.deschedule(dag_uid)
        self.fabric.send(self.id, src, max(MESSAGE_BYTES, state_bytes), self.peers[src].on_reclaimed,
                         dag_uid, self.id)


class Rack:
    """Builds the boards and their agents from a scenario and drives one run."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.clock = SimClock(config.clock_mhz, config.max_events)
        self.metrics = MetricsLog(config.fairness.epoch_us * 1000.0, config.warmup_us * 1000.0,
                                  config.output.trace)
        catalog = config.build_catalog()
        behaviors = config.behavior_params()
        rack = config.rack
        self.topology = RackTopology(rack.snics, rack.topology, rack.link.model())
        self.fabric = RackFabric(self.clock, self.topology, np.random.default_rng([config.seed, 0]))
        self.snics: List[Snic] = []
        for i in range(rack.snics):
            snic_config = config.snic
            override = rack.overrides.get(i)
            if override is not None:
                update = {k: v for k, v in override.model_dump().items() if v is not None}
                snic_config = snic_config.model_copy(update=update)
            self.snics.append(Snic(i, self.clock, catalog, snic_config, config.fairness, self.metrics,
                                   behaviors, np.random.default_rng([config.seed, 1000 + i])))
        enabled = rack.distribution and rack.snics > 1
        self.agents = [RackAgent(s, self.fabric, self.topology, self.metrics, enabled,
                                 rack.gossip_period_us * 1000.0) for s in self.snics]
        for agent in self.agents:
            agent.peers = {a.id: a for a in self.agents}
        self._pkt_ids = itertools.count(1)
        self.end_ns = config.duration_us * 1000.0

    def _dag_config(self, dag_uid: str):
        return next(d for d in self.config.dags if d.uid == dag_uid)

    def _deploy(self, dag_uid: str, snic: Optional[int] = None) -> None:
        cfg = self._dag_config(dag_uid)
        self.snics[cfg.snic if snic is None else snic].deploy(cfg.dag(), boot=False)

    def _deschedule(self, dag_uid: str, snic: Optional[int] = None) -> None:
        cfg = self._dag_config(dag_uid)
        self.snics[cfg.snic if snic is None else snic].deschedule(dag_uid)

    def _inject(self, generator: WorkloadGenerator, arrival: Arrival) -> None:
        self.snics[arrival.snic].inject(arrival, next(self._pkt_ids))
        nxt = generator.next_arrival()
        if nxt is not None and nxt.time_ns <= self.end_ns:
            self._schedule_arrival(generator, nxt)

    def _schedule_arrival(self, generator: WorkloadGenerator, arrival: Arrival) -> None:
        self.clock.schedule_at(math.ceil(self.clock.cycles(arrival.time_ns) - 1e-9), self._inject, generator, arrival)

    def run(self) -> Dict:
        """Simulate the scenario and return the run summary."""
        config = self.config
        for dag in config.dags:
            if dag.deploy_at_us == 0:
                self.snics[dag.snic].deploy(dag.dag(), boot=config.snic.boot_loaded)
            else:
                self.clock.schedule_at(math.ceil(self.clock.cycles(dag.deploy_at_us * 1000.0)), self._deploy, dag.uid)
        for event in config.events:
            handler = self._deploy if event.action == "deploy" else self._deschedule
            self.clock.schedule_at(math.ceil(self.clock.cycles(event.at_us * 1000.0)), handler,
                                   event.dag_uid, event.snic)
        for snic in self.snics:
            snic.start()
        if len(self.agents) > 1:
            for agent in self.agents:
                agent.start()
        for index, workload in enumerate(config.workloads):
            generator = WorkloadGenerator(workload.spec(), config.seed, index)
            first = generator.next_arrival()
            if first is not None and first.time_ns <= self.end_ns:
                self._schedule_arrival(generator, first)

        logger.info("running %s: %d sNIC(s), %.0f us", config.name, len(self.snics), config.duration_us)
        self.clock.run_until(math.ceil(self.clock.cycles(self.end_ns) - 1e-9))
        extra = {
            "scenario": config.name,
            "seed": config.seed,
            "clock_mhz": config.clock_mhz,
            "snics": [s.summary() for s in self.snics],
        }
        return collect_metrics(self.metrics, self.end_ns, extra)
