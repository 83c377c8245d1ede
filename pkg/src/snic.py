"""
One SuperNIC board assembled from its parts: MAT and ingress shaping, the
DRFQ admission pump, the central scheduler, region manager, fairness engine,
on-board virtual memory and the egress port.

Snic owns the control-plane glue: it turns DAG deployments into routes over
NT instances, resolves first accesses, runs the per-epoch time step and
autoscaling, and hands overload decisions to its rack agent.
"""

import logging
import math
from collections import Counter, defaultdict
from typing import Callable, Dict, List, Mapping, Optional, Set, Tuple

import numpy as np

from core_model import Catalog, DeploymentStore, NtChain, NtDag, RegionStatus, SkipPlan, compute_skip_plan
from dag_planner import AutoscaleState, ChainGroup, ParallelismPlan, autoscale_step, plan_parallelism
from engine import Link, LinkModel, SimClock
from errors import BufferOverflow, InfeasibleDemand, InsufficientShare, UnknownDagUid
from fairness import (FairnessEngine, IngressShaper, AdmissionPump, PathRoute, ResourceTotals,
                      SpaceAllocation, split_intended)
from metrics import MetricsLog
from nt_library import NtBehavior, build_behavior
from region_manager import Placement, PlacementKind, PrModel, RegionManager
from scheduler import (Branch, CentralScheduler, DagRoute, Mat, PacketDescriptor, RouteAlt, RouteKind,
                       StepRoute)
from sim_config import FairnessConfig, SnicConfig
from vmem import PhysicalMemory, VirtualMemory
from workload import Arrival

logger = logging.getLogger(__name__)

# Configuration
DEFAULT_REGION_BW = 10.0
EPS = 1e-9


class Snic:
    def __init__(self, snic_id: int, clock: SimClock, catalog: Catalog, config: SnicConfig,
                 fairness: FairnessConfig, metrics: MetricsLog,
                 behaviors: Optional[Mapping[str, Tuple[str, Dict]]] = None,
                 rng: Optional[np.random.Generator] = None):
        """
        Args:
            snic_id: Position of the board in the rack
            clock: Shared simulation clock
            catalog: NT catalog
            config: Board configuration (rack overrides already applied)
            fairness: Fairness engine configuration
            metrics: Run-wide metrics sink
            behaviors: NT id -> (kind, params) of the NT behavior models
            rng: Seeded generator for link loss
        """
        self.id = snic_id
        self.name = f"snic{snic_id}"
        self.clock = clock
        self.catalog = catalog
        self.config = config
        self.fairness_config = fairness
        self.metrics = metrics
        self.behaviors = dict(behaviors or {})
        self.rng = rng
        self.rack = None  # RackAgent, attached by the rack

        usable = config.usable_regions or config.regions
        self.region_bw = max((nt.max_bandwidth for nt in catalog.values()), default=DEFAULT_REGION_BW)
        memory_bytes = int(config.memory_gb * 1024 ** 3)
        self.vmem = VirtualMemory(PhysicalMemory(memory_bytes), swap_enabled=config.swap_enabled)
        self.regions = RegionManager(
            clock, config.regions, config.region_capacity, catalog,
            PrModel(config.pr.throughput_mb_s, config.pr.region_bitstream_mb),
            config.victim.keep_fraction, config.usable_regions, config.state_bandwidth_gbytes,
            self.vmem, on_ready=self._on_region_ready, name=self.name,
        )
        self.scheduler = CentralScheduler(
            clock, catalog, self._behavior, config.credits, config.buffer_depth,
            config.scheduler_delay_cycles, config.scheduling_mode, config.skip_mask_cycles,
            is_serving=self._is_serving, on_egress=self._egress, on_drop=self._on_drop,
            on_execute=self._on_execute, on_unplaced=self.first_access,
        )
        totals = ResourceTotals(
            fpga=usable * config.region_capacity * self.region_bw,
            memory=float(memory_bytes),
            ingress=config.port_bandwidth_gbps,
            egress=config.port_bandwidth_gbps,
            area=float(config.regions * config.region_capacity),
        )
        self.epoch_ns = fairness.epoch_us * 1000.0
        self.fairness = FairnessEngine(totals, config.region_capacity * self.region_bw, usable,
                                       fairness.mode, fairness.oversubscription_rule,
                                       fairness.demand_form, self.epoch_ns, fairness.ewma_keep)
        self.mat = Mat()
        self.store = DeploymentStore(dict(catalog))
        self.pump = AdmissionPump(clock, config.port_bandwidth_gbps, self.scheduler.schedule_packet)
        self.egress_link = Link(clock, LinkModel(config.port_bandwidth_gbps, config.host_link.latency_ns),
                                rng, f"{self.name}.egress")
        self.host_links: Dict[str, Link] = {}
        self.shapers: Dict[str, IngressShaper] = {}

        self.plans: Dict[str, ParallelismPlan] = {}
        self.dag_regions: Dict[str, Set[int]] = defaultdict(set)
        self.dag_shares: Dict[str, Set[int]] = defaultdict(set)
        self.autoscale: Dict[str, AutoscaleState] = {}
        self.pending_joins: Dict[int, List[Tuple[str, int, int, RouteAlt]]] = defaultdict(list)
        self.retiring: Set[int] = set()
        self.flow_inflight: Counter = Counter()  # (dag uid, flow id) -> admitted, not yet out
        self.paused: Dict[str, List[PacketDescriptor]] = {}
        self.hosted_for: Dict[str, int] = {}
        self.offloading: Set[str] = set()
        self._resolving: Set[str] = set()
        self._ready_waiters: List[Tuple[str, Callable[[], None]]] = []
        self.epoch = 0
        self._egress_bytes_mark = 0

    # ---------- wiring ----------
    def _behavior(self, nt_id: str) -> NtBehavior:
        kind, params = self.behaviors.get(nt_id, ("generic", {}))
        return build_behavior(kind, params)

    def _is_serving(self, region_id: int, generation: int) -> bool:
        region = self.regions.regions[region_id]
        return region.status is RegionStatus.ACTIVE and region.serving and region.generation == generation

    def start(self) -> None:
        """Arm the epoch timer."""
        self.clock.schedule(self.clock.cycles(self.epoch_ns), self._epoch)

    def _shaper(self, user: str) -> IngressShaper:
        shaper = self.shapers.get(user)
        if shaper is None:
            rate = sum(d.requested_ingress_bw for d in self.store.dags_of(user)) or self.config.port_bandwidth_gbps
            shaper = IngressShaper(self.clock, rate, self._admit, self.config.shaper_depth,
                                   self.config.shaper_burst_bytes, f"{self.name}.{user}")
            self.shapers[user] = shaper
        return shaper

    def _now_ns(self) -> float:
        return self.clock.ns()

    # ---------- deployment ----------
    def _amplification(self, dag: NtDag) -> float:
        return math.prod(self.catalog[n].egress_amplification for n in dag.nodes)

    def _space_step(self) -> SpaceAllocation:
        dags = list(self.store.dags.values())
        if not dags:
            self.fairness.space = SpaceAllocation(region_count=self.fairness.region_count)
            return self.fairness.space
        space = self.fairness.space_step(dags, self.catalog, {d.uid: self._amplification(d) for d in dags})
        for user, us in space.users.items():
            memory = us.allocation.get("memory", 0.0)
            page = self.vmem.memory.page_size
            # quotas are granted in whole pages
            self.vmem.memory.set_quota(user, math.ceil(memory / page - EPS) * page if memory > 0 else None)
        return space

    def deploy(self, dag: NtDag, boot: bool = False, hosted_for: Optional[int] = None) -> bool:
        """
        Admit a DAG, re-run the space step, plan it and pre-launch its chains.

        Returns:
            False if the DAG was rejected (invalid or infeasible)
        """
        now = self._now_ns()
        report = self.store.admit(dag)
        if not report.valid:
            self.metrics.record_placement(now, self.id, dag.uid, "rejected", reason=str(report.errors[0]))
            logger.warning("%s: rejected %s: %s", self.name, dag.uid, report.errors[0])
            return False
        try:
            space = self._space_step()
        except InfeasibleDemand as exc:
            self.store.remove_dag(dag.uid)
            self._space_step()
            self.metrics.record_placement(now, self.id, dag.uid, "rejected", reason=str(exc))
            logger.warning("%s: rejected %s: %s", self.name, dag.uid, exc)
            return False

        budget = space.budget_regions(dag.owner)
        pr = self.config.pr
        try:
            plan = plan_parallelism(dag, self.catalog, self.config.region_capacity, budget,
                                    dag.requested_ingress_bw, self.config.parallelism,
                                    self.config.scheduler_delay_cycles, self.config.instances,
                                    pr.region_bitstream_mb, pr.max_bitstream_mb)
        except InsufficientShare as exc:
            logger.info("%s: %s; deploying the minimal serial plan", self.name, exc)
            plan = plan_parallelism(dag, self.catalog, self.config.region_capacity, math.inf,
                                    dag.requested_ingress_bw, "off", self.config.scheduler_delay_cycles, 1.0,
                                    pr.region_bitstream_mb, pr.max_bitstream_mb)
        self.plans[dag.uid] = plan
        if hosted_for is not None:
            self.hosted_for[dag.uid] = hosted_for

        route = DagRoute(dag.uid, dag.owner, [])
        for stage in plan.stages:
            branches = []
            for group in stage.groups:
                branch = Branch(group.chain.nts)
                self._realize_group(dag, group, branch, route, boot)
                branches.append(branch)
            route.stages.append(branches)

        self.mat.install(dag.uid, dag.owner)
        self.scheduler.set_route(route)
        shaper = self._shaper(dag.owner)
        shaper.set_rate(max(shaper.rate_gbps, sum(d.requested_ingress_bw for d in self.store.dags_of(dag.owner))))
        if not boot:
            self.metrics.mark_deploy(dag.uid, self.id, now)
        self.metrics.record_placement(
            now, self.id, dag.uid, "deployed",
            plan=[[g.chain.id for g in s.groups] for s in plan.stages],
            instances=[[round(g.instances, 4) for g in s.groups] for s in plan.stages],
            regions=sorted(self.dag_regions[dag.uid]), shares=sorted(self.dag_shares[dag.uid]),
            complete=route.complete(),
        )
        return True

    def _demand(self, dag: NtDag, group: ChainGroup) -> float:
        bw = group.chain.bottleneck_bw(self.catalog)
        return min(bw, dag.requested_ingress_bw / max(group.instances, EPS))

    def _route_regions(self, route: DagRoute) -> Set[int]:
        return {rid for alt in route.alternatives() for rid in alt.regions()}

    def _realize_group(self, dag: NtDag, group: ChainGroup, branch: Branch, route: DagRoute,
                       boot: bool) -> None:
        """Whole instances first (no context switch at deploy time), then the fractional part."""
        chain = group.chain
        bw = chain.bottleneck_bw(self.catalog)
        demand = self._demand(dag, group)
        for _ in range(group.whole):
            exclude = self._route_regions(route) | {r for a in branch.alternatives for r in a.regions()}
            _, alt = self._place(dag, chain, demand, exclude, boot, allow_context_switch=False)
            if alt is not None:
                branch.alternatives.append(alt)
        if group.fraction > EPS:
            own = self.dag_regions[dag.uid] | self._route_regions(route)
            own |= {r for a in branch.alternatives for r in a.regions()}
            plan = compute_skip_plan(chain.nts, self.regions.active_chains(own), self.catalog, 0.0, dag.owner)
            if plan is not None:
                alt = self._skip_alt(plan, group.fraction * bw, whole=False)
                self.dag_shares[dag.uid].update(s.region_id for s in plan.steps)
                branch.alternatives.append(alt)
                self.regions.counters["shares"] += 1
                self.metrics.record_placement(self._now_ns(), self.id, dag.uid, "fractional_share",
                                              chain=chain.id, regions=[s.region_id for s in plan.steps],
                                              capacity=round(alt.capacity, 4))
            elif group.whole == 0:
                _, alt = self._place(dag, chain, min(bw, dag.requested_ingress_bw), own, boot,
                                     allow_context_switch=False)
                if alt is not None:
                    branch.alternatives.append(alt)

    def _skip_alt(self, plan: SkipPlan, capacity: float, whole: bool) -> RouteAlt:
        steps = [
            StepRoute(s.region_id, self.regions.regions[s.region_id].generation, s.chain,
                      s.active_positions, len(s.mask))
            for s in plan.steps
        ]
        return RouteAlt(steps, capacity, whole, capacity)

    def _region_alt(self, region_id: int, capacity: float) -> RouteAlt:
        region = self.regions.regions[region_id]
        step = StepRoute(region_id, region.generation, region.chain, tuple(range(len(region.chain))))
        return RouteAlt([step], capacity, True, capacity)

    def _place(self, dag: NtDag, chain: NtChain, demand: float, exclude: Set[int], boot: bool,
               allow_context_switch: bool,
               remote: Optional[Callable[[], Optional[int]]] = None) -> Tuple[Placement, Optional[RouteAlt]]:
        placement = self.regions.resolve_first_access(chain.nts, chain, dag.owner, demand, exclude,
                                                      allow_context_switch, remote, boot)
        bw = chain.bottleneck_bw(self.catalog)
        alt = None
        if placement.kind is PlacementKind.SHARE:
            self.dag_shares[dag.uid].update(s.region_id for s in placement.skip_plan.steps)
            alt = self._skip_alt(placement.skip_plan, bw, whole=True)
        elif placement.kind in (PlacementKind.SPACE_LAUNCH, PlacementKind.CONTEXT_SWITCH):
            self.dag_regions[dag.uid].add(placement.region_id)
            alt = self._region_alt(placement.region_id, bw)
            if placement.kind is PlacementKind.CONTEXT_SWITCH:
                self._invalidate_region(placement.region_id)
        if placement.kind is not PlacementKind.DEFERRED:
            self.metrics.record_placement(
                self._now_ns(), self.id, dag.uid, placement.kind.value, chain=chain.id,
                region=placement.region_id, peer=placement.peer, victim_hit=placement.victim_hit,
                evicted=placement.evicted[0].id if placement.evicted and placement.evicted[0] else None,
            )
        return placement, alt

    def _invalidate_region(self, region_id: int) -> None:
        """Drop every route alternative that runs on a stale generation of the region."""
        region = self.regions.regions[region_id]
        for uid, route in self.scheduler.routes.items():
            for stage in route.stages:
                for branch in stage:
                    stale = [
                        a for a in branch.alternatives
                        if any(s.region_id == region_id and (s.generation != region.generation
                                                             or region.status is not RegionStatus.ACTIVE)
                               for s in a.steps)
                    ]
                    for alt in stale:
                        branch.alternatives.remove(alt)
                    if stale:
                        self.dag_shares[uid].discard(region_id)
                        if region.owner != route.user or region.status is not RegionStatus.ACTIVE:
                            self.dag_regions[uid].discard(region_id)
                        logger.info("%s: %s lost %d route(s) on region %d", self.name, uid, len(stale), region_id)

    def first_access(self, dag_uid: str) -> None:
        """Place the unplaced branches of a DAG with the full ladder (share, launch, remote, switch)."""
        if dag_uid in self._resolving or dag_uid in self.offloading:
            return
        route = self.scheduler.routes.get(dag_uid)
        dag = self.store.get_dag(dag_uid)
        plan = self.plans.get(dag_uid)
        if route is None or dag is None or plan is None:
            return
        self._resolving.add(dag_uid)
        try:
            for si, stage in enumerate(route.stages):
                for bi, branch in enumerate(stage):
                    if branch.alternatives:
                        continue
                    group = plan.stages[si].groups[bi]
                    demand = self._demand(dag, group)
                    exclude = self._route_regions(route)
                    placement, alt = self._place(dag, group.chain, demand, exclude, boot=False,
                                                 allow_context_switch=False, remote=self._remote_offer(dag))
                    if placement.kind is PlacementKind.REMOTE:
                        self.offloading.add(dag_uid)
                        self.rack.offload(dag_uid, placement.peer, 100)
                        return
                    if alt is None:
                        recent = {
                            r.id for r in self.regions.regions
                            if self.clock.now - r.last_used < self.clock.cycles(self.epoch_ns)
                        }
                        placement, alt = self._place(dag, group.chain, demand, exclude | recent, boot=False,
                                                     allow_context_switch=True)
                    if alt is not None:
                        branch.alternatives.append(alt)
                    else:
                        logger.info("%s: %s still has no region for %s", self.name, dag_uid, group.chain.id)
            if route.complete():
                self.scheduler.release_dag(dag_uid)
        finally:
            self._resolving.discard(dag_uid)

    def _remote_offer(self, dag: NtDag) -> Optional[Callable[[], Optional[int]]]:
        if self.rack is None or not self.rack.enabled or dag.uid in self.hosted_for:
            return None
        return lambda: self.rack.remote_offer(dag.uid)

    def deschedule(self, dag_uid: str) -> bool:
        """Remove a DAG: its MAT entry, route and regions (kept as victims when the cache has room)."""
        dag = self.store.get_dag(dag_uid)
        if dag is None:
            return False
        self.mat.remove(dag_uid)
        self.scheduler.remove_route(dag_uid)
        self.plans.pop(dag_uid, None)
        self.autoscale.pop(dag_uid, None)
        self.hosted_for.pop(dag_uid, None)
        self.offloading.discard(dag_uid)
        for rid in sorted(self.dag_regions.pop(dag_uid, set())):
            self.retiring.discard(rid)
            self.regions.release(rid)
            self._invalidate_region(rid)
            self.scheduler.reroute_pending(rid)
        self.regions.unreserve(dag.owner, self.dag_shares.pop(dag_uid, set()))
        self.store.remove_dag(dag_uid)
        self.fairness.monitor.forget(dag_uid)
        self._space_step()
        self.metrics.record_placement(self._now_ns(), self.id, dag_uid, "descheduled")
        return True

    def route_ready(self, dag_uid: str) -> bool:
        route = self.scheduler.routes.get(dag_uid)
        return (route is not None and route.complete()
                and all(self.scheduler._alt_ready(a) for a in route.alternatives()))

    def when_ready(self, dag_uid: str, callback: Callable[[], None]) -> None:
        """Run callback once every route alternative of the DAG serves."""
        if self.route_ready(dag_uid):
            callback()
        else:
            self._ready_waiters.append((dag_uid, callback))

    def _on_region_ready(self, region_id: int) -> None:
        region = self.regions.regions[region_id]
        for uid, si, bi, alt in self.pending_joins.pop(region_id, []):
            route = self.scheduler.routes.get(uid)
            if route is None or alt.steps[0].generation != region.generation:
                continue
            route.stages[si][bi].alternatives.append(alt)
            logger.info("%s: %s scaled out onto region %d", self.name, uid, region_id)
        self.scheduler.region_ready(region_id)
        waiters, self._ready_waiters = self._ready_waiters, []
        for uid, callback in waiters:
            if uid not in self.scheduler.routes:
                continue
            self.when_ready(uid, callback)

    # ---------- data path ----------
    def inject(self, arrival: Arrival, pkt_id: int) -> None:
        """A host sends one packet toward this board."""
        desc = PacketDescriptor(pkt_id, arrival.user, arrival.dag_uid, arrival.size, arrival.flow_id,
                                arrival.key, arrival.seq, created_ns=self._now_ns())
        self.metrics.record_admit(arrival.user)
        link = self.host_links.get(arrival.user)
        if link is None:
            link = Link(self.clock, self.config.host_link.model(), self.rng, f"{self.name}.host.{arrival.user}")
            self.host_links[arrival.user] = link
        if not link.send(arrival.size, self.receive, desc):
            self.metrics.record_drop(arrival.user, "link_loss")

    def receive(self, desc: PacketDescriptor) -> None:
        """Parser and MAT: schedule, pass through, redirect or consume a packet."""
        try:
            decision = self.mat.parse_and_route(desc)
        except UnknownDagUid:
            self.metrics.record_drop(desc.user, "unknown_dag_uid")
            return
        if decision.kind is RouteKind.PASSTHROUGH:
            self.egress_link.send(desc.size, self._delivered, desc)
            return
        if decision.kind is RouteKind.CONTROL:
            self.metrics.counters["control_packets"] += 1
            return

        self.fairness.monitor.record_intended_load(desc.user, desc.dag_uid, desc.size)
        if decision.kind is RouteKind.REDIRECT:
            held = self.paused.get(desc.dag_uid)
            if held is not None:
                held.append(desc)
            else:
                self.rack.forward(desc, decision.peer)
            return

        desc.snic = self.id
        try:
            self._shaper(desc.user).offer(desc)
        except BufferOverflow:
            self.metrics.record_drop(desc.user, "shaper_overflow")
            return
        self.flow_inflight[(desc.dag_uid, desc.flow_id)] += 1

    def _admit(self, desc: PacketDescriptor) -> None:
        port = self.config.port_bandwidth_gbps
        dag = self.store.get_dag(desc.dag_uid)
        nt_ns = self.clock.ns(sum(self.catalog[n].proc_latency for n in dag.nodes)) if dag else 0.0
        wire_ns = desc.size * 8.0 / port
        costs = [wire_ns, nt_ns, wire_ns * self._amplification(dag) if dag else wire_ns, wire_ns]
        self.pump.admit(desc, costs)

    def _egress(self, desc: PacketDescriptor) -> None:
        self.untrack(desc)
        self.egress_link.send(desc.size * desc.copies, self._delivered, desc)

    def _delivered(self, desc: PacketDescriptor) -> None:
        self.metrics.record_egress(desc, self._now_ns(), self.id)

    def _on_drop(self, desc: PacketDescriptor, reason: str) -> None:
        self.untrack(desc)
        self.metrics.record_drop(desc.user, reason)

    def _on_execute(self, desc: PacketDescriptor, key) -> None:
        step = desc.route.steps[desc.step]
        self.metrics.record_execution(desc.pkt_id, step.chain.nts[step.positions[desc.pos]], self.id)

    def untrack(self, desc: PacketDescriptor) -> None:
        self.flow_inflight[(desc.dag_uid, desc.flow_id)] -= 1

    def inflight(self, dag_uid: str, flows: Optional[Callable[[int], bool]] = None) -> int:
        """Packets of the DAG (optionally only of the selected flows) admitted here and not yet out."""
        return sum(n for (uid, flow), n in self.flow_inflight.items()
                   if uid == dag_uid and (flows is None or flows(flow)))

    # ---------- epochs ----------
    def _nt_at(self, step: StepRoute, key) -> str:
        return step.chain.nts[key[2]]

    def path_routes(self) -> Tuple[List[PathRoute], List[RouteAlt], Dict]:
        """Every branch alternative as a fairness route, with its share of the DAG's intended load."""
        routes: List[PathRoute] = []
        alts: List[RouteAlt] = []
        capacity: Dict = {}
        for uid, route in self.scheduler.routes.items():
            intended = self.fairness.monitor.intended(route.user, uid)
            rule = self.mat.redirects.get(uid)
            if rule is not None and uid not in self.paused:
                intended *= 1.0 - rule.percent / 100.0
            entitlement = self.fairness.entitlement(route.user, uid)
            for stage in route.stages:
                for branch in stage:
                    ordered = sorted(branch.alternatives, key=lambda a: not a.whole)
                    prs = []
                    earlier_whole = 0.0
                    for alt in ordered:
                        prs.append(PathRoute(route.user, uid, tuple(alt.keys()), alt.capacity, alt.whole,
                                             max(0.0, entitlement - earlier_whole)))
                        if alt.whole:
                            earlier_whole += alt.capacity
                        for step in alt.steps:
                            for key in step.keys():
                                capacity[key] = self.catalog[self._nt_at(step, key)].max_bandwidth
                    for pr, load in zip(prs, split_intended(intended, prs)):
                        pr.intended = load
                    routes.extend(prs)
                    alts.extend(ordered)
        return routes, alts, capacity

    def _epoch(self) -> None:
        self.epoch += 1
        now = self._now_ns()
        self.fairness.monitor.close_epoch()
        routes, alts, capacity = self.path_routes()
        requested: Dict[str, float] = defaultdict(float)
        for dag in self.store.dags.values():
            requested[dag.owner] += dag.requested_ingress_bw

        if routes:
            for update in self.fairness.time_step(routes, capacity, requested):
                self.metrics.record_allocation(now, self.id, update.instance, update.shares)
            for user, limit in self.fairness.limits.items():
                if user in self.shapers:
                    self.shapers[user].set_rate(limit)
            for idx, cap in self.fairness.route_caps.items():
                alts[idx].weight = cap

        load: Dict[int, float] = defaultdict(float)
        for route in routes:
            for rid in {key[0] for key in route.instances}:
                load[rid] += route.intended
        self.regions.region_load = dict(load)

        if self.config.autoscale.enabled:
            self._autoscale()
        self._retire_drained()
        for uid, route in list(self.scheduler.routes.items()):
            if not route.complete() and uid in self.scheduler.dag_pending:
                self.first_access(uid)

        self._record_epoch(routes, capacity)
        if self.rack is not None:
            self.rack.on_epoch()
        self.clock.schedule(self.clock.cycles(self.epoch_ns), self._epoch)

    def _record_epoch(self, routes: List[PathRoute], capacity: Dict) -> None:
        intended: Dict[str, float] = defaultdict(float)
        for dag in self.store.dags.values():
            intended[dag.owner] += self.fairness.monitor.intended(dag.owner, dag.uid)
        dominant = self.fairness.dominant_shares(capacity) if routes else {}
        for user in sorted(intended):
            shaper = self.shapers.get(user)
            self.metrics.record_user_epoch(self.epoch, self.id, user, intended[user],
                                           shaper.rate_gbps if shaper else 0.0, dominant.get(user, 0.0))
        total = len(self.regions.regions)
        self.metrics.record_utilization(self.epoch, self.id, "fpga", self.regions.active_count() / total)
        memory = self.vmem.memory
        self.metrics.record_utilization(self.epoch, self.id, "memory",
                                        memory.allocated_frames / max(1, memory.total_frames))
        for user, resident in self.vmem.resident_by_user().items():
            quota = memory.quotas.get(user)
            if quota is not None and resident > quota:
                self.metrics.counters["memory_over_allocation"] += 1
                logger.warning("%s: %s holds %d B, allocation %d B", self.name, user, resident, quota)
        sent = self.egress_link.bytes_sent - self._egress_bytes_mark
        self._egress_bytes_mark = self.egress_link.bytes_sent
        self.metrics.record_utilization(self.epoch, self.id, "egress",
                                        sent * 8.0 / self.epoch_ns / self.config.port_bandwidth_gbps)

    # ---------- autoscaling ----------
    def _autoscale(self) -> None:
        cfg = self.config.autoscale
        for uid, plan in list(self.plans.items()):
            dag = self.store.get_dag(uid)
            route = self.scheduler.routes.get(uid)
            if dag is None or route is None or uid in self.hosted_for:
                continue
            load = self.fairness.monitor.intended(dag.owner, uid)
            budget = self.fairness.space.budget_regions(dag.owner)
            state = self.autoscale.setdefault(uid, AutoscaleState())
            delta = autoscale_step(plan, load, budget, self.catalog, state, cfg.up, cfg.down, cfg.sustain_epochs)
            if delta.empty:
                continue
            counts = {}
            for si, stage in enumerate(plan.stages):
                for bi, group in enumerate(stage.groups):
                    change = delta.changes.get(group.chain.id, 0)
                    if change > 0:
                        granted = self._scale_out(dag, route, si, bi, group, change)
                        counts[group.chain.id] = group.instances + granted
                    elif change < 0:
                        retired = self._scale_in(uid, route.stages[si][bi], -change)
                        counts[group.chain.id] = group.instances - retired
            self.plans[uid] = plan.with_instances(counts)

    def _scale_out(self, dag: NtDag, route: DagRoute, si: int, bi: int, group: ChainGroup, n: int) -> int:
        granted = 0
        branch = route.stages[si][bi]
        bw = group.chain.bottleneck_bw(self.catalog)
        for _ in range(n):
            placement = self.regions.space_launch(group.chain, dag.owner, bw, self.dag_regions[dag.uid])
            if placement is None:
                break
            self.dag_regions[dag.uid].add(placement.region_id)
            alt = self._region_alt(placement.region_id, bw)
            if self._is_serving(placement.region_id, alt.steps[0].generation):
                branch.alternatives.append(alt)
            else:
                # joins the round-robin only once its PR completes
                self.pending_joins[placement.region_id].append((dag.uid, si, bi, alt))
            self.metrics.record_placement(self._now_ns(), self.id, dag.uid, "scale_out",
                                          chain=group.chain.id, region=placement.region_id)
            granted += 1
        return granted

    def _scale_in(self, dag_uid: str, branch: Branch, n: int) -> int:
        own = [a for a in branch.alternatives
               if a.whole and len(a.steps) == 1 and a.steps[0].region_id in self.dag_regions[dag_uid]]
        retired = 0
        while own and retired < n and len([a for a in branch.alternatives if a.whole]) > 1:
            alt = own.pop()
            branch.alternatives.remove(alt)
            self.retiring.add(alt.steps[0].region_id)
            self.metrics.record_placement(self._now_ns(), self.id, dag_uid, "scale_in",
                                          region=alt.steps[0].region_id)
            retired += 1
        return retired

    def _retire_drained(self) -> None:
        busy = self.scheduler.busy_regions()
        for rid in sorted(self.retiring):
            if busy.get(rid, 0) or self.scheduler.region_pending.get(rid):
                continue
            self.retiring.discard(rid)
            for regions in self.dag_regions.values():
                regions.discard(rid)
            self.regions.release(rid)
            self._invalidate_region(rid)

    # ---------- rack-facing ----------
    def stats(self):
        """Local snapshot published to the rack."""
        residual: Dict[str, float] = {}
        for r in self.regions.regions:
            if r.status is RegionStatus.ACTIVE and r.chain is not None:
                residual[r.chain.id] = max(residual.get(r.chain.id, 0.0), self.regions.spare_bandwidth(r))
        window = self.clock.cycles(self.epoch_ns)
        return {
            "free_regions": self.regions.free_regions(),
            "chain_residual": residual,
            "free_memory": self.vmem.memory.free_bytes,
            "port_headroom": self.egress_link.headroom_gbps(window),
        }

    def local_capacity(self, dag_uid: str) -> float:
        """Bandwidth the local route can carry: the narrowest stage's summed alternative capacity."""
        route = self.scheduler.routes.get(dag_uid)
        if route is None or not route.complete():
            return 0.0
        return min(sum(a.capacity for a in branch.alternatives) for stage in route.stages for branch in stage)

    def chain_ids(self, dag_uid: str) -> List[str]:
        plan = self.plans.get(dag_uid)
        return [c.id for c in plan.chains()] if plan else []

    def summary(self) -> Dict:
        return {
            "snic": self.id,
            "regions": self.regions.summary(),
            "region_counters": dict(self.regions.counters),
            "scheduler_visits": self.scheduler.total_visits,
            "reorders": self.scheduler.reorder_count(),
            "buffered": self.scheduler.waiting(),
            "memory": self.vmem.counters(),
            "resident_bytes": self.vmem.resident_by_user(),
            "memory_quotas": dict(self.vmem.memory.quotas),
        }
