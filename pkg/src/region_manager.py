"""
Region lifecycle on one sNIC: pre-launch, first-access placement, stop-and-launch
context switches with partial-reconfiguration cost, and the victim cache of
de-scheduled chains.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from core_model import (Catalog, DeployedChain, NtChain, Region, RegionStatus, SkipPlan,
                        compute_skip_plan)
from engine import SimClock
from errors import OutOfMemory, QuotaExceeded, StateSpillFailure, VmemFault
from vmem import VirtualMemory

logger = logging.getLogger(__name__)

# Configuration
PR_THROUGHPUT_MB_S = 800.0
REGION_BITSTREAM_MB = 4.0
STATE_BANDWIDTH_GBYTES = 10.0
VICTIM_KEEP_FRACTION = 0.5
PROVIDER = "provider"


@dataclass
class PrModel:
    throughput_mb_s: float = PR_THROUGHPUT_MB_S
    region_bitstream_mb: float = REGION_BITSTREAM_MB

    def pr_latency_ns(self, chain: NtChain) -> float:
        if chain.bitstream_size <= 0:
            raise ValueError(f"chain {chain.id} has no bitstream")
        return chain.bitstream_size / self.throughput_mb_s * 1e9


class PlacementKind(Enum):
    SHARE = "share"
    SPACE_LAUNCH = "space_launch"
    CONTEXT_SWITCH = "context_switch"
    REMOTE = "remote"
    DEFERRED = "deferred"


@dataclass
class Placement:
    kind: PlacementKind
    region_id: Optional[int] = None
    skip_plan: Optional[SkipPlan] = None
    peer: Optional[int] = None
    ready_at: int = 0
    victim_hit: bool = False
    evicted: Optional[Tuple[NtChain, Optional[str]]] = None


class VictimSet:
    """De-scheduled regions kept loaded, least recently used first."""

    def __init__(self, cap: int):
        self.cap = cap
        self.entries: "OrderedDict[int, int]" = OrderedDict()

    def add(self, region_id: int, now: int) -> Optional[int]:
        """Returns the region evicted to make room, if any."""
        self.entries[region_id] = now
        self.entries.move_to_end(region_id)
        if len(self.entries) > self.cap:
            evicted, _ = self.entries.popitem(last=False)
            return evicted
        return None

    def remove(self, region_id: int) -> None:
        self.entries.pop(region_id, None)

    def lru(self) -> Optional[int]:
        return next(iter(self.entries), None)

    def __contains__(self, region_id: int) -> bool:
        return region_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


class RegionManager:
    def __init__(self, clock: SimClock, region_count: int, region_capacity: int, catalog: Catalog,
                 pr: Optional[PrModel] = None, keep_fraction: float = VICTIM_KEEP_FRACTION,
                 usable_regions: Optional[int] = None,
                 state_bandwidth_gbytes: float = STATE_BANDWIDTH_GBYTES,
                 vmem: Optional[VirtualMemory] = None,
                 on_ready: Optional[Callable[[int], None]] = None, name: str = "snic"):
        """
        Args:
            clock: Simulation clock
            region_count: Regions on the board (uniform capacity)
            region_capacity: Area units per region
            catalog: NT catalog
            pr: Partial-reconfiguration cost model
            keep_fraction: Victim-set cap as a fraction of regions (0 disables)
            usable_regions: Cap on simultaneously active regions (over-commit knob)
            state_bandwidth_gbytes: Save/restore bandwidth for context switches
            vmem: On-board memory holding NT state, live and spilled
            on_ready: Called with the region id when a region starts serving
        """
        self.clock = clock
        self.capacity = region_capacity
        self.catalog = catalog
        self.pr = pr or PrModel()
        self.regions = [Region(i, region_capacity) for i in range(region_count)]
        self.victims = VictimSet(int(keep_fraction * region_count))
        self.usable_regions = usable_regions if usable_regions is not None else region_count
        self.state_bandwidth_gbytes = state_bandwidth_gbytes
        self.vmem = vmem
        self.on_ready = on_ready
        self.name = name
        self.region_load: Dict[int, float] = {}
        self.counters: Dict[str, int] = {
            "pr_events": 0, "context_switches": 0, "victim_hits": 0,
            "victim_evictions": 0, "shares": 0, "space_launches": 0, "state_spill_failures": 0,
            "state_map_failures": 0, "state_restores": 0,
        }
        self.events: List[Dict] = []

    # ---------- bookkeeping ----------
    def _log(self, kind: str, region_id: Optional[int], chain: Optional[NtChain], **extra) -> None:
        event = {"time_ns": self.clock.ns(), "snic": self.name, "kind": kind, "region": region_id,
                 "chain": chain.id if chain else None}
        event.update(extra)
        self.events.append(event)
        logger.info("%s region %s: %s %s", self.name, region_id, kind, event["chain"])

    def spare_bandwidth(self, region: Region) -> float:
        if region.chain is None:
            return 0.0
        return region.chain.bottleneck_bw(self.catalog) - sum(region.owner_shares.values())

    def active_chains(self, exclude: Iterable[int] = ()) -> List[DeployedChain]:
        skip = set(exclude)
        return [
            DeployedChain(r.id, r.chain, self.spare_bandwidth(r), r.owner)
            for r in self.regions
            if r.status is RegionStatus.ACTIVE and r.id not in skip
        ]

    def active_count(self) -> int:
        return sum(1 for r in self.regions if r.status is RegionStatus.ACTIVE)

    def free_region(self) -> Optional[int]:
        if self.active_count() >= self.usable_regions:
            return None
        for r in self.regions:
            if r.status is RegionStatus.FREE:
                return r.id
        return None

    def free_regions(self) -> int:
        """Regions a launch can take now: free ones plus victims it would reclaim."""
        room = max(0, self.usable_regions - self.active_count())
        return min(room, sum(1 for r in self.regions if r.status is not RegionStatus.ACTIVE))

    def reserve(self, region_id: int, user: str, gbps: float) -> None:
        shares = self.regions[region_id].owner_shares
        shares[user] = shares.get(user, 0.0) + gbps

    def unreserve(self, user: str, region_ids: Iterable[int]) -> None:
        for rid in region_ids:
            self.regions[rid].owner_shares.pop(user, None)

    # ---------- NT state in on-board memory ----------
    def _state_bytes(self, nt_id: str) -> int:
        nt = self.catalog[nt_id]
        return (nt.state_size if nt.stateful else 0) + nt.mem_footprint

    def state_key(self, region_id: int, generation: int, position: int) -> Tuple:
        """Address-space key of one NT instance; matches the scheduler's instance key."""
        return ("state", self.name, region_id, generation, position)

    def saved_key(self, chain_id: str) -> Tuple:
        return ("saved", self.name, chain_id)

    def map_state(self, region_id: int) -> None:
        """
        Back every stateful NT of the region's chain with its own address space,
        taking over the state a context switch saved for this chain earlier.
        """
        region = self.regions[region_id]
        if self.vmem is None or region.chain is None:
            return
        saved = self.saved_key(region.chain.id)
        if saved in self.vmem.spaces:
            self.vmem.free_space(saved)
            self.counters["state_restores"] += 1
            self._log("state_restored", region_id, region.chain)
        for pos, nt_id in enumerate(region.chain.nts):
            size = self._state_bytes(nt_id)
            if size <= 0:
                continue
            key = self.state_key(region_id, region.generation, pos)
            try:
                self.vmem.persist_state(key, region.owner or PROVIDER, size)
            except VmemFault as exc:
                self.vmem.free_space(key)
                self.counters["state_map_failures"] += 1
                logger.warning("%s region %d: no memory for %s state: %s", self.name, region_id, nt_id, exc)

    def unmap_state(self, region_id: int) -> None:
        if self.vmem is None:
            return
        prefix = ("state", self.name, region_id)
        for key in [k for k in self.vmem.spaces if isinstance(k, tuple) and k[:3] == prefix]:
            self.vmem.free_space(key)

    def _drop_chain(self, region_id: int) -> None:
        region = self.regions[region_id]
        self.unmap_state(region_id)
        region.status = RegionStatus.FREE
        region.chain = None

    # ---------- launching ----------
    def launch(self, region_id: int, chain: NtChain, owner: Optional[str], boot: bool = False) -> int:
        """Start PR of chain into region; returns the cycle at which it serves."""
        if chain.total_area > self.capacity:
            raise ValueError(f"chain {chain.id} (area {chain.total_area}) exceeds region capacity")
        region = self.regions[region_id]
        self.victims.remove(region_id)
        self.unmap_state(region_id)
        region.status = RegionStatus.ACTIVE
        region.chain = chain
        region.owner = owner
        region.owner_shares = {}
        region.generation += 1
        region.last_used = self.clock.now
        self.counters["space_launches"] += 1
        self.map_state(region_id)
        if boot:
            region.serving = True
            self._log("boot_load", region_id, chain)
            return self.clock.now
        region.serving = False
        self.counters["pr_events"] += 1
        self._log("pr_start", region_id, chain)
        return self.clock.schedule(self.clock.cycles(self.pr.pr_latency_ns(chain)),
                                   self._ready, region_id, region.generation)

    def _ready(self, region_id: int, generation: int) -> None:
        region = self.regions[region_id]
        if region.generation != generation or region.status is not RegionStatus.ACTIVE:
            return
        region.serving = True
        self._log("pr_end", region_id, region.chain)
        if self.on_ready:
            self.on_ready(region_id)

    def promote_victim(self, region_id: int, owner: Optional[str]) -> int:
        region = self.regions[region_id]
        self.victims.remove(region_id)
        region.status = RegionStatus.ACTIVE
        region.owner = owner
        region.serving = True
        region.last_used = self.clock.now
        self.counters["victim_hits"] += 1
        self._log("victim_hit", region_id, region.chain)
        return self.clock.now

    def victim_lookup(self, chain_id: str) -> Optional[int]:
        """Victim region holding exactly this chain, if any."""
        for rid in self.victims.entries:
            if self.regions[rid].holds(chain_id):
                return rid
        return None

    def _evict_victim_for_launch(self) -> Optional[int]:
        if self.active_count() >= self.usable_regions:
            return None
        rid = self.victims.lru()
        if rid is None:
            return None
        self.victims.remove(rid)
        self.counters["victim_evictions"] += 1
        self._log("victim_evict", rid, self.regions[rid].chain)
        self._drop_chain(rid)
        return rid

    def release(self, region_id: int) -> None:
        """De-schedule the region's chain: keep it as a victim if the cache has room."""
        region = self.regions[region_id]
        if region.status is not RegionStatus.ACTIVE:
            return
        region.owner_shares = {}
        region.last_used = self.clock.now
        if self.victims.cap > 0:
            region.status = RegionStatus.VICTIM
            self._log("descheduled", region_id, region.chain)
            evicted = self.victims.add(region_id, self.clock.now)
            if evicted is not None:
                self.counters["victim_evictions"] += 1
                self._log("victim_evict", evicted, self.regions[evicted].chain)
                self._drop_chain(evicted)
        else:
            self._log("freed", region_id, region.chain)
            self._drop_chain(region_id)
            region.serving = False

    def deploy_dag(self, chains: Sequence[NtChain], owner: Optional[str],
                   boot: bool = False) -> List[Tuple[NtChain, Optional[int]]]:
        """
        Pre-launch every chain not already resident; chains that find no free
        (or victim) region are deferred to first access.

        Returns:
            (chain, region id or None when deferred) per chain
        """
        actions = []
        for chain in chains:
            resident = next((r.id for r in self.regions
                             if r.status is RegionStatus.ACTIVE and r.holds(chain.id)), None)
            if resident is not None:
                actions.append((chain, resident))
                continue
            rid = self.victim_lookup(chain.id)
            if rid is not None:
                self.promote_victim(rid, owner)
                actions.append((chain, rid))
                continue
            rid = self.free_region()
            if rid is None:
                rid = self._evict_victim_for_launch()
            if rid is None:
                logger.info("%s: no region for %s, deferred to first access", self.name, chain.id)
                actions.append((chain, None))
                continue
            self.launch(rid, chain, owner, boot)
            actions.append((chain, rid))
        return actions

    # ---------- first access ----------
    def least_loaded(self, exclude: Iterable[int] = ()) -> Optional[int]:
        skip = set(exclude)
        candidates = [r for r in self.regions
                      if r.status is RegionStatus.ACTIVE and r.serving and r.id not in skip]
        if not candidates:
            return None
        return min(candidates, key=lambda r: (self.region_load.get(r.id, 0.0), r.id)).id

    def resolve_first_access(self, path: Sequence[str], chain: NtChain, user: str,
                             demand_gbps: float, exclude: Iterable[int] = (),
                             allow_context_switch: bool = True,
                             remote: Optional[Callable[[], Optional[int]]] = None,
                             boot: bool = False) -> Placement:
        """
        Decision ladder: share existing NTs, reuse a victim, launch into a free
        (or reclaimed victim) region, go remote, and finally context switch.
        """
        exclude = list(exclude)
        plan = compute_skip_plan(path, self.active_chains(exclude), self.catalog, demand_gbps, user)
        if plan is not None:
            for step in plan.steps:
                self.reserve(step.region_id, user, demand_gbps)
                self.regions[step.region_id].last_used = self.clock.now
            self.counters["shares"] += 1
            self._log("share", plan.steps[0].region_id, chain, user=user)
            return Placement(PlacementKind.SHARE, plan.steps[0].region_id, plan,
                             ready_at=self.clock.now)

        placement = self.space_launch(chain, user, demand_gbps, exclude, boot)
        if placement is not None:
            return placement

        if remote is not None:
            peer = remote()
            if peer is not None:
                return Placement(PlacementKind.REMOTE, peer=peer)

        if allow_context_switch:
            victim = self.least_loaded(exclude)
            if victim is not None:
                old = (self.regions[victim].chain, self.regions[victim].owner)
                try:
                    ready = self.context_switch(victim, chain, user)
                except StateSpillFailure:
                    return Placement(PlacementKind.DEFERRED)
                self.reserve(victim, user, demand_gbps)
                return Placement(PlacementKind.CONTEXT_SWITCH, victim, ready_at=ready, evicted=old)
        return Placement(PlacementKind.DEFERRED)

    def space_launch(self, chain: NtChain, user: str, demand_gbps: float,
                     exclude: Iterable[int] = (), boot: bool = False) -> Optional[Placement]:
        """Victim hit, else launch into a free (or reclaimed victim) region; None if neither exists."""
        rid = self.victim_lookup(chain.id)
        if rid is not None and rid not in set(exclude) and self.active_count() < self.usable_regions:
            ready = self.promote_victim(rid, user)
            self.reserve(rid, user, demand_gbps)
            return Placement(PlacementKind.SPACE_LAUNCH, rid, ready_at=ready, victim_hit=True)

        rid = self.free_region()
        if rid is None:
            rid = self._evict_victim_for_launch()
        if rid is None:
            return None
        ready = self.launch(rid, chain, user, boot)
        self.reserve(rid, user, demand_gbps)
        return Placement(PlacementKind.SPACE_LAUNCH, rid, ready_at=ready)

    def context_switch(self, region_id: int, new_chain: NtChain, owner: Optional[str]) -> int:
        """
        Stop-and-launch: persist resident state, reconfigure, resume.

        Returns:
            Cycle at which the region serves the new chain

        Raises:
            StateSpillFailure: if on-board memory cannot hold the saved state
        """
        region = self.regions[region_id]
        old = region.chain
        state_bytes = sum(self.catalog[n].state_size for n in old.nts if self.catalog[n].stateful) if old else 0
        if state_bytes and self.vmem is not None:
            key = self.saved_key(old.id)
            try:
                self.vmem.persist_state(key, region.owner or PROVIDER, state_bytes)
            except (OutOfMemory, QuotaExceeded, VmemFault) as exc:
                self.vmem.free_space(key)
                self.counters["state_spill_failures"] += 1
                raise StateSpillFailure(f"region {region_id}: cannot save {state_bytes} B of state") from exc

        save_ns = state_bytes / self.state_bandwidth_gbytes
        stall_ns = save_ns + self.pr.pr_latency_ns(new_chain)
        self.victims.remove(region_id)
        self.unmap_state(region_id)
        region.status = RegionStatus.ACTIVE
        region.chain = new_chain
        region.owner = owner
        region.owner_shares = {}
        region.generation += 1
        region.serving = False
        region.last_used = self.clock.now
        self.map_state(region_id)
        self.counters["context_switches"] += 1
        self.counters["pr_events"] += 1
        self._log("context_switch", region_id, new_chain, evicted=old.id if old else None,
                  stall_ns=stall_ns)
        return self.clock.schedule(self.clock.cycles(stall_ns), self._ready, region_id, region.generation)

    def summary(self) -> List[Dict]:
        return [
            {"region": r.id, "status": r.status.value, "chain": r.chain.id if r.chain else None,
             "owner": r.owner, "shares": dict(r.owner_shares)}
            for r in self.regions
        ]
