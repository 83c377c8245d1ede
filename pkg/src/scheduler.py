"""
sNIC data plane: parser/MAT routing, credit store, synchronization buffer and
the central scheduler that dispatches packets onto NT chains.

A packet enters the scheduler once per dispatch unit. With whole-chain
reservation it takes one credit at every NT of the region's chain and then
flows NT-to-NT without coming back; when some NT is out of credits it falls
back to per-NT credits and returns to the scheduler wherever a credit is
missing. Every return costs one pipelined scheduler visit.
"""

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, Hashable, List, Optional, Sequence, Tuple

from core_model import Catalog, NtChain
from engine import SimClock, serialization_ns
from errors import BufferOverflow, UnknownDagUid
from nt_library import Action, NtBehavior

logger = logging.getLogger(__name__)

# Configuration
SCHEDULER_DELAY_CYCLES = 16
DEFAULT_CREDITS = 8
DEFAULT_BUFFER_DEPTH = 4096

InstanceKey = Tuple[int, int, int]  # (region id, region generation, position in chain)


# ---------- Packets ----------
@dataclass
class PacketDescriptor:
    pkt_id: int
    user: str
    dag_uid: Optional[str]
    size: int
    flow_id: int = 0
    key: Optional[int] = None
    seq: Optional[int] = None
    control: bool = False
    created_ns: float = 0.0
    ingress_cycle: int = 0
    stage: int = 0
    branch: int = 0
    step: int = 0
    pos: int = 0
    route: Optional["RouteAlt"] = None
    held_credits: Dict[InstanceKey, int] = field(default_factory=dict)
    stage_times: List[int] = field(default_factory=list)
    visits: int = 0
    credit_wait: int = 0
    wait_since: Optional[int] = None
    fork_token: Optional[int] = None
    copies: int = 1
    responded: bool = False
    dropped: Optional[str] = None
    snic: Optional[int] = None
    redirected_from: Optional[int] = None
    nat_port: Optional[int] = None

    @property
    def position(self) -> Tuple[int, int, int, int]:
        return self.stage, self.branch, self.step, self.pos

    def holds_credits(self) -> int:
        return sum(self.held_credits.values())

    def clone_for_branch(self, branch: int, token: int) -> "PacketDescriptor":
        return PacketDescriptor(
            pkt_id=self.pkt_id, user=self.user, dag_uid=self.dag_uid, size=self.size,
            flow_id=self.flow_id, key=self.key, seq=self.seq, created_ns=self.created_ns,
            ingress_cycle=self.ingress_cycle, stage=self.stage, branch=branch,
            stage_times=list(self.stage_times), fork_token=token, snic=self.snic,
            redirected_from=self.redirected_from,
        )


# ---------- Parser / MAT ----------
class RouteKind(Enum):
    SCHEDULE = "schedule"
    PASSTHROUGH = "passthrough"
    REDIRECT = "redirect"
    CONTROL = "control"


@dataclass(frozen=True)
class RoutingDecision:
    kind: RouteKind
    peer: Optional[int] = None


@dataclass
class RedirectRule:
    peer: int
    percent: int  # flows with flow_id % 100 < percent go to the peer

    def covers(self, flow_id: int) -> bool:
        return flow_id % 100 < self.percent


class Mat:
    """Match-and-action table keyed on (user, DAG UID), with per-DAG redirect rules."""

    def __init__(self):
        self.entries: Dict[str, str] = {}
        self.redirects: Dict[str, RedirectRule] = {}

    def install(self, dag_uid: str, user: str) -> None:
        self.entries[dag_uid] = user

    def remove(self, dag_uid: str) -> None:
        self.entries.pop(dag_uid, None)
        self.redirects.pop(dag_uid, None)

    def set_redirect(self, dag_uid: str, peer: int, percent: int) -> None:
        self.redirects[dag_uid] = RedirectRule(peer, max(0, min(100, int(percent))))

    def clear_redirect(self, dag_uid: str) -> None:
        self.redirects.pop(dag_uid, None)

    def parse_and_route(self, desc: PacketDescriptor) -> RoutingDecision:
        """
        Raises:
            UnknownDagUid: if the packet names a DAG with no entry (or another user's DAG)
        """
        if desc.control:
            return RoutingDecision(RouteKind.CONTROL)
        if desc.dag_uid is None:
            return RoutingDecision(RouteKind.PASSTHROUGH)
        owner = self.entries.get(desc.dag_uid)
        if owner is None or owner != desc.user:
            raise UnknownDagUid(f"no MAT entry for dag {desc.dag_uid} of {desc.user}")
        rule = self.redirects.get(desc.dag_uid)
        if rule is not None and desc.redirected_from is None and rule.covers(desc.flow_id):
            return RoutingDecision(RouteKind.REDIRECT, rule.peer)
        return RoutingDecision(RouteKind.SCHEDULE)


# ---------- Credits ----------
class CreditStore:
    """Per NT-instance credit counters; 0 <= available <= initial always."""

    def __init__(self, initial: int = DEFAULT_CREDITS):
        if initial < 1:
            raise ValueError("initial credits must be >= 1")
        self.initial = initial
        self.available: Dict[Hashable, int] = {}

    def _ensure(self, key: Hashable) -> None:
        if key not in self.available:
            self.available[key] = self.initial

    def has(self, key: Hashable) -> bool:
        self._ensure(key)
        return self.available[key] > 0

    def take(self, key: Hashable) -> None:
        self._ensure(key)
        assert self.available[key] > 0, f"no credit at {key}"
        self.available[key] -= 1

    def take_all(self, keys: Sequence[Hashable]) -> bool:
        """Atomically take one credit per key, or nothing."""
        if not all(self.has(k) for k in keys):
            return False
        for k in keys:
            self.available[k] -= 1
        return True

    def give(self, key: Hashable) -> None:
        assert self.available[key] < self.initial, f"credit overflow at {key}"
        self.available[key] += 1

    def in_flight(self, key: Hashable) -> int:
        self._ensure(key)
        return self.initial - self.available[key]

    def forget(self, key: Hashable) -> None:
        if self.available.get(key) == self.initial:
            del self.available[key]


# ---------- Synchronization buffer ----------
@dataclass
class JoinState:
    parent: PacketDescriptor
    expected: int
    arrived: Dict[int, PacketDescriptor] = field(default_factory=dict)


class SyncBuffer:
    """Holds forked branch headers until every branch of a stage has returned."""

    def __init__(self):
        self.pending: Dict[int, JoinState] = {}
        self._tokens = itertools.count(1)

    def fork(self, desc: PacketDescriptor, branches: int) -> List[PacketDescriptor]:
        if branches <= 1:
            return [desc]
        token = next(self._tokens)
        self.pending[token] = JoinState(desc, branches)
        return [desc.clone_for_branch(b, token) for b in range(branches)]

    def arrive(self, branch_desc: PacketDescriptor) -> Optional[PacketDescriptor]:
        """Record one branch; returns the joined descriptor once all branches are in."""
        state = self.pending[branch_desc.fork_token]
        state.arrived[branch_desc.branch] = branch_desc
        if len(state.arrived) < state.expected:
            return None
        del self.pending[branch_desc.fork_token]
        parent = state.parent
        branches = [state.arrived[b] for b in sorted(state.arrived)]
        parent.visits += sum(b.visits for b in branches)
        parent.credit_wait += max(b.credit_wait for b in branches)
        parent.copies = max(b.copies for b in branches)
        parent.stage_times = max((b.stage_times for b in branches), key=len)
        dropped = [b.dropped for b in branches if b.dropped]
        parent.dropped = dropped[0] if dropped else None
        parent.nat_port = next((b.nat_port for b in branches if b.nat_port is not None), parent.nat_port)
        parent.branch = 0
        return parent

    def __len__(self) -> int:
        return len(self.pending)


# ---------- Instance selection ----------
class RoundRobin:
    """Strict round-robin counter per (user, chain)."""

    def __init__(self):
        self.counters: Dict[Hashable, int] = {}

    def select_instance(self, user: str, chain_id: str, k: int) -> int:
        if k < 1:
            raise ValueError("need at least one instance")
        key = (user, chain_id)
        n = self.counters.get(key, 0)
        self.counters[key] = n + 1
        return n % k


class SmoothWeightedRoundRobin:
    """Interleaved weighted round-robin; equal weights reduce to strict round-robin."""

    def __init__(self):
        self.current: List[float] = []

    def pick(self, weights: Sequence[float]) -> int:
        n = len(weights)
        if n == 0:
            raise ValueError("no alternatives")
        if len(self.current) != n:
            self.current = [0.0] * n
        w = [max(0.0, x) for x in weights]
        total = sum(w)
        if total <= 0:
            w, total = [1.0] * n, float(n)
        best = 0
        for i in range(n):
            self.current[i] += w[i]
            if self.current[i] > self.current[best] + 1e-12:
                best = i
        self.current[best] -= total
        return best


# ---------- Routes ----------
@dataclass
class StepRoute:
    """One region entry of a route: the chain positions a packet runs there."""

    region_id: int
    generation: int
    chain: NtChain
    positions: Tuple[int, ...]
    skipped: int = 0

    def keys(self) -> List[InstanceKey]:
        return [(self.region_id, self.generation, p) for p in self.positions]


@dataclass
class RouteAlt:
    """One way to run a branch: a sequence of region steps (a chain instance or a skip plan)."""

    steps: List[StepRoute]
    capacity: float
    whole: bool
    weight: float = 0.0

    def keys(self) -> List[InstanceKey]:
        return [k for s in self.steps for k in s.keys()]

    def regions(self) -> List[int]:
        return [s.region_id for s in self.steps]


@dataclass
class Branch:
    nts: Tuple[str, ...]
    alternatives: List[RouteAlt] = field(default_factory=list)
    selector: SmoothWeightedRoundRobin = field(default_factory=SmoothWeightedRoundRobin)


@dataclass
class DagRoute:
    dag_uid: str
    user: str
    stages: List[List[Branch]]

    def alternatives(self) -> List[RouteAlt]:
        return [a for stage in self.stages for b in stage for a in b.alternatives]

    def complete(self) -> bool:
        return all(b.alternatives for stage in self.stages for b in stage)


@dataclass
class NtInstance:
    """Run-time state of one NT at one position of one region generation."""

    key: InstanceKey
    nt: str
    behavior: NtBehavior
    busy_until: float = 0.0
    waiting: Deque[PacketDescriptor] = field(default_factory=deque)
    executed: int = 0
    bytes_done: int = 0
    last_pkt_by_flow: Dict[Tuple[str, int], int] = field(default_factory=dict)
    reorders: int = 0


# ---------- Central scheduler ----------
class CentralScheduler:
    def __init__(self, clock: SimClock, catalog: Catalog, behavior_factory: Callable[[str], NtBehavior],
                 credits: int = DEFAULT_CREDITS, buffer_depth: int = DEFAULT_BUFFER_DEPTH,
                 visit_cycles: int = SCHEDULER_DELAY_CYCLES, mode: str = "chain",
                 skip_mask_cycles: int = 0,
                 is_serving: Optional[Callable[[int, int], bool]] = None,
                 on_egress: Optional[Callable[[PacketDescriptor], None]] = None,
                 on_drop: Optional[Callable[[PacketDescriptor, str], None]] = None,
                 on_execute: Optional[Callable[[PacketDescriptor, InstanceKey], None]] = None,
                 on_unplaced: Optional[Callable[[str], None]] = None):
        """
        Args:
            clock: Simulation clock
            catalog: NT catalog
            behavior_factory: Builds the per-instance behavior model of an NT id
            credits: Initial credits per NT instance
            buffer_depth: Packets the scheduler may hold waiting (credit and region queues)
            visit_cycles: Pipelined cost of one scheduler visit
            mode: "chain" (whole-chain reservation with fallback) or "per_nt"
            skip_mask_cycles: Wrapper cost per skipped NT
            is_serving: (region, generation) -> whether the region serves that chain now
        """
        if mode not in ("chain", "per_nt"):
            raise ValueError(f"unknown scheduling mode '{mode}'")
        self.clock = clock
        self.catalog = catalog
        self.behavior_factory = behavior_factory
        self.credits = CreditStore(credits)
        self.buffer_depth = buffer_depth
        self.visit_cycles = visit_cycles
        self.mode = mode
        self.skip_mask_cycles = skip_mask_cycles
        self.is_serving = is_serving or (lambda region, generation: True)
        self.on_egress = on_egress or (lambda desc: None)
        self.on_drop = on_drop or (lambda desc, reason: None)
        self.on_execute = on_execute or (lambda desc, key: None)
        self.on_unplaced = on_unplaced or (lambda dag_uid: None)

        self.routes: Dict[str, DagRoute] = {}
        self.instances: Dict[InstanceKey, NtInstance] = {}
        self.sync = SyncBuffer()
        self.region_pending: Dict[int, Deque[PacketDescriptor]] = {}
        self.dag_pending: Dict[str, Deque[PacketDescriptor]] = {}
        self.buffered = 0
        self.total_visits = 0

    # ---------- routes ----------
    def set_route(self, route: DagRoute) -> None:
        self.routes[route.dag_uid] = route

    def remove_route(self, dag_uid: str) -> None:
        self.routes.pop(dag_uid, None)
        for desc in self.dag_pending.pop(dag_uid, deque()):
            self.buffered -= 1
            self._drop(desc, "descheduled")

    def instance(self, key: InstanceKey, nt: str) -> NtInstance:
        inst = self.instances.get(key)
        if inst is None:
            inst = NtInstance(key, nt, self.behavior_factory(nt))
            self.instances[key] = inst
        return inst

    def retire_generation(self, region_id: int, generation: int) -> None:
        """Forget drained instances of an old region generation."""
        for key in [k for k in self.instances if k[0] == region_id and k[1] == generation]:
            if self.credits.in_flight(key) == 0 and not self.instances[key].waiting:
                del self.instances[key]
                self.credits.forget(key)

    def busy_regions(self) -> Dict[int, int]:
        """Packets currently holding credits, per region."""
        counts: Dict[int, int] = {}
        for key in self.credits.available:
            n = self.credits.in_flight(key)
            if n:
                counts[key[0]] = counts.get(key[0], 0) + n
        return counts

    # ---------- buffering ----------
    def _buffer(self, queue: Deque[PacketDescriptor], desc: PacketDescriptor) -> bool:
        assert desc.holds_credits() == 0, f"pkt {desc.pkt_id} waits while holding credits"
        if self.buffered >= self.buffer_depth:
            self._drop(desc, "buffer_overflow")
            return False
        queue.append(desc)
        self.buffered += 1
        desc.wait_since = self.clock.now
        return True

    def _unbuffer(self, desc: PacketDescriptor) -> None:
        self.buffered -= 1
        if desc.wait_since is not None:
            desc.credit_wait += self.clock.now - desc.wait_since
            desc.wait_since = None

    def _drop(self, desc: PacketDescriptor, reason: str) -> None:
        for key, n in list(desc.held_credits.items()):
            for _ in range(n):
                self._return_credit(key)
        desc.held_credits.clear()
        desc.dropped = reason
        if desc.fork_token is not None and desc.fork_token in self.sync.pending:
            self._visit(desc, self._join)
            return
        self.on_drop(desc, reason)

    # ---------- scheduler visits ----------
    def _visit(self, desc: PacketDescriptor, handler: Callable[[PacketDescriptor], None]) -> None:
        desc.visits += 1
        self.total_visits += 1
        self.clock.schedule(self.visit_cycles, handler, desc)

    def schedule_packet(self, desc: PacketDescriptor) -> None:
        """Fresh arrival from admission: one visit, then dispatch of the first stage."""
        desc.ingress_cycle = desc.ingress_cycle or self.clock.now
        self._visit(desc, self._start_stage)

    def _start_stage(self, desc: PacketDescriptor) -> None:
        route = self.routes.get(desc.dag_uid)
        if route is None:
            self._drop(desc, "descheduled")
            return
        if not route.complete():
            self._buffer(self.dag_pending.setdefault(desc.dag_uid, deque()), desc)
            self.on_unplaced(desc.dag_uid)
            return
        desc.stage_times.append(self.clock.now)
        forked = self.fork_and_join(desc, route.stages[desc.stage])
        if len(forked) == 1:
            self._enter_branch(desc)
            return
        # every forked header is dispatched by its own scheduler visit
        for branch_desc in forked:
            self._visit(branch_desc, self._enter_branch)

    def fork_and_join(self, desc: PacketDescriptor, stage: Sequence[Branch]) -> List[PacketDescriptor]:
        """Fork one header per branch of a parallel stage; a one-branch stage is the identity."""
        desc.branch = 0
        return self.sync.fork(desc, len(stage))

    def _join(self, desc: PacketDescriptor) -> None:
        joined = self.sync.arrive(desc)
        if joined is None:
            return
        if joined.dropped:
            self.on_drop(joined, joined.dropped)
            return
        self._stage_done(joined, visited=True)

    def release_dag(self, dag_uid: str) -> None:
        """Route completed: dispatch packets parked while the DAG had no placement."""
        queue = self.dag_pending.pop(dag_uid, deque())
        while queue:
            desc = queue.popleft()
            self._unbuffer(desc)
            if len(desc.stage_times) > desc.stage:
                self._enter_branch(desc)
            else:
                self._start_stage(desc)

    def parked(self, dag_uid: str, flows: Optional[Callable[[int], bool]] = None) -> int:
        return sum(1 for d in self.dag_pending.get(dag_uid, ()) if flows is None or flows(d.flow_id))

    def take_pending(self, dag_uid: str, flows: Optional[Callable[[int], bool]] = None) -> List[PacketDescriptor]:
        """Hand over parked packets that have not started the DAG (they are sent elsewhere)."""
        queue = self.dag_pending.get(dag_uid, deque())
        fresh = [d for d in queue if d.fork_token is None and d.stage == 0 and not d.stage_times
                 and (flows is None or flows(d.flow_id))]
        picked = {id(d) for d in fresh}
        rest = deque(d for d in queue if id(d) not in picked)
        if rest:
            self.dag_pending[dag_uid] = rest
        else:
            self.dag_pending.pop(dag_uid, None)
        for desc in fresh:
            self._unbuffer(desc)
        return fresh

    def _enter_branch(self, desc: PacketDescriptor) -> None:
        route = self.routes.get(desc.dag_uid)
        if route is None:
            self._drop(desc, "descheduled")
            return
        branch = route.stages[desc.stage][desc.branch]
        if not branch.alternatives:
            # lost its placement (region released or switched); park until re-placed
            self._buffer(self.dag_pending.setdefault(desc.dag_uid, deque()), desc)
            self.on_unplaced(desc.dag_uid)
            return
        ready = [a for a in branch.alternatives if self._alt_ready(a)]
        pool = ready or branch.alternatives
        alt = pool[branch.selector.pick([a.weight for a in pool])] if len(pool) > 1 else pool[0]
        desc.route = alt
        desc.step = 0
        desc.pos = 0
        self._dispatch_step(desc)

    def _alt_ready(self, alt: RouteAlt) -> bool:
        return all(self.is_serving(s.region_id, s.generation) for s in alt.steps)

    # ---------- dispatch ----------
    def _dispatch_step(self, desc: PacketDescriptor) -> None:
        step = desc.route.steps[desc.step]
        if not self.is_serving(step.region_id, step.generation):
            self._buffer(self.region_pending.setdefault(step.region_id, deque()), desc)
            return
        self._acquire(desc)

    def _acquire(self, desc: PacketDescriptor) -> None:
        """Take credits for the rest of the current step (whole chain) or just the next NT."""
        step = desc.route.steps[desc.step]
        keys = step.keys()[desc.pos:]
        if self.mode == "chain" and len(keys) > 1 and self.credits.take_all(keys):
            for k in keys:
                desc.held_credits[k] = desc.held_credits.get(k, 0) + 1
        elif self.credits.has(keys[0]):
            self.credits.take(keys[0])
            desc.held_credits[keys[0]] = desc.held_credits.get(keys[0], 0) + 1
        else:
            inst = self.instance(keys[0], step.chain.nts[step.positions[desc.pos]])
            self._buffer(inst.waiting, desc)
            return
        extra = self.skip_mask_cycles * step.skipped if desc.pos == 0 else 0
        self._run_nt(desc, extra)

    def _run_nt(self, desc: PacketDescriptor, extra_cycles: float = 0) -> None:
        step = desc.route.steps[desc.step]
        key = step.keys()[desc.pos]
        nt = self.catalog[step.chain.nts[step.positions[desc.pos]]]
        inst = self.instance(key, nt.id)
        now = float(self.clock.now) + extra_cycles
        start = max(now, inst.busy_until)
        inst.busy_until = start + self.clock.cycles(serialization_ns(desc.size, nt.max_bandwidth))
        done = math.ceil(start - 1e-9) + nt.proc_latency
        self.clock.schedule_at(done, self.complete_nt, desc, key)

    def _return_credit(self, key: InstanceKey) -> None:
        self.credits.give(key)
        inst = self.instances.get(key)
        if inst is not None and inst.waiting:
            waiter = inst.waiting.popleft()
            self._unbuffer(waiter)
            self._acquire(waiter)

    def complete_nt(self, desc: PacketDescriptor, key: InstanceKey) -> None:
        """NT finished: return its credit, apply the NT model, then advance."""
        inst = self.instances[key]
        inst.executed += 1
        inst.bytes_done += desc.size
        flow = (desc.user, desc.flow_id)
        last = inst.last_pkt_by_flow.get(flow)
        if last is not None and desc.pkt_id < last:
            inst.reorders += 1
        inst.last_pkt_by_flow[flow] = desc.pkt_id
        self.on_execute(desc, key)

        desc.held_credits[key] -= 1
        if desc.held_credits[key] == 0:
            del desc.held_credits[key]
        outcome = inst.behavior.apply(desc)
        self._return_credit(key)

        if outcome.action is Action.DROP:
            self._drop(desc, f"nt_drop:{inst.nt}")
            return
        if outcome.copies > 1:
            desc.copies *= outcome.copies
        if outcome.action is Action.RESPOND and desc.fork_token is None:
            for k, n in list(desc.held_credits.items()):
                for _ in range(n):
                    self._return_credit(k)
            desc.held_credits.clear()
            desc.responded = True
            self.on_egress(desc)
            return

        step = desc.route.steps[desc.step]
        desc.pos += 1
        if desc.pos < len(step.positions):
            nxt = step.keys()[desc.pos]
            if self.mode == "per_nt":
                self._visit(desc, self._acquire)
            elif desc.held_credits.get(nxt):
                self._run_nt(desc)
            elif self.credits.has(nxt):
                self.credits.take(nxt)
                desc.held_credits[nxt] = 1
                self._run_nt(desc)
            else:
                self._visit(desc, self._acquire)
            return

        assert desc.holds_credits() == 0, f"pkt {desc.pkt_id} leaked credits"
        desc.step += 1
        desc.pos = 0
        if desc.step < len(desc.route.steps):
            self._visit(desc, self._dispatch_step)
            return
        if desc.fork_token is not None:
            self._visit(desc, self._join)
            return
        self._stage_done(desc, visited=False)

    def _stage_done(self, desc: PacketDescriptor, visited: bool) -> None:
        route = self.routes.get(desc.dag_uid)
        desc.fork_token = None
        desc.stage += 1
        if route is None or desc.stage >= len(route.stages):
            self.on_egress(desc)
            return
        if visited:
            self._start_stage(desc)
        else:
            self._visit(desc, self._start_stage)

    # ---------- region readiness ----------
    def region_ready(self, region_id: int) -> None:
        """Drain packets buffered for a region in arrival order."""
        queue = self.region_pending.pop(region_id, deque())
        while queue:
            desc = queue.popleft()
            self._unbuffer(desc)
            step = desc.route.steps[desc.step]
            if self.is_serving(step.region_id, step.generation):
                self._acquire(desc)
            elif desc.step == 0 and desc.dag_uid in self.routes:
                self._enter_branch(desc)
            else:
                self._drop(desc, "route_invalidated")

    def reroute_pending(self, region_id: int) -> None:
        """Packets parked on a region whose chain changed pick a fresh alternative."""
        queue = self.region_pending.pop(region_id, deque())
        for desc in queue:
            self._unbuffer(desc)
            if desc.step == 0 and desc.dag_uid in self.routes:
                self._enter_branch(desc)
            else:
                self._drop(desc, "route_invalidated")

    def waiting(self) -> int:
        return self.buffered

    def reorder_count(self) -> int:
        return sum(i.reorders for i in self.instances.values())
