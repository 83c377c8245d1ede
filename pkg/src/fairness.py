"""
Two-step multi-resource fairness for one sNIC.

Step 1 (space): dominant-resource fair allocation of FPGA bandwidth-area,
memory, ingress and egress, run when a DAG is deployed or de-scheduled, and
turned into whole regions plus fractional shared-NT shares.

Step 2 (time): every epoch, intended loads monitored at admission decide each
user's share of every oversubscribed NT instance. Shares are enforced only
through per-user ingress rate limiters; a start-time fair queue orders packets
released by the limiters.
"""

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

from core_model import Catalog, NtDag
from engine import SimClock
from errors import BufferOverflow, InfeasibleDemand

logger = logging.getLogger(__name__)

# Configuration
EPOCH_US = 20.0
EWMA_KEEP = 0.25
DEFAULT_BURST_BYTES = 16 * 1024
RESOURCES = ("fpga", "memory", "ingress", "egress")
EPS = 1e-9


# ---------- Demands and totals ----------
@dataclass
class DemandVector:
    user: str
    requested_ingress_bw: float
    dag_area: float
    fpga_demand: float
    memory_demand: float = 0.0
    egress_demand: float = 0.0

    @classmethod
    def from_dag(cls, dag: NtDag, catalog: Catalog, form: str = "product",
                 amplification: float = 1.0) -> "DemandVector":
        """
        Derive a user's demand from its DAG.

        form="product" uses bandwidth x area; form="ratio" scales each NT's area
        by requested bandwidth over the NT's max bandwidth.
        """
        area = float(dag.area(catalog))
        bw = dag.requested_ingress_bw
        if form == "ratio":
            fpga = sum(catalog[n].area * bw / catalog[n].max_bandwidth for n in dag.nodes)
        else:
            fpga = bw * area
        memory = dag.memory_bytes + sum(catalog[n].mem_footprint for n in dag.nodes)
        return cls(dag.owner, bw, area, fpga, float(memory), bw * amplification)

    def vector(self) -> Dict[str, float]:
        return {
            "fpga": self.fpga_demand,
            "memory": self.memory_demand,
            "ingress": self.requested_ingress_bw,
            "egress": self.egress_demand,
        }


@dataclass
class ResourceTotals:
    fpga: float
    memory: float
    ingress: float
    egress: float
    area: float = math.inf

    def vector(self) -> Dict[str, float]:
        return {"fpga": self.fpga, "memory": self.memory, "ingress": self.ingress, "egress": self.egress}


@dataclass
class UserSpace:
    user: str
    allocation: Dict[str, float]
    dominant_share: float
    dominant_resource: str
    whole_regions: int = 0
    fractional: float = 0.0

    @property
    def regions(self) -> float:
        return self.whole_regions + self.fractional

    def ingress_entitlement(self, dag_area: float) -> float:
        return self.allocation["fpga"] / dag_area if dag_area > 0 else 0.0


@dataclass
class SpaceAllocation:
    users: Dict[str, UserSpace] = field(default_factory=dict)
    region_count: int = 0

    def budget_regions(self, user: str) -> float:
        """Region budget for planning: DRF regions plus an equal part of unclaimed regions."""
        if user not in self.users:
            return 0.0
        claimed = sum(u.regions for u in self.users.values())
        pool = max(0.0, self.region_count - claimed)
        return self.users[user].regions + pool / len(self.users)


# ---------- DRF ----------
def drf_task_allocate(per_task: Mapping[str, Sequence[float]],
                      capacity: Sequence[float]) -> Dict[str, int]:
    """
    Discrete progressive filling: repeatedly give one more task to the user with
    the lowest dominant share whose next task still fits (ties -> first user).
    """
    users = list(per_task)
    for user in users:
        if any(d > c for d, c in zip(per_task[user], capacity)):
            raise InfeasibleDemand(f"one task of {user} exceeds capacity")
    used = [0.0] * len(capacity)
    tasks = {u: 0 for u in users}
    shares = {u: 0.0 for u in users}

    while True:
        fitting = [
            u for u in users
            if any(d > 0 for d in per_task[u])
            and all(used[i] + per_task[u][i] <= capacity[i] + EPS for i in range(len(capacity)))
        ]
        if not fitting:
            break
        user = min(fitting, key=lambda u: (shares[u], users.index(u)))
        for i, d in enumerate(per_task[user]):
            used[i] += d
        tasks[user] += 1
        shares[user] = max(tasks[user] * d / c for d, c in zip(per_task[user], capacity) if c > 0)
    return tasks


def dominant_share(allocation: Sequence[float], capacity: Sequence[float]) -> float:
    return max((a / c for a, c in zip(allocation, capacity) if c > 0), default=0.0)


def _largest_remainder(amounts: Dict[str, float], total: int) -> Dict[str, int]:
    floors = {u: int(math.floor(a + EPS)) for u, a in amounts.items()}
    leftover = total - sum(floors.values())
    order = sorted(amounts, key=lambda u: -(amounts[u] - floors[u]))
    for user in order:
        if leftover <= 0:
            break
        if amounts[user] - floors[user] > EPS:
            floors[user] += 1
            leftover -= 1
    return floors


def drf_space_allocate(demands: Sequence[DemandVector], totals: ResourceTotals,
                       region_units: float, region_count: Optional[int] = None) -> SpaceAllocation:
    """
    Continuous progressive filling over the four space resources with demand caps.

    Args:
        demands: One DemandVector per user
        totals: Board capacities
        region_units: Bandwidth-area units of one region (capacity x region bandwidth)
        region_count: Regions on the board (defaults to totals.fpga / region_units)

    Returns:
        SpaceAllocation with per-user dominant shares, whole regions and fractional shares

    Raises:
        InfeasibleDemand: if a DAG's area or memory alone exceeds the board
    """
    cap = totals.vector()
    for d in demands:
        if d.dag_area > totals.area + EPS:
            raise InfeasibleDemand(f"{d.user}: DAG area {d.dag_area} exceeds board area {totals.area}")
        if d.memory_demand > totals.memory + EPS:
            raise InfeasibleDemand(f"{d.user}: memory {d.memory_demand} exceeds board memory {totals.memory}")

    # D_i: dominant fraction of the full demand; s_i = t_i * D_i
    dom = {}
    for d in demands:
        vec = d.vector()
        dom[d.user] = max((vec[r] / cap[r] for r in RESOURCES if cap[r] > 0), default=0.0)
    t = {d.user: 0.0 for d in demands}
    active = {d.user for d in demands if dom[d.user] > 0}
    by_user = {d.user: d.vector() for d in demands}
    level = 0.0

    while active:
        fixed = {r: sum(t[u] * by_user[u][r] for u in t if u not in active) for r in RESOURCES}
        rate = {r: sum(by_user[u][r] / dom[u] for u in active) for r in RESOURCES}
        candidates = [dom[u] for u in active]
        for r in RESOURCES:
            if rate[r] > EPS and cap[r] > 0:
                candidates.append((cap[r] - fixed[r]) / rate[r])
        level = max(level, min(candidates))
        for u in active:
            t[u] = min(1.0, level / dom[u])
        saturated = {
            r for r in RESOURCES
            if rate[r] > EPS and fixed[r] + level * rate[r] >= cap[r] - 1e-7 * max(1.0, cap[r])
        }
        done = {u for u in active if t[u] >= 1.0 - EPS}
        done |= {u for u in active if any(by_user[u][r] > 0 for r in saturated)}
        if not done:
            break
        active -= done

    n_regions = region_count if region_count is not None else int(round(totals.fpga / region_units))
    fpga = {d.user: t[d.user] * d.fpga_demand for d in demands}
    in_regions = {u: (a / region_units if region_units > 0 else 0.0) for u, a in fpga.items()}
    whole = _largest_remainder(in_regions, n_regions)

    result = SpaceAllocation(region_count=n_regions)
    for d in demands:
        alloc = {r: t[d.user] * by_user[d.user][r] for r in RESOURCES}
        shares = {r: (alloc[r] / cap[r] if cap[r] > 0 else 0.0) for r in RESOURCES}
        dominant = max(RESOURCES, key=lambda r: shares[r])
        frac = in_regions[d.user] - whole[d.user]
        result.users[d.user] = UserSpace(
            user=d.user,
            allocation=alloc,
            dominant_share=shares[dominant],
            dominant_resource=dominant,
            whole_regions=whole[d.user],
            fractional=max(0.0, frac),
        )
    return result


# ---------- Time step ----------
def _proportional_fill(capacity: float, weights: Mapping[str, float],
                       caps: Mapping[str, float], start: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    """Water-fill capacity proportionally to weights, never exceeding caps."""
    alloc = dict(start or {u: 0.0 for u in weights})
    remaining = capacity - sum(alloc.values())
    while remaining > EPS:
        hungry = [u for u in weights if caps[u] - alloc[u] > EPS and weights[u] > 0]
        if not hungry:
            break
        total_w = sum(weights[u] for u in hungry)
        clamped = False
        for u in hungry:
            give = remaining * weights[u] / total_w
            if alloc[u] + give > caps[u]:
                clamped = True
        if not clamped:
            for u in hungry:
                alloc[u] += remaining * weights[u] / total_w
            break
        # clamp the users that would overflow, then redistribute
        spent = 0.0
        for u in hungry:
            give = remaining * weights[u] / total_w
            if alloc[u] + give > caps[u]:
                spent += caps[u] - alloc[u]
                alloc[u] = caps[u]
        remaining -= spent
    return alloc


def drfq_time_allocate(intended: Mapping[str, float], capacity: float,
                       entitlements: Optional[Mapping[str, float]] = None,
                       rule: str = "intended",
                       requested: Optional[Mapping[str, float]] = None) -> Dict[str, float]:
    """
    Per-user shares of one NT instance.

    Uncontended instances give every user its intended load. Otherwise capacity is
    split in proportion to intended load (or to requested bandwidth under
    rule="requested_ratio"), each share capped at min(intended, entitlement) with
    the excess redistributed over the users still below their cap. Capacity left
    once every user sits at its cap goes to users that still want more.

    When the caps fit in capacity the capped split is the caps themselves, so
    they are taken directly; users weighted zero under requested_ratio still get
    their cap then.
    """
    users = [u for u in intended]
    if sum(intended.values()) <= capacity + EPS:
        return {u: float(intended[u]) for u in users}

    ent = {u: (entitlements or {}).get(u, math.inf) for u in users}
    want = {u: max(0.0, float(intended[u])) for u in users}
    if rule == "requested_ratio":
        weights = {u: float((requested or {}).get(u, want[u])) for u in users}
    else:
        weights = dict(want)

    caps = {u: min(want[u], ent[u]) for u in users}
    if sum(caps.values()) <= capacity + EPS:
        first = caps
    else:
        first = _proportional_fill(capacity, weights, caps)
    return _proportional_fill(capacity, weights, want, start=first)


@dataclass
class PathRoute:
    """One route of a user's DAG through NT instances (a branch alternative)."""

    user: str
    dag_uid: str
    instances: Tuple[Hashable, ...]
    capacity: float
    whole: bool
    entitlement: float = math.inf
    intended: float = 0.0


def split_intended(total: float, routes: Sequence[PathRoute]) -> List[float]:
    """Capacity-first split of one branch's intended load: whole routes, then fractional."""
    loads = [0.0] * len(routes)
    remaining = total
    order = [i for i, r in enumerate(routes) if r.whole] + [i for i, r in enumerate(routes) if not r.whole]
    for i in order:
        take = min(routes[i].capacity, remaining)
        loads[i] = take
        remaining -= take
    if remaining > EPS and routes:
        loads[order[-1]] += remaining
    return loads


def apply_ingress_limits(routes: Sequence[PathRoute], shares: Mapping[Hashable, Mapping[str, float]],
                         instance_intended: Mapping[Hashable, Mapping[str, float]],
                         capacity: Mapping[Hashable, float]) -> Tuple[Dict[str, float], Dict[int, float]]:
    """
    Ingress rate per user: the sum over its routes of the route's bottleneck,
    where an oversubscribed instance contributes the user's share and any other
    instance the capacity left by the other users.

    Returns:
        (limiter per user, cap per route index)
    """
    limits: Dict[str, float] = {}
    route_caps: Dict[int, float] = {}
    for idx, route in enumerate(routes):
        cap = math.inf
        for inst in route.instances:
            loads = instance_intended.get(inst, {})
            if sum(loads.values()) > capacity[inst] + EPS:
                value = shares.get(inst, {}).get(route.user, 0.0)
            else:
                others = sum(v for u, v in loads.items() if u != route.user)
                value = max(0.0, capacity[inst] - others)
            cap = min(cap, value)
        cap = 0.0 if cap is math.inf else cap
        route_caps[idx] = cap
        limits[route.user] = limits.get(route.user, 0.0) + cap
    return limits, route_caps


# ---------- Monitoring ----------
class LoadMonitor:
    """Per (user, key) intended-load EWMA fed pre-credit and pre-throttle."""

    def __init__(self, epoch_ns: float = EPOCH_US * 1000.0, keep: float = EWMA_KEEP):
        self.epoch_ns = epoch_ns
        self.keep = keep
        self._bytes: Dict[Tuple[str, Hashable], int] = {}
        self.ewma: Dict[Tuple[str, Hashable], float] = {}
        self.samples: Dict[Tuple[str, Hashable], float] = {}

    def record_intended_load(self, user: str, key: Hashable, size_bytes: int) -> None:
        k = (user, key)
        self._bytes[k] = self._bytes.get(k, 0) + size_bytes

    def close_epoch(self) -> Dict[Tuple[str, Hashable], float]:
        keys = set(self._bytes) | set(self.ewma)
        for k in keys:
            sample = self._bytes.get(k, 0) * 8.0 / self.epoch_ns
            self.samples[k] = sample
            self.ewma[k] = self.keep * self.ewma.get(k, 0.0) + (1.0 - self.keep) * sample
        self._bytes = {}
        return dict(self.ewma)

    def intended(self, user: str, key: Hashable) -> float:
        return self.ewma.get((user, key), 0.0)

    def last_sample(self, user: str, key: Hashable) -> float:
        """Raw load of the last closed epoch, before smoothing."""
        return self.samples.get((user, key), 0.0)

    def forget(self, key: Hashable) -> None:
        self.ewma = {k: v for k, v in self.ewma.items() if k[1] != key}
        self.samples = {k: v for k, v in self.samples.items() if k[1] != key}
        self._bytes = {k: v for k, v in self._bytes.items() if k[1] != key}


# ---------- Enforcement ----------
class TokenBucket:
    def __init__(self, rate_gbps: float, burst_bytes: float = DEFAULT_BURST_BYTES):
        self.rate_gbps = rate_gbps
        self.burst_bytes = burst_bytes
        self.tokens = float(burst_bytes)
        self.last_ns = 0.0

    def refill(self, now_ns: float) -> None:
        if now_ns > self.last_ns:
            self.tokens = min(self.burst_bytes, self.tokens + (now_ns - self.last_ns) * self.rate_gbps / 8.0)
            self.last_ns = now_ns

    def wait_ns(self, size: int, now_ns: float) -> float:
        """Time until size bytes of tokens are available."""
        self.refill(now_ns)
        if self.tokens >= size - 1e-6:
            return 0.0
        if self.rate_gbps <= 0:
            return math.inf
        return (size - self.tokens) * 8.0 / self.rate_gbps

    def consume(self, size: int) -> None:
        self.tokens -= size

    def set_rate(self, rate_gbps: float, now_ns: float) -> None:
        self.refill(now_ns)
        self.rate_gbps = rate_gbps


class IngressShaper:
    """FIFO token-bucket limiter of one user; released packets go to `release`."""

    def __init__(self, clock: SimClock, rate_gbps: float, release: Callable, depth: int = 256,
                 burst_bytes: float = DEFAULT_BURST_BYTES, name: str = "shaper"):
        self.clock = clock
        self.bucket = TokenBucket(rate_gbps, burst_bytes)
        self.release = release
        self.depth = depth
        self.name = name
        self.queue: List = []
        self._armed = False

    @property
    def rate_gbps(self) -> float:
        return self.bucket.rate_gbps

    def offer(self, desc) -> None:
        if len(self.queue) >= self.depth:
            raise BufferOverflow(f"{self.name} queue full ({self.depth})")
        self.queue.append(desc)
        if not self._armed:
            self._drain()

    def set_rate(self, rate_gbps: float) -> None:
        self.bucket.set_rate(rate_gbps, self.clock.ns())
        if self.queue and not self._armed:
            self._drain()

    def _drain(self) -> None:
        self._armed = False
        while self.queue:
            head = self.queue[0]
            wait = self.bucket.wait_ns(head.size, self.clock.ns())
            if wait > 0:
                if math.isfinite(wait):
                    self._armed = True
                    self.clock.schedule(max(1.0, self.clock.cycles(wait)), self._drain)
                return
            self.bucket.consume(head.size)
            self.queue.pop(0)
            self.release(head)


class DrfqQueue:
    """
    Multi-resource start-time fair queue.

    A packet's virtual start is max(V, F_prev of its user) and its finish adds
    the packet's dominant processing time across the resources it uses.
    """

    def __init__(self):
        self.virtual_time = 0.0
        self.last_finish: Dict[str, float] = {}
        self._heap: List = []
        self._seq = itertools.count()

    def push(self, user: str, item, costs: Sequence[float]) -> Tuple[float, float]:
        start = max(self.virtual_time, self.last_finish.get(user, 0.0))
        finish = start + max(costs, default=0.0)
        self.last_finish[user] = finish
        heapq.heappush(self._heap, (start, next(self._seq), user, item))
        return start, finish

    def pop(self):
        start, _, user, item = heapq.heappop(self._heap)
        self.virtual_time = start
        return user, item

    def __len__(self) -> int:
        return len(self._heap)


class AdmissionPump:
    """Releases DRFQ-ordered packets into the scheduler at packet-store bandwidth."""

    def __init__(self, clock: SimClock, bandwidth_gbps: float, deliver: Callable):
        self.clock = clock
        self.bandwidth_gbps = bandwidth_gbps
        self.deliver = deliver
        self.queue = DrfqQueue()
        self.next_free = 0.0
        self._armed = False

    def admit(self, desc, costs: Sequence[float]) -> None:
        self.queue.push(desc.user, desc, costs)
        if not self._armed:
            self._pump()

    def _pump(self) -> None:
        self._armed = False
        while len(self.queue):
            now = float(self.clock.now)
            if self.next_free > now + EPS:
                self._armed = True
                self.clock.schedule_at(math.ceil(self.next_free - EPS), self._pump)
                return
            _, desc = self.queue.pop()
            self.next_free = max(now, self.next_free) + self.clock.cycles(desc.size * 8.0 / self.bandwidth_gbps)
            self.deliver(desc)


# ---------- Fluid evaluator ----------
def fluid_throughput(offered: Mapping[str, float], requested: Mapping[str, float],
                     regions: int = 3, region_bw: float = 10.0) -> Dict[str, float]:
    """
    Delivered Gbps per user when every user runs a one-NT DAG of area 1 on
    regions of capacity 1, with the board time-shared as one pool: DRF fixes
    each user's entitlement, the time step splits the offered load.
    """
    demands = [DemandVector(u, requested[u], 1.0, requested[u] * 1.0) for u in offered]
    totals = ResourceTotals(fpga=regions * region_bw, memory=math.inf, ingress=math.inf, egress=math.inf)
    space = drf_space_allocate(demands, totals, region_bw, regions)
    entitlements = {u: space.users[u].allocation["fpga"] for u in offered}
    return drfq_time_allocate(dict(offered), regions * region_bw, entitlements)


def static_throughput(offered: Mapping[str, float], regions: int = 3,
                      region_bw: float = 10.0) -> Dict[str, float]:
    part = regions * region_bw / len(offered)
    return {u: min(o, part) for u, o in offered.items()}


# ---------- Engine ----------
@dataclass
class AllocationUpdate:
    instance: Hashable
    shares: Dict[str, float]


class FairnessEngine:
    """
    Holds the space allocation and runs the per-epoch time step for one sNIC.

    mode="snic" is the full two-step engine, "drf_only" limits every user to its
    DRF ingress entitlement, "static" splits every NT instance equally.
    """

    def __init__(self, totals: ResourceTotals, region_units: float, region_count: int,
                 mode: str = "snic", rule: str = "intended", demand_form: str = "product",
                 epoch_ns: float = EPOCH_US * 1000.0, keep: float = EWMA_KEEP):
        self.totals = totals
        self.region_units = region_units
        self.region_count = region_count
        self.mode = mode
        self.rule = rule
        self.demand_form = demand_form
        self.monitor = LoadMonitor(epoch_ns, keep)
        self.space = SpaceAllocation(region_count=region_count)
        self.shares: Dict[Hashable, Dict[str, float]] = {}
        self.limits: Dict[str, float] = {}
        self.route_caps: Dict[int, float] = {}

    def space_step(self, dags: Sequence[NtDag], catalog: Catalog,
                   amplification: Optional[Mapping[str, float]] = None) -> SpaceAllocation:
        """Re-run DRF over every deployed DAG (one demand vector per user)."""
        per_user: Dict[str, DemandVector] = {}
        for dag in dags:
            amp = (amplification or {}).get(dag.uid, 1.0)
            d = DemandVector.from_dag(dag, catalog, self.demand_form, amp)
            if dag.owner in per_user:
                acc = per_user[dag.owner]
                acc.requested_ingress_bw += d.requested_ingress_bw
                acc.dag_area = max(acc.dag_area, d.dag_area)
                acc.fpga_demand += d.fpga_demand
                acc.memory_demand += d.memory_demand
                acc.egress_demand += d.egress_demand
            else:
                per_user[dag.owner] = d
        self.space = drf_space_allocate(list(per_user.values()), self.totals,
                                        self.region_units, self.region_count)
        for user, us in self.space.users.items():
            logger.info("DRF: %s dominant share %.3f (%s), %d regions + %.2f shared",
                        user, us.dominant_share, us.dominant_resource, us.whole_regions, us.fractional)
        return self.space

    def time_step(self, routes: Sequence[PathRoute], capacity: Mapping[Hashable, float],
                  requested: Optional[Mapping[str, float]] = None) -> List[AllocationUpdate]:
        """
        One epoch of the time step; routes carry per-route intended loads.

        Returns:
            Per-instance share updates (every instance, every epoch)
        """
        per_instance: Dict[Hashable, Dict[str, float]] = {}
        ent_per_instance: Dict[Hashable, Dict[str, float]] = {}
        for route in routes:
            for inst in route.instances:
                loads = per_instance.setdefault(inst, {})
                loads[route.user] = loads.get(route.user, 0.0) + route.intended
                ents = ent_per_instance.setdefault(inst, {})
                ents[route.user] = ents.get(route.user, 0.0) + route.entitlement

        updates = []
        self.shares = {}
        for inst, loads in per_instance.items():
            if self.mode == "static":
                part = capacity[inst] / len(loads)
                shares = {u: part for u in loads}
            else:
                shares = drfq_time_allocate(loads, capacity[inst], ent_per_instance[inst],
                                            self.rule, requested)
            self.shares[inst] = shares
            updates.append(AllocationUpdate(inst, dict(shares)))

        if self.mode == "static":
            limits, caps = apply_ingress_limits(routes, self.shares,
                                                {i: {u: math.inf for u in l} for i, l in per_instance.items()},
                                                capacity)
        else:
            limits, caps = apply_ingress_limits(routes, self.shares, per_instance, capacity)
        if self.mode == "drf_only":
            limits = {}
            for route in routes:
                limits[route.user] = self.entitlement(route.user, route.dag_uid)
        self.limits = limits
        self.route_caps = caps
        return updates

    def entitlement(self, user: str, dag_uid: Optional[str] = None) -> float:
        us = self.space.users.get(user)
        if us is None:
            return 0.0
        return us.allocation["ingress"]

    def dominant_shares(self, capacity: Mapping[Hashable, float]) -> Dict[str, float]:
        """Largest fraction of any NT instance each user holds under the current shares."""
        result: Dict[str, float] = {}
        for inst, shares in self.shares.items():
            for user, share in shares.items():
                result[user] = max(result.get(user, 0.0), share / capacity[inst])
        return result


if __name__ == "__main__":
    print(drf_task_allocate({"x": (1, 4), "y": (3, 1)}, (9, 18)))
    print(drfq_time_allocate({"U1": 8.0, "U2": 3.0}, 10.0, {"U1": 8.0, "U2": 4.0}))
