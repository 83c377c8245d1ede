"""
Run-time planning of DAG and instance parallelism.

A plan is a list of stages; every stage holds one or more chain groups that run
in parallel for the same packet (forked and joined at the synchronization
buffer), and every group carries a possibly fractional instance count.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from core_model import (DEFAULT_REGION_BITSTREAM_MB, MAX_BITSTREAM_MB, Catalog, NetworkTask, NtChain, NtDag,
                        make_chain)
from errors import InsufficientShare

logger = logging.getLogger(__name__)

# Configuration
SCALE_UP = 0.9
SCALE_DOWN = 0.5
SCHEDULER_VISIT_CYCLES = 16
EPS = 1e-9


@dataclass(frozen=True)
class ChainGroup:
    chain: NtChain
    instances: float = 1.0

    @property
    def whole(self) -> int:
        return int(math.floor(self.instances + EPS))

    @property
    def fraction(self) -> float:
        return max(0.0, self.instances - self.whole)


@dataclass(frozen=True)
class Stage:
    groups: Tuple[ChainGroup, ...]

    @property
    def forks(self) -> bool:
        return len(self.groups) > 1


@dataclass(frozen=True)
class ParallelismPlan:
    dag_uid: str
    stages: Tuple[Stage, ...]
    parallel: bool = False

    @property
    def sync_points(self) -> List[int]:
        return [i for i, s in enumerate(self.stages) if s.forks]

    @property
    def critical_path_units(self) -> int:
        """NT count along the longest stage-by-stage execution."""
        return sum(max(len(g.chain) for g in s.groups) for s in self.stages)

    def chains(self) -> List[NtChain]:
        return [g.chain for s in self.stages for g in s.groups]

    def groups(self) -> List[ChainGroup]:
        return [g for s in self.stages for g in s.groups]

    def total_instances(self) -> float:
        return sum(g.instances for g in self.groups())

    def estimated_latency(self, catalog: Catalog, visit_cycles: int = SCHEDULER_VISIT_CYCLES) -> int:
        """Unloaded cycles from first scheduler visit to last NT completion (forks cost a second visit)."""
        return sum(
            visit_cycles * (2 if s.forks else 1) + max(g.chain.proc_cycles(catalog) for g in s.groups)
            for s in self.stages
        )

    def with_instances(self, counts: Dict[str, float]) -> "ParallelismPlan":
        stages = tuple(
            Stage(tuple(replace(g, instances=counts.get(g.chain.id, g.instances)) for g in s.groups))
            for s in self.stages
        )
        return replace(self, stages=stages)


def _pack(nts: Sequence[str], catalog: Catalog, capacity: int) -> List[List[str]]:
    """Greedy in-order packing of an NT sequence into region-sized chains."""
    packed: List[List[str]] = []
    current: List[str] = []
    area = 0
    for nt in nts:
        a = catalog[nt].area
        if current and area + a > capacity:
            packed.append(current)
            current, area = [], 0
        current.append(nt)
        area += a
    if current:
        packed.append(current)
    return packed


def serial_stages(dag: NtDag, catalog: Catalog, capacity: int,
                  region_bitstream_mb: float = DEFAULT_REGION_BITSTREAM_MB,
                  max_bitstream_mb: float = MAX_BITSTREAM_MB) -> List[List[NtChain]]:
    """
    Topological linearization packed into the fewest regions, one chain per stage.

    A serialized chain is an execution order, not a DAG path: independent
    branches may share a chain (NT1 -> NT3 beside NT2 packs as NT1>NT2, NT3).
    Every edge still points forward along the concatenated chains.
    """
    return [[make_chain(c, catalog, capacity, region_bitstream_mb, max_bitstream_mb)]
            for c in _pack(dag.linearize(), catalog, capacity)]


def _segments(dag: NtDag) -> List[List[str]]:
    """Maximal linear runs: a node continues its predecessor's run when both sides have degree one."""
    g = dag.graph()
    seg_of: Dict[str, int] = {}
    segments: List[List[str]] = []
    for nt in dag.linearize():
        preds = list(g.predecessors(nt))
        if len(preds) == 1 and g.out_degree(preds[0]) == 1:
            idx = seg_of[preds[0]]
            segments[idx].append(nt)
        else:
            idx = len(segments)
            segments.append([nt])
        seg_of[nt] = idx
    return segments


def parallel_stages(dag: NtDag, catalog: Catalog, capacity: int,
                    region_bitstream_mb: float = DEFAULT_REGION_BITSTREAM_MB,
                    max_bitstream_mb: float = MAX_BITSTREAM_MB) -> List[List[NtChain]]:
    """Linear segments, split by capacity, staged by longest-path depth."""
    g = dag.graph()
    pieces: List[List[str]] = []
    for seg in _segments(dag):
        pieces.extend(_pack(seg, catalog, capacity))
    piece_of = {nt: i for i, p in enumerate(pieces) for nt in p}

    depth: Dict[int, int] = {}
    for i, piece in enumerate(pieces):
        preds = {piece_of[p] for p in g.predecessors(piece[0])}
        depth[i] = 1 + max((depth[p] for p in preds), default=-1)

    stages: List[List[NtChain]] = [[] for _ in range(max(depth.values(), default=-1) + 1)]
    for i, piece in enumerate(pieces):
        stages[depth[i]].append(make_chain(piece, catalog, capacity, region_bitstream_mb, max_bitstream_mb))
    return stages


def _assign_instances(stages: List[List[NtChain]], catalog: Catalog, load: float,
                      fair_share: float) -> List[List[float]]:
    chains = [c for s in stages for c in s]
    floors = [min(1.0, load / c.bottleneck_bw(catalog)) if load > 0 else min(1.0, fair_share / len(chains))
              for c in chains]
    if sum(floors) > fair_share + EPS:
        raise InsufficientShare(
            f"minimal plan needs {sum(floors):.2f} regions, fair share is {fair_share:.2f}"
        )
    desired = [max(1, math.ceil(load / c.bottleneck_bw(catalog) - EPS)) for c in chains]
    alloc = list(floors)
    remaining = fair_share - sum(alloc)
    for target in range(1, max(desired) + 1):
        for i in range(len(chains)):
            goal = min(target, desired[i])
            if alloc[i] < goal and remaining > EPS:
                add = min(goal - alloc[i], remaining)
                alloc[i] += add
                remaining -= add
    out, k = [], 0
    for s in stages:
        out.append(alloc[k:k + len(s)])
        k += len(s)
    return out


def plan_parallelism(dag: NtDag, catalog: Catalog, region_capacity: int, fair_share: float,
                     monitored_load: float, mode: str = "auto",
                     visit_cycles: int = SCHEDULER_VISIT_CYCLES,
                     instances: Optional[float] = None,
                     region_bitstream_mb: float = DEFAULT_REGION_BITSTREAM_MB,
                     max_bitstream_mb: float = MAX_BITSTREAM_MB) -> ParallelismPlan:
    """
    Decide DAG parallelism and instance counts for one DAG.

    Args:
        dag: Deployed DAG
        catalog: NT catalog
        region_capacity: Area units per region
        fair_share: Region budget of the owner
        monitored_load: Intended ingress load in Gbps
        mode: "auto" (parallel only if it shortens the critical path and the
            estimated latency), "on" or "off"
        instances: Fixed instance count for every chain (experiments)
        region_bitstream_mb: Bitstream size of a full region
        max_bitstream_mb: Largest bitstream partial reconfiguration accepts

    Raises:
        InsufficientShare: if even the serialized plan does not fit the share
    """
    serial = serial_stages(dag, catalog, region_capacity, region_bitstream_mb, max_bitstream_mb)
    serial_floor = sum(min(1.0, monitored_load / c.bottleneck_bw(catalog)) for s in serial for c in s)
    if monitored_load > 0 and serial_floor > fair_share + EPS:
        raise InsufficientShare(
            f"DAG {dag.uid}: serialized plan needs {serial_floor:.2f} regions, share is {fair_share:.2f}"
        )

    stages = serial
    if mode != "off":
        par = parallel_stages(dag, catalog, region_capacity, region_bitstream_mb, max_bitstream_mb)
        n_par = sum(len(s) for s in par)
        candidate = ParallelismPlan(dag.uid, tuple(Stage(tuple(ChainGroup(c) for c in s)) for s in par), True)
        base = ParallelismPlan(dag.uid, tuple(Stage(tuple(ChainGroup(c) for c in s)) for s in serial))
        if mode == "on":
            stages = par
        elif (
            n_par <= max(1, math.floor(fair_share + EPS))
            and candidate.critical_path_units < base.critical_path_units
            and candidate.estimated_latency(catalog, visit_cycles) < base.estimated_latency(catalog, visit_cycles)
        ):
            stages = par
    is_parallel = stages is not serial

    if instances is not None:
        counts = [[float(instances)] * len(s) for s in stages]
    else:
        try:
            counts = _assign_instances(stages, catalog, monitored_load, fair_share)
        except InsufficientShare:
            if not is_parallel:
                raise
            stages, is_parallel = serial, False
            counts = _assign_instances(stages, catalog, monitored_load, fair_share)

    plan = ParallelismPlan(
        dag.uid,
        tuple(Stage(tuple(ChainGroup(c, n) for c, n in zip(s, ns))) for s, ns in zip(stages, counts)),
        is_parallel,
    )
    logger.info("plan for %s: %d stages, %s, critical path %d",
                dag.uid, len(plan.stages), "parallel" if is_parallel else "serial", plan.critical_path_units)
    return plan


@dataclass
class AutoscaleState:
    above: Dict[str, int] = field(default_factory=dict)
    below: Dict[str, int] = field(default_factory=dict)


@dataclass
class PlanDelta:
    changes: Dict[str, int] = field(default_factory=dict)
    queued: Dict[str, int] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not any(self.changes.values())


def autoscale_step(plan: ParallelismPlan, monitored_load: float, fair_share: float,
                   catalog: Catalog, state: Optional[AutoscaleState] = None,
                   up: float = SCALE_UP, down: float = SCALE_DOWN, sustain: int = 1) -> PlanDelta:
    """
    One epoch of threshold autoscaling with hysteresis.

    A group scales up after `sustain` epochs above up x capacity and down after
    `sustain` epochs below down x capacity; growth is bounded by the fair share.
    """
    state = state or AutoscaleState()
    delta = PlanDelta()
    headroom = fair_share - plan.total_instances()
    for group in plan.groups():
        cid = group.chain.id
        bw = group.chain.bottleneck_bw(catalog)
        capacity = group.instances * bw
        whole = group.whole
        if monitored_load > up * capacity:
            state.above[cid] = state.above.get(cid, 0) + 1
            state.below[cid] = 0
        elif monitored_load < down * capacity:
            state.below[cid] = state.below.get(cid, 0) + 1
            state.above[cid] = 0
        else:
            state.above[cid] = state.below[cid] = 0
            continue

        target = max(1, math.ceil(monitored_load / (up * bw) - EPS))
        if state.above.get(cid, 0) >= sustain and target > whole:
            want = target - whole
            grant = min(want, int(math.floor(headroom + EPS)))
            if grant > 0:
                delta.changes[cid] = grant
                headroom -= grant
            if want > grant:
                delta.queued[cid] = want - grant
        elif state.below.get(cid, 0) >= sustain and target < whole:
            delta.changes[cid] = target - whole
            headroom += whole - target
    if not delta.empty:
        logger.info("autoscale %s: %s", plan.dag_uid, delta.changes)
    return delta


def apply_delta(plan: ParallelismPlan, delta: PlanDelta) -> ParallelismPlan:
    counts = {g.chain.id: g.instances + delta.changes.get(g.chain.id, 0) for g in plan.groups()}
    return plan.with_instances(counts)


if __name__ == "__main__":
    cat = {n: NetworkTask(n, 1, 10.0, 50) for n in ("NT1", "NT2", "NT3", "NT4")}
    dag_a = NtDag("a", "u1", ["NT1", "NT2", "NT3", "NT4"],
                  [("NT1", "NT2"), ("NT2", "NT4"), ("NT3", "NT4")], 1.0)
    for m in ("off", "auto"):
        p = plan_parallelism(dag_a, cat, 2, 3.0, 1.0, mode=m)
        print(m, [[g.chain.id for g in s.groups] for s in p.stages], p.critical_path_units)
