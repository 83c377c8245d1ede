"""
Core model - NTs, DAGs, chains, regions and compile-time artifacts.

Maintains:
- The NT catalog and user DAGs (validated, stored in a DeploymentStore)
- Enumeration of the chain subsets a DAG may be compiled into
- Skip plans that let one DAG run on chains deployed for another
"""

import json
import logging
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx

from errors import (BitstreamTooLarge, CyclicDag, InvalidNetworkTask, NonPositiveBandwidth, NtTooLarge, SnicError,
                    UnknownNt)

logger = logging.getLogger(__name__)

# Configuration
DEFAULT_REGION_BITSTREAM_MB = 4.0
MAX_BITSTREAM_MB = 5.0


@dataclass(frozen=True)
class NetworkTask:
    """One offloadable packet-processing task as listed in the NT catalog."""

    id: str
    area: int
    max_bandwidth: float  # Gbps
    proc_latency: int  # cycles per packet
    stateful: bool = False
    state_size: int = 0  # bytes
    mem_footprint: int = 0  # bytes of on-board memory
    shareable: bool = True
    kind: str = "generic"
    egress_amplification: float = 1.0

    def __post_init__(self):
        if self.area <= 0:
            raise InvalidNetworkTask(f"NT {self.id}: area must be > 0")
        if self.max_bandwidth <= 0:
            raise InvalidNetworkTask(f"NT {self.id}: max_bandwidth must be > 0")
        if self.proc_latency < 1:
            raise InvalidNetworkTask(f"NT {self.id}: proc_latency must be >= 1 cycle")
        if self.stateful and self.state_size <= 0:
            raise InvalidNetworkTask(f"NT {self.id}: stateful NTs need state_size > 0")


Catalog = Mapping[str, NetworkTask]


@dataclass
class NtDag:
    """A user's NT DAG; the uid is what packets carry."""

    uid: str
    owner: str
    nodes: List[str]
    edges: List[Tuple[str, str]] = field(default_factory=list)
    requested_ingress_bw: float = 1.0  # Gbps
    memory_bytes: int = 0

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.edges)
        return g

    def sources(self) -> List[str]:
        g = self.graph()
        return [n for n in self.nodes if g.in_degree(n) == 0]

    def sinks(self) -> List[str]:
        g = self.graph()
        return [n for n in self.nodes if g.out_degree(n) == 0]

    def paths(self) -> List[List[str]]:
        """Every source-to-sink path, in deterministic order."""
        g = self.graph()
        result = []
        for src in self.sources():
            for dst in self.sinks():
                if src == dst:
                    result.append([src])
                    continue
                result.extend(list(p) for p in nx.all_simple_paths(g, src, dst))
        return result

    def area(self, catalog: Catalog) -> int:
        return sum(catalog[n].area for n in self.nodes)

    def linearize(self) -> List[str]:
        """Deterministic topological order (ties broken by declaration order)."""
        order = {n: i for i, n in enumerate(self.nodes)}
        return list(nx.lexicographical_topological_sort(self.graph(), key=order.__getitem__))

    def to_dict(self) -> Dict:
        return {
            "uid": self.uid,
            "owner": self.owner,
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "requested_ingress_bw": self.requested_ingress_bw,
            "memory_bytes": self.memory_bytes,
        }


@dataclass(frozen=True)
class NtChain:
    """A sequential list of NTs placed together in one region."""

    nts: Tuple[str, ...]
    total_area: int
    bitstream_size: float  # MB

    @property
    def id(self) -> str:
        return ">".join(self.nts)

    def bottleneck_bw(self, catalog: Catalog) -> float:
        return min(catalog[n].max_bandwidth for n in self.nts)

    def proc_cycles(self, catalog: Catalog) -> int:
        return sum(catalog[n].proc_latency for n in self.nts)

    def __len__(self) -> int:
        return len(self.nts)


def make_chain(nts: Sequence[str], catalog: Catalog, region_capacity: int,
               region_bitstream_mb: float = DEFAULT_REGION_BITSTREAM_MB,
               max_bitstream_mb: float = MAX_BITSTREAM_MB) -> NtChain:
    """
    Build a chain with its synthetic bitstream size.

    Raises:
        BitstreamTooLarge: if the bitstream exceeds max_bitstream_mb
    """
    area = sum(catalog[n].area for n in nts)
    size = area / region_capacity * region_bitstream_mb
    if size > max_bitstream_mb + 1e-9:
        raise BitstreamTooLarge(f"chain {'>'.join(nts)}: {size:.2f} MB bitstream exceeds {max_bitstream_mb} MB")
    return NtChain(tuple(nts), area, size)


@dataclass(frozen=True)
class SkipStep:
    region_id: int
    chain: NtChain
    mask: FrozenSet[int]  # skipped positions within chain.nts

    @property
    def active_positions(self) -> Tuple[int, ...]:
        return tuple(i for i in range(len(self.chain.nts)) if i not in self.mask)

    @property
    def unmasked(self) -> Tuple[str, ...]:
        return tuple(self.chain.nts[i] for i in self.active_positions)

    @property
    def skipped(self) -> Tuple[str, ...]:
        return tuple(self.chain.nts[i] for i in sorted(self.mask))


@dataclass(frozen=True)
class SkipPlan:
    steps: Tuple[SkipStep, ...]

    def serviced_path(self) -> List[str]:
        return [nt for step in self.steps for nt in step.unmasked]


class RegionStatus(Enum):
    FREE = "free"
    ACTIVE = "active"
    VICTIM = "victim"


@dataclass
class Region:
    """One reconfigurable FPGA region on an sNIC."""

    id: int
    capacity: int
    status: RegionStatus = RegionStatus.FREE
    chain: Optional[NtChain] = None
    owner: Optional[str] = None
    owner_shares: Dict[str, float] = field(default_factory=dict)
    last_used: int = 0
    generation: int = 0
    serving: bool = False  # False while PR / context switch is in flight

    def holds(self, chain_id: str) -> bool:
        return self.chain is not None and self.chain.id == chain_id


@dataclass(frozen=True)
class DeployedChain:
    """An Active region as seen by the skip-plan search."""

    region_id: int
    chain: NtChain
    spare_bandwidth: float = float("inf")
    owner: Optional[str] = None


@dataclass
class ValidationReport:
    dag_uid: str
    errors: List[SnicError] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors

    def raise_for_errors(self) -> None:
        if self.errors:
            raise self.errors[0]

    def to_dict(self) -> Dict:
        return {
            "dag_uid": self.dag_uid,
            "valid": self.valid,
            "errors": [f"{type(e).__name__}: {e}" for e in self.errors],
        }


def _closest_nt(name: str, catalog: Catalog) -> Optional[str]:
    best, best_score = None, 0.0
    for candidate in catalog:
        score = SequenceMatcher(None, name.lower(), candidate.lower()).ratio()
        if score > best_score:
            best, best_score = candidate, score
    return best if best_score >= 0.6 else None


def validate_dag(dag: NtDag, catalog: Catalog,
                 store: Optional["DeploymentStore"] = None) -> ValidationReport:
    """
    Check a DAG against the catalog.

    Args:
        dag: DAG to validate
        catalog: NT catalog
        store: If given, a valid DAG is admitted into it

    Returns:
        ValidationReport listing every problem found
    """
    report = ValidationReport(dag.uid)

    referenced = list(dag.nodes) + [n for e in dag.edges for n in e if n not in dag.nodes]
    for nt in dict.fromkeys(referenced):
        if nt not in catalog:
            hint = _closest_nt(nt, catalog)
            suffix = f" (did you mean '{hint}'?)" if hint else ""
            report.errors.append(UnknownNt(f"DAG {dag.uid}: unknown NT '{nt}'{suffix}"))
        elif nt not in dag.nodes:
            report.errors.append(UnknownNt(f"DAG {dag.uid}: edge endpoint '{nt}' is not a DAG node"))

    g = dag.graph()
    if any(u == v for u, v in dag.edges) or not nx.is_directed_acyclic_graph(g):
        report.errors.append(CyclicDag(f"DAG {dag.uid} contains a cycle"))

    if dag.requested_ingress_bw <= 0:
        report.errors.append(NonPositiveBandwidth(
            f"DAG {dag.uid}: requested ingress bandwidth {dag.requested_ingress_bw} Gbps"
        ))

    if not dag.nodes:
        report.errors.append(UnknownNt(f"DAG {dag.uid} has no NTs"))

    if report.valid and store is not None:
        store.add_dag(dag)
    return report


def enumerate_chain_subsets(dag: NtDag, catalog: Catalog, region_capacity: int,
                            region_bitstream_mb: float = DEFAULT_REGION_BITSTREAM_MB) -> Set[NtChain]:
    """
    Every contiguous sub-path of every source-to-sink path that fits a region.

    Raises:
        NtTooLarge: if a single NT exceeds the region capacity
    """
    for nt in dag.nodes:
        if catalog[nt].area > region_capacity:
            raise NtTooLarge(f"NT {nt} (area {catalog[nt].area}) exceeds region capacity {region_capacity}")

    chains: Set[NtChain] = set()
    for path in dag.paths():
        for i in range(len(path)):
            area = 0
            for j in range(i, len(path)):
                area += catalog[path[j]].area
                if area > region_capacity:
                    break
                chains.add(make_chain(path[i:j + 1], catalog, region_capacity, region_bitstream_mb))
    return chains


def _covered_prefix(chain: NtChain, path: Sequence[str], start: int,
                    usable: Optional[Set[str]] = None) -> Tuple[int, FrozenSet[int]]:
    """Greedy in-order match of path[start:] against the chain; returns (covered, mask)."""
    i = start
    used = []
    for pos, nt in enumerate(chain.nts):
        if i < len(path) and nt == path[i] and (usable is None or nt in usable):
            used.append(pos)
            i += 1
    mask = frozenset(p for p in range(len(chain.nts)) if p not in used)
    return i - start, mask


def compute_skip_plan(path: Sequence[str], deployed: Iterable[DeployedChain],
                      catalog: Optional[Catalog] = None, demand_gbps: float = 0.0,
                      user: Optional[str] = None) -> Optional[SkipPlan]:
    """
    Cover a DAG path with deployed chains, skipping NTs the path does not use.

    At each step the chain covering the longest prefix of the remaining path wins;
    ties go to the lowest region id.

    Args:
        path: Ordered NT ids to service
        deployed: Active regions and their spare bandwidth
        catalog: Needed to honour the shareable flag for chains owned by others
        demand_gbps: Bandwidth the caller needs from every chain it uses
        user: Requesting user; chains it owns are usable regardless of shareability

    Returns:
        SkipPlan, or None if the path cannot be fully covered (launch a new chain)
    """
    candidates = sorted(
        (d for d in deployed if d.spare_bandwidth >= demand_gbps),
        key=lambda d: d.region_id,
    )
    steps: List[SkipStep] = []
    k = 0
    while k < len(path):
        best: Optional[Tuple[int, DeployedChain, FrozenSet[int]]] = None
        for cand in candidates:
            usable = None
            if catalog is not None and user is not None and cand.owner not in (None, user):
                usable = {nt for nt in cand.chain.nts if catalog[nt].shareable}
            covered, mask = _covered_prefix(cand.chain, path, k, usable)
            if covered > 0 and (best is None or covered > best[0]):
                best = (covered, cand, mask)
        if best is None:
            return None
        covered, cand, mask = best
        steps.append(SkipStep(cand.region_id, cand.chain, mask))
        k += covered
    return SkipPlan(tuple(steps))


class DeploymentStore:
    """
    Growing store of the NT catalog and every admitted DAG.

    Mirrors how deployments accumulate on an sNIC control plane and can be
    persisted to / restored from JSON.
    """

    def __init__(self, catalog: Optional[Dict[str, NetworkTask]] = None):
        self.catalog: Dict[str, NetworkTask] = dict(catalog or {})
        self.dags: Dict[str, NtDag] = {}

    def add_nt(self, nt: NetworkTask) -> None:
        self.catalog[nt.id] = nt

    def add_dag(self, dag: NtDag) -> None:
        if dag.uid in self.dags:
            raise SnicError(f"DAG uid {dag.uid} already deployed")
        self.dags[dag.uid] = dag

    def admit(self, dag: NtDag) -> ValidationReport:
        """Validate and, if valid, store the DAG."""
        report = validate_dag(dag, self.catalog, store=self)
        if report.valid:
            logger.info("admitted DAG %s for %s (%d NTs)", dag.uid, dag.owner, len(dag.nodes))
        return report

    def remove_dag(self, uid: str) -> Optional[NtDag]:
        return self.dags.pop(uid, None)

    def get_dag(self, uid: str) -> Optional[NtDag]:
        return self.dags.get(uid)

    def dags_of(self, owner: str) -> List[NtDag]:
        return [d for d in self.dags.values() if d.owner == owner]

    def get_statistics(self) -> Dict:
        owners: Dict[str, int] = {}
        for dag in self.dags.values():
            owners[dag.owner] = owners.get(dag.owner, 0) + 1
        return {
            "catalog_size": len(self.catalog),
            "deployed_dags": len(self.dags),
            "dags_by_owner": owners,
        }

    def export_to_dict(self) -> Dict:
        return {
            "catalog": [vars(nt) for nt in self.catalog.values()],
            "dags": [d.to_dict() for d in self.dags.values()],
            "statistics": self.get_statistics(),
        }

    def save_to_file(self, filepath: str) -> None:
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(self.export_to_dict(), f, indent=2, ensure_ascii=False)
        logger.info("deployment store saved to %s", filepath)

    def load_from_file(self, filepath: str) -> None:
        with open(Path(filepath), "r", encoding="utf-8") as f:
            data = json.load(f)

        self.catalog = {}
        self.dags = {}
        for nt_data in data["catalog"]:
            self.add_nt(NetworkTask(**nt_data))
        for dag_data in data["dags"]:
            dag = NtDag(
                uid=dag_data["uid"],
                owner=dag_data["owner"],
                nodes=dag_data["nodes"],
                edges=[tuple(e) for e in dag_data["edges"]],
                requested_ingress_bw=dag_data["requested_ingress_bw"],
                memory_bytes=dag_data.get("memory_bytes", 0),
            )
            self.admit(dag).raise_for_errors()
        logger.info("loaded %d NTs and %d DAGs from %s", len(self.catalog), len(self.dags), filepath)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    cat = {n: NetworkTask(n, 1, 10.0, 50) for n in ("NT1", "NT2", "NT3", "NT4")}
    dag_a = NtDag("a", "u1", ["NT1", "NT2", "NT3", "NT4"],
                  [("NT1", "NT2"), ("NT2", "NT4"), ("NT3", "NT4")], 8.0)
    print(validate_dag(dag_a, cat).to_dict())
    for c in sorted(enumerate_chain_subsets(dag_a, cat, 2), key=lambda c: c.id):
        print(f"  {c.id:12s} area={c.total_area} bitstream={c.bitstream_size:.1f} MB")
