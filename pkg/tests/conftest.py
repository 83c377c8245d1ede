"""Shared fixtures: small NT catalogs, scenario builders and a run helper."""

import copy
from pathlib import Path
from typing import Any, Dict, Tuple

import pytest
import yaml

from core_model import NetworkTask, NtDag
from engine import SimClock
from rack import Rack
from sim_config import ScenarioConfig, validate_config

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def nt(nt_id: str, area: int = 1, bw: float = 10.0, latency: int = 10, **kwargs) -> NetworkTask:
    return NetworkTask(nt_id, area, bw, latency, **kwargs)


def make_catalog(ids=("NT1", "NT2", "NT3", "NT4"), area: int = 1, bw: float = 10.0, latency: int = 10):
    return {i: nt(i, area, bw, latency) for i in ids}


def dag_a(requested: float = 1.0) -> NtDag:
    """NT1 -> NT2 -> NT4 with NT3 -> NT4 on a parallel branch."""
    return NtDag("dag-a", "U1", ["NT1", "NT2", "NT3", "NT4"],
                 [("NT1", "NT2"), ("NT2", "NT4"), ("NT3", "NT4")], requested)


def linear_dag(uid: str, owner: str, nodes, requested: float = 1.0) -> NtDag:
    return NtDag(uid, owner, list(nodes), list(zip(nodes, nodes[1:])), requested)


def load_raw(name: str) -> Dict[str, Any]:
    """A bundled scenario as a plain dict, ready to be edited by a test."""
    with open(DATA_DIR / f"{name}.yaml", "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def make_config(raw: Dict[str, Any], **updates) -> ScenarioConfig:
    """Validate a raw scenario; keyword updates use a.b.c dotted keys written as a__b__c."""
    tree = copy.deepcopy(raw)
    for key, value in updates.items():
        parts = key.split("__")
        node = tree
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        if isinstance(node, list):
            node[int(parts[-1])] = value
        else:
            node[parts[-1]] = value
    return validate_config(tree)


def run_config(config: ScenarioConfig) -> Tuple[Dict, Rack]:
    rack = Rack(config)
    return rack.run(), rack


def single_chain_raw(n: int, latency: int = 10, mode: str = "chain", size: int = 1000) -> Dict[str, Any]:
    """One boot-loaded linear chain of n NTs and a single packet at t = 0."""
    ids = [f"NT{i}" for i in range(1, n + 1)]
    return {
        "name": f"chain{n}",
        "duration_us": 5,
        "snic": {"regions": 3, "region_capacity": max(2, n), "boot_loaded": True,
                 "scheduling_mode": mode, "parallelism": "off"},
        "catalog": [{"id": i, "area": 1, "max_bandwidth_gbps": 10, "proc_latency_cycles": latency} for i in ids],
        "dags": [{"uid": "d", "owner": "U1", "nodes": ids, "edges": [list(e) for e in zip(ids, ids[1:])],
                  "requested_gbps": 1}],
        "workloads": [{"user": "U1", "dag_uid": "d", "rate_gbps": 1, "size_bytes": size, "stop_us": 1}],
    }


@pytest.fixture
def catalog():
    return make_catalog()


@pytest.fixture
def clock():
    return SimClock()
