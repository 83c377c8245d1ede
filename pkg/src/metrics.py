"""
Metrics collection and report writing.

MetricsLog is the run's event sink: every sNIC, the fairness engine and the
rack write structured records into it; collect_metrics turns it into the run
summary and write_reports emits the CSV/JSON report files.
"""

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Hashable, List, Mapping, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Configuration
FLOAT_FORMAT = "%.6f"
SHARE_DECIMALS = 4


@dataclass
class DeployMark:
    dag_uid: str
    snic: int
    deploy_ns: float
    first_egress_ns: Optional[float] = None

    @property
    def stall_ns(self) -> Optional[float]:
        return None if self.first_egress_ns is None else self.first_egress_ns - self.deploy_ns


class MetricsLog:
    def __init__(self, epoch_ns: float = 20_000.0, warmup_ns: float = 0.0, trace: bool = False):
        self.epoch_ns = epoch_ns
        self.warmup_ns = warmup_ns
        self.trace_enabled = trace

        self.drops: Counter = Counter()
        self.drops_by_user: Counter = Counter()
        self.counters: Counter = Counter()
        self.visit_histogram: Counter = Counter()
        self.admitted: Counter = Counter()
        self.delivered: Counter = Counter()
        self.delivered_bytes: Counter = Counter()
        self.measured_bytes: Counter = Counter()
        self.epoch_bytes: Dict[tuple, float] = defaultdict(float)
        self.epoch_latency: Dict[tuple, List[float]] = defaultdict(list)
        self.latencies: Dict[str, List[float]] = defaultdict(list)
        self.executions: Counter = Counter()
        self.processed_at: Dict[int, set] = defaultdict(set)

        self.allocation_events: List[Dict] = []
        self._last_shares: Dict[tuple, tuple] = {}
        self.placements: List[Dict] = []
        self.migrations: List[Dict] = []
        self.region_events: List[Dict] = []
        self.deploys: List[DeployMark] = []
        self.utilization_rows: List[Dict] = []
        self.user_epoch_rows: List[Dict] = []
        self.trace_rows: List[Dict] = []

    # ---------- packets ----------
    def record_admit(self, user: str) -> None:
        self.admitted[user] += 1

    def record_drop(self, user: str, reason: str) -> None:
        self.drops[reason] += 1
        self.drops_by_user[(user, reason)] += 1

    def record_execution(self, pkt_id: int, nt: str, snic: int) -> None:
        self.executions[(pkt_id, nt)] += 1
        self.processed_at[pkt_id].add(snic)

    def record_egress(self, desc, now_ns: float, snic: int) -> None:
        """A packet left the rack (delivered, or answered early by an NT)."""
        user = desc.user
        latency = now_ns - desc.created_ns
        self.delivered[user] += 1
        self.delivered_bytes[user] += desc.size
        self.visit_histogram[desc.visits] += 1
        self.latencies[user].append(latency)
        epoch = int(now_ns // self.epoch_ns)
        self.epoch_bytes[(epoch, snic, user)] += desc.size
        self.epoch_latency[(epoch, snic, user)].append(latency)
        if now_ns >= self.warmup_ns:
            self.measured_bytes[user] += desc.size
        for mark in self.deploys:
            if (mark.first_egress_ns is None and mark.dag_uid == desc.dag_uid
                    and desc.created_ns >= mark.deploy_ns):
                mark.first_egress_ns = now_ns
        if self.trace_enabled:
            self.trace_rows.append({
                "pkt_id": desc.pkt_id, "user": user, "dag_uid": desc.dag_uid,
                "created_ns": desc.created_ns, "egress_ns": now_ns,
                "stage_cycles": " ".join(str(t) for t in desc.stage_times),
                "visits": desc.visits, "credit_wait_cycles": desc.credit_wait,
                "snic": snic, "responded": desc.responded,
            })

    def exactly_once_violations(self) -> int:
        return sum(1 for n in self.executions.values() if n > 1)

    # ---------- control plane ----------
    def record_allocation(self, time_ns: float, snic: int, instance: Hashable,
                          shares: Mapping[str, float]) -> bool:
        """Record a share change; unchanged allocations (at 4 decimals) are not repeated."""
        rounded = tuple(sorted((u, round(s, SHARE_DECIMALS)) for u, s in shares.items()))
        key = (snic, instance)
        if self._last_shares.get(key) == rounded:
            return False
        self._last_shares[key] = rounded
        self.allocation_events.append({
            "time_ns": time_ns, "snic": snic, "instance": list(instance),
            "shares": {u: s for u, s in rounded},
        })
        return True

    def last_allocation(self, instance: Hashable, snic: int = 0) -> Optional[Dict[str, float]]:
        for event in reversed(self.allocation_events):
            if event["snic"] == snic and tuple(event["instance"]) == tuple(instance):
                return event["shares"]
        return None

    def record_placement(self, time_ns: float, snic: int, dag_uid: str, kind: str, **fields) -> None:
        record = {"time_ns": time_ns, "snic": snic, "dag_uid": dag_uid, "kind": kind}
        record.update(fields)
        self.placements.append(record)

    def record_migration(self, time_ns: float, kind: str, **fields) -> None:
        record = {"time_ns": time_ns, "kind": kind}
        record.update(fields)
        self.migrations.append(record)
        logger.info("migration %s %s", kind, fields)

    def mark_deploy(self, dag_uid: str, snic: int, now_ns: float) -> None:
        self.deploys.append(DeployMark(dag_uid, snic, now_ns))

    def record_user_epoch(self, epoch: int, snic: int, user: str, intended: float,
                          limiter: float, dominant_share: float) -> None:
        self.user_epoch_rows.append({
            "epoch": epoch, "snic": snic, "user": user, "intended_gbps": intended,
            "limiter_gbps": limiter, "dominant_share": dominant_share,
        })

    def record_utilization(self, epoch: int, snic: int, resource: str, value: float) -> None:
        self.utilization_rows.append({"epoch": epoch, "snic": snic, "resource": resource,
                                      "utilization": value})

    # ---------- derived series ----------
    def throughput_series(self) -> pd.DataFrame:
        rows = [
            {"epoch": e, "snic": s, "user": u, "throughput_gbps": b * 8.0 / self.epoch_ns}
            for (e, s, u), b in self.epoch_bytes.items()
        ]
        return pd.DataFrame(rows, columns=["epoch", "snic", "user", "throughput_gbps"])

    def user_throughput_by_epoch(self, user: str) -> Dict[int, float]:
        series: Dict[int, float] = defaultdict(float)
        for (e, _s, u), b in self.epoch_bytes.items():
            if u == user:
                series[e] += b * 8.0 / self.epoch_ns
        return dict(series)

    def dominant_share_series(self, user: str) -> Dict[int, float]:
        series: Dict[int, float] = {}
        for row in self.user_epoch_rows:
            if row["user"] == user:
                series[row["epoch"]] = max(series.get(row["epoch"], 0.0), row["dominant_share"])
        return series


def _percentiles(values: List[float]) -> Dict[str, float]:
    if not values:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "p50": float(np.percentile(arr, 50)),
            "p95": float(np.percentile(arr, 95))}


def collect_metrics(log: MetricsLog, end_ns: float, extra: Optional[Dict] = None) -> Dict:
    """Run summary: per-user throughput and latency, counters, histograms and events."""
    window = max(1e-9, end_ns - log.warmup_ns)
    users = sorted(set(log.admitted) | set(log.delivered) | {u for u, _ in log.drops_by_user})
    per_user = {}
    for user in users:
        dropped = sum(n for (u, _r), n in log.drops_by_user.items() if u == user)
        per_user[user] = {
            "admitted": log.admitted[user],
            "delivered": log.delivered[user],
            "dropped": dropped,
            "in_flight": log.admitted[user] - log.delivered[user] - dropped,
            "throughput_gbps": log.measured_bytes[user] * 8.0 / window,
            "latency_ns": _percentiles(log.latencies[user]),
        }
    summary = {
        "end_ns": end_ns,
        "warmup_ns": log.warmup_ns,
        "users": per_user,
        "total_throughput_gbps": sum(u["throughput_gbps"] for u in per_user.values()),
        "counters": dict(sorted(log.counters.items())),
        "drops": dict(sorted(log.drops.items())),
        "visit_histogram": {str(k): v for k, v in sorted(log.visit_histogram.items())},
        "exactly_once_violations": log.exactly_once_violations(),
        "allocation_events": log.allocation_events,
        "placements": log.placements,
        "migrations": log.migrations,
        "region_events": log.region_events,
        "deploy_stalls": [
            {"dag_uid": m.dag_uid, "snic": m.snic, "deploy_ns": m.deploy_ns, "stall_ns": m.stall_ns}
            for m in log.deploys
        ],
    }
    if extra:
        summary.update(extra)
    return summary


def write_reports(log: MetricsLog, summary: Dict, out_dir: str, stem: str) -> List[Path]:
    """Write <stem>_timeseries.csv, <stem>_utilization.csv, <stem>_summary.json (and the trace)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    series = log.throughput_series()
    users = pd.DataFrame(log.user_epoch_rows,
                         columns=["epoch", "snic", "user", "intended_gbps", "limiter_gbps", "dominant_share"])
    lat = pd.DataFrame(
        [{"epoch": e, "snic": s, "user": u, "latency_mean_ns": float(np.mean(v))}
         for (e, s, u), v in log.epoch_latency.items()],
        columns=["epoch", "snic", "user", "latency_mean_ns"],
    )
    frame = series.merge(users, on=["epoch", "snic", "user"], how="outer")
    frame = frame.merge(lat, on=["epoch", "snic", "user"], how="left")
    frame = frame.fillna({"throughput_gbps": 0.0}).sort_values(["epoch", "snic", "user"])
    path = out / f"{stem}_timeseries.csv"
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    written.append(path)

    util = pd.DataFrame(log.utilization_rows, columns=["epoch", "snic", "resource", "utilization"])
    util = util.sort_values(["epoch", "snic", "resource"], kind="mergesort")
    path = out / f"{stem}_utilization.csv"
    util.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    written.append(path)

    path = out / f"{stem}_summary.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, ensure_ascii=False, default=str)
    written.append(path)

    if log.trace_enabled:
        path = out / f"{stem}_trace.csv"
        pd.DataFrame(log.trace_rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)

    logger.info("reports written to %s (%s)", out, ", ".join(p.name for p in written))
    return written
