"""
Workload generation: seeded per-user arrival processes with offered-load
timelines, packet-size distributions and trace replay.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np
import pandas as pd

from errors import BadTrace
from nt_library import ZIPF_THETA, ZipfKeys

logger = logging.getLogger(__name__)

# Configuration
DATA_DIR = Path(__file__).resolve().parent.parent / "data"
PACKET_SIZE_TABLE = DATA_DIR / "facebook_packet_sizes.csv"
TRACE_COLUMNS = ("timestamp_ns", "user", "dag_uid", "size_bytes")
DEFAULT_FLOWS = 16
PROCESSES = ("constant", "poisson", "on_off", "trace")


@dataclass
class LoadStep:
    at_us: float
    rate_gbps: float
    size_bytes: Optional[int] = None


@dataclass
class WorkloadSpec:
    user: str = ""
    dag_uid: Optional[str] = None
    process: str = "constant"
    rate_gbps: float = 1.0
    size_bytes: int = 1024
    size_distribution: str = "fixed"  # fixed | facebook | path to a (size_bytes, cdf) CSV
    timeline: List[LoadStep] = field(default_factory=list)
    start_us: float = 0.0
    stop_us: Optional[float] = None
    on_us: float = 10.0
    off_us: float = 10.0
    flows: int = DEFAULT_FLOWS
    zipf_keys: Optional[int] = None
    zipf_theta: float = ZIPF_THETA
    sequenced: bool = False
    trace_path: Optional[str] = None
    snic: int = 0


@dataclass
class Arrival:
    time_ns: float
    user: str
    dag_uid: Optional[str]
    size: int
    flow_id: int = 0
    key: Optional[int] = None
    seq: Optional[int] = None
    snic: int = 0


class SizeSampler:
    """Fixed packet size or an empirical (size_bytes, cdf) table."""

    def __init__(self, rng: np.random.Generator, distribution: str = "fixed", size_bytes: int = 1024):
        self.rng = rng
        self.fixed = size_bytes
        self.sizes: Optional[np.ndarray] = None
        self.cdf: Optional[np.ndarray] = None
        if distribution != "fixed":
            path = PACKET_SIZE_TABLE if distribution == "facebook" else Path(distribution)
            table = pd.read_csv(path)
            self.sizes = table["size_bytes"].to_numpy(dtype=np.int64)
            self.cdf = table["cdf"].to_numpy(dtype=np.float64)
            if len(self.cdf) == 0 or np.any(np.diff(self.cdf) < 0) or abs(self.cdf[-1] - 1.0) > 1e-6:
                raise ValueError(f"{path}: cdf column must be nondecreasing and end at 1")

    @property
    def mean(self) -> float:
        if self.sizes is None:
            return float(self.fixed)
        pmf = np.diff(np.concatenate(([0.0], self.cdf)))
        return float(np.dot(self.sizes, pmf))

    def sample(self, override: Optional[int] = None) -> int:
        if override is not None:
            return int(override)
        if self.sizes is None:
            return int(self.fixed)
        idx = int(np.searchsorted(self.cdf, self.rng.random(), side="left"))
        return int(self.sizes[min(idx, len(self.sizes) - 1)])


def load_trace(path: str) -> pd.DataFrame:
    """
    Read a trace CSV with columns timestamp_ns, user, dag_uid, size_bytes.

    Raises:
        BadTrace: on missing columns, unparsable values, negative or decreasing timestamps
    """
    try:
        frame = pd.read_csv(path, dtype={"user": str, "dag_uid": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise BadTrace(f"{path}: {exc}") from exc
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise BadTrace(f"{path}: missing columns {missing}")
    try:
        ts = pd.to_numeric(frame["timestamp_ns"], errors="raise").astype(float)
        sizes = pd.to_numeric(frame["size_bytes"], errors="raise")
    except (ValueError, TypeError) as exc:
        raise BadTrace(f"{path}: non-numeric timestamp or size ({exc})") from exc
    if (ts < 0).any():
        raise BadTrace(f"{path}: negative timestamp at row {int((ts < 0).idxmax()) + 2}")
    if (ts.diff().fillna(0) < 0).any():
        raise BadTrace(f"{path}: timestamps decrease at row {int((ts.diff() < 0).idxmax()) + 2}")
    if (sizes <= 0).any() or (sizes != sizes.round()).any():
        raise BadTrace(f"{path}: size_bytes must be positive integers")
    if frame["user"].isna().any():
        raise BadTrace(f"{path}: empty user")
    frame = frame.assign(timestamp_ns=ts, size_bytes=sizes.astype(np.int64))
    return frame


class WorkloadGenerator:
    """Lazy, seeded arrival stream of one workload entry."""

    def __init__(self, spec: WorkloadSpec, seed: int, index: int = 0):
        if spec.process not in PROCESSES:
            raise ValueError(f"unknown arrival process '{spec.process}'")
        self.spec = spec
        self.rng = np.random.default_rng([seed, index])
        self.sizes = SizeSampler(self.rng, spec.size_distribution, spec.size_bytes)
        self.keys = ZipfKeys(self.rng, spec.zipf_keys, spec.zipf_theta) if spec.zipf_keys else None
        self.timeline = sorted(spec.timeline, key=lambda s: s.at_us)
        self.count = 0
        self._trace = load_trace(spec.trace_path) if spec.process == "trace" else None
        self._next_ns: Optional[float] = spec.start_us * 1000.0

    def _params(self, t_ns: float):
        rate, size = self.spec.rate_gbps, None
        for step in self.timeline:
            if step.at_us * 1000.0 <= t_ns + 1e-9:
                rate = step.rate_gbps
                size = step.size_bytes if step.size_bytes is not None else size
        return rate, size

    def _next_change_after(self, t_ns: float) -> Optional[float]:
        for step in self.timeline:
            if step.at_us * 1000.0 > t_ns + 1e-9:
                return step.at_us * 1000.0
        return None

    def _skip_idle(self, t_ns: float) -> Optional[float]:
        """Move t forward past zero-rate periods and off periods."""
        for _ in range(len(self.timeline) + 2):
            rate, _ = self._params(t_ns)
            if rate > 0:
                break
            nxt = self._next_change_after(t_ns)
            if nxt is None:
                return None
            t_ns = nxt
        if self.spec.process == "on_off":
            period = (self.spec.on_us + self.spec.off_us) * 1000.0
            phase = (t_ns - self.spec.start_us * 1000.0) % period
            if phase >= self.spec.on_us * 1000.0 - 1e-9:
                t_ns += period - phase
        return t_ns

    def next_arrival(self) -> Optional[Arrival]:
        if self._trace is not None:
            return self._next_trace()
        if self._next_ns is None:
            return None
        t = self._skip_idle(self._next_ns)
        if t is None or (self.spec.stop_us is not None and t >= self.spec.stop_us * 1000.0):
            self._next_ns = None
            return None
        rate, size_override = self._params(t)
        size = self.sizes.sample(size_override)
        if self.spec.process == "poisson":
            mean_size = size_override or self.sizes.mean
            gap = self.rng.exponential(mean_size * 8.0 / rate)
        else:
            gap = size * 8.0 / rate
        self._next_ns = t + gap

        seq = self.count + 1 if self.spec.sequenced else None
        key = int(self.keys.sample()) if self.keys is not None else None
        arrival = Arrival(t, self.spec.user, self.spec.dag_uid, size,
                          self.count % max(1, self.spec.flows), key, seq, self.spec.snic)
        self.count += 1
        return arrival

    def _next_trace(self) -> Optional[Arrival]:
        if self.count >= len(self._trace):
            return None
        row = self._trace.iloc[self.count]
        dag = row["dag_uid"]
        arrival = Arrival(float(row["timestamp_ns"]), str(row["user"]),
                          None if (isinstance(dag, float) and math.isnan(dag)) or dag == "" else str(dag),
                          int(row["size_bytes"]), self.count % max(1, self.spec.flows),
                          snic=self.spec.snic)
        self.count += 1
        return arrival

    def __iter__(self) -> Iterator[Arrival]:
        while True:
            arrival = self.next_arrival()
            if arrival is None:
                return
            yield arrival


def generate_workload(spec: WorkloadSpec, seed: int, end_ns: float, index: int = 0) -> List[Arrival]:
    """Every arrival of one workload entry up to end_ns (inclusive)."""
    arrivals = []
    for arrival in WorkloadGenerator(spec, seed, index):
        if arrival.time_ns > end_ns:
            break
        arrivals.append(arrival)
    return arrivals


def offered_gbps(arrivals: List[Arrival], start_ns: float, end_ns: float) -> float:
    total = sum(a.size for a in arrivals if start_ns <= a.time_ns < end_ns)
    return total * 8.0 / (end_ns - start_ns) if end_ns > start_ns else 0.0


if __name__ == "__main__":
    spec = WorkloadSpec(user="u1", dag_uid="d1", process="poisson", rate_gbps=8.0, size_bytes=1024)
    arr = generate_workload(spec, seed=1, end_ns=1_000_000)
    print(f"{len(arr)} arrivals, offered {offered_gbps(arr, 0, 1_000_000):.2f} Gbps")
