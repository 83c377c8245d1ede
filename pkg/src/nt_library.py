"""
Behavioral models of concrete network tasks.

Each model decides what happens to a packet at its NT: forward it, drop it,
answer it early (KV cache hit) or duplicate it (replication). Timing comes from
the NT catalog; these classes only carry the per-packet semantics and state.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Configuration
ZIPF_THETA = 0.99
ZIPF_KEYS = 100_000
DEFAULT_KV_ENTRIES = 1024
NAT_PORT_BASE = 10_000


class Action(Enum):
    FORWARD = "forward"
    DROP = "drop"
    RESPOND = "respond"
    RETRANSMIT = "retransmit"


@dataclass
class NtOutcome:
    action: Action = Action.FORWARD
    copies: int = 1
    nack: Optional[int] = None
    retransmit: Tuple[int, ...] = ()


FORWARD = NtOutcome()


class NtBehavior:
    """Pass-through model; AES and the load balancer are pure timing models."""

    kind = "generic"

    @property
    def egress_amplification(self) -> float:
        return 1.0

    def apply(self, desc: Any) -> NtOutcome:
        return FORWARD


class Firewall(NtBehavior):
    """Drops packets matching any rule; a rule is a mapping of descriptor field -> value."""

    kind = "firewall"

    def __init__(self, rules: Optional[Iterable[Mapping[str, Any]]] = None):
        self.rules = [dict(r) for r in (rules or [])]
        self.dropped = 0

    def matches(self, desc: Any) -> bool:
        for rule in self.rules:
            if rule and all(getattr(desc, k, None) == v for k, v in rule.items()):
                return True
        return False

    def apply(self, desc: Any) -> NtOutcome:
        if self.matches(desc):
            self.dropped += 1
            return NtOutcome(Action.DROP)
        return FORWARD


class Nat(NtBehavior):
    """Rewrites the flow tuple; keeps a bijective flow -> port map over active flows."""

    kind = "nat"

    def __init__(self, port_base: int = NAT_PORT_BASE):
        self.port_base = port_base
        self.forward: Dict[Any, int] = {}
        self.reverse: Dict[int, Any] = {}
        self._free: List[int] = []
        self._next = port_base

    def translate(self, flow: Any) -> int:
        port = self.forward.get(flow)
        if port is None:
            port = self._free.pop(0) if self._free else self._alloc()
            self.forward[flow] = port
            self.reverse[port] = flow
        return port

    def _alloc(self) -> int:
        port = self._next
        self._next += 1
        return port

    def release(self, flow: Any) -> None:
        port = self.forward.pop(flow, None)
        if port is not None:
            del self.reverse[port]
            self._free.append(port)
            self._free.sort()

    def apply(self, desc: Any) -> NtOutcome:
        desc.nat_port = self.translate(getattr(desc, "flow_id", None))
        return FORWARD


class KvCache(NtBehavior):
    """
    Cache of recently written/read key-value pairs with FIFO replacement.

    Every access (re)inserts the key at the tail, so the entry evicted is the one
    whose last access is oldest. A hit answers the request directly.
    """

    kind = "kv_cache"

    def __init__(self, entries: int = DEFAULT_KV_ENTRIES):
        self.entries = entries
        self.cache: "OrderedDict[Any, None]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def access(self, key: Any) -> bool:
        hit = key in self.cache
        if hit:
            self.hits += 1
            self.cache.move_to_end(key)
        else:
            self.misses += 1
            self.cache[key] = None
            if len(self.cache) > self.entries:
                self.cache.popitem(last=False)
        return hit

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def apply(self, desc: Any) -> NtOutcome:
        key = getattr(desc, "key", None)
        if key is None:
            return FORWARD
        return NtOutcome(Action.RESPOND) if self.access(key) else FORWARD


class KvReplication(NtBehavior):
    kind = "kv_replication"

    def __init__(self, replicas: int = 3):
        self.replicas = replicas

    @property
    def egress_amplification(self) -> float:
        return float(self.replicas)

    def apply(self, desc: Any) -> NtOutcome:
        return NtOutcome(Action.FORWARD, copies=self.replicas)


class GoBackNReceiver(NtBehavior):
    """Accepts only the next expected sequence number; anything else is dropped with a NACK."""

    kind = "gbn_receiver"

    def __init__(self):
        self.expected = 1
        self.delivered: List[int] = []

    def receive(self, seq: int) -> NtOutcome:
        if seq == self.expected:
            self.delivered.append(seq)
            self.expected += 1
            return FORWARD
        return NtOutcome(Action.DROP, nack=self.expected - 1)

    def apply(self, desc: Any) -> NtOutcome:
        seq = getattr(desc, "seq", None)
        if seq is None:
            return FORWARD
        return self.receive(seq)


class GoBackNSender:
    """Window-limited sender; on NACK(n) every packet sent after n goes out again."""

    def __init__(self, total: int, window: int = 8):
        self.total = total
        self.window = window
        self.acked = 0
        self.next_seq = 1

    def sendable(self) -> List[int]:
        seqs = []
        while self.next_seq <= self.total and self.next_seq <= self.acked + self.window:
            seqs.append(self.next_seq)
            self.next_seq += 1
        return seqs

    def on_ack(self, seq: int) -> None:
        self.acked = max(self.acked, seq)

    def on_nack(self, seq: int) -> Tuple[int, ...]:
        self.on_ack(seq)
        resend = tuple(range(self.acked + 1, self.next_seq))
        return resend

    def on_timeout(self) -> Tuple[int, ...]:
        return tuple(range(self.acked + 1, self.next_seq))

    @property
    def done(self) -> bool:
        return self.acked >= self.total


@dataclass
class TransferResult:
    delivered: List[int] = field(default_factory=list)
    transmissions: int = 0
    retransmissions: int = 0
    nacks: int = 0


def go_back_n_transfer(total: int, window: int = 8, lost: Iterable[int] = (),
                       max_rounds: int = 100_000) -> TransferResult:
    """
    Drive a go-back-N sender/receiver pair over a lossy link.

    Args:
        total: Number of sequence numbers to deliver
        window: Sender window
        lost: Indices (0-based, counted over all transmissions) the link drops

    Returns:
        TransferResult with the in-order delivery seen by the application
    """
    sender = GoBackNSender(total, window)
    receiver = GoBackNReceiver()
    lost = set(lost)
    result = TransferResult()
    outstanding: List[int] = []

    for _ in range(max_rounds):
        if sender.done:
            break
        outstanding.extend(sender.sendable())
        if not outstanding:
            outstanding = list(sender.on_timeout())

        batch, outstanding = outstanding, []
        progressed = False
        for seq in batch:
            index = result.transmissions
            result.transmissions += 1
            if index in lost:
                continue
            outcome = receiver.receive(seq)
            if outcome.action is Action.FORWARD:
                sender.on_ack(seq)
                progressed = True
            elif outcome.nack is not None:
                result.nacks += 1
                resend = sender.on_nack(outcome.nack)
                result.retransmissions += len(resend)
                outstanding = list(resend)
                break
        if not progressed and not outstanding and not sender.done:
            resend = sender.on_timeout()
            result.retransmissions += len(resend)
            outstanding = list(resend)

    result.delivered = list(receiver.delivered)
    return result


class ZipfKeys:
    """Bounded Zipf(theta) key sampler over [0, n_keys)."""

    def __init__(self, rng: np.random.Generator, n_keys: int = ZIPF_KEYS, theta: float = ZIPF_THETA):
        ranks = np.arange(1, n_keys + 1, dtype=np.float64)
        weights = ranks ** (-theta)
        self.cdf = np.cumsum(weights) / weights.sum()
        self.rng = rng

    def sample(self, size: Optional[int] = None):
        u = self.rng.random(size)
        return np.searchsorted(self.cdf, u, side="right")


def apply_nt(behavior: NtBehavior, desc: Any) -> NtOutcome:
    """Run one packet through an NT model."""
    return behavior.apply(desc)


_BEHAVIORS = {
    "generic": NtBehavior,
    "aes": NtBehavior,
    "lb": NtBehavior,
    "firewall": Firewall,
    "nat": Nat,
    "kv_cache": KvCache,
    "kv_replication": KvReplication,
    "gbn_receiver": GoBackNReceiver,
}


def build_behavior(kind: str, params: Optional[Mapping[str, Any]] = None) -> NtBehavior:
    """Instantiate the model registered under kind with its scenario parameters."""
    try:
        cls = _BEHAVIORS[kind]
    except KeyError:
        raise ValueError(f"unknown NT kind '{kind}'; expected one of {sorted(_BEHAVIORS)}")
    return cls(**dict(params or {})) if cls is not NtBehavior else NtBehavior()


def amplification_of(kind: str, params: Optional[Mapping[str, Any]] = None) -> float:
    return build_behavior(kind, params).egress_amplification


def hit_ratio_for(seed: int, requests: int, entries: int,
                  n_keys: int = ZIPF_KEYS, theta: float = ZIPF_THETA) -> float:
    """KV-cache hit ratio under a seeded Zipf request stream."""
    keys = ZipfKeys(np.random.default_rng(seed), n_keys, theta).sample(requests)
    cache = KvCache(entries)
    for key in keys.tolist():
        cache.access(key)
    return cache.hit_ratio


if __name__ == "__main__":
    result = go_back_n_transfer(10, window=4, lost=[3])
    print(f"delivered={result.delivered} transmissions={result.transmissions}")
    print(f"zipf hit ratio (1K entries): {hit_ratio_for(7, 20_000, 1000):.3f}")
