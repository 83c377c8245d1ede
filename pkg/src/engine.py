"""
Discrete-event engine for the SuperNIC simulator.

Simulated time is an integer count of sNIC-core clock cycles (250 MHz by default,
2 GHz under ASIC projection). Events are simpy timeouts with a callback attached,
so they run in (time, insertion order) order exactly like the simpy-based
simulators this engine is modeled on.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np
import simpy

from errors import EventOverflow

logger = logging.getLogger(__name__)

# Configuration
BASE_CLOCK_MHZ = 250.0
ASIC_CLOCK_MHZ = 2000.0
DEFAULT_MAX_EVENTS = 50_000_000


def ns_to_cycles(ns: float, clock_mhz: float = BASE_CLOCK_MHZ) -> float:
    """Convert nanoseconds to (fractional) clock cycles."""
    return ns * clock_mhz / 1000.0


def cycles_to_ns(cycles: float, clock_mhz: float = BASE_CLOCK_MHZ) -> float:
    """Convert clock cycles to nanoseconds."""
    return cycles * 1000.0 / clock_mhz


def serialization_ns(size_bytes: int, bandwidth_gbps: float) -> float:
    """Time to push size_bytes through a bandwidth_gbps pipe, in ns."""
    return size_bytes * 8.0 / bandwidth_gbps


class SimClock:
    """
    Single-threaded event loop for one simulation run.

    Handlers may only schedule future (or same-cycle) events; each run owns its
    own clock, so independent runs share no mutable state.
    """

    def __init__(self, clock_mhz: float = BASE_CLOCK_MHZ,
                 max_events: int = DEFAULT_MAX_EVENTS):
        """
        Args:
            clock_mhz: sNIC-core clock frequency defining one cycle
            max_events: Runaway-detection cap on executed events
        """
        self.env = simpy.Environment()
        self.clock_mhz = clock_mhz
        self.max_events = max_events
        self.events_executed = 0

    @property
    def now(self) -> int:
        return int(self.env.now)

    def ns(self, cycles: Optional[float] = None) -> float:
        """Current time (or a cycle count) in nanoseconds."""
        return cycles_to_ns(self.now if cycles is None else cycles, self.clock_mhz)

    def cycles(self, ns: float) -> float:
        return ns_to_cycles(ns, self.clock_mhz)

    def schedule(self, delay_cycles: float, handler: Callable[..., Any], *args: Any) -> int:
        """
        Run handler(*args) after delay_cycles (rounded up to whole cycles).

        Returns:
            The absolute cycle at which the handler fires
        """
        delay = max(0, math.ceil(delay_cycles - 1e-9))
        event = self.env.timeout(delay)
        event.callbacks.append(lambda _event: self._fire(handler, args))
        return self.now + delay

    def schedule_at(self, time_cycles: float, handler: Callable[..., Any], *args: Any) -> int:
        return self.schedule(max(0.0, time_cycles - self.now), handler, *args)

    def _fire(self, handler: Callable[..., Any], args: tuple) -> None:
        self.events_executed += 1
        if self.events_executed > self.max_events:
            raise EventOverflow(
                f"more than {self.max_events} events executed at cycle {self.now}"
            )
        handler(*args)

    def run_until(self, end_cycles: int) -> None:
        """Execute every event with time <= end_cycles."""
        if end_cycles + 1 <= self.env.now:
            return
        self.env.run(until=end_cycles + 1)
        logger.debug("clock stopped at cycle %d after %d events", end_cycles, self.events_executed)


@dataclass
class LinkModel:
    """Static description of a point-to-point link."""

    bandwidth_gbps: float = 100.0
    latency_ns: float = 100.0
    loss_rate: float = 0.0  # test-only

    def transfer_ns(self, size_bytes: int) -> float:
        return serialization_ns(size_bytes, self.bandwidth_gbps) + self.latency_ns

    def delay_cycles(self, size_bytes: int, clock_mhz: float = BASE_CLOCK_MHZ) -> int:
        """Whole-cycle delivery delay of one packet on an idle link."""
        return math.ceil(ns_to_cycles(self.transfer_ns(size_bytes), clock_mhz) - 1e-9)


class Link:
    """
    FIFO link instance bound to a clock.

    Serialization is tracked with a fractional busy-until marker so long-run
    throughput matches the configured bandwidth exactly; deliveries are rounded
    up to whole cycles.
    """

    def __init__(self, clock: SimClock, model: LinkModel,
                 rng: Optional[np.random.Generator] = None, name: str = "link"):
        self.clock = clock
        self.model = model
        self.rng = rng
        self.name = name
        self.busy_until = 0.0
        self.bytes_sent = 0
        self.packets_lost = 0

    def send(self, size_bytes: int, handler: Callable[..., Any], *args: Any) -> bool:
        """
        Transmit one packet; handler(*args) runs on delivery.

        Returns:
            False if the loss model dropped the packet
        """
        now = float(self.clock.now)
        start = max(now, self.busy_until)
        ser = self.clock.cycles(serialization_ns(size_bytes, self.model.bandwidth_gbps))
        self.busy_until = start + ser
        self.bytes_sent += size_bytes
        if self.model.loss_rate > 0 and self.rng is not None and self.rng.random() < self.model.loss_rate:
            self.packets_lost += 1
            return False
        arrival = start + ser + self.clock.cycles(self.model.latency_ns)
        self.clock.schedule_at(math.ceil(arrival - 1e-9), handler, *args)
        return True

    def headroom_gbps(self, window_cycles: float) -> float:
        """Unused bandwidth estimate over the next window."""
        backlog = max(0.0, self.busy_until - self.clock.now)
        if window_cycles <= 0:
            return self.model.bandwidth_gbps
        return self.model.bandwidth_gbps * max(0.0, 1.0 - backlog / window_cycles)
