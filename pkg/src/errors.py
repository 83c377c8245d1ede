"""
Exception hierarchy for the SuperNIC simulator.

Every error the simulator raises derives from SnicError so callers (the CLI in
particular) can separate configuration problems from runtime failures.
"""

from typing import Optional


class SnicError(Exception):
    """Base class for all simulator errors."""


# ---------- Configuration ----------
class ConfigError(SnicError):
    """Invalid scenario configuration, with field and line diagnostics."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


# ---------- Core model ----------
class InvalidNetworkTask(SnicError):
    """NT catalog entry violates its invariants."""


class CyclicDag(SnicError):
    """The NT DAG contains a cycle (self-loops included)."""


class UnknownNt(SnicError):
    """A DAG references an NT id missing from the catalog."""


class NonPositiveBandwidth(SnicError):
    """A DAG requests zero or negative ingress bandwidth."""


class NtTooLarge(SnicError):
    """A single NT does not fit into one region."""


class BitstreamTooLarge(SnicError):
    """A chain's bitstream exceeds the partial-reconfiguration size limit."""


# ---------- Planner ----------
class InsufficientShare(SnicError):
    """Even the minimal serialized plan exceeds the user's fair share."""


# ---------- Scheduler ----------
class BufferOverflow(SnicError):
    """Scheduler buffer is full."""


class UnknownDagUid(SnicError):
    """Packet carries a DAG UID with no MAT entry."""


# ---------- Region manager ----------
class StateSpillFailure(SnicError):
    """On-board memory cannot hold the state saved during a context switch."""


# ---------- Fairness ----------
class InfeasibleDemand(SnicError):
    """One user's unit demand alone exceeds a resource capacity."""


# ---------- Virtual memory ----------
class VmemFault(SnicError):
    """Base class for translation faults."""


class OutOfRange(VmemFault):
    """Virtual address beyond the address space."""


class ProtectionFault(VmemFault):
    """Access kind not permitted by the page permissions."""


class ReadOfUnmapped(VmemFault):
    """Read of a page that was never written."""


class OutOfMemory(VmemFault):
    """No free frame and no swap target."""


class NoPeerMemory(OutOfMemory):
    """Remote swap requested but no peer has free memory."""


class QuotaExceeded(VmemFault):
    """User's DRF memory allocation would be exceeded."""


# ---------- Rack ----------
class DstRevoked(SnicError):
    """Migration target lost its free region before the launch request arrived."""


# ---------- Engine / workload ----------
class EventOverflow(SnicError):
    """Event count exceeded the runaway-detection cap."""


class BadTrace(SnicError):
    """Malformed workload trace file."""
