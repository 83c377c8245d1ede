"""
Paged on-board virtual memory for NT state.

Every NT instance gets its own flat, single-level page table over a 1 GB virtual
space of 2 MB huge pages. Physical frames are handed out on first write from an
ascending free list; reads of never-written pages fault. Optionally the coldest
page can be swapped to a peer sNIC's memory.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Hashable, List, Optional, Tuple

from engine import LinkModel
from errors import NoPeerMemory, OutOfMemory, OutOfRange, ProtectionFault, QuotaExceeded, ReadOfUnmapped

logger = logging.getLogger(__name__)

# Configuration
PAGE_SIZE = 2 * 1024 * 1024
VA_SIZE = 1024 * 1024 * 1024
PTE_BYTES = 8
BOARD_MEMORY = 10 * 1024 ** 3


class Access(Enum):
    READ = "read"
    WRITE = "write"


READ_WRITE = frozenset({Access.READ, Access.WRITE})


@dataclass
class PageTableEntry:
    present: bool = False
    frame: Optional[int] = None
    perms: FrozenSet[Access] = READ_WRITE
    remote_peer: Optional[Hashable] = None
    last_touch: int = 0


class AddressSpace:
    """Flat page table of one NT instance."""

    def __init__(self, owner: Hashable, user: str, va_size: int = VA_SIZE, page_size: int = PAGE_SIZE):
        self.owner = owner
        self.user = user
        self.va_size = va_size
        self.page_size = page_size
        self.table = [PageTableEntry() for _ in range(va_size // page_size)]

    @property
    def entries(self) -> int:
        return len(self.table)

    @property
    def table_bytes(self) -> int:
        return self.entries * PTE_BYTES

    def resident_frames(self) -> List[int]:
        return [e.frame for e in self.table if e.present and e.frame is not None]

    def resident_bytes(self) -> int:
        return len(self.resident_frames()) * self.page_size

    def protect(self, page: int, perms: FrozenSet[Access]) -> None:
        self.table[page].perms = frozenset(perms)


class PhysicalMemory:
    """Board DRAM split into frames, with per-user accounting and quotas."""

    def __init__(self, total_bytes: int = BOARD_MEMORY, page_size: int = PAGE_SIZE):
        self.total_bytes = total_bytes
        self.page_size = page_size
        self.total_frames = total_bytes // page_size
        self.free = deque(range(self.total_frames))
        self.usage: Dict[str, int] = {}
        self.quotas: Dict[str, int] = {}

    @property
    def allocated_frames(self) -> int:
        return self.total_frames - len(self.free)

    @property
    def free_bytes(self) -> int:
        return len(self.free) * self.page_size

    def set_quota(self, user: str, quota_bytes: Optional[int]) -> None:
        if quota_bytes is None:
            self.quotas.pop(user, None)
        else:
            self.quotas[user] = int(quota_bytes)

    def check_quota(self, user: str, extra: int) -> None:
        quota = self.quotas.get(user)
        if quota is not None and self.usage.get(user, 0) + extra > quota:
            raise QuotaExceeded(
                f"user {user}: {self.usage.get(user, 0) + extra} bytes exceeds allocation {quota}"
            )

    def take(self, user: str) -> int:
        self.check_quota(user, self.page_size)
        if not self.free:
            raise OutOfMemory("no free frame")
        frame = self.free.popleft()
        self.usage[user] = self.usage.get(user, 0) + self.page_size
        return frame

    def give_back(self, user: str, frame: int) -> None:
        self.free.append(frame)
        self.free = deque(sorted(self.free))
        self.usage[user] = self.usage.get(user, 0) - self.page_size


class RemoteMemoryPool:
    """Free frames other sNICs have advertised for swap (peer id -> frame count)."""

    def __init__(self, free_frames: Optional[Dict[Hashable, int]] = None):
        self.free_frames: Dict[Hashable, int] = dict(free_frames or {})

    def pick(self) -> Hashable:
        for peer in sorted(self.free_frames, key=str):
            if self.free_frames[peer] > 0:
                return peer
        raise NoPeerMemory("no peer sNIC has free memory")

    def take(self, peer: Hashable) -> None:
        self.free_frames[peer] -= 1

    def give_back(self, peer: Hashable) -> None:
        self.free_frames[peer] = self.free_frames.get(peer, 0) + 1


@dataclass
class SwapEvent:
    space_owner: Hashable
    page: int
    peer: Hashable
    cost_ns: float


class VirtualMemory:
    """
    Translation, on-demand allocation and optional remote swap for all NT
    address spaces on one sNIC.
    """

    def __init__(self, memory: Optional[PhysicalMemory] = None, swap_enabled: bool = False,
                 peers: Optional[RemoteMemoryPool] = None, swap_link: Optional[LinkModel] = None,
                 va_size: int = VA_SIZE):
        self.memory = memory or PhysicalMemory()
        self.swap_enabled = swap_enabled
        self.peers = peers or RemoteMemoryPool()
        self.swap_link = swap_link or LinkModel()
        self.va_size = va_size
        self.spaces: Dict[Hashable, AddressSpace] = {}
        self._touch = 0
        self.last_stall_ns = 0.0
        self.swap_stall_ns = 0.0
        self.page_faults = 0
        self.swaps_out = 0
        self.swaps_in = 0
        self.swap_events: List[SwapEvent] = []

    def allocate_space(self, owner: Hashable, user: str) -> AddressSpace:
        """
        Create an empty address space for an NT instance.

        Raises:
            QuotaExceeded: if the user's memory allocation is already used up
        """
        quota = self.memory.quotas.get(user)
        if quota is not None and self.memory.usage.get(user, 0) >= quota:
            raise QuotaExceeded(f"user {user} has no memory allocation left")
        space = AddressSpace(owner, user, self.va_size, self.memory.page_size)
        self.spaces[owner] = space
        return space

    def free_space(self, owner: Hashable) -> None:
        space = self.spaces.pop(owner, None)
        if space is None:
            return
        for entry in space.table:
            if entry.present:
                self.memory.give_back(space.user, entry.frame)
            elif entry.remote_peer is not None:
                self.peers.give_back(entry.remote_peer)

    def translate(self, space: AddressSpace, va: int, access: Access = Access.READ) -> int:
        """
        Translate a virtual address, allocating a frame on the first write.

        Returns:
            Physical address; self.last_stall_ns holds any remote-fetch stall
        """
        self.last_stall_ns = 0.0
        if va < 0 or va >= space.va_size:
            raise OutOfRange(f"va {va:#x} outside {space.va_size:#x}-byte space")
        page, offset = divmod(va, space.page_size)
        entry = space.table[page]

        if entry.present and access not in entry.perms:
            raise ProtectionFault(f"{access.value} of page {page} not permitted")

        if not entry.present:
            if entry.remote_peer is not None:
                self._swap_in(space, page)
            elif access is Access.WRITE:
                self.page_faults += 1
                entry.frame = self._obtain_frame(space.user)
                entry.present = True
            else:
                raise ReadOfUnmapped(f"read of unmapped page {page} in space {space.owner}")

        self._touch += 1
        entry.last_touch = self._touch
        return entry.frame * space.page_size + offset

    def _obtain_frame(self, user: str) -> int:
        self.memory.check_quota(user, self.memory.page_size)
        if not self.memory.free:
            if not self.swap_enabled:
                raise OutOfMemory("board memory exhausted and remote swap disabled")
            self._evict_coldest()
        return self.memory.take(user)

    def _coldest(self) -> Tuple[AddressSpace, int]:
        best = None
        for space in self.spaces.values():
            for page, entry in enumerate(space.table):
                if entry.present and (best is None or entry.last_touch < best[2]):
                    best = (space, page, entry.last_touch)
        if best is None:
            raise OutOfMemory("nothing resident to swap out")
        return best[0], best[1]

    def _evict_coldest(self) -> SwapEvent:
        space, page = self._coldest()
        return self.swap_remote(space, page, self.peers.pick())

    def swap_remote(self, space: AddressSpace, page: int, peer: Hashable) -> SwapEvent:
        """Move one resident page to a peer's memory."""
        entry = space.table[page]
        self.peers.take(peer)
        self.memory.give_back(space.user, entry.frame)
        entry.present = False
        entry.frame = None
        entry.remote_peer = peer
        self.swaps_out += 1
        event = SwapEvent(space.owner, page, peer, self.swap_link.transfer_ns(space.page_size))
        self.swap_events.append(event)
        logger.debug("swapped page %d of %s to %s", page, space.owner, peer)
        return event

    def _swap_in(self, space: AddressSpace, page: int) -> None:
        entry = space.table[page]
        # the page stays on the peer until a local frame is secured
        frame = self._obtain_frame(space.user)
        self.peers.give_back(entry.remote_peer)
        entry.remote_peer = None
        entry.frame = frame
        entry.present = True
        self.swaps_in += 1
        # request + page transfer back
        self.last_stall_ns = self.swap_link.latency_ns + self.swap_link.transfer_ns(space.page_size)
        self.swap_stall_ns += self.last_stall_ns

    def check_isolation(self) -> bool:
        seen = set()
        for space in self.spaces.values():
            for frame in space.resident_frames():
                if frame in seen:
                    return False
                seen.add(frame)
        return True

    def resident_by_user(self) -> Dict[str, int]:
        totals: Dict[str, int] = {}
        for space in self.spaces.values():
            totals[space.user] = totals.get(space.user, 0) + space.resident_bytes()
        return totals

    def counters(self) -> Dict[str, float]:
        return {"page_faults": self.page_faults, "swaps_out": self.swaps_out, "swaps_in": self.swaps_in,
                "swap_stall_ns": self.swap_stall_ns, "spaces": len(self.spaces),
                "allocated_frames": self.memory.allocated_frames}

    def persist_state(self, owner: Hashable, user: str, state_bytes: int) -> AddressSpace:
        """Write state_bytes of NT state into the owner's space (live NT state or a context-switch spill)."""
        space = self.spaces.get(owner) or self.allocate_space(owner, user)
        pages = -(-state_bytes // space.page_size)
        for page in range(pages):
            self.translate(space, page * space.page_size, Access.WRITE)
        return space


if __name__ == "__main__":
    vm = VirtualMemory(PhysicalMemory(8 * PAGE_SIZE))
    sp = vm.allocate_space("fw#0", "u1")
    for i in range(5):
        vm.translate(sp, i * PAGE_SIZE, Access.WRITE)
    print(f"table entries={sp.entries} ({sp.table_bytes} B), resident={sp.resident_bytes() >> 20} MB")
