# allocator.py - Hierarchical page-token allocator for confidential memory
"""
Every byte of confidential memory is owned either by the allocator (free
tokens, one sorted list per page size) or by exactly one live PageToken.

Allocation splits the lowest-addressed larger free token; deallocation
zeroizes, then merges 512 aligned free siblings upward as far as possible.
The overhead report models the footprint of the tree with fixed constants
(9 bytes per token, 32 bytes per non-empty node) rather than measuring the
Python objects.
"""
import bisect
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Dict, List, Optional, Tuple

from errors import ForeignToken, InvalidParam, OutOfMemory
from machine import ConfidentialAddress, Machine, PageSize, validate_confidential

logger = logging.getLogger(__name__)

TOKEN_BYTES = 9
NODE_BYTES = 32
FANOUT = 512

DEFAULT_SIZES = (PageSize.SIZE_4K, PageSize.SIZE_2M, PageSize.SIZE_1G)


class TokenState(Enum):
    ZEROED = "Zeroed"
    CARRYING = "Carrying"


@dataclass(eq=False)
class PageToken:
    """Exclusive ownership of [address, address+size). Only the allocator mints these."""

    address: ConfidentialAddress
    size: PageSize
    state: TokenState
    token_id: int
    _allocator: "PageAllocator" = field(repr=False, default=None)

    @property
    def base(self) -> int:
        return self.address.value

    @property
    def end(self) -> int:
        return self.address.value + int(self.size)

    def _bounds(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > int(self.size):
            raise InvalidParam("access outside token", offset=offset, length=length)

    def read(self, offset: int = 0, length: Optional[int] = None) -> bytes:
        if length is None:
            length = int(self.size) - offset
        self._bounds(offset, length)
        return self._allocator.machine.read(self.base + offset, length)

    def write(self, offset: int, data: bytes) -> None:
        self._bounds(offset, len(data))
        self._allocator.machine.write(self.base + offset, data)
        if any(data):
            self.state = TokenState.CARRYING

    def is_zero(self) -> bool:
        return self._allocator.machine.memory.is_zero(self.base, int(self.size))


@dataclass
class OpStats:
    """Work done by the last allocate/deallocate: levels touched and entries moved per level."""

    levels_touched: int = 0
    max_entries_per_level: int = 0

    def touch(self, entries: int) -> None:
        self.levels_touched += 1
        self.max_entries_per_level = max(self.max_entries_per_level, entries)


@dataclass(frozen=True)
class OverheadReport:
    free_tokens: int
    allocated_tokens: int
    nonempty_nodes: int
    free_bytes: int

    @property
    def token_bytes(self) -> int:
        return TOKEN_BYTES * (self.free_tokens + self.allocated_tokens)

    @property
    def allocated_token_bytes(self) -> int:
        return TOKEN_BYTES * self.allocated_tokens

    @property
    def node_bytes(self) -> int:
        return NODE_BYTES * self.nonempty_nodes

    @property
    def modeled_bytes(self) -> int:
        return self.token_bytes + self.node_bytes

    def as_dict(self) -> dict:
        return {
            "free_tokens": self.free_tokens,
            "allocated_tokens": self.allocated_tokens,
            "nonempty_nodes": self.nonempty_nodes,
            "token_bytes": self.token_bytes,
            "allocated_token_bytes": self.allocated_token_bytes,
            "node_bytes": self.node_bytes,
            "modeled_bytes": self.modeled_bytes,
            "free_bytes": self.free_bytes,
        }


class PageAllocator:
    """Thread-safe; one lock around the whole tree."""

    def __init__(self, machine: Machine, sizes: Tuple[PageSize, ...] = DEFAULT_SIZES, check_double_free: bool = True):
        self.machine = machine
        self.layout = machine.layout
        self.sizes = tuple(sorted(sizes))
        if not self.sizes or self.sizes[0] != PageSize.SIZE_4K:
            raise InvalidParam("allocator levels must start at 4 KiB")
        if any(b != a.larger for a, b in zip(self.sizes, self.sizes[1:])):
            raise InvalidParam("allocator levels must be consecutive page sizes")
        self.check_double_free = check_double_free
        self._lock = threading.Lock()
        self._free: Dict[PageSize, List[int]] = {s: [] for s in self.sizes}
        self._live: Dict[int, Tuple[PageSize, int]] = {}
        self._nodes: Counter = Counter()
        self._ids = count(1)
        self.last_op = OpStats()
        conf = self.layout.confidential
        if conf.start % PageSize.SIZE_4K or conf.end % PageSize.SIZE_4K:
            raise InvalidParam("confidential interval not 4 KiB aligned")
        self._cover(conf.start, conf.end)
        logger.debug("allocator initialised with %d free token(s)", self.free_token_count())

    # --- tree bookkeeping ---

    def _larger(self, size: PageSize) -> Optional[PageSize]:
        i = self.sizes.index(size)
        return self.sizes[i + 1] if i + 1 < len(self.sizes) else None

    def _smaller(self, size: PageSize) -> Optional[PageSize]:
        i = self.sizes.index(size)
        return self.sizes[i - 1] if i > 0 else None

    @staticmethod
    def _node(size: PageSize, base: int) -> Tuple[int, int]:
        return int(size), base // (int(size) * FANOUT)

    def _insert(self, size: PageSize, base: int) -> None:
        bisect.insort(self._free[size], base)
        self._nodes[self._node(size, base)] += 1

    def _insert_run(self, size: PageSize, first: int, n: int) -> None:
        """Insert n contiguous free tokens starting at `first` (all in one node)."""
        lst = self._free[size]
        i = bisect.bisect_left(lst, first)
        lst[i:i] = range(first, first + n * int(size), int(size))
        self._nodes[self._node(size, first)] += n

    def _remove_at(self, size: PageSize, index: int) -> int:
        base = self._free[size].pop(index)
        key = self._node(size, base)
        self._nodes[key] -= 1
        if not self._nodes[key]:
            del self._nodes[key]
        return base

    def _cover(self, start: int, end: int) -> None:
        cur = start
        while cur < end:
            for size in reversed(self.sizes):
                if cur % size == 0 and cur + size <= end:
                    self._insert(size, cur)
                    cur += size
                    break

    def _mint(self, base: int, size: PageSize) -> PageToken:
        token_id = next(self._ids)
        self._live[base] = (size, token_id)
        addr = validate_confidential(self.layout, base, int(size))
        return PageToken(addr, size, TokenState.ZEROED, token_id, self)

    # --- operations ---

    def allocate(self, size: PageSize) -> PageToken:
        if size not in self.sizes:
            raise InvalidParam(f"page size {PageSize(size).label} not enabled")
        with self._lock:
            stats = OpStats()
            source = next((s for s in self.sizes if s >= size and self._free[s]), None)
            if source is None:
                raise OutOfMemory(f"no free token at or above {size.label}")
            base = self._remove_at(source, 0)
            stats.touch(1)
            level = source
            while level != size:
                child = self._smaller(level)
                # keep the lowest child, hand the other 511 back to the tree
                self._insert_run(child, base + int(child), FANOUT - 1)
                stats.touch(FANOUT - 1)
                level = child
            self.last_op = stats
            token = self._mint(base, size)
        logger.debug("allocate %s -> %#x (token %d)", size.label, base, token.token_id)
        return token

    def deallocate(self, token: PageToken) -> None:
        with self._lock:
            entry = self._live.get(token.base)
            if self.check_double_free:
                if entry is None or entry != (token.size, token.token_id):
                    raise ForeignToken("token not live in this allocator", addr=hex(token.base), id=token.token_id)
            self._live.pop(token.base, None)
            self.machine.memory.zero(token.base, int(token.size))
            token.state = TokenState.ZEROED
            stats = OpStats()
            self._insert(token.size, token.base)
            stats.touch(1)
            size, base = token.size, token.base
            parent = self._larger(size)
            while parent is not None:
                pbase = base - base % int(parent)
                lst = self._free[size]
                lo = bisect.bisect_left(lst, pbase)
                hi = bisect.bisect_left(lst, pbase + int(parent))
                if hi - lo != FANOUT:
                    break
                del lst[lo:hi]
                key = self._node(size, pbase)
                self._nodes[key] -= FANOUT
                if self._nodes[key] <= 0:
                    del self._nodes[key]
                self._insert(parent, pbase)
                stats.touch(FANOUT)
                size, base = parent, pbase
                parent = self._larger(size)
            self.last_op = stats
        logger.debug("deallocate %s at %#x (token %d)", token.size.label, token.base, token.token_id)

    # --- introspection ---

    def free_token_count(self) -> int:
        return sum(len(v) for v in self._free.values())

    def free_bytes(self) -> int:
        with self._lock:
            return sum(len(v) * int(s) for s, v in self._free.items())

    def free_intervals(self) -> List[Tuple[int, int]]:
        with self._lock:
            return sorted((b, b + int(s)) for s, v in self._free.items() for b in v)

    def live_intervals(self) -> List[Tuple[int, int]]:
        with self._lock:
            return sorted((b, b + int(s)) for b, (s, _) in self._live.items())

    def free_by_size(self) -> Dict[str, int]:
        with self._lock:
            return {s.label: len(v) for s, v in self._free.items()}

    def is_live(self, base: int) -> bool:
        return base in self._live

    def recount_nodes(self) -> int:
        """Node count recomputed from scratch; must equal the maintained counter."""
        with self._lock:
            return len({self._node(s, b) for s, v in self._free.items() for b in v})

    def overhead_report(self) -> OverheadReport:
        with self._lock:
            return OverheadReport(
                free_tokens=self.free_token_count(),
                allocated_tokens=len(self._live),
                nonempty_nodes=len(self._nodes),
                free_bytes=sum(len(v) * int(s) for s, v in self._free.items()),
            )


def allocator_init(machine: Machine, sizes: Tuple[PageSize, ...] = DEFAULT_SIZES,
                   check_double_free: bool = True) -> PageAllocator:
    return PageAllocator(machine, sizes, check_double_free)


class TokenRegistry:
    """Tokens held by one owner (a TVM, a page-table set). Answers ownership queries."""

    def __init__(self):
        self._bases: List[int] = []
        self._tokens: Dict[int, PageToken] = {}
        self._lock = threading.Lock()

    def add(self, token: PageToken) -> PageToken:
        with self._lock:
            bisect.insort(self._bases, token.base)
            self._tokens[token.base] = token
        return token

    def discard(self, token: PageToken) -> None:
        with self._lock:
            if self._tokens.pop(token.base, None) is not None:
                self._bases.remove(token.base)

    def owns(self, addr: int, length: int = 1) -> bool:
        """True if [addr, addr+length) lies inside a single registered token."""
        with self._lock:
            i = bisect.bisect_right(self._bases, addr) - 1
            if i < 0:
                return False
            token = self._tokens[self._bases[i]]
            return addr + length <= token.end

    def __iter__(self):
        with self._lock:
            return iter([self._tokens[b] for b in self._bases])

    def __len__(self) -> int:
        return len(self._tokens)

    def total_bytes(self) -> int:
        with self._lock:
            return sum(int(t.size) for t in self._tokens.values())

    def release_all(self, allocator: PageAllocator) -> int:
        """Zeroize and return every token. Returns the number released."""
        with self._lock:
            tokens = [self._tokens[b] for b in self._bases]
            self._bases.clear()
            self._tokens.clear()
        for token in tokens:
            allocator.deallocate(token)
        return len(tokens)
