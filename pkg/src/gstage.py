# gstage.py - Guest (G-stage) page tables: untrusted walk at promotion, TVM-side translation
"""
Sv48x4-style format: four levels, a 16 KiB root of 2048 entries, 4 KiB
tables of 512 entries below it, 8-byte little-endian entries.

Entry bits: V(0) R(1) W(2) X(3), PPN in bits 10..53. Every other bit of a
valid entry must be zero. A valid entry with none of R/W/X points to the
next table; otherwise it is a leaf (1 GiB at level 2, 2 MiB at level 1,
4 KiB at level 0). Invalid entries are skipped without further checks.
"""
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

from allocator import PageAllocator, PageToken, TokenRegistry
from errors import AceError, GuestFault, InvalidAddress, MalformedTable
from machine import (
    PAGE,
    ConfidentialAddress,
    Machine,
    NonConfidentialAddress,
    PageSize,
    validate_confidential,
    validate_non_confidential,
)

logger = logging.getLogger(__name__)

PTE_V = 1 << 0
PTE_R = 1 << 1
PTE_W = 1 << 2
PTE_X = 1 << 3
PTE_PERMS = PTE_R | PTE_W | PTE_X
PPN_SHIFT = 10
PPN_MASK = ((1 << 44) - 1) << PPN_SHIFT
PTE_RESERVED = ~(PTE_V | PTE_PERMS | PPN_MASK) & 0xFFFF_FFFF_FFFF_FFFF

ROOT_LEVEL = 3
ROOT_ENTRIES = 2048
TABLE_ENTRIES = 512
ENTRY_SIZE = 8
ROOT_BYTES = ROOT_ENTRIES * ENTRY_SIZE
GPA_BITS = 50

LEVEL_SHIFT = {3: 39, 2: 30, 1: 21, 0: 12}
LEAF_SIZE = {2: PageSize.SIZE_1G, 1: PageSize.SIZE_2M, 0: PageSize.SIZE_4K}


def make_pte(pa: int, perms: int = 0, valid: bool = True) -> int:
    """Encode an entry. perms=0 makes a pointer to the next table."""
    return ((pa >> 12) << PPN_SHIFT) | perms | (PTE_V if valid else 0)


def pte_target(pte: int) -> int:
    return ((pte & PPN_MASK) >> PPN_SHIFT) << 12


def gpa_index(gpa: int, level: int) -> int:
    bits = 11 if level == ROOT_LEVEL else 9
    return (gpa >> LEVEL_SHIFT[level]) & ((1 << bits) - 1)


# ── Translation results ───────────────────────────────────────────────

class LazyZero:
    """Marker for a guest page that reads as zero until first touched."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "LazyZero"


LAZY_ZERO = LazyZero()


@dataclass
class Mapping:
    kind: str  # "mapped" | "lazy_zero" | "shared"
    size: PageSize
    target: Optional[int] = None
    perms: int = PTE_R | PTE_W | PTE_X
    token: Optional[PageToken] = None


Translation = Union[ConfidentialAddress, LazyZero, NonConfidentialAddress]


class TvmPageTables:
    """A TVM's confidential copy of its guest tables.

    `leaf_map` holds one dict per page size keyed by guest base address; a
    more specific size shadows a larger one (materialized zero pages inside a
    lazy huge mapping). The same mappings are mirrored as real entries in
    confidential table tokens.
    """

    def __init__(self, machine: Machine, allocator: PageAllocator):
        self.machine = machine
        self.layout = machine.layout
        self.allocator = allocator
        self.leaf_map: Dict[PageSize, Dict[int, Mapping]] = {s: {} for s in LEAF_SIZE.values()}
        self.tokens = TokenRegistry()
        # data pages only; the guest never owns its own tables
        self.data = TokenRegistry()
        self.root: List[PageToken] = []
        self.intermediate: List[PageToken] = []
        # table address -> token, for the confidential mirror
        self._tables: Dict[int, PageToken] = {}
        self._lock = threading.RLock()

    # --- confidential mirror ---

    def _alloc_table(self) -> PageToken:
        token = self.tokens.add(self.allocator.allocate(PageSize.SIZE_4K))
        self._tables[token.base] = token
        return token

    def build_root(self) -> None:
        self.root = [self._alloc_table() for _ in range(ROOT_BYTES // PAGE)]

    def _slot(self, level: int, table: Optional[PageToken], gpa: int) -> Tuple[PageToken, int]:
        index = gpa_index(gpa, level)
        if level == ROOT_LEVEL:
            return self.root[index // TABLE_ENTRIES], (index % TABLE_ENTRIES) * ENTRY_SIZE
        return table, index * ENTRY_SIZE

    def _install(self, gpa: int, size: PageSize, pte: int) -> None:
        level, table = ROOT_LEVEL, None
        leaf_level = {v: k for k, v in LEAF_SIZE.items()}[size]
        while level > leaf_level:
            token, off = self._slot(level, table, gpa)
            entry = struct.unpack("<Q", token.read(off, ENTRY_SIZE))[0]
            if entry & PTE_V:
                table = self._tables[pte_target(entry)]
            else:
                table = self._alloc_table()
                self.intermediate.append(table)
                token.write(off, struct.pack("<Q", make_pte(table.base)))
            level -= 1
        token, off = self._slot(level, table, gpa)
        token.write(off, struct.pack("<Q", pte))

    def hardware_translate(self, gpa: int) -> Optional[int]:
        """Walk the confidential tables like the MMU would. None when no valid leaf."""
        level, table = ROOT_LEVEL, None
        while level >= 0:
            token, off = self._slot(level, table, gpa)
            entry = struct.unpack("<Q", token.read(off, ENTRY_SIZE))[0]
            if not entry & PTE_V:
                return None
            if entry & PTE_PERMS:
                size = int(LEAF_SIZE[level])
                return pte_target(entry) + (gpa & (size - 1))
            table = self._tables.get(pte_target(entry))
            if table is None:
                return None
            level -= 1
        return None

    # --- leaf map ---

    def add(self, gpa: int, mapping: Mapping) -> None:
        with self._lock:
            self.leaf_map[mapping.size][gpa] = mapping
            if mapping.token is not None:
                self.tokens.add(mapping.token)
                self.data.add(mapping.token)
            if mapping.kind == "lazy_zero":
                self._install(gpa, mapping.size, 0)
            else:
                self._install(gpa, mapping.size, make_pte(mapping.target, mapping.perms))

    def lookup(self, gpa: int) -> Optional[Tuple[int, Mapping]]:
        with self._lock:
            for size in (PageSize.SIZE_4K, PageSize.SIZE_2M, PageSize.SIZE_1G):
                base = gpa - gpa % int(size)
                mapping = self.leaf_map[size].get(base)
                if mapping is not None:
                    return base, mapping
        return None

    def entries(self) -> List[Tuple[int, Mapping]]:
        with self._lock:
            return sorted((gpa, m) for s in self.leaf_map.values() for gpa, m in s.items())

    def owns(self, addr: int, length: int) -> bool:
        return self.data.owns(addr, length)


# ── Walk ──────────────────────────────────────────────────────────────

@dataclass
class WalkResult:
    tables: TvmPageTables
    # ascending (guest page number, page bytes) of every nonzero 4 KiB guest page
    pages: List[Tuple[int, bytes]] = field(default_factory=list)


class _Walker:
    def __init__(self, machine, allocator, read_observer):
        self.machine = machine
        self.layout = machine.layout
        self.allocator = allocator
        self.read_observer = read_observer
        self.visited: set = set()
        self.leaves: List[Tuple[int, int, PageSize, int]] = []  # (gpa, source, size, perms)

    def _read(self, addr: int, length: int) -> bytes:
        if self.read_observer is not None:
            self.read_observer(addr, length)
        return self.machine.read(addr, length)

    def _visit(self, table_addr: int, nbytes: int) -> None:
        for page in range(table_addr, table_addr + nbytes, PAGE):
            if page in self.visited:
                raise MalformedTable("table visited twice (loop)", table=hex(table_addr))
            self.visited.add(page)

    def walk(self, table_addr: int, level: int, gpa_prefix: int) -> None:
        n = ROOT_ENTRIES if level == ROOT_LEVEL else TABLE_ENTRIES
        raw = self._read(table_addr, n * ENTRY_SIZE)
        for index, pte in enumerate(struct.unpack(f"<{n}Q", raw)):
            if not pte & PTE_V:
                continue
            gpa = gpa_prefix | (index << LEVEL_SHIFT[level])
            if pte & PTE_RESERVED:
                raise MalformedTable("reserved bits set", gpa=hex(gpa), pte=hex(pte))
            perms = pte & PTE_PERMS
            target = pte_target(pte)
            if perms:
                self._leaf(gpa, level, target, perms, pte)
                continue
            if level == 0:
                raise MalformedTable("pointer entry at the last level", gpa=hex(gpa))
            validate_non_confidential(self.layout, target, PAGE)
            self._visit(target, PAGE)
            self.walk(target, level - 1, gpa)

    def _leaf(self, gpa: int, level: int, target: int, perms: int, pte: int) -> None:
        if perms & PTE_W and not perms & PTE_R:
            raise MalformedTable("write without read", gpa=hex(gpa))
        if level not in LEAF_SIZE:
            raise MalformedTable("leaf at root level", gpa=hex(gpa))
        size = LEAF_SIZE[level]
        if target % int(size):
            raise MalformedTable("misaligned superpage", gpa=hex(gpa), pte=hex(pte))
        validate_non_confidential(self.layout, target, int(size))
        self.leaves.append((gpa, target, size, perms))


def walk_and_copy(
    machine: Machine,
    allocator: PageAllocator,
    root: NonConfidentialAddress,
    read_observer: Optional[Callable[[int, int], None]] = None,
) -> WalkResult:
    """Validate the hypervisor's guest tables and copy the guest into confidential memory.

    All-or-nothing: on any error every token acquired here is released.
    """
    if root.value % ROOT_BYTES:
        raise MalformedTable("root table not 16 KiB aligned", root=hex(root.value))
    root = validate_non_confidential(machine.layout, root.value, ROOT_BYTES)
    walker = _Walker(machine, allocator, read_observer)
    walker._visit(root.value, ROOT_BYTES)
    walker.walk(root.value, ROOT_LEVEL, 0)

    tables = TvmPageTables(machine, allocator)
    result = WalkResult(tables)
    try:
        tables.build_root()
        for gpa, source, size, perms in sorted(walker.leaves):
            nonzero = machine.memory.nonzero_pages(source, int(size))
            for page in nonzero:
                if walker.read_observer is not None:
                    walker.read_observer(page, PAGE)
            if not nonzero:
                tables.add(gpa, Mapping("lazy_zero", size, perms=perms))
                continue
            token = allocator.allocate(size)
            machine.memory.copy(source, token.base, int(size))
            tables.add(gpa, Mapping("mapped", size, token.base, perms, token))
            for page in nonzero:
                result.pages.append(((gpa + page - source) >> 12, machine.memory.read(page, PAGE)))
    except AceError:
        released = tables.tokens.release_all(allocator)
        logger.debug("walk aborted, released %d token(s)", released)
        raise
    result.pages.sort(key=lambda p: p[0])
    logger.debug("walk copied %d page(s), %d leaf mapping(s)", len(result.pages), len(walker.leaves))
    return result


def translate(tables: TvmPageTables, gpa: int) -> Translation:
    """Pure lookup of a guest-physical address."""
    hit = tables.lookup(gpa)
    if hit is None:
        raise GuestFault("guest address unmapped", gpa=hex(gpa))
    base, mapping = hit
    offset = gpa - base
    if mapping.kind == "lazy_zero":
        return LAZY_ZERO
    if mapping.kind == "shared":
        return validate_non_confidential(tables.layout, mapping.target + offset, 1)
    return validate_confidential(tables.layout, mapping.target + offset, 1)


def materialize_zero_page(tables: TvmPageTables, allocator: PageAllocator, gpa: int) -> ConfidentialAddress:
    """Back the 4 KiB guest page containing gpa with a fresh zeroed token. Idempotent."""
    with tables._lock:
        hit = tables.lookup(gpa)
        if hit is None:
            raise GuestFault("guest address unmapped", gpa=hex(gpa))
        base, mapping = hit
        if mapping.kind == "mapped":
            return validate_confidential(tables.layout, mapping.target + gpa - base, 1)
        if mapping.kind != "lazy_zero":
            raise GuestFault("not a lazily zeroed page", gpa=hex(gpa))
        page_gpa = gpa - gpa % PAGE
        token = allocator.allocate(PageSize.SIZE_4K)
        tables.add(page_gpa, Mapping("mapped", PageSize.SIZE_4K, token.base, mapping.perms, token))
    logger.debug("materialized zero page at gpa %#x -> %#x", page_gpa, token.base)
    return validate_confidential(tables.layout, token.base + gpa % PAGE, 1)


def add_shared(tables: TvmPageTables, gpa: int, npa: NonConfidentialAddress) -> None:
    tables.add(gpa, Mapping("shared", PageSize.SIZE_4K, npa.value, PTE_R | PTE_W))
