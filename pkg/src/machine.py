# machine.py - Simulated physical machine: memory, partition, PMP-style rules, hart state
"""
Flat 64-bit byte-addressable memory split into one contiguous confidential
interval and the non-confidential remainder. Every access is checked against
the region rules for the requesting security domain; the TSM domain is never
restricted.

Addresses crossing the ABI boundary are only usable after validation into
NonConfidentialAddress / ConfidentialAddress. Neither can be built directly.
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterator, List, NamedTuple, Optional, Tuple

from errors import AccessFault, ConfigError, InvalidAddress

logger = logging.getLogger(__name__)

WORD_MASK = 0xFFFF_FFFF_FFFF_FFFF
PAGE_SHIFT = 12
PAGE = 1 << PAGE_SHIFT


class PageSize(IntEnum):
    """Architectural page sizes; each is 512x the previous."""

    SIZE_4K = 1 << 12
    SIZE_2M = 1 << 21
    SIZE_1G = 1 << 30
    SIZE_512G = 1 << 39

    @property
    def label(self) -> str:
        return {4096: "4KiB", 1 << 21: "2MiB", 1 << 30: "1GiB", 1 << 39: "512GiB"}[int(self)]

    @property
    def larger(self) -> Optional["PageSize"]:
        order = list(PageSize)
        i = order.index(self)
        return order[i + 1] if i + 1 < len(order) else None

    @property
    def smaller(self) -> Optional["PageSize"]:
        order = list(PageSize)
        i = order.index(self)
        return order[i - 1] if i > 0 else None

    @classmethod
    def parse(cls, text: str) -> "PageSize":
        """Accepts 4K, 4KiB, 2M, 2MiB, 1G, 1GiB, 512G, 512GiB (case-insensitive)."""
        key = text.strip().upper().replace("IB", "").replace("B", "")
        table = {"4K": cls.SIZE_4K, "2M": cls.SIZE_2M, "1G": cls.SIZE_1G, "512G": cls.SIZE_512G}
        if key not in table:
            raise ValueError(f"unknown page size: {text}")
        return table[key]


# --- Configuration and layout ---

@dataclass(frozen=True)
class MachineConfig:
    memory_base: int
    memory_size: int
    confidential_base: int
    confidential_size: int
    hart_count: int = 1
    alignment: PageSize = PageSize.SIZE_1G

    def validate(self) -> None:
        if self.memory_size <= 0:
            raise ConfigError("memory_size must be positive")
        if self.memory_base < 0 or self.memory_base + self.memory_size > WORD_MASK + 1:
            raise ConfigError("memory does not fit a 64-bit address space")
        if self.hart_count < 1:
            raise ConfigError("hart_count must be at least 1")
        if self.confidential_size <= 0:
            raise ConfigError("confidential_size must be positive")
        align = int(self.alignment)
        if self.confidential_base % align or self.confidential_size % align:
            raise ConfigError(
                f"confidential region not {self.alignment.label}-aligned",
                base=hex(self.confidential_base), size=hex(self.confidential_size),
            )
        mem_end = self.memory_base + self.memory_size
        if self.confidential_base < self.memory_base or self.confidential_base + self.confidential_size > mem_end:
            raise ConfigError("confidential region exceeds configured memory")


class Interval(NamedTuple):
    """Half-open [start, end)."""

    start: int
    end: int

    @property
    def size(self) -> int:
        return self.end - self.start

    def contains(self, addr: int, length: int = 1) -> bool:
        return length >= 1 and self.start <= addr and addr + length <= self.end

    def overlaps(self, addr: int, length: int) -> bool:
        return addr < self.end and addr + length > self.start

    def __repr__(self) -> str:
        return f"[{self.start:#x}, {self.end:#x})"


@dataclass(frozen=True)
class RegionRule:
    """One PMP-style entry: per domain kind, the allowed ops on `interval`.

    "owned" means a TVM may touch the bytes only if the ownership hook says
    they belong to it.
    """

    interval: Interval
    hypervisor: str
    tvm: str


@dataclass(frozen=True)
class MemoryLayout:
    memory: Interval
    confidential: Interval
    non_confidential: Tuple[Interval, ...]
    region_rules: Tuple[RegionRule, ...]

    def is_confidential(self, addr: int, length: int = 1) -> bool:
        return self.confidential.contains(addr, length)

    def is_non_confidential(self, addr: int, length: int = 1) -> bool:
        return any(iv.contains(addr, length) for iv in self.non_confidential)


def compute_layout(config: MachineConfig) -> MemoryLayout:
    mem = Interval(config.memory_base, config.memory_base + config.memory_size)
    conf = Interval(config.confidential_base, config.confidential_base + config.confidential_size)
    parts = []
    if mem.start < conf.start:
        parts.append(Interval(mem.start, conf.start))
    if conf.end < mem.end:
        parts.append(Interval(conf.end, mem.end))
    rules = [RegionRule(iv, hypervisor="rw", tvm="rw") for iv in parts]
    rules.append(RegionRule(conf, hypervisor="", tvm="owned"))
    rules.sort(key=lambda r: r.interval.start)
    return MemoryLayout(memory=mem, confidential=conf, non_confidential=tuple(parts), region_rules=tuple(rules))


# --- Typed addresses ---

_SEAL = object()


@dataclass(frozen=True)
class NonConfidentialAddress:
    value: int
    length: int = 1
    _seal: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._seal is not _SEAL:
            raise TypeError("NonConfidentialAddress is only produced by validate_non_confidential")

    def __int__(self):
        return self.value

    def __repr__(self) -> str:
        return f"NonConfidentialAddress({self.value:#x})"


@dataclass(frozen=True)
class ConfidentialAddress:
    value: int
    length: int = 1
    _seal: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._seal is not _SEAL:
            raise TypeError("ConfidentialAddress is only produced by validate_confidential")

    def __int__(self):
        return self.value

    def __repr__(self) -> str:
        return f"ConfidentialAddress({self.value:#x})"


def _check_raw(raw: int, length: int) -> None:
    if not isinstance(raw, int) or not isinstance(length, int):
        raise InvalidAddress("address and length must be integers")
    if raw < 0 or length < 1 or raw + length > WORD_MASK + 1:
        raise InvalidAddress("address range outside the 64-bit space", raw=hex(raw), length=length)


def validate_non_confidential(layout: MemoryLayout, raw: int, length: int) -> NonConfidentialAddress:
    """Type an untrusted hypervisor pointer. [raw, raw+length) must be wholly non-confidential."""
    _check_raw(raw, length)
    if not layout.is_non_confidential(raw, length):
        raise InvalidAddress("range is not owned by the hypervisor", raw=hex(raw), length=length)
    return NonConfidentialAddress(raw, length, _SEAL)


def validate_confidential(layout: MemoryLayout, raw: int, length: int) -> ConfidentialAddress:
    _check_raw(raw, length)
    if not layout.is_confidential(raw, length):
        raise InvalidAddress("range is not confidential", raw=hex(raw), length=length)
    return ConfidentialAddress(raw, length, _SEAL)


# --- Security domains and hart state ---

@dataclass(frozen=True)
class DomainTag:
    kind: str  # "hypervisor" | "tvm" | "tsm"
    tvm_id: Optional[int] = None
    vhart: Optional[int] = None

    @classmethod
    def tvm(cls, tvm_id: int, vhart: int) -> "DomainTag":
        return cls("tvm", tvm_id, vhart)

    @property
    def is_tvm(self) -> bool:
        return self.kind == "tvm"

    def __str__(self) -> str:
        if self.kind == "hypervisor":
            return "NC"
        if self.kind == "tsm":
            return "TSM"
        return f"C({self.tvm_id}.{self.vhart})"

    @classmethod
    def parse(cls, text: str) -> "DomainTag":
        if text == "NC":
            return HYPERVISOR
        if text == "TSM":
            return TSM
        if text.startswith("C(") and text.endswith(")"):
            tvm_id, vhart = text[2:-1].split(".")
            return cls.tvm(int(tvm_id), int(vhart))
        raise ValueError(f"bad domain: {text}")


HYPERVISOR = DomainTag("hypervisor")
TSM = DomainTag("tsm")

CSR_NAMES = ("sepc", "scause", "stval", "vstimecmp", "vsip", "vsie")
HART_STATE_BYTES = (32 + len(CSR_NAMES)) * 8

# RISC-V ABI register aliases
A0 = 10


@dataclass
class HartArchState:
    """GPRs x0..x31 plus a fixed CSR set. x0 reads zero whatever is written."""

    gprs: List[int] = field(default_factory=lambda: [0] * 32)
    csrs: dict = field(default_factory=lambda: {name: 0 for name in CSR_NAMES})
    domain_tag: DomainTag = HYPERVISOR

    def __post_init__(self):
        if len(self.gprs) != 32:
            raise ValueError("hart state needs exactly 32 GPRs")
        self.gprs[0] = 0
        for name in CSR_NAMES:
            self.csrs.setdefault(name, 0)

    def get(self, index: int) -> int:
        return 0 if index == 0 else self.gprs[index]

    def set(self, index: int, value: int) -> None:
        if index != 0:
            self.gprs[index] = value & WORD_MASK

    def a(self, n: int) -> int:
        return self.get(A0 + n)

    def set_a(self, n: int, value: int) -> None:
        self.set(A0 + n, value)

    def csr(self, name: str) -> int:
        return self.csrs[name]

    def set_csr(self, name: str, value: int) -> None:
        if name not in self.csrs:
            raise KeyError(name)
        self.csrs[name] = value & WORD_MASK

    def encode(self) -> bytes:
        """Canonical encoding: x0..x31 then CSR_NAMES, each 8-byte big-endian."""
        words = [self.get(i) for i in range(32)] + [self.csrs[n] for n in CSR_NAMES]
        return struct.pack(f">{len(words)}Q", *words)

    @classmethod
    def decode(cls, data: bytes, domain_tag: DomainTag = HYPERVISOR) -> "HartArchState":
        if len(data) < HART_STATE_BYTES:
            raise ValueError("hart state encoding too short")
        words = struct.unpack(f">{32 + len(CSR_NAMES)}Q", data[:HART_STATE_BYTES])
        csrs = dict(zip(CSR_NAMES, words[32:]))
        return cls(gprs=list(words[:32]), csrs=csrs, domain_tag=domain_tag)

    def copy(self) -> "HartArchState":
        return HartArchState(list(self.gprs), dict(self.csrs), self.domain_tag)

    def scrub(self) -> None:
        self.gprs = [0] * 32
        self.csrs = {name: 0 for name in CSR_NAMES}

    def load(self, other: "HartArchState") -> None:
        self.gprs = list(other.gprs)
        self.gprs[0] = 0
        self.csrs = dict(other.csrs)
        self.domain_tag = other.domain_tag


# --- Sparse memory ---

class Memory:
    """Byte store keyed by 4 KiB page number. Absent pages read as zero."""

    def __init__(self, bounds: Interval):
        self.bounds = bounds
        self._pages: dict[int, bytearray] = {}

    def _check(self, addr: int, length: int) -> None:
        if length < 0 or not (self.bounds.start <= addr and addr + length <= self.bounds.end):
            raise AccessFault("access outside physical memory", addr=hex(addr), length=length)

    def _chunks(self, addr: int, length: int) -> Iterator[Tuple[int, int, int, int]]:
        """Yields (page_number, page_offset, chunk_len, data_offset)."""
        done = 0
        while done < length:
            cur = addr + done
            pn, off = cur >> PAGE_SHIFT, cur & (PAGE - 1)
            n = min(PAGE - off, length - done)
            yield pn, off, n, done
            done += n

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        out = bytearray(length)
        for pn, off, n, pos in self._chunks(addr, length):
            page = self._pages.get(pn)
            if page is not None:
                out[pos:pos + n] = page[off:off + n]
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        for pn, off, n, pos in self._chunks(addr, len(data)):
            chunk = data[pos:pos + n]
            page = self._pages.get(pn)
            if page is None:
                if not any(chunk):
                    continue
                page = self._pages[pn] = bytearray(PAGE)
            page[off:off + n] = chunk

    def zero(self, addr: int, length: int) -> None:
        self._check(addr, length)
        if length == 0:
            return
        first, last = addr >> PAGE_SHIFT, (addr + length - 1) >> PAGE_SHIFT
        whole_first = first if addr % PAGE == 0 else first + 1
        whole_last = last if (addr + length) % PAGE == 0 else last - 1
        if whole_last - whole_first + 1 > len(self._pages):
            doomed = [pn for pn in self._pages if whole_first <= pn <= whole_last]
        else:
            doomed = [pn for pn in range(whole_first, whole_last + 1) if pn in self._pages]
        for pn in doomed:
            del self._pages[pn]
        # partial head/tail pages
        for pn, off, n, _ in self._chunks(addr, length):
            if whole_first <= pn <= whole_last:
                continue
            page = self._pages.get(pn)
            if page is not None:
                page[off:off + n] = bytes(n)

    def is_zero(self, addr: int, length: int) -> bool:
        self._check(addr, length)
        for pn, off, n, _ in self._chunks(addr, length):
            page = self._pages.get(pn)
            if page is not None and any(page[off:off + n]):
                return False
        return True

    def nonzero_pages(self, addr: int, length: int) -> List[int]:
        """Addresses of 4 KiB pages in a page-aligned range holding any nonzero byte, ascending."""
        self._check(addr, length)
        first, n = addr >> PAGE_SHIFT, length >> PAGE_SHIFT
        if n > len(self._pages):
            candidates = sorted(pn for pn in self._pages if first <= pn < first + n)
        else:
            candidates = [pn for pn in range(first, first + n) if pn in self._pages]
        return [pn << PAGE_SHIFT for pn in candidates if any(self._pages[pn])]

    def copy(self, src: int, dst: int, length: int) -> None:
        """Page-aligned copy that only touches stored source pages. Destination is zeroed first."""
        self.zero(dst, length)
        for page in self.nonzero_pages(src, length):
            self._pages[(dst + page - src) >> PAGE_SHIFT] = bytearray(self._pages[page >> PAGE_SHIFT])

    def stored_pages(self) -> int:
        return len(self._pages)


# --- Machine ---

@dataclass
class AccessRecord:
    domain: DomainTag
    op: str
    addr: int
    length: int


class Machine:
    """Physical machine handle. Hart state here is the hardware model; the TSM
    moves it in and out of save-state areas."""

    def __init__(self, config: MachineConfig):
        self.config = config
        self.layout = compute_layout(config)
        self.memory = Memory(self.layout.memory)
        self.harts = [HartArchState() for _ in range(config.hart_count)]
        self.pmp_domain = [HYPERVISOR for _ in range(config.hart_count)]
        self.tlb: List[set] = [set() for _ in range(config.hart_count)]
        # installed by the TSM
        self.ownership_hook: Optional[Callable[[int, int, int], bool]] = None
        self.fault_sink: Optional[Callable[[DomainTag, int, str, int], None]] = None
        self.access_log: Optional[List[AccessRecord]] = None

    def record_accesses(self, enabled: bool = True) -> None:
        self.access_log = [] if enabled else None

    def _permitted(self, domain: DomainTag, addr: int, length: int, op: str) -> bool:
        if domain.kind == "tsm":
            return True
        covered = 0
        for rule in self.layout.region_rules:
            if not rule.interval.overlaps(addr, length):
                continue
            lo = max(addr, rule.interval.start)
            hi = min(addr + length, rule.interval.end)
            perm = rule.hypervisor if domain.kind == "hypervisor" else rule.tvm
            if perm == "owned":
                if self.ownership_hook is None or not self.ownership_hook(domain.tvm_id, lo, hi - lo):
                    return False
            elif op[0] not in perm:
                return False
            covered += hi - lo
        return covered == length

    def access(self, domain: DomainTag, address: int, op: str, length: int = 0, data: bytes = b"") -> Optional[bytes]:
        """Read or write on behalf of `domain`; AccessFault models a PMP trap."""
        if op not in ("read", "write"):
            raise ValueError(f"bad op: {op}")
        n = len(data) if op == "write" else length
        if n < 1 or not self.layout.memory.contains(address, n) or not self._permitted(domain, address, n, op):
            logger.warning("access fault: %s %s %#x+%d", domain, op, address, n)
            if self.fault_sink is not None:
                self.fault_sink(domain, address, op, n)
            raise AccessFault("region rules deny access", domain=str(domain), addr=hex(address), op=op)
        if self.access_log is not None:
            self.access_log.append(AccessRecord(domain, op, address, n))
        if op == "read":
            return self.memory.read(address, n)
        self.memory.write(address, data)
        return None

    # direct TSM-domain helpers
    def read(self, address: int, length: int) -> bytes:
        return self.access(TSM, address, "read", length)

    def write(self, address: int, data: bytes) -> None:
        self.access(TSM, address, "write", data=data)


def build_machine(config: MachineConfig) -> Machine:
    config.validate()
    machine = Machine(config)
    logger.info(
        "machine built: memory %r, confidential %r, %d hart(s)",
        machine.layout.memory, machine.layout.confidential, config.hart_count,
    )
    return machine
