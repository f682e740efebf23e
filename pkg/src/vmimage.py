# vmimage.py - Hypervisor-side staging of a VM for promotion
"""
Everything promotion consumes is laid out here in non-confidential memory,
the way a hypervisor and VM owner would prepare it: guest tables, data
pages, a device tree, the boot hart state and a TAP sealed for the TSM.

The reference measurements are computed with the same page order the TSM
uses (non-zero 4 KiB guest pages, ascending guest page number), so a
faithfully staged image attests.

Mutation hooks (raw leaves, raw entries, table loops) let tests and the
attack suite build the hostile tables a compromised hypervisor would.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from attestation import (
    MeasurementRegisters,
    TapBlob,
    TapPayload,
    fixture_public_key,
    measure_tvm,
    tap_create,
)
from errors import InvalidParam, OutOfMemory
from gstage import (
    ENTRY_SIZE,
    LEAF_SIZE,
    PTE_PERMS,
    PTE_R,
    PTE_V,
    PTE_W,
    PTE_X,
    ROOT_BYTES,
    ROOT_LEVEL,
    gpa_index,
    make_pte,
    pte_target,
)
from kem import ALG_TESTKEM
from machine import HART_STATE_BYTES, HYPERVISOR, PAGE, HartArchState, Interval, Machine, PageSize

logger = logging.getLogger(__name__)

FDT_MAGIC = 0xD00DFEED
RWX = PTE_R | PTE_W | PTE_X
_LEAF_LEVEL = {size: level for level, size in LEAF_SIZE.items()}


def minimal_fdt(model: str = "acesim") -> bytes:
    """A header-valid flattened device tree: empty reserve map, root node, end token."""
    value = model.encode() + b"\0"
    padded = value + bytes(-len(value) % 4)
    structure = struct.pack(">II", 1, 0)  # FDT_BEGIN_NODE, empty name
    structure += struct.pack(">III", 3, len(value), 0) + padded  # FDT_PROP "model"
    structure += struct.pack(">II", 2, 9)  # FDT_END_NODE, FDT_END
    strings = b"model\0"
    off_rsv = 40
    off_struct = off_rsv + 16
    off_strings = off_struct + len(structure)
    total = off_strings + len(strings)
    header = struct.pack(">10I", FDT_MAGIC, total, off_struct, off_strings, off_rsv,
                         17, 16, 0, len(strings), len(structure))
    return header + bytes(16) + structure + strings


class NcArena:
    """Bump allocator over a non-confidential interval of the machine."""

    def __init__(self, machine: Machine, interval: Optional[Interval] = None):
        if interval is None:
            if not machine.layout.non_confidential:
                raise InvalidParam("machine has no non-confidential memory")
            interval = max(machine.layout.non_confidential, key=lambda iv: iv.size)
        self.machine = machine
        self.interval = interval
        self.cursor = interval.start

    def alloc(self, size: int, align: int = PAGE) -> int:
        addr = -(-self.cursor // align) * align
        if addr + size > self.interval.end:
            raise OutOfMemory("staging arena exhausted", wanted=size)
        self.cursor = addr + size
        return addr

    def write(self, addr: int, data: bytes) -> None:
        if data:
            self.machine.access(HYPERVISOR, addr, "write", data=bytes(data))

    def read(self, addr: int, length: int) -> bytes:
        return self.machine.access(HYPERVISOR, addr, "read", length)


@dataclass
class StagedImage:
    """Raw addresses handed to promote, plus what the owner expects."""

    boot_hart_addr: int
    root_addr: int
    fdt_addr: int
    tap_addr: int
    vhart_count: int
    measurements: MeasurementRegisters
    tap: TapBlob
    tap_bytes: int
    secrets: List[Tuple[int, bytes]] = field(default_factory=list)

    def promote_args(self) -> Tuple[int, int, int, int, int]:
        return (self.boot_hart_addr, self.root_addr, self.fdt_addr, self.tap_addr, self.vhart_count)


class ImageBuilder:
    def __init__(self, arena: NcArena, entry_gpa: int = 0x8000_0000):
        self.arena = arena
        self.machine = arena.machine
        self.root = arena.alloc(ROOT_BYTES, ROOT_BYTES)
        self.boot_hart = HartArchState()
        self.boot_hart.set_csr("sepc", entry_gpa)
        self.fdt = minimal_fdt()
        self.vhart_count = 1
        # (gpa, source, size) of every leaf that has backing memory
        self.leaves: List[Tuple[int, int, PageSize]] = []

    # --- tables ---

    def _pte(self, slot: int) -> int:
        return struct.unpack("<Q", self.arena.read(slot, ENTRY_SIZE))[0]

    def _set_pte(self, slot: int, pte: int) -> None:
        self.machine.access(HYPERVISOR, slot, "write", data=struct.pack("<Q", pte))

    def _slot(self, gpa: int, level: int) -> int:
        """Address of the entry translating gpa at `level`, creating tables above it."""
        table, cur = self.root, ROOT_LEVEL
        while cur > level:
            slot = table + gpa_index(gpa, cur) * ENTRY_SIZE
            pte = self._pte(slot)
            if pte & PTE_V:
                if pte & PTE_PERMS:
                    raise InvalidParam("gpa already covered by a larger leaf", gpa=hex(gpa))
                table = pte_target(pte)
            else:
                table = self.arena.alloc(PAGE)
                self._set_pte(slot, make_pte(table))
            cur -= 1
        return table + gpa_index(gpa, level) * ENTRY_SIZE

    def map(self, gpa: int, data: bytes = b"", size: PageSize = PageSize.SIZE_4K, perms: int = RWX) -> int:
        """Back a guest page with fresh memory holding `data`. Returns the backing address."""
        if gpa % int(size) or len(data) > int(size):
            raise InvalidParam("bad guest mapping", gpa=hex(gpa), size=size.label)
        backing = self.arena.alloc(int(size), int(size))
        self.arena.write(backing, data)
        self._set_pte(self._slot(gpa, _LEAF_LEVEL[size]), make_pte(backing, perms))
        self.leaves.append((gpa, backing, size))
        return backing

    def map_code(self, gpa: int, data: bytes) -> None:
        """Spread `data` over consecutive 4 KiB pages starting at gpa."""
        for off in range(0, max(len(data), 1), PAGE):
            self.map(gpa + off, data[off:off + PAGE])

    def map_raw_leaf(self, gpa: int, target: int, size: PageSize = PageSize.SIZE_4K, perms: int = RWX) -> None:
        """Leaf to an arbitrary physical address, confidential memory included."""
        self._set_pte(self._slot(gpa, _LEAF_LEVEL[size]), make_pte(target, perms))

    def set_raw_entry(self, gpa: int, level: int, pte: int) -> int:
        slot = self._slot(gpa, level)
        self._set_pte(slot, pte)
        return slot

    def loop_to_root(self, gpa: int, level: int = 2) -> None:
        """Pointer entry at `level` that leads back to the root table."""
        self.set_raw_entry(gpa, level, make_pte(self.root))

    # --- finishing ---

    def pages(self) -> List[Tuple[int, bytes]]:
        out = []
        for gpa, source, size in self.leaves:
            for page in self.machine.memory.nonzero_pages(source, int(size)):
                out.append(((gpa + page - source) >> 12, self.machine.memory.read(page, PAGE)))
        return sorted(out, key=lambda p: p[0])

    def measure(self) -> MeasurementRegisters:
        return measure_tvm(self.pages(), self.fdt, self.boot_hart)

    def build(
        self,
        secrets: Sequence[Tuple[int, bytes]] = (),
        kem_public_keys: Optional[Sequence[Tuple[int, bytes]]] = None,
        reference: Optional[MeasurementRegisters] = None,
        tap: Optional[bytes] = None,
    ) -> StagedImage:
        """Write boot state, FDT and a TAP; return the promote arguments.

        A ready-made tap (an encoded TAP, as `acesim tap create` writes) is
        staged as is; secrets, keys and reference are then ignored.
        """
        boot_addr = self.arena.alloc(HART_STATE_BYTES, 8)
        self.arena.write(boot_addr, self.boot_hart.encode())
        fdt_addr = self.arena.alloc(len(self.fdt), 8)
        self.arena.write(fdt_addr, self.fdt)

        measured = self.measure()
        if tap is not None:
            blob, encoded, secrets = TapBlob.parse(tap), bytes(tap), ()
        else:
            if kem_public_keys is None:
                kem_public_keys = [(ALG_TESTKEM, fixture_public_key())]
            payload = TapPayload(reference or measured, list(secrets))
            blob = tap_create(payload, kem_public_keys)
            encoded = blob.encode()
        tap_addr = self.arena.alloc(len(encoded), 8)
        self.arena.write(tap_addr, encoded)
        logger.debug("staged image: root %#x, %d leaf page(s), tap %d bytes", self.root, len(self.leaves), len(encoded))
        return StagedImage(boot_addr, self.root, fdt_addr, tap_addr, self.vhart_count,
                           measured, blob, len(encoded), list(secrets))


def flip_bit(machine: Machine, addr: int, bit: int) -> None:
    """Hypervisor-side single-bit corruption of staged bytes."""
    byte = machine.access(HYPERVISOR, addr + bit // 8, "read", 1)[0]
    machine.access(HYPERVISOR, addr + bit // 8, "write", data=bytes([byte ^ (1 << (bit % 8))]))


def stage_minimal(arena: NcArena, code: bytes = b"\x13\x00\x00\x00", entry_gpa: int = 0x8000_0000,
                  secrets: Sequence[Tuple[int, bytes]] = ((0, b"owner-secret"),), vhart_count: int = 1,
                  **build_kw) -> StagedImage:
    """One code page at entry_gpa plus a zero page after it."""
    image = ImageBuilder(arena, entry_gpa)
    image.map_code(entry_gpa, code)
    image.map(entry_gpa + 0x10_0000)
    image.vhart_count = vhart_count
    return image.build(secrets, **build_kw)
