"""
Tests for the guest page-table walk at promotion and the TVM-side
translation it produces. The fuzz test throws random hostile entries at
the walker and checks that nothing ever leaks out of the allocator.
"""
import random
import struct

import pytest

from allocator import PageAllocator
from errors import AccessFault, AceError, GuestFault, InvalidAddress, InvalidParam, MalformedTable
from gstage import (
    LAZY_ZERO,
    PTE_R,
    PTE_V,
    PTE_W,
    ROOT_BYTES,
    add_shared,
    make_pte,
    materialize_zero_page,
    translate,
    walk_and_copy,
)
from machine import PAGE, ConfidentialAddress, NonConfidentialAddress, PageSize, build_machine, validate_non_confidential
from tests.conftest import SMALL
from vmimage import ImageBuilder, NcArena

CODE = bytes.fromhex("9302a00013030000")


@pytest.fixture
def setup():
    machine = build_machine(SMALL)
    return machine, PageAllocator(machine), NcArena(machine)


def _root(machine, image):
    return validate_non_confidential(machine.layout, image.root, ROOT_BYTES)


def _walk(machine, allocator, image):
    return walk_and_copy(machine, allocator, _root(machine, image))


# --- valid tables ---


def test_walk_copies_data_and_keeps_zero_pages_lazy(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    image.map(0x8010_0000)
    image.map(0x4000_0000, b"", PageSize.SIZE_2M)
    result = _walk(machine, allocator, image)

    where = translate(result.tables, 0x8000_0004)
    assert isinstance(where, ConfidentialAddress)
    assert machine.read(where.value, 4) == CODE[4:8]
    assert translate(result.tables, 0x8010_0000) is LAZY_ZERO
    assert translate(result.tables, 0x4012_3456) is LAZY_ZERO
    assert result.pages == [(0x80000, CODE + bytes(4096 - len(CODE)))]
    with pytest.raises(GuestFault):
        translate(result.tables, 0x9000_0000)


def test_confidential_mirror_matches_translation(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    result = _walk(machine, allocator, image)
    where = translate(result.tables, 0x8000_0010)
    assert result.tables.hardware_translate(0x8000_0010) == where.value
    assert result.tables.hardware_translate(0x8000_1000) is None
    # root plus one table per level below it, plus the data page
    assert len(result.tables.tokens) == 4 + 3 + 1
    assert all(machine.layout.is_confidential(t.base) for t in result.tables.tokens)


def test_copy_is_independent_of_the_source(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    backing = image.map(0x8000_0000, b"original")
    result = _walk(machine, allocator, image)
    arena.write(backing, b"changed!")
    assert machine.read(translate(result.tables, 0x8000_0000).value, 8) == b"original"


def test_materialize_zero_page_is_idempotent(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map(0x4000_0000, b"", PageSize.SIZE_2M)
    result = _walk(machine, allocator, image)
    before = len(result.tables.tokens)
    first = materialize_zero_page(result.tables, allocator, 0x4000_1234)
    second = materialize_zero_page(result.tables, allocator, 0x4000_1000)
    assert first.value - 0x234 == second.value
    # one new level-0 table plus the data page
    assert len(result.tables.tokens) == before + 2
    assert translate(result.tables, 0x4000_1000) == second
    # the rest of the huge page stays lazy
    assert translate(result.tables, 0x4000_2000) is LAZY_ZERO
    assert result.tables.hardware_translate(0x4000_1010) == second.value + 0x10


def test_only_data_pages_are_owned(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    image.map(0x4000_0000, b"", PageSize.SIZE_2M)
    tables = _walk(machine, allocator, image).tables
    page = materialize_zero_page(tables, allocator, 0x4000_1000)
    code = translate(tables, 0x8000_0000)
    assert tables.owns(code.value, PAGE)
    assert tables.owns(page.value, 8)
    assert tables.root and tables.intermediate
    for table in tables.root + tables.intermediate:
        assert tables.tokens.owns(table.base, 8)
        assert not tables.owns(table.base, 8)


def test_shared_page_translates_to_hypervisor_memory(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    result = _walk(machine, allocator, image)
    add_shared(result.tables, 0x9000_0000, validate_non_confidential(machine.layout, 0x81F0_0000, 4096))
    where = translate(result.tables, 0x9000_0010)
    assert isinstance(where, NonConfidentialAddress)
    assert where.value == 0x81F0_0010
    with pytest.raises(GuestFault):
        materialize_zero_page(result.tables, allocator, 0x9000_0000)


# --- hostile tables ---


def _hostile(setup, mutate):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    image.map(0x8010_0000, b"data")
    mutate(machine, image)
    free = allocator.free_bytes()
    return machine, allocator, image, free


@pytest.mark.parametrize("mutate, error", [
    (lambda m, img: img.map_raw_leaf(0x8040_0000, 0x8200_0000), InvalidAddress),
    (lambda m, img: img.map_raw_leaf(0xC000_0000, 0x8000_0000, PageSize.SIZE_1G), InvalidAddress),
    (lambda m, img: img.map_raw_leaf(0x8060_0000, 0x8000_1000, PageSize.SIZE_2M), MalformedTable),
    (lambda m, img: img.loop_to_root(0x1_0000_0000), MalformedTable),
    (lambda m, img: img.set_raw_entry(0xC000_0000, 2, 0x4000_0000_0000_0001), MalformedTable),
    (lambda m, img: img.set_raw_entry(0xC000_0000, 0, PTE_V | PTE_W), MalformedTable),
    (lambda m, img: img.set_raw_entry(0xC000_0000, 0, make_pte(0x8000_0000)), MalformedTable),
    (lambda m, img: img.set_raw_entry(0xC000_0000, 1, make_pte(0x8200_0000)), InvalidAddress),
], ids=["leaf-confidential", "superpage-covers-region", "misaligned-superpage", "loop",
        "reserved-bits", "write-only", "pointer-at-last-level", "table-in-confidential"])
def test_hostile_tables_rejected_without_leaks(setup, mutate, error):
    machine, allocator, image, free = _hostile(setup, mutate)
    with pytest.raises(error):
        _walk(machine, allocator, image)
    assert allocator.free_bytes() == free


def test_root_must_be_16k_aligned(setup):
    machine, allocator, _ = setup
    root = validate_non_confidential(machine.layout, 0x8000_1000, ROOT_BYTES)
    with pytest.raises(MalformedTable):
        walk_and_copy(machine, allocator, root)


def test_two_entries_sharing_a_table_is_a_loop(setup):
    machine, allocator, arena = setup
    image = ImageBuilder(arena)
    image.map_code(0x8000_0000, CODE)
    slot = image._slot(0x8000_0000, 2)
    pointer = struct.unpack("<Q", arena.read(slot, 8))[0]
    image.set_raw_entry(0xC000_0000, 2, pointer)
    with pytest.raises(MalformedTable):
        _walk(machine, allocator, image)


def test_out_of_memory_releases_everything():
    # 2 MiB of confidential memory cannot hold a non-zero 2 MiB page plus tables
    config = SMALL.__class__(0x8000_0000, 64 << 20, 0x8200_0000, 2 << 20, alignment=PageSize.SIZE_2M)
    machine = build_machine(config)
    allocator = PageAllocator(machine)
    image = ImageBuilder(NcArena(machine))
    image.map(0x4000_0000, b"x", PageSize.SIZE_2M)
    with pytest.raises(AceError):
        _walk(machine, allocator, image)
    assert allocator.free_by_size()["2MiB"] == 1


# --- fuzz ---


def _random_entry(rng, machine):
    conf = machine.layout.confidential
    choice = rng.randrange(7)
    if choice == 0:
        return rng.getrandbits(64) | PTE_V
    if choice == 1:
        return make_pte(conf.start + rng.randrange(0, conf.size, 4096), PTE_R | PTE_W)
    if choice == 2:
        return make_pte(0x8000_0000 + rng.randrange(0, 32 << 20, 4096))
    if choice == 3:
        return make_pte(0x8000_0000 + rng.randrange(0, 32 << 20, 4096), PTE_R)
    if choice == 4:
        return PTE_V | PTE_W
    if choice == 5:
        return make_pte(0x8000_0000 + rng.randrange(0, 16) * (2 << 20), PTE_R | PTE_W)
    return 0


def test_fuzzed_tables_never_leak(setup):
    machine, allocator, _ = setup
    fresh = allocator.overhead_report()
    staging = machine.layout.non_confidential[0]
    rng = random.Random(7)
    outcomes = {"ok": 0, "rejected": 0}
    for _ in range(1000):
        machine.memory.zero(staging.start, staging.size)
        image = ImageBuilder(NcArena(machine))
        image.map_code(0x8000_0000, CODE)
        for _ in range(rng.randrange(1, 4)):
            gpa = rng.randrange(0, 1 << 34, 4096)
            try:
                image.set_raw_entry(gpa, rng.randrange(3), _random_entry(rng, machine))
            except (InvalidParam, AccessFault):
                pass
        try:
            result = _walk(machine, allocator, image)
        except AceError:
            outcomes["rejected"] += 1
        else:
            outcomes["ok"] += 1
            for _, mapping in result.tables.entries():
                if mapping.kind == "mapped":
                    assert machine.layout.is_confidential(mapping.target, int(mapping.size))
            result.tables.tokens.release_all(allocator)
        assert allocator.overhead_report() == fresh
    assert outcomes["ok"] and outcomes["rejected"]
