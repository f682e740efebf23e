# suite.py - Adversarial hypervisor suite: one hostile move per row, each with its expected defence
"""
Every row builds a fresh machine, plays the compromised hypervisor, and
records what the TSM answered. A row is defended when the answer is the
expected one and the allocator ends where it started (nothing leaked).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import abi
import kem
from attestation import TsmAttestationKey
from errors import AceError, code_for, error_name
from machine import MachineConfig, PageSize, build_machine
from tsm import GuestEvent, Tsm
from vmimage import ImageBuilder, NcArena, flip_bit, stage_minimal

logger = logging.getLogger(__name__)

SUITE_MACHINE = MachineConfig(
    memory_base=0x8000_0000,
    memory_size=64 << 20,
    confidential_base=0x8000_0000 + (32 << 20),
    confidential_size=32 << 20,
    hart_count=2,
    alignment=PageSize.SIZE_2M,
)


@dataclass
class SuiteRow:
    name: str
    attack: str
    expected: str
    observed: str
    conserved: bool

    @property
    def defended(self) -> bool:
        return self.expected == self.observed and self.conserved

    @property
    def status(self) -> str:
        return "defended" if self.defended else "BREACHED"


class _Bench:
    """A fresh machine and TSM for one row."""

    def __init__(self, check_double_free: bool = True, key: Optional[TsmAttestationKey] = None):
        self.machine = build_machine(SUITE_MACHINE)
        self.tsm = Tsm(self.machine, key, check_double_free)
        self.arena = NcArena(self.machine)
        self.before = self.tsm.snapshot()

    def ecall(self, call: str, *args, hart: int = 0):
        ext, fid = abi.CALL_IDS[call]
        return self.tsm.hypervisor_ecall(hart, ext, fid, list(args))

    def promote(self, staged, hart: int = 0):
        return self.tsm.hypervisor_ecall(hart, abi.EXT_ACETVM, abi.FID_PROMOTE, list(staged.promote_args()))

    def conserved(self) -> bool:
        return self.tsm.snapshot() == self.before


def _name(out) -> str:
    return error_name(out.error)


# --- Rows ---

def _confidential_leaf(bench: _Bench) -> str:
    image = ImageBuilder(bench.arena)
    image.map_code(0x8000_0000, b"\x13\x00\x00\x00")
    image.map_raw_leaf(0x8040_0000, bench.machine.layout.confidential.start)
    return _name(bench.promote(image.build()))


def _table_loop(bench: _Bench) -> str:
    image = ImageBuilder(bench.arena)
    image.map_code(0x8000_0000, b"\x13\x00\x00\x00")
    image.loop_to_root(0x1_0000_0000)
    return _name(bench.promote(image.build()))


def _straddling_address(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    boundary = bench.machine.layout.confidential.start
    out = bench.ecall("promote", boundary - 64, staged.root_addr, staged.fdt_addr, staged.tap_addr, 1)
    return _name(out)


def _tap_bit_flip(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    # last byte of the GCM tag
    flip_bit(bench.machine, staged.tap_addr + staged.tap_bytes - 1, 3)
    return _name(bench.promote(staged))


def _wrong_lockbox(bench: _Bench) -> str:
    stranger = TsmAttestationKey()
    stranger.add_generated(kem.ALG_TESTKEM)
    staged = stage_minimal(bench.arena, kem_public_keys=stranger.public_keys())
    return _name(bench.promote(staged))


def _disallowed_injection(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    out = bench.promote(staged)
    if out.error:
        return _name(out)
    tvm = out.value
    ext, fid = abi.CALL_IDS["allow_interrupt"]
    bench.tsm.add_guest_events(tvm, 0, [GuestEvent("ecall", ext, fid, (3,)), GuestEvent("yield")])
    bench.ecall("run", tvm, 0, abi.NO_IRQ, 0, 0)
    start = len(bench.tsm.trace)
    bench.tsm.add_guest_events(tvm, 0, [GuestEvent("yield")])
    bench.ecall("run", tvm, 0, 9, 0, 0)
    recent = bench.tsm.trace.entries[start:]
    bench.ecall("destroy", tvm)
    if any(e.phase == "inject" and e.details.get("irq") == "9" for e in recent):
        return "injected"
    return "dropped" if any(e.phase == "filter" for e in recent) else "missing"


def _double_promote(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    first, second = bench.promote(staged), bench.promote(staged)
    if first.error or second.error:
        return f"{_name(first)}/{_name(second)}"
    a, b = bench.tsm.tvm(first.value), bench.tsm.tvm(second.value)
    mine = {t.base for t in list(a.tables.tokens) + list(a.tokens)}
    theirs = {t.base for t in list(b.tables.tokens) + list(b.tokens)}
    bench.ecall("destroy", first.value)
    bench.ecall("destroy", second.value)
    return "disjoint" if first.value != second.value and not mine & theirs else "shared"


def _destroy_while_running(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    out = bench.promote(staged)
    if out.error:
        return _name(out)
    tvm = out.value
    bench.tsm.add_guest_events(tvm, 0, [GuestEvent("pause"), GuestEvent("yield")])
    bench.ecall("run", tvm, 0, abi.NO_IRQ, 0, 0, hart=0)
    busy = bench.ecall("destroy", tvm, hart=1)
    bench.tsm.continue_guest(0)
    bench.ecall("destroy", tvm, hart=0)
    return _name(busy)


def _double_free(bench: _Bench) -> str:
    staged = stage_minimal(bench.arena)
    out = bench.promote(staged)
    if out.error:
        return _name(out)
    stale = next(iter(bench.tsm.tvm(out.value).tokens))
    bench.ecall("destroy", out.value)
    again = bench.promote(staged)
    try:
        bench.tsm.allocator.deallocate(stale)
        observed = "ok"
    except AceError as exc:
        observed = exc.name
    if not again.error and again.value in bench.tsm.tvms:
        try:
            bench.ecall("destroy", again.value)
        except AceError:
            pass
    return observed


def _flow_violation(bench: _Bench) -> str:
    ext, fid = abi.CALL_IDS["retrieve_secret"]
    hv_side = bench.tsm.hypervisor_ecall(0, ext, fid, [0, 0x8000_0000, 64])
    staged = stage_minimal(bench.arena)
    out = bench.promote(staged)
    if out.error:
        return _name(out)
    tvm = out.value
    bench.tsm.add_guest_events(tvm, 0, [
        GuestEvent("ecall", abi.EXT_ACETVM, abi.FID_PROMOTE, staged.promote_args()),
        GuestEvent("yield"),
    ])
    bench.ecall("run", tvm, 0, abi.NO_IRQ, 0, 0)
    tvm_side = bench.tsm.guest_log[-1].error if bench.tsm.guest_log else 0
    bench.ecall("destroy", tvm)
    names = {error_name(hv_side.error), error_name(tvm_side)}
    return names.pop() if len(names) == 1 else "/".join(sorted(names))


# name -> (description, expected observation, row)
ATTACKS: Dict[str, tuple] = {
    "confidential-leaf": ("guest table leaf targets confidential memory", "InvalidAddress", _confidential_leaf),
    "table-loop": ("guest table points back at its own root", "MalformedTable", _table_loop),
    "straddling-address": ("boot state straddles the confidential boundary", "InvalidAddress", _straddling_address),
    "tap-bit-flip": ("one bit of the sealed TAP flipped", "AuthFailure", _tap_bit_flip),
    "wrong-lockbox": ("TAP sealed for a key the TSM does not hold", "AuthFailure", _wrong_lockbox),
    "disallowed-injection": ("inject an interrupt the TVM never allowed", "dropped", _disallowed_injection),
    "double-promote": ("promote the same staged VM twice", "disjoint", _double_promote),
    "destroy-while-running": ("destroy a TVM with a vhart in flight", "TvmBusy", _destroy_while_running),
    "double-free": ("replay a released page token", "ForeignToken", _double_free),
    "flow-violation": ("call the other side's ABI functions", "FlowViolation", _flow_violation),
}


def run_attack(name: str, check_double_free: bool = True) -> SuiteRow:
    description, expected, attack = ATTACKS[name]
    bench = _Bench(check_double_free)
    try:
        observed = attack(bench)
    except AceError as exc:
        observed = exc.name
    row = SuiteRow(name, description, expected, observed, bench.conserved())
    log = logger.info if row.defended else logger.warning
    log("attack %s: expected %s, observed %s, conserved %s", name, expected, observed, row.conserved)
    return row


def attack_suite(check_double_free: bool = True, only: Optional[List[str]] = None) -> List[SuiteRow]:
    names = only or list(ATTACKS)
    return [run_attack(name, check_double_free) for name in names]


def suite_passed(rows: List[SuiteRow]) -> bool:
    return all(row.defended for row in rows)


def expected_code(name: str) -> Optional[int]:
    """ABI code a row expects, for rows whose expectation is an error."""
    try:
        return code_for(ATTACKS[name][1])
    except KeyError:
        return None
