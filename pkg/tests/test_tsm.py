"""
Tests for the security manager: promotion through the ABI, running and
exiting TVMs, secrets, shared and lazily backed pages, cross-hart
conflicts, and a long randomized interleaving checked with the trace audits.
"""
import random
import struct
import threading

import pytest

import abi
from abi import ExitReason
from allocator import TokenRegistry
from attestation import MeasurementRegisters
from errors import (
    AccessFault,
    AttestationFailed,
    AuthFailure,
    Denied,
    FlowViolation,
    HartNotStarted,
    InvalidParam,
    InvalidState,
    NoSuchSecret,
    NoSuchTvm,
    OutOfMemory,
    TvmBusy,
    UnknownCall,
)
from gstage import translate
from machine import HYPERVISOR, DomainTag, PageSize
from tests.conftest import destroy, promote, run
from tracelog import audit_all, calls_between
from tsm import EventKind, GuestEvent
from vmimage import flip_bit, stage_minimal

SECRET_GPA = 0x8010_0000
SHARED_GPA = 0x9000_0000
SHARED_NPA = 0x81F0_0000
FORWARD_EXT = 0x0A00_0000


def ecall(call, *args):
    ext, fid = abi.CALL_IDS[call]
    return GuestEvent("ecall", ext, fid, tuple(args))


def read(gpa, length):
    return GuestEvent("read", gpa=gpa, length=length)


def write(gpa, data):
    return GuestEvent("write", gpa=gpa, data=data)


@pytest.fixture
def tvm(tsm, arena):
    out = promote(tsm, stage_minimal(arena))
    assert out.error == 0
    return out.value


# --- promotion ---


def test_promote_is_one_hypervisor_call(tsm, arena):
    staged = stage_minimal(arena)
    tsm.trace.append(0, HYPERVISOR, "mark", "begin")
    out = promote(tsm, staged)
    tsm.trace.append(0, HYPERVISOR, "mark", "end")
    assert (out.error, out.value) == (0, 1)
    assert calls_between(tsm.trace, "begin", "end") == 1
    assert tsm.trace.find(phase="transform", call="promote", tvm=1)
    assert tsm.tvms[1].measurements == staged.measurements
    assert tsm.tvms[1].secrets == {0: b"owner-secret"}
    assert audit_all(tsm.trace) == []


def test_double_promotion_gives_disjoint_tvms(tsm, arena):
    staged = stage_minimal(arena)
    first, second = promote(tsm, staged).value, promote(tsm, staged).value
    assert first != second
    a = {t.base for t in tsm.tvms[first].tables.tokens}
    b = {t.base for t in tsm.tvms[second].tables.tokens}
    assert a and b and not a & b


@pytest.mark.parametrize("corrupt, error", [
    (lambda m, s: flip_bit(m, s.tap_addr, 8 * 110 + 3), AuthFailure),
    (lambda m, s: m.write(s.fdt_addr, b"\x00"), InvalidParam),
])
def test_failed_promotion_conserves_memory(tsm, arena, corrupt, error):
    staged = stage_minimal(arena)
    before = tsm.snapshot()
    corrupt(tsm.machine, staged)
    out = promote(tsm, staged)
    assert out.error == error.code
    assert tsm.snapshot() == before


def test_wrong_reference_fails_attestation(tsm, arena):
    wrong = MeasurementRegisters(bytes(48), bytes(48), bytes(48))
    before = tsm.snapshot()
    out = promote(tsm, stage_minimal(arena, reference=wrong))
    assert out.error == AttestationFailed.code
    assert tsm.snapshot() == before


def test_promote_rejects_confidential_arguments(tsm, arena):
    staged = stage_minimal(arena)
    args = list(staged.promote_args())
    args[1] = tsm.layout.confidential.start
    out = tsm.hypervisor_ecall(0, abi.EXT_ACETVM, abi.FID_PROMOTE, args)
    assert out.name == "InvalidAddress"


# --- running ---


def test_idle_exit(tsm, tvm):
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.IDLE
    assert (out.error, out.value) == (0, 7)
    assert tsm.machine.harts[0].csr("scause") == 7
    assert audit_all(tsm.trace) == []


def test_run_errors(tsm, arena):
    tvm = promote(tsm, stage_minimal(arena, vhart_count=2)).value
    assert run(tsm, tvm, vhart=1).error == HartNotStarted.code
    assert run(tsm, tvm, vhart=5).error == InvalidParam.code
    assert run(tsm, 99).error == NoSuchTvm.code


def test_secret_lands_in_private_memory(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [ecall("retrieve_secret", 0, SECRET_GPA, 64), read(SECRET_GPA, 12)])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.IDLE
    fetched, echoed = tsm.guest_log
    assert (fetched.error, fetched.value) == (0, 12)
    assert echoed.data == b"owner-secret"
    where = translate(tsm.tvms[tvm].tables, SECRET_GPA).value
    with pytest.raises(AccessFault):
        tsm.hypervisor_access(0, where, "read", 12)
    assert audit_all(tsm.trace) == []


def test_secret_never_reaches_a_shared_page(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [
        ecall("share_page", SHARED_GPA, SHARED_NPA),
        ecall("retrieve_secret", 0, SHARED_GPA, 64),
        ecall("retrieve_secret", 4, SECRET_GPA, 64),
    ])
    run(tsm, tvm)
    shared, denied, missing = tsm.guest_log
    assert shared.error == 0
    assert denied.error == Denied.code
    assert missing.error == NoSuchSecret.code
    assert tsm.machine.read(SHARED_NPA, 12) == bytes(12)


def test_shared_page_is_visible_to_the_hypervisor(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [ecall("share_page", SHARED_GPA, SHARED_NPA), write(SHARED_GPA + 8, b"hello")])
    run(tsm, tvm)
    assert tsm.hypervisor_access(0, SHARED_NPA + 8, "read", 5) == b"hello"


def test_zero_page_is_backed_on_first_touch(tsm, tvm):
    before = tsm.snapshot()["allocated_tokens"]
    tsm.add_guest_events(tvm, 0, [read(SECRET_GPA, 4), write(SECRET_GPA, b"hi"), read(SECRET_GPA, 2)])
    run(tsm, tvm)
    assert tsm.guest_log[0].data == bytes(4)
    assert tsm.guest_log[2].data == b"hi"
    assert tsm.snapshot()["allocated_tokens"] == before + 1
    assert tsm.trace.find(phase="route", call="page_fault")


def test_unmapped_guest_access_exits(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [read(0x7000_0000, 4)])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.GUEST_FAULT
    assert out.exit.detail == 0x7000_0000
    assert tsm.machine.harts[0].csr("stval") == 0x7000_0000


def test_out_of_memory_kills_the_tvm(tsm, arena):
    before = tsm.snapshot()
    tvm = promote(tsm, stage_minimal(arena)).value
    drained = TokenRegistry()
    while True:
        try:
            drained.add(tsm.allocator.allocate(PageSize.SIZE_4K))
        except OutOfMemory:
            break
    tsm.add_guest_events(tvm, 0, [write(SECRET_GPA, b"x")])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.TVM_KILLED
    assert out.exit.detail == SECRET_GPA
    assert tsm.tvms == {}
    assert tsm.guest_log[-1].error == OutOfMemory.code
    drained.release_all(tsm.allocator)
    assert tsm.snapshot() == before


def test_destroy_releases_everything(tsm, arena):
    before = tsm.snapshot()
    tvm = promote(tsm, stage_minimal(arena)).value
    tsm.add_guest_events(tvm, 0, [ecall("retrieve_secret", 0, SECRET_GPA, 64)])
    run(tsm, tvm)
    assert destroy(tsm, tvm).error == 0
    assert tsm.snapshot() == before
    assert destroy(tsm, tvm).error == NoSuchTvm.code


# --- harts and flows ---


def test_busy_tvm_on_another_hart(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("pause")])
    assert run(tsm, tvm).paused
    assert run(tsm, tvm, hart=1).error == TvmBusy.code
    assert destroy(tsm, tvm, hart=1).error == TvmBusy.code
    out = tsm.continue_guest(0)
    assert out.exit.reason is ExitReason.IDLE
    assert destroy(tsm, tvm).error == 0


def test_hypervisor_calls_from_inside_a_tvm_are_rejected(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("pause")])
    run(tsm, tvm)
    with pytest.raises(FlowViolation):
        destroy(tsm, tvm)
    with pytest.raises(FlowViolation):
        tsm.hypervisor_access(0, 0x8000_0000, "read", 4)
    assert tsm.trace.find(phase="reject", result="FlowViolation")
    tsm.continue_guest(0)


def test_calls_on_the_wrong_side(tsm, tvm):
    ext, fid = abi.CALL_IDS["share_page"]
    assert tsm.hypervisor_ecall(0, ext, fid, [SHARED_GPA, SHARED_NPA]).error == FlowViolation.code
    assert tsm.hypervisor_ecall(0, 0x1234, 0).error == UnknownCall.code
    tsm.add_guest_events(tvm, 0, [ecall("destroy", tvm), GuestEvent("ecall", abi.EXT_HSM, 9)])
    run(tsm, tvm)
    assert [o.error for o in tsm.guest_log] == [FlowViolation.code, UnknownCall.code]
    assert tvm in tsm.tvms


def test_unknown_extension_is_forwarded(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("ecall", FORWARD_EXT, 7, (1, 2, 3)), read(0x8000_0000, 4)])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.GUEST_ECALL
    assert out.exit.detail == FORWARD_EXT
    hart = tsm.machine.harts[0]
    base = abi.EXIT_REG_BASE
    assert [hart.get(base + n) for n in range(3)] == [1, 2, 3]
    assert hart.get(base + 6) == 7 and hart.get(base + 7) == FORWARD_EXT

    run(tsm, tvm, reply=(0, 42))
    forwarded = tsm.guest_log[0]
    assert (forwarded.error, forwarded.value) == (0, 42)
    assert tsm.guest_log[1].data == bytes.fromhex("13000000")


def test_tsm_info(tsm):
    out = tsm.hypervisor_ecall(0, abi.EXT_ACETVM, abi.FID_TSM_INFO, [SHARED_NPA, 64])
    assert out.error == 0 and out.value == abi.TSM_INFO_BYTES
    record = struct.unpack(abi.TSM_INFO_FORMAT, tsm.machine.read(SHARED_NPA, abi.TSM_INFO_BYTES))
    assert record == (abi.TSM_STATE_READY, abi.TSM_IMPL_ID, abi.TSM_VERSION, 0, 0, 2, 64, 1)
    assert tsm.hypervisor_ecall(0, abi.EXT_ACETVM, abi.FID_TSM_INFO, [SHARED_NPA, 8]).error == InvalidParam.code


def test_extension_query_depends_on_the_caller(tsm, tvm):
    ext, fid = abi.CALL_IDS["probe_extension"]
    assert tsm.hypervisor_ecall(0, ext, fid, [abi.EXT_HSM]).value == 0
    tsm.add_guest_events(tvm, 0, [GuestEvent("ecall", ext, fid, (abi.EXT_HSM,))])
    run(tsm, tvm)
    assert tsm.guest_log[0].value == 1


# --- interrupts and timers ---


def test_only_allowed_interrupts_reach_the_guest(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [ecall("allow_interrupt", 9)])
    run(tsm, tvm)
    run(tsm, tvm, irq=9)
    run(tsm, tvm, irq=3)
    assert tsm.trace.find(phase="inject", irq=9)
    assert tsm.trace.find(phase="filter", irq=3, result="dropped")
    assert not tsm.trace.find(phase="inject", irq=3)
    assert audit_all(tsm.trace) == []


def test_external_interrupt_exits_the_tvm(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("pause")])
    run(tsm, tvm)
    out = tsm.interrupt(0, EventKind.EXTERNAL_INTERRUPT, irq=11)
    assert out.exit.reason is ExitReason.EXTERNAL_INTERRUPT and out.exit.detail == 11
    tsm.interrupt(0, EventKind.EXTERNAL_INTERRUPT, irq=11)
    assert tsm.trace.find(phase="delegate", call="external_interrupt")


def test_timer_value_is_disclosed_on_exit(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [ecall("set_timer", 500), GuestEvent("yield")])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.YIELD
    assert tsm.machine.harts[0].csr("vstimecmp") == 500
    assert tsm.advance_clock(600) == [(tvm, 0)]
    run(tsm, tvm)
    assert tsm.trace.find(phase="enter", timer=1)
    assert audit_all(tsm.trace) == []


# --- kills and resets ---


def _drain(tsm) -> TokenRegistry:
    drained = TokenRegistry()
    while True:
        try:
            drained.add(tsm.allocator.allocate(PageSize.SIZE_4K))
        except OutOfMemory:
            return drained


def _second_vhart_paused_on_hart_1(tsm, arena) -> int:
    tvm = promote(tsm, stage_minimal(arena, vhart_count=2)).value
    tsm.add_guest_events(tvm, 0, [ecall("hart_start", 1, 0x8000_0000, 0)])
    assert run(tsm, tvm).exit.reason is ExitReason.HART_START_REQUEST
    tsm.add_guest_events(tvm, 1, [GuestEvent("pause")])
    assert run(tsm, tvm, vhart=1, hart=1).paused
    return tvm


def _hold(lock):
    """Hold lock on another thread until the returned event is set."""
    held, release = threading.Event(), threading.Event()

    def holder():
        with lock:
            held.set()
            release.wait(10)

    thread = threading.Thread(target=holder)
    thread.start()
    assert held.wait(10)
    return release, thread


def test_out_of_memory_kill_forces_out_every_vhart(tsm, arena):
    before = tsm.snapshot()
    tvm = _second_vhart_paused_on_hart_1(tsm, arena)
    drained = _drain(tsm)
    tsm.add_guest_events(tvm, 0, [write(SECRET_GPA, b"x")])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.TVM_KILLED
    assert not tsm.contexts[1].flow.is_tvm
    assert tsm.last_exit[1].reason is ExitReason.TVM_KILLED
    assert tsm.trace.find(phase="trap", call="kill", hart=1)
    assert tsm.tvms == {}
    assert run(tsm, tvm, hart=1).error == NoSuchTvm.code
    with pytest.raises(InvalidState):
        tsm.continue_guest(1)
    drained.release_all(tsm.allocator)
    assert tsm.snapshot() == before
    assert audit_all(tsm.trace) == []


def test_kill_of_a_busy_hart_finishes_on_that_hart(tsm, arena):
    before = tsm.snapshot()
    tvm = _second_vhart_paused_on_hart_1(tsm, arena)
    drained = _drain(tsm)
    release, holder = _hold(tsm.contexts[1].lock)
    try:
        tsm.add_guest_events(tvm, 0, [write(SECRET_GPA, b"x")])
        assert run(tsm, tvm).exit.reason is ExitReason.TVM_KILLED
        assert tsm.tvms[tvm].killed
        assert tsm.contexts[1].flow == DomainTag.tvm(tvm, 1)
        assert run(tsm, tvm).error == InvalidState.code
    finally:
        release.set()
        holder.join(10)
    out = tsm.continue_guest(1)
    assert out.exit.reason is ExitReason.TVM_KILLED
    assert tsm.tvms == {}
    drained.release_all(tsm.allocator)
    assert tsm.snapshot() == before
    assert audit_all(tsm.trace) == []


def test_timer_waits_for_the_hart_driver(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [ecall("set_timer", 100), GuestEvent("pause")])
    assert run(tsm, tvm, hart=1).paused
    release, holder = _hold(tsm.contexts[1].lock)
    fired = []
    clock = threading.Thread(target=lambda: fired.extend(tsm.advance_clock(150)))
    try:
        clock.start()
        clock.join(0.2)
        assert clock.is_alive()
        assert not tsm.trace.find(phase="route", call="timer_interrupt")
    finally:
        release.set()
        holder.join(10)
    clock.join(10)
    assert not clock.is_alive()
    assert fired == [(tvm, 0)]
    assert tsm.trace.find(phase="route", call="timer_interrupt", hart=1)
    assert tsm.continue_guest(1).exit.reason is ExitReason.IDLE
    assert audit_all(tsm.trace) == []


def test_guest_cannot_touch_its_page_tables(tsm, tvm):
    desc = tsm.tvms[tvm]
    domain = DomainTag.tvm(tvm, 0)
    data = translate(desc.tables, 0x8000_0000)
    assert tsm.machine.access(domain, data.value, "read", 4) == b"\x13\x00\x00\x00"
    for table in desc.tables.root + desc.tables.intermediate:
        with pytest.raises(AccessFault):
            tsm.machine.access(domain, table.base, "read", 8)
        with pytest.raises(AccessFault):
            tsm.machine.access(domain, table.base, "write", data=b"\xff" * 8)


def test_system_reset_releases_every_tvm(tsm, arena):
    before = tsm.snapshot()
    promote(tsm, stage_minimal(arena))
    promote(tsm, stage_minimal(arena))
    out = tsm.hypervisor_ecall(0, abi.EXT_SRST, abi.FID_SYSTEM_RESET, (abi.RESET_COLD_REBOOT, 3))
    assert out.error == 0
    assert tsm.tvms == {}
    assert tsm.snapshot() == before
    assert tsm.resets == [(abi.RESET_COLD_REBOOT, 3)]
    assert tsm.trace.find(phase="transform", call="system_reset", type="cold_reboot", released=2)


def test_system_reset_rejects_unknown_types(tsm, tvm):
    out = tsm.hypervisor_ecall(0, abi.EXT_SRST, abi.FID_SYSTEM_RESET, (7, 0))
    assert out.error == InvalidParam.code
    assert tvm in tsm.tvms
    assert tsm.resets == []


def test_system_reset_waits_for_running_vharts(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("pause")])
    assert run(tsm, tvm, hart=1).paused
    out = tsm.hypervisor_ecall(0, abi.EXT_SRST, abi.FID_SYSTEM_RESET, (abi.RESET_SHUTDOWN, 0))
    assert out.error == TvmBusy.code
    assert tvm in tsm.tvms
    assert tsm.continue_guest(1).exit.reason is ExitReason.IDLE
    assert tsm.hypervisor_ecall(0, abi.EXT_SRST, abi.FID_SYSTEM_RESET, (abi.RESET_SHUTDOWN, 0)).error == 0
    assert tsm.tvms == {}


def test_system_reset_from_a_tvm_goes_to_the_hypervisor(tsm, tvm):
    tsm.add_guest_events(tvm, 0, [GuestEvent("ecall", abi.EXT_SRST, abi.FID_SYSTEM_RESET, (abi.RESET_SHUTDOWN, 0))])
    out = run(tsm, tvm)
    assert out.exit.reason is ExitReason.GUEST_ECALL
    assert out.exit.detail == abi.EXT_SRST
    assert tsm.trace.find(phase="route", call="forward", ext=hex(abi.EXT_SRST))
    assert tvm in tsm.tvms
    assert tsm.resets == []


# --- randomized interleaving ---


GUEST_STEPS = [
    lambda rng, clock: read(0x8000_0000, 4),
    lambda rng, clock: write(SECRET_GPA + rng.randrange(0, 4000), b"z"),
    lambda rng, clock: ecall("retrieve_secret", rng.choice([0, 1]), SECRET_GPA, 64),
    lambda rng, clock: ecall("set_timer", clock + rng.randrange(1, 50)),
    lambda rng, clock: ecall("allow_interrupt", rng.randrange(8)),
    lambda rng, clock: ecall("hart_get_status", 0),
    lambda rng, clock: GuestEvent("ecall", FORWARD_EXT, 1),
    lambda rng, clock: GuestEvent("yield"),
    lambda rng, clock: GuestEvent("pause"),
]


def test_random_interleaving_keeps_audits_clean(tsm, arena):
    rng = random.Random(99)
    before = tsm.snapshot()
    images = [stage_minimal(arena) for _ in range(3)]
    harts = range(len(tsm.contexts))

    def in_tvm(hart):
        return tsm.contexts[hart].flow.is_tvm

    for _ in range(1000):
        hart = rng.choice(harts)
        action = rng.randrange(6)
        if in_tvm(hart):
            if action < 4:
                tsm.continue_guest(hart)
            else:
                tsm.interrupt(hart, EventKind.EXTERNAL_INTERRUPT, irq=rng.randrange(8))
        elif action == 0 and len(tsm.tvms) < 4:
            promote(tsm, rng.choice(images), hart)
        elif action in (1, 2) and tsm.tvms:
            tvm = rng.choice(sorted(tsm.tvms))
            steps = [rng.choice(GUEST_STEPS)(rng, tsm.clock) for _ in range(rng.randrange(4))]
            tsm.add_guest_events(tvm, 0, steps)
            run(tsm, tvm, hart=hart, irq=rng.choice([abi.NO_IRQ, rng.randrange(8)]))
        elif action == 3 and tsm.tvms:
            destroy(tsm, rng.choice(sorted(tsm.tvms)), hart)
        elif action == 4:
            tsm.advance_clock(rng.randrange(20))
        else:
            tsm.interrupt(hart, EventKind.EXTERNAL_INTERRUPT, irq=3)

    for hart in harts:
        while in_tvm(hart):
            tsm.continue_guest(hart)
    for tvm in sorted(tsm.tvms):
        assert destroy(tsm, tvm).error == 0
    assert audit_all(tsm.trace) == []
    assert tsm.snapshot() == before
