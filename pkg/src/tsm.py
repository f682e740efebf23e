# tsm.py - TEE Security Manager: event router, context switches, TVM lifecycle handlers
"""
The TSM only runs in response to an event on a physical hart. Each dispatch:

    trap -> flow guard -> lightweight save -> route
         -> constructor / transform / destructor
         -> lightweight restore, or security-domain switch

Saved hart state always lives in 4 KiB confidential tokens: one per physical
hart for the hypervisor and one per vhart for each TVM.

Guest execution is scripted: GuestEvents queued per (tvm, vhart) are
consumed while the vhart runs, until one of them makes it exit.
"""
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

import abi
import hsm
from abi import ExitReason, HandlerSpec, ReadView, Request, Result, WriteView
from allocator import DEFAULT_SIZES, PageAllocator, PageToken, TokenRegistry
from attestation import (
    MeasurementRegisters,
    TapBlob,
    TsmAttestationKey,
    measure_tvm,
    retrieve_secret,
    tap_unseal,
    verify_local_attestation,
)
from errors import (
    AceError,
    AccessFault,
    AlreadyMapped,
    Denied,
    FlowViolation,
    GuestFault,
    InvalidParam,
    InvalidState,
    NoSuchTvm,
    OutOfMemory,
    ParseError,
    TvmBusy,
    UnknownCall,
    error_name,
    to_signed,
)
from gstage import LAZY_ZERO, TvmPageTables, add_shared, materialize_zero_page, translate, walk_and_copy
from hsm import VHart
from machine import (
    HART_STATE_BYTES,
    HYPERVISOR,
    PAGE,
    DomainTag,
    HartArchState,
    Machine,
    NonConfidentialAddress,
    PageSize,
    validate_confidential,
    validate_non_confidential,
)
from tracelog import TraceLog

logger = logging.getLogger(__name__)

MAX_VHARTS = 64
FDT_MAGIC = 0xD00DFEED
FDT_MIN_BYTES = 40
FDT_MAX_BYTES = 64 * 1024
TAP_MAX_BYTES = 1 << 20
MAX_IRQ = 1023


# ── Types ─────────────────────────────────────────────────────────────

class EventKind(Enum):
    ECALL_FROM_HYPERVISOR = "EcallFromHypervisor"
    ECALL_FROM_TVM = "EcallFromTvm"
    EXTERNAL_INTERRUPT = "ExternalInterrupt"
    TIMER_INTERRUPT = "TimerInterrupt"
    SOFTWARE_IPI = "SoftwareIpi"
    GUEST_PAGE_FAULT = "GuestPageFault"


@dataclass
class Event:
    kind: EventKind
    hart_id: int
    irq: Optional[int] = None
    gpa: Optional[int] = None


@dataclass
class FsmContext:
    hart_id: int
    hypervisor_area: PageToken
    flow: DomainTag = HYPERVISOR
    residue_clear: bool = True
    # hardware state already copied to the current area during this dispatch
    saved: bool = False
    # held while anything drives this hart
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)


@dataclass
class GuestEvent:
    """One scripted step of a running vhart."""

    kind: str  # ecall | read | write | yield | idle | pause
    ext: int = 0
    fid: int = 0
    args: Tuple[int, ...] = ()
    gpa: int = 0
    length: int = 0
    data: bytes = b""
    expect: Optional[str] = None
    line: int = 0


@dataclass
class GuestOutcome:
    hart: int
    tvm_id: int
    vhart: int
    event: GuestEvent
    error: int = 0
    value: int = 0
    data: Optional[bytes] = None


@dataclass
class ExitInfo:
    reason: ExitReason
    detail: int
    tvm_id: int
    vhart: int


@dataclass
class EcallOutcome:
    error: int = 0
    value: int = 0
    paused: bool = False
    exit: Optional[ExitInfo] = None

    @property
    def name(self) -> str:
        return error_name(self.error)


@dataclass
class TvmDescriptor:
    id: int
    tables: TvmPageTables
    vharts: List[VHart]
    vhart_areas: List[PageToken]
    measurements: MeasurementRegisters
    secrets: Dict[int, bytes] = field(default_factory=dict)
    allowed_interrupts: set = field(default_factory=set)
    shared_pages: Dict[int, NonConfidentialAddress] = field(default_factory=dict)
    tokens: TokenRegistry = field(default_factory=TokenRegistry)
    fdt_size: int = 0
    forwarded: set = field(default_factory=set)
    # out of memory; torn down once no vhart is in flight
    killed: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock)

    def domain(self, vhart: int) -> DomainTag:
        return DomainTag.tvm(self.id, vhart)

    def busy(self) -> bool:
        return any(v.running_on is not None for v in self.vharts)

    def footprint(self) -> int:
        return self.tables.tokens.total_bytes() + self.tokens.total_bytes()


# ── TSM ───────────────────────────────────────────────────────────────

class Tsm:
    def __init__(self, machine: Machine, key: Optional[TsmAttestationKey] = None,
                 check_double_free: bool = True, sizes: Tuple[PageSize, ...] = DEFAULT_SIZES):
        self.machine = machine
        self.layout = machine.layout
        self.allocator = PageAllocator(machine, sizes, check_double_free)
        self.key = key or TsmAttestationKey.from_env()
        self.trace = TraceLog()
        self.clock = 0
        self.tvms: Dict[int, TvmDescriptor] = {}
        self._lock = threading.RLock()
        self._next_id = 1
        self.guest_queue: Dict[Tuple[int, int], Deque[GuestEvent]] = {}
        self.guest_log: List[GuestOutcome] = []
        self._awaiting_reply: Dict[Tuple[int, int], GuestOutcome] = {}
        self.last_exit: Dict[int, ExitInfo] = {}
        self.access_faults = 0
        # (type, reason) of every accepted system reset
        self.resets: List[Tuple[int, int]] = []
        self.contexts: List[FsmContext] = []
        for hart in range(machine.config.hart_count):
            area = self.allocator.allocate(PageSize.SIZE_4K)
            self.contexts.append(FsmContext(hart, area))
            area.write(0, machine.harts[hart].encode())
        machine.ownership_hook = self._owns
        machine.fault_sink = self._on_access_fault
        logger.info("TSM ready on %d hart(s), %d bytes confidential memory free",
                    len(self.contexts), self.allocator.free_bytes())

    # --- helpers ---

    def _trace(self, ctx: FsmContext, phase: str, call: str, result: str = "ok", **details):
        return self.trace.append(ctx.hart_id, ctx.flow, phase, call, result, **details)

    def _owns(self, tvm_id: int, addr: int, length: int) -> bool:
        desc = self.tvms.get(tvm_id)
        return desc is not None and desc.tables.owns(addr, length)

    def _on_access_fault(self, domain: DomainTag, addr: int, op: str, length: int) -> None:
        self.access_faults += 1

    def _area(self, ctx: FsmContext, domain: DomainTag) -> PageToken:
        if domain == HYPERVISOR:
            area = ctx.hypervisor_area
        else:
            desc = self.tvms.get(domain.tvm_id)
            if desc is None:
                raise NoSuchTvm(f"no TVM {domain.tvm_id}")
            area = desc.vhart_areas[domain.vhart]
        validate_confidential(self.layout, area.base, HART_STATE_BYTES)
        return area

    def load_state(self, ctx: FsmContext, domain: DomainTag) -> HartArchState:
        return HartArchState.decode(self._area(ctx, domain).read(0, HART_STATE_BYTES), domain)

    def store_state(self, ctx: FsmContext, domain: DomainTag, state: HartArchState) -> None:
        self._area(ctx, domain).write(0, state.encode())

    def tvm(self, tvm_id: int) -> TvmDescriptor:
        desc = self.tvms.get(tvm_id)
        if desc is None:
            raise NoSuchTvm(f"no TVM {tvm_id}")
        return desc

    # --- context switches ---

    def lightweight_context_switch(self, ctx: FsmContext, direction: str) -> None:
        hardware = self.machine.harts[ctx.hart_id]
        if direction == "save":
            self.store_state(ctx, ctx.flow, hardware)
            ctx.saved = True
            self._trace(ctx, "save", "lightweight")
        elif direction == "restore":
            hardware.load(self.load_state(ctx, ctx.flow))
            ctx.saved = False
            self._trace(ctx, "restore", "lightweight")
        else:
            raise ValueError(f"bad direction: {direction}")

    def security_domain_switch(self, ctx: FsmContext, target: DomainTag) -> None:
        if target == ctx.flow:
            raise InvalidState(f"hart {ctx.hart_id} already executes {target}")
        hardware = self.machine.harts[ctx.hart_id]
        source = ctx.flow
        if not ctx.saved:
            self.store_state(ctx, source, hardware)
        hardware.load(self.load_state(ctx, target))
        self.machine.pmp_domain[ctx.hart_id] = target
        self.machine.tlb[ctx.hart_id].clear()
        ctx.residue_clear = True
        ctx.flow = target
        ctx.saved = False
        self.trace.append(ctx.hart_id, target, "domain_switch", "switch", residue_clear=True, **{"from": source})
        logger.debug("hart %d: %s -> %s", ctx.hart_id, source, target)

    def _enter(self, ctx: FsmContext, **details) -> None:
        self.trace.append(ctx.hart_id, ctx.flow, "enter", "resume", residue_clear=ctx.residue_clear, **details)

    # --- dispatch ---

    def dispatch(self, ctx: FsmContext, event: Event) -> list:
        """Handle one event on ctx's hart. Returns the trace entries it produced."""
        start = len(self.trace.per_hart(ctx.hart_id))
        self._trace(ctx, "trap", event.kind.value, irq=event.irq, gpa=_hex(event.gpa))
        _EVENT_ROUTES[event.kind](self, ctx, event)
        return self.trace.per_hart(ctx.hart_id)[start:]

    def _reject(self, ctx: FsmContext, what: str, reason: str) -> None:
        self._trace(ctx, "reject", what, FlowViolation.name)
        logger.warning("hart %d: rejected %s in flow %s: %s", ctx.hart_id, what, ctx.flow, reason)
        raise FlowViolation(reason, hart=ctx.hart_id, flow=str(ctx.flow))

    def _execute(self, ctx: FsmContext, spec: HandlerSpec, extra: Optional[dict] = None) -> Tuple[Request, Result]:
        """Run one handler's three phases against the saved state of ctx.flow."""
        source = self.load_state(ctx, ctx.flow)
        req = spec.constructor(ReadView(source), extra or {})
        self._trace(ctx, "constructor", spec.name)
        try:
            result = spec.transform(self, ctx, req)
        except AceError as exc:
            logger.info("%s failed: %s", spec.name, exc)
            result = Result(error=exc.code)
        self._trace(ctx, "transform", spec.name, error_name(result.error), **result.extra.get("trace", {}))

        if result.error or spec.target == "caller":
            target = ctx.flow
        elif spec.target == "hypervisor":
            target = HYPERVISOR
        else:
            target = result.extra["target"]
        state = self.load_state(ctx, target)
        view = WriteView(target, state, self.machine.write)
        try:
            if result.error:
                abi.return_to_caller(self, req, result, view)
            else:
                spec.destructor(self, req, result, view)
        except Denied:
            logger.error("%s destructor escaped its target %s: %s", spec.name, target, view.escapes)
            raise
        finally:
            self.store_state(ctx, target, state)
        self._trace(ctx, "destructor", spec.name, target=target, writes=view.write_set)
        return req, result

    # --- hypervisor-side entry points used by scenarios ---

    def hypervisor_ecall(self, hart: int, ext: int, fid: int, args=()) -> EcallOutcome:
        ctx = self.contexts[hart]
        with ctx.lock:
            if ctx.flow != HYPERVISOR:
                self._trace(ctx, "trap", EventKind.ECALL_FROM_HYPERVISOR.value)
                self._reject(ctx, "ecall", "hypervisor call while hart executes a TVM")
            hardware = self.machine.harts[hart]
            hardware.set_a(7, ext)
            hardware.set_a(6, fid)
            for n in range(6):
                hardware.set_a(n, args[n] if n < len(args) else 0)
            ctx.residue_clear = False
            self.last_exit.pop(hart, None)
            self.dispatch(ctx, Event(EventKind.ECALL_FROM_HYPERVISOR, hart))
            return self._outcome(ctx)

    def continue_guest(self, hart: int) -> EcallOutcome:
        ctx = self.contexts[hart]
        with ctx.lock:
            if not ctx.flow.is_tvm:
                raise InvalidState(f"hart {hart} is not executing a TVM")
            self.last_exit.pop(hart, None)
            self._drive_guest(ctx)
            return self._outcome(ctx)

    def interrupt(self, hart: int, kind: EventKind, irq: Optional[int] = None) -> EcallOutcome:
        ctx = self.contexts[hart]
        with ctx.lock:
            self.last_exit.pop(hart, None)
            self.dispatch(ctx, Event(kind, hart, irq=irq))
            return self._outcome(ctx)

    def _outcome(self, ctx: FsmContext) -> EcallOutcome:
        if ctx.flow.is_tvm:
            return EcallOutcome(paused=True)
        hardware = self.machine.harts[ctx.hart_id]
        return EcallOutcome(to_signed(hardware.a(0)), hardware.a(1), exit=self.last_exit.get(ctx.hart_id))

    def hypervisor_access(self, hart: int, address: int, op: str, length: int = 0, data: bytes = b""):
        """Memory access performed by hypervisor software on `hart`."""
        ctx = self.contexts[hart]
        with ctx.lock:
            if ctx.flow != HYPERVISOR:
                self._reject(ctx, "hv_" + op, "hypervisor access while hart executes a TVM")
            ctx.residue_clear = False
            try:
                return self.machine.access(HYPERVISOR, address, op, length, data)
            except AccessFault:
                self._trace(ctx, "fault", "hv_" + op, AccessFault.name, addr=hex(address))
                raise

    def add_guest_events(self, tvm_id: int, vhart: int, events) -> None:
        self.guest_queue.setdefault((tvm_id, vhart), deque()).extend(events)

    def advance_clock(self, ticks: int) -> List[Tuple[int, int]]:
        """Move simulated time; fires due timers. Returns (tvm, vhart) pairs that fired."""
        self.clock += ticks
        fired = []
        with self._lock:
            descs = list(self.tvms.values())
        for desc in descs:
            with desc.lock:
                due = [v for v in desc.vharts if hsm.check_timer(v, self.clock)]
            for vhart in due:
                fired.append((desc.id, vhart.index))
                hart = vhart.running_on
                if hart is None:
                    continue
                ctx = self.contexts[hart]
                with ctx.lock:
                    # the vhart may have left while we waited; entry delivers it then
                    if ctx.flow == desc.domain(vhart.index) and vhart.timer_pending:
                        self.dispatch(ctx, Event(EventKind.TIMER_INTERRUPT, ctx.hart_id))
        return fired

    # --- guest driver ---

    def _drive_guest(self, ctx: FsmContext) -> None:
        while ctx.flow.is_tvm:
            tvm_id, vh = ctx.flow.tvm_id, ctx.flow.vhart
            desc = self.tvms.get(tvm_id)
            if desc is not None and desc.killed:
                self._trace(ctx, "trap", "kill")
                self._exit(ctx, ExitReason.TVM_KILLED, 0)
                return
            queue = self.guest_queue.get((tvm_id, vh))
            if not queue:
                self._exit(ctx, ExitReason.IDLE, 0)
                return
            event = queue.popleft()
            ctx.residue_clear = False
            if event.kind == "pause":
                self._trace(ctx, "guest", "pause")
                return
            if event.kind == "yield":
                self._exit(ctx, ExitReason.YIELD, 0)
            elif event.kind == "idle":
                self._exit(ctx, ExitReason.IDLE, 0)
            elif event.kind == "ecall":
                self._guest_ecall(ctx, event)
            elif event.kind in ("read", "write"):
                self._guest_access(ctx, event)
            else:
                raise InvalidParam(f"unknown guest event {event.kind}")

    def _guest_ecall(self, ctx: FsmContext, event: GuestEvent) -> None:
        tvm_id, vh = ctx.flow.tvm_id, ctx.flow.vhart
        hardware = self.machine.harts[ctx.hart_id]
        hardware.set_a(7, event.ext)
        hardware.set_a(6, event.fid)
        for n in range(6):
            hardware.set_a(n, event.args[n] if n < len(event.args) else 0)
        outcome = GuestOutcome(ctx.hart_id, tvm_id, vh, event)
        self.guest_log.append(outcome)
        self.dispatch(ctx, Event(EventKind.ECALL_FROM_TVM, ctx.hart_id))
        domain = DomainTag.tvm(tvm_id, vh)
        exit_info = self.last_exit.get(ctx.hart_id) if ctx.flow != domain else None
        if exit_info is not None and exit_info.reason is ExitReason.GUEST_ECALL:
            # answered by the hypervisor on the next run
            self._awaiting_reply[(tvm_id, vh)] = outcome
        elif tvm_id in self.tvms:
            state = self.load_state(ctx, domain)
            outcome.error, outcome.value = to_signed(state.a(0)), state.a(1)

    def _guest_access(self, ctx: FsmContext, event: GuestEvent) -> None:
        tvm_id, vh = ctx.flow.tvm_id, ctx.flow.vhart
        outcome = GuestOutcome(ctx.hart_id, tvm_id, vh, event)
        self.guest_log.append(outcome)
        size = event.length if event.kind == "read" else len(event.data)
        if size < 1 or event.gpa % PAGE + size > PAGE:
            raise InvalidParam("guest accesses must stay inside one 4 KiB page")
        desc = self.tvm(tvm_id)
        for _ in range(2):
            try:
                where = translate(desc.tables, event.gpa)
            except GuestFault as exc:
                outcome.error = exc.code
                self._trace(ctx, "guest", event.kind, GuestFault.name, gpa=hex(event.gpa))
                self._exit(ctx, ExitReason.GUEST_FAULT, event.gpa)
                return
            if where is not LAZY_ZERO:
                break
            self.dispatch(ctx, Event(EventKind.GUEST_PAGE_FAULT, ctx.hart_id, gpa=event.gpa))
            if not ctx.flow.is_tvm:
                outcome.error = OutOfMemory.code
                return
        self.machine.tlb[ctx.hart_id].add(event.gpa // PAGE)
        if event.kind == "read":
            outcome.data = self.machine.access(ctx.flow, where.value, "read", event.length)
        else:
            self.machine.access(ctx.flow, where.value, "write", data=event.data)
        kind = "shared" if isinstance(where, NonConfidentialAddress) else "private"
        self._trace(ctx, "guest", event.kind, gpa=hex(event.gpa), page=kind, bytes=size)

    # --- exits ---

    def _exit(self, ctx: FsmContext, reason: ExitReason, detail: int) -> None:
        """Leave the TVM: reclassify exit information to the hypervisor, then switch."""
        domain = ctx.flow
        if not ctx.saved:
            self.lightweight_context_switch(ctx, "save")
        self._execute(ctx, _EXIT_HANDLER, {"reason": reason, "detail": detail})
        desc = self.tvms.get(domain.tvm_id)
        if desc is not None:
            with desc.lock:
                hsm.leave_vhart(desc.vharts[domain.vhart])
                if reason is ExitReason.GUEST_ECALL:
                    desc.forwarded.add(domain.vhart)
        self.security_domain_switch(ctx, HYPERVISOR)
        self._enter(ctx, exit=reason.label)
        self.last_exit[ctx.hart_id] = ExitInfo(reason, detail, domain.tvm_id, domain.vhart)
        logger.info("TVM %s vhart %s exit %s (%#x)", domain.tvm_id, domain.vhart, reason.label, detail)
        if desc is not None and (reason is ExitReason.TVM_KILLED or desc.killed):
            self._kill(desc, ctx.hart_id)

    def _kill(self, desc: TvmDescriptor, hart: int) -> None:
        """Force every other in-flight vhart out, then tear down once none is left.

        A hart whose lock is held elsewhere is left to its driver, which
        exits on its next guest step and finishes the teardown.
        """
        first = not desc.killed
        desc.killed = True
        if first:
            with desc.lock:
                others = [v.running_on for v in desc.vharts if v.running_on not in (None, hart)]
            for other_hart in others:
                other = self.contexts[other_hart]
                if not other.lock.acquire(blocking=False):
                    logger.warning("hart %d busy; TVM %d kill deferred to it", other_hart, desc.id)
                    continue
                try:
                    if other.flow.is_tvm and other.flow.tvm_id == desc.id:
                        self._trace(other, "trap", "kill")
                        self._exit(other, ExitReason.TVM_KILLED, 0)
                finally:
                    other.lock.release()
        with desc.lock:
            busy = desc.busy()
        if not busy:
            self._teardown(desc.id)

    # --- TVM lifecycle ---

    def promote_vm(self, boot_hart_addr: int, root_addr: int, fdt_addr: int, tap_addr: int,
                   vhart_count: int = 1) -> int:
        """Single-call TVM creation. All-or-nothing."""
        vhart_count = vhart_count or 1
        if not 1 <= vhart_count <= MAX_VHARTS:
            raise InvalidParam(f"vhart count {vhart_count} outside 1..{MAX_VHARTS}")
        boot_ref = validate_non_confidential(self.layout, boot_hart_addr, HART_STATE_BYTES)
        root_ref = validate_non_confidential(self.layout, root_addr, 4 * PAGE)
        fdt_ref = validate_non_confidential(self.layout, fdt_addr, 8)
        tap_ref = validate_non_confidential(self.layout, tap_addr, 8)

        with self._lock:
            boot_hart = HartArchState.decode(self.machine.read(boot_ref.value, HART_STATE_BYTES))
            walk = walk_and_copy(self.machine, self.allocator, root_ref)
            tokens = TokenRegistry()
            try:
                fdt = self._read_fdt(fdt_ref.value)
                for off in range(0, len(fdt), PAGE):
                    token = tokens.add(self.allocator.allocate(PageSize.SIZE_4K))
                    token.write(0, fdt[off:off + PAGE])
                tvm_id = self._next_id
                areas = []
                for index in range(vhart_count):
                    area = tokens.add(self.allocator.allocate(PageSize.SIZE_4K))
                    state = boot_hart.copy() if index == 0 else HartArchState()
                    state.domain_tag = DomainTag.tvm(tvm_id, index)
                    area.write(0, state.encode())
                    areas.append(area)
                measured = measure_tvm(walk.pages, fdt, boot_hart)
                blob = self._read_tap(tap_ref.value)
                payload = tap_unseal(blob, self.key)
                secrets = verify_local_attestation(measured, payload)
            except AceError:
                walk.tables.tokens.release_all(self.allocator)
                tokens.release_all(self.allocator)
                raise
            vharts = [VHart(i) for i in range(vhart_count)]
            vharts[0].state = hsm.HartState.STARTED
            desc = TvmDescriptor(tvm_id, walk.tables, vharts, areas, measured, dict(secrets),
                                 tokens=tokens, fdt_size=len(fdt))
            self.tvms[tvm_id] = desc
            self._next_id += 1
        logger.info("promoted TVM %d: %d vhart(s), %d bytes of confidential memory",
                    tvm_id, vhart_count, desc.footprint())
        return tvm_id

    def _read_checked(self, addr: int, length: int) -> bytes:
        validate_non_confidential(self.layout, addr, length)
        return self.machine.read(addr, length)

    def _read_fdt(self, addr: int) -> bytes:
        magic, total = struct.unpack(">II", self._read_checked(addr, 8))
        if magic != FDT_MAGIC:
            raise InvalidParam("bad device tree magic", magic=hex(magic))
        if not FDT_MIN_BYTES <= total <= FDT_MAX_BYTES:
            raise InvalidParam("device tree size out of range", size=total)
        return self._read_checked(addr, total)

    def _read_tap(self, addr: int) -> TapBlob:
        """Reads a TAP in bounded, individually validated steps."""
        head = self._read_checked(addr, 8)
        if head[:4] != b"ATAP":
            raise ParseError("bad TAP magic", field="magic")
        (count,) = struct.unpack(">H", head[6:8])
        pos = addr + 8
        for _ in range(count):
            _, length = struct.unpack(">HI", self._read_checked(pos, 6))
            pos += 6 + length
            if pos - addr > TAP_MAX_BYTES:
                raise ParseError("TAP too large", field="lockboxes")
        tail = self._read_checked(pos, 16)
        (ct_len,) = struct.unpack(">I", tail[12:16])
        total = pos + 16 + ct_len - addr
        if total > TAP_MAX_BYTES:
            raise ParseError("TAP too large", field="ciphertext")
        return TapBlob.parse(self._read_checked(addr, total))

    def destroy_tvm(self, tvm_id: int) -> None:
        with self._lock:
            desc = self.tvm(tvm_id)
            with desc.lock:
                if desc.busy():
                    raise TvmBusy(f"TVM {tvm_id} has a vhart in flight")
                self._teardown(tvm_id)

    def _teardown(self, tvm_id: int) -> None:
        with self._lock:
            desc = self.tvms.pop(tvm_id, None)
            if desc is None:
                return
            with desc.lock:
                desc.secrets.clear()
                released = desc.tables.tokens.release_all(self.allocator) + desc.tokens.release_all(self.allocator)
            for key in [k for k in self.guest_queue if k[0] == tvm_id]:
                del self.guest_queue[key]
            for key in [k for k in self._awaiting_reply if k[0] == tvm_id]:
                del self._awaiting_reply[key]
        logger.info("destroyed TVM %d, released %d token(s)", tvm_id, released)

    def system_reset(self, reset_type: int, reason: int) -> int:
        """Shut down or reboot. Every TVM is torn down first; returns how many were."""
        if reset_type not in abi.RESET_TYPES:
            raise InvalidParam(f"unknown reset type {reset_type:#x}")
        with self._lock:
            descs = list(self.tvms.values())
            for desc in descs:
                with desc.lock:
                    if desc.busy():
                        raise TvmBusy(f"TVM {desc.id} has a vhart in flight")
            for desc in descs:
                self._teardown(desc.id)
            self.resets.append((reset_type, reason))
        logger.warning("system %s (reason %d): released %d TVM(s)", abi.RESET_TYPES[reset_type], reason, len(descs))
        return len(descs)

    def establish_shared_page(self, tvm_id: int, gpa: int, npa: int) -> None:
        if gpa % PAGE or npa % PAGE:
            raise InvalidParam("shared pages must be 4 KiB aligned")
        ref = validate_non_confidential(self.layout, npa, PAGE)
        desc = self.tvm(tvm_id)
        with desc.lock:
            if desc.tables.lookup(gpa) is not None:
                raise AlreadyMapped("guest page already mapped", gpa=hex(gpa))
            add_shared(desc.tables, gpa, ref)
            desc.shared_pages[gpa] = ref

    def snapshot(self) -> dict:
        """Counters compared by scenario expectations."""
        report = self.allocator.overhead_report()
        return {"free_bytes": report.free_bytes, "free_tokens": report.free_tokens,
                "allocated_tokens": report.allocated_tokens, "tvms": len(self.tvms)}


def _hex(value: Optional[int]) -> Optional[str]:
    return None if value is None else hex(value)


# ── Event routes ──────────────────────────────────────────────────────

def _route_hypervisor_ecall(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    if ctx.flow != HYPERVISOR:
        tsm._reject(ctx, "ecall", "hypervisor ecall outside the non-confidential flow")
    tsm.lightweight_context_switch(ctx, "save")
    state = tsm.load_state(ctx, ctx.flow)
    key = (state.a(7), state.a(6))
    name = abi.HYPERVISOR_CALLS.get(key)
    if name is None:
        error = FlowViolation if key in abi.TVM_CALLS else UnknownCall
        tsm._trace(ctx, "route", f"{key[0]:#x}.{key[1]}", error.name)
        _return_error(tsm, ctx, error.code)
        tsm.lightweight_context_switch(ctx, "restore")
        return
    tsm._trace(ctx, "route", name)
    spec = _HYPERVISOR_HANDLERS[name]
    _, result = tsm._execute(ctx, spec)
    if name == "run" and not result.error:
        target = result.extra["target"]
        tsm.security_domain_switch(ctx, target)
        tsm._enter(ctx, **result.extra.get("entry", {}))
        pending = tsm._awaiting_reply.pop((target.tvm_id, target.vhart), None)
        if pending is not None:
            hardware = tsm.machine.harts[ctx.hart_id]
            pending.error, pending.value = to_signed(hardware.a(0)), hardware.a(1)
        tsm._drive_guest(ctx)
        return
    tsm.lightweight_context_switch(ctx, "restore")


def _route_tvm_ecall(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    if not ctx.flow.is_tvm:
        tsm._reject(ctx, "ecall", "TVM ecall outside a confidential flow")
    tsm.lightweight_context_switch(ctx, "save")
    state = tsm.load_state(ctx, ctx.flow)
    key = (state.a(7), state.a(6))
    name = abi.TVM_CALLS.get(key)
    if name is None:
        if key[0] in abi.FORWARDED_EXTENSIONS:
            tsm._trace(ctx, "route", "forward", ext=hex(key[0]), fid=key[1])
            tsm._exit(ctx, ExitReason.GUEST_ECALL, key[0])
            return
        if key in abi.HYPERVISOR_CALLS:
            tsm._trace(ctx, "route", abi.HYPERVISOR_CALLS[key], FlowViolation.name)
            _return_error(tsm, ctx, FlowViolation.code)
        elif key[0] in abi.TVM_EXTENSIONS:
            tsm._trace(ctx, "route", f"{key[0]:#x}.{key[1]}", UnknownCall.name)
            _return_error(tsm, ctx, UnknownCall.code)
        else:
            tsm._trace(ctx, "route", "forward", ext=hex(key[0]), fid=key[1])
            tsm._exit(ctx, ExitReason.GUEST_ECALL, key[0])
            return
        tsm.lightweight_context_switch(ctx, "restore")
        return
    tsm._trace(ctx, "route", name)
    _, result = tsm._execute(ctx, _TVM_HANDLERS[name])
    if result.exit is not None and not result.error:
        tsm._exit(ctx, *result.exit)
        return
    tsm.lightweight_context_switch(ctx, "restore")


def _route_external_interrupt(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    disposition = hsm.route_external_interrupt(ctx.flow, event.irq)
    if disposition is hsm.Disposition.DELEGATED:
        tsm._trace(ctx, "delegate", "external_interrupt", irq=event.irq)
        return
    tsm.lightweight_context_switch(ctx, "save")
    tsm._trace(ctx, "route", "external_interrupt", irq=event.irq)
    tsm._exit(ctx, ExitReason.EXTERNAL_INTERRUPT, event.irq)


def _route_software_ipi(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    if not ctx.flow.is_tvm:
        tsm._trace(ctx, "delegate", "software_ipi")
        return
    tsm.lightweight_context_switch(ctx, "save")
    tsm._trace(ctx, "route", "software_ipi")
    tsm._exit(ctx, ExitReason.SOFTWARE_INTERRUPT, 0)


def _route_timer(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    if not ctx.flow.is_tvm:
        tsm._trace(ctx, "delegate", "timer_interrupt")
        return
    tsm.lightweight_context_switch(ctx, "save")
    tsm._trace(ctx, "route", "timer_interrupt")
    tsm._execute(ctx, _TIMER_HANDLER)
    tsm.lightweight_context_switch(ctx, "restore")


def _route_page_fault(tsm: Tsm, ctx: FsmContext, event: Event) -> None:
    if not ctx.flow.is_tvm:
        tsm._reject(ctx, "page_fault", "guest page fault outside a confidential flow")
    tsm.lightweight_context_switch(ctx, "save")
    tsm._trace(ctx, "route", "page_fault", gpa=hex(event.gpa))
    _, result = tsm._execute(ctx, _PAGE_FAULT_HANDLER, {"gpa": event.gpa})
    if result.exit is not None:
        tsm._exit(ctx, *result.exit)
        return
    tsm.lightweight_context_switch(ctx, "restore")


def _return_error(tsm: Tsm, ctx: FsmContext, code: int) -> None:
    state = tsm.load_state(ctx, ctx.flow)
    view = WriteView(ctx.flow, state)
    view.set_a(0, code)
    view.set_a(1, 0)
    tsm.store_state(ctx, ctx.flow, state)
    tsm._trace(ctx, "destructor", "error", target=ctx.flow, writes=view.write_set)


_EVENT_ROUTES = {
    EventKind.ECALL_FROM_HYPERVISOR: _route_hypervisor_ecall,
    EventKind.ECALL_FROM_TVM: _route_tvm_ecall,
    EventKind.EXTERNAL_INTERRUPT: _route_external_interrupt,
    EventKind.SOFTWARE_IPI: _route_software_ipi,
    EventKind.TIMER_INTERRUPT: _route_timer,
    EventKind.GUEST_PAGE_FAULT: _route_page_fault,
}


# ── Hypervisor-side handlers ──────────────────────────────────────────

def _handle_promote(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    a = req.args
    tvm_id = tsm.promote_vm(a[0], a[1], a[2], a[3], a[4])
    return Result(value=tvm_id, extra={"trace": {"tvm": tvm_id}})


def _handle_run(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    tvm_id, index, resume_irq, fwd_error, fwd_value = req.args[:5]
    desc = tsm.tvm(tvm_id)
    with desc.lock:
        if desc.killed:
            raise InvalidState(f"TVM {tvm_id} is being killed")
        if not 0 <= index < len(desc.vharts):
            raise InvalidParam(f"TVM {tvm_id} has no vhart {index}")
        vhart = desc.vharts[index]
        hsm.check_timer(vhart, tsm.clock)
        info = hsm.enter_vhart(vhart, ctx.hart_id)
        injected = None
        if resume_irq != abi.NO_IRQ:
            allowed = sorted(desc.allowed_interrupts)
            disposition = hsm.filter_injection(desc.allowed_interrupts, resume_irq)
            if disposition is hsm.Disposition.INJECTED:
                injected = resume_irq
                tsm._trace(ctx, "inject", "run", irq=resume_irq, allowed=allowed)
            else:
                tsm._trace(ctx, "filter", "run", "dropped", irq=resume_irq, allowed=allowed)
        forwarded = index in desc.forwarded
        desc.forwarded.discard(index)
    entry = {"ipis": info.ipis, "fence": info.fence, "timer": info.timer}
    if info.started:
        entry["started"] = True
    return Result(extra={
        "target": desc.domain(index), "info": info, "irq": injected,
        "forwarded": (fwd_error, fwd_value) if forwarded else None, "entry": entry,
    })


def _run_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    info: hsm.EntryInfo = result.extra["info"]
    for reg, value in info.regs.items():
        if reg == "sepc":
            view.set_csr("sepc", value)
        else:
            view.set_a(int(reg[1:]), value)
    if result.extra["forwarded"] is not None:
        error, value = result.extra["forwarded"]
        view.set_a(0, error)
        view.set_a(1, value)
    bits = info.vsip_bits
    if result.extra["irq"] is not None:
        bits |= abi.SEIP
        view.set_csr("stval", result.extra["irq"])
    if bits:
        view.or_csr("vsip", bits)


def _handle_destroy(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    tsm.destroy_tvm(req.args[0])
    return Result()


def _handle_system_reset(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    reset_type, reason = req.args[0], req.args[1]
    released = tsm.system_reset(reset_type, reason)
    return Result(extra={"trace": {"type": abi.RESET_TYPES[reset_type], "reason": reason, "released": released}})


def _handle_tsm_info(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    addr, length = req.args[0], req.args[1]
    if length < abi.TSM_INFO_BYTES:
        raise InvalidParam("tsm_info buffer too small")
    validate_non_confidential(tsm.layout, addr, abi.TSM_INFO_BYTES)
    record = abi.encode_tsm_info(state_pages=len(tsm.contexts), max_vharts=MAX_VHARTS, vhart_state_pages=1)
    return Result(value=len(record), extra={"record": (addr, record)})


def _tsm_info_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    addr, record = result.extra["record"]
    view.write_memory(addr, record)
    abi.return_to_caller(tsm, req, result, view)


def _handle_spec_version(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    return Result(value=abi.SPEC_VERSION)


def _handle_extension_query(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    offered = abi.TVM_EXTENSIONS if ctx.flow.is_tvm else abi.HYPERVISOR_EXTENSIONS
    return Result(value=int(req.args[0] in offered))


# ── TVM-side handlers ─────────────────────────────────────────────────

def _caller(tsm: Tsm, ctx: FsmContext) -> Tuple[TvmDescriptor, int]:
    return tsm.tvm(ctx.flow.tvm_id), ctx.flow.vhart


def _handle_share_page(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, _ = _caller(tsm, ctx)
    tsm.establish_shared_page(desc.id, req.args[0], req.args[1])
    return Result(extra={"trace": {"gpa": hex(req.args[0])}})


def _handle_retrieve_secret(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    index, out_gpa, max_len = req.args[:3]
    desc, _ = _caller(tsm, ctx)
    with desc.lock:
        secret = retrieve_secret(desc, index)
        if len(secret) > max_len:
            raise InvalidParam("secret does not fit the buffer", needed=len(secret))
        chunks = []
        pos = 0
        while pos < len(secret):
            gpa = out_gpa + pos
            n = min(PAGE - gpa % PAGE, len(secret) - pos)
            where = translate(desc.tables, gpa)
            if where is LAZY_ZERO:
                where = materialize_zero_page(desc.tables, tsm.allocator, gpa)
            if isinstance(where, NonConfidentialAddress):
                raise Denied("secrets are never written to shared pages", gpa=hex(gpa))
            chunks.append((where.value, pos, n))
            pos += n
    return Result(value=len(secret), extra={"chunks": chunks, "secret": secret, "trace": {"index": index}})


def _retrieve_secret_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    secret = result.extra.pop("secret")
    for pa, pos, n in result.extra["chunks"]:
        view.write_memory(pa, secret[pos:pos + n])
    abi.return_to_caller(tsm, req, result, view)


def _handle_allow_interrupt(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    irq = req.args[0]
    if irq > MAX_IRQ:
        raise InvalidParam(f"irq {irq} out of range")
    desc, _ = _caller(tsm, ctx)
    with desc.lock:
        desc.allowed_interrupts.add(irq)
    return Result(extra={"trace": {"irq": irq}})


def _handle_hart_start(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    target, start_gpa, opaque = req.args[:3]
    desc, caller = _caller(tsm, ctx)

    def startable(gpa: int) -> bool:
        hit = desc.tables.lookup(gpa)
        return hit is not None and hit[1].kind in ("mapped", "lazy_zero")

    with desc.lock:
        hsm.hart_start(desc.vharts, caller, target, start_gpa, opaque, startable)
    return Result(exit=(ExitReason.HART_START_REQUEST, target), extra={"trace": {"vhart": target}})


def _handle_hart_stop(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        hsm.hart_stop(desc.vharts, caller)
    return Result(exit=(ExitReason.HART_STOPPED, caller))


def _hart_stop_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    view.scrub()


def _handle_hart_suspend(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    suspend_type, resume_gpa, opaque = req.args[:3]
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        hsm.hart_suspend(desc.vharts, caller, suspend_type, resume_gpa, opaque)
    return Result(exit=(ExitReason.HART_SUSPENDED, caller))


def _handle_hart_get_status(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, _ = _caller(tsm, ctx)
    with desc.lock:
        return Result(value=hsm.hart_get_status(desc.vharts, req.args[0]))


def _handle_send_ipi(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        targets = hsm.send_ipi(desc.vharts, caller, req.args[0], req.args[1])
    return Result(extra={"trace": {"targets": targets}})


def _handle_remote_fence(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        targets = hsm.remote_fence(desc.vharts, caller, req.args[0], req.args[1])
    return Result(extra={"trace": {"targets": targets}})


def _handle_set_timer(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        hsm.program_timer(desc.vharts[caller], req.args[0])
    return Result(extra={"deadline": req.args[0]})


def _set_timer_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    view.set_csr("vstimecmp", result.extra["deadline"])
    abi.return_to_caller(tsm, req, result, view)


# ── Internal handlers (exits, interrupts, faults) ─────────────────────

def _exit_constructor(view: ReadView, extra: dict) -> Request:
    return Request("exit", [view.a(n) for n in range(8)], view.domain, dict(extra))


def _handle_exit(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    reason: ExitReason = req.extra["reason"]
    desc = tsm.tvms.get(req.caller.tvm_id)
    disclosed = desc.vharts[req.caller.vhart].timer.disclosed_value if desc else 0
    return Result(extra={"reason": reason, "detail": req.extra["detail"], "disclosed": disclosed,
                         "trace": {"exit": reason.label}})


def _exit_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    reason = result.extra["reason"]
    view.set_a(0, 0)
    view.set_a(1, int(reason))
    view.set_csr("scause", int(reason))
    view.set_csr("stval", result.extra["detail"])
    view.set_csr("vstimecmp", result.extra["disclosed"])
    if reason is ExitReason.GUEST_ECALL:
        for n, value in enumerate(req.args):
            view.set_reg(abi.EXIT_REG_BASE + n, value)


def _handle_timer(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, caller = _caller(tsm, ctx)
    with desc.lock:
        desc.vharts[caller].timer_pending = False
    return Result()


def _timer_destructor(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    view.or_csr("vsip", abi.STIP)


def _handle_page_fault(tsm: Tsm, ctx: FsmContext, req: Request) -> Result:
    desc, _ = _caller(tsm, ctx)
    gpa = req.extra["gpa"]
    try:
        materialize_zero_page(desc.tables, tsm.allocator, gpa)
    except OutOfMemory:
        logger.warning("TVM %d out of memory at gpa %#x: killing it", desc.id, gpa)
        return Result(exit=(ExitReason.TVM_KILLED, gpa), extra={"trace": {"gpa": hex(gpa), "oom": True}})
    return Result(extra={"trace": {"gpa": hex(gpa)}})


def _no_writes(tsm: Tsm, req: Request, result: Result, view: WriteView) -> None:
    pass


# ── Dispatch tables ───────────────────────────────────────────────────

def _spec(name, transform, destructor=abi.return_to_caller, target="caller"):
    return HandlerSpec(name, abi.default_constructor(name), transform, destructor, target)


_HYPERVISOR_HANDLERS = {
    "promote": _spec("promote", _handle_promote),
    "run": _spec("run", _handle_run, _run_destructor, target="tvm"),
    "destroy": _spec("destroy", _handle_destroy),
    "tsm_info": _spec("tsm_info", _handle_tsm_info, _tsm_info_destructor),
    "get_spec_version": _spec("get_spec_version", _handle_spec_version),
    "probe_extension": _spec("probe_extension", _handle_extension_query),
    "system_reset": _spec("system_reset", _handle_system_reset),
}

_TVM_HANDLERS = {
    "share_page": _spec("share_page", _handle_share_page),
    "retrieve_secret": _spec("retrieve_secret", _handle_retrieve_secret, _retrieve_secret_destructor),
    "allow_interrupt": _spec("allow_interrupt", _handle_allow_interrupt),
    "hart_start": _spec("hart_start", _handle_hart_start),
    "hart_stop": _spec("hart_stop", _handle_hart_stop, _hart_stop_destructor),
    "hart_get_status": _spec("hart_get_status", _handle_hart_get_status),
    "hart_suspend": _spec("hart_suspend", _handle_hart_suspend),
    "send_ipi": _spec("send_ipi", _handle_send_ipi),
    "remote_fence": _spec("remote_fence", _handle_remote_fence),
    "set_timer": _spec("set_timer", _handle_set_timer, _set_timer_destructor),
    "get_spec_version": _spec("get_spec_version", _handle_spec_version),
    "probe_extension": _spec("probe_extension", _handle_extension_query),
}

_EXIT_HANDLER = HandlerSpec("exit", _exit_constructor, _handle_exit, _exit_destructor, target="hypervisor")
_TIMER_HANDLER = _spec("timer_interrupt", _handle_timer, _timer_destructor)
_PAGE_FAULT_HANDLER = _spec("page_fault", _handle_page_fault, _no_writes)
