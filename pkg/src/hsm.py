# hsm.py - Virtual-hart lifecycle, IPIs, remote fences, timers, interrupt filtering
"""
Operations here act on a TVM's plain list of VHart records so they can be
exercised (and model-checked) without a running TSM. The TSM serializes
calls with the owning descriptor's lock and applies register effects.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

from abi import SEIP, SSIP, STIP
from errors import AlreadyAvailable, HartNotStarted, InvalidParam, InvalidState, TvmBusy
from machine import DomainTag

logger = logging.getLogger(__name__)

NO_DEADLINE = 0xFFFF_FFFF_FFFF_FFFF
ALL_HARTS = 0xFFFF_FFFF_FFFF_FFFF  # hart_mask_base value meaning "every vhart"

SUSPEND_RETENTIVE = 0x0000_0000
SUSPEND_NON_RETENTIVE = 0x8000_0000


class HartState(Enum):
    STOPPED = "Stopped"
    START_PENDING = "StartPending"
    STARTED = "Started"
    SUSPENDED = "Suspended"

    @property
    def sbi_status(self) -> int:
        return _SBI_STATUS[self]


_SBI_STATUS = {
    HartState.STARTED: 0,
    HartState.STOPPED: 1,
    HartState.START_PENDING: 2,
    HartState.SUSPENDED: 4,
}

HSM_EDGES = frozenset({
    (HartState.STOPPED, HartState.START_PENDING),
    (HartState.START_PENDING, HartState.STARTED),
    (HartState.STARTED, HartState.STOPPED),
    (HartState.STARTED, HartState.SUSPENDED),
    (HartState.SUSPENDED, HartState.STARTED),
})


@dataclass
class TimerState:
    vs_timer_cmp: int = NO_DEADLINE
    # only ever changed by program_timer; copied to the hypervisor on exit
    disclosed_value: int = 0
    armed: bool = False


@dataclass
class VHart:
    index: int
    state: HartState = HartState.STOPPED
    start_gpa: int = 0
    opaque: int = 0
    suspend_type: int = SUSPEND_RETENTIVE
    pending_ipis: int = 0
    ipis_delivered: int = 0
    fence_pending: bool = False
    timer: TimerState = field(default_factory=TimerState)
    timer_pending: bool = False
    running_on: Optional[int] = None
    history: List[Tuple[HartState, HartState]] = field(default_factory=list)


@dataclass
class EntryInfo:
    """What the TSM must apply to the vhart's registers before executing it."""

    started: bool = False
    resumed: bool = False
    regs: Dict[str, int] = field(default_factory=dict)  # "a0", "a1", "sepc"
    vsip_bits: int = 0
    ipis: int = 0
    fence: bool = False
    timer: bool = False


def _transition(vhart: VHart, new: HartState) -> None:
    edge = (vhart.state, new)
    if edge not in HSM_EDGES:
        raise InvalidState(f"no HSM edge {vhart.state.value} -> {new.value}", vhart=vhart.index)
    vhart.history.append(edge)
    logger.debug("vhart %d: %s -> %s", vhart.index, vhart.state.value, new.value)
    vhart.state = new


def _get(vharts: List[VHart], index: int) -> VHart:
    if not 0 <= index < len(vharts):
        raise InvalidParam(f"no vhart {index}")
    return vharts[index]


def _require_started(vhart: VHart) -> None:
    if vhart.state is not HartState.STARTED:
        raise InvalidState(f"caller vhart {vhart.index} is {vhart.state.value}")


def targets_from_mask(vharts: List[VHart], mask: int, base: int) -> List[VHart]:
    """SBI hart-mask decoding: bit i selects vhart base+i; base all-ones selects every vhart."""
    if base == ALL_HARTS:
        return list(vharts)
    out = []
    bit = 0
    while mask >> bit:
        if (mask >> bit) & 1:
            out.append(_get(vharts, base + bit))
        bit += 1
    return out


# --- Lifecycle ---

def hart_start(vharts: List[VHart], caller: int, target: int, start_gpa: int, opaque: int,
               gpa_ok: Callable[[int], bool] = lambda gpa: True) -> VHart:
    _require_started(_get(vharts, caller))
    vhart = _get(vharts, target)
    if vhart.state is not HartState.STOPPED:
        raise AlreadyAvailable(f"vhart {target} is {vhart.state.value}")
    if not gpa_ok(start_gpa):
        raise InvalidParam("start address is not mapped", gpa=hex(start_gpa))
    vhart.start_gpa, vhart.opaque = start_gpa, opaque
    _transition(vhart, HartState.START_PENDING)
    return vhart


def hart_stop(vharts: List[VHart], caller: int) -> VHart:
    """Caller stops itself. The TSM scrubs its registers."""
    vhart = _get(vharts, caller)
    if vhart.state is not HartState.STARTED:
        raise InvalidState(f"vhart {caller} is {vhart.state.value}")
    _transition(vhart, HartState.STOPPED)
    vhart.pending_ipis = 0
    vhart.fence_pending = False
    vhart.timer = TimerState()
    vhart.timer_pending = False
    return vhart


def hart_suspend(vharts: List[VHart], caller: int, suspend_type: int = SUSPEND_RETENTIVE,
                 resume_gpa: int = 0, opaque: int = 0) -> VHart:
    vhart = _get(vharts, caller)
    if vhart.state is not HartState.STARTED:
        raise InvalidState(f"vhart {caller} is {vhart.state.value}")
    if suspend_type not in (SUSPEND_RETENTIVE, SUSPEND_NON_RETENTIVE):
        raise InvalidParam(f"unsupported suspend type {suspend_type:#x}")
    vhart.suspend_type = suspend_type
    vhart.start_gpa, vhart.opaque = resume_gpa, opaque
    _transition(vhart, HartState.SUSPENDED)
    return vhart


def hart_get_status(vharts: List[VHart], target: int) -> int:
    return _get(vharts, target).state.sbi_status


def enter_vhart(vhart: VHart, hart_id: int) -> EntryInfo:
    """Prepare a vhart to execute on a physical hart; collects everything pending for it."""
    if vhart.state is HartState.STOPPED:
        raise HartNotStarted(f"vhart {vhart.index} is stopped")
    if vhart.running_on is not None:
        raise TvmBusy(f"vhart {vhart.index} already running on hart {vhart.running_on}")
    info = EntryInfo()
    if vhart.state is HartState.START_PENDING:
        _transition(vhart, HartState.STARTED)
        info.started = True
        info.regs = {"a0": vhart.index, "a1": vhart.opaque, "sepc": vhart.start_gpa}
    elif vhart.state is HartState.SUSPENDED:
        _transition(vhart, HartState.STARTED)
        info.resumed = True
        if vhart.suspend_type == SUSPEND_NON_RETENTIVE:
            info.regs = {"a0": vhart.index, "a1": vhart.opaque, "sepc": vhart.start_gpa}
    if vhart.pending_ipis:
        info.ipis = vhart.pending_ipis
        info.vsip_bits |= SSIP
        vhart.ipis_delivered += vhart.pending_ipis
        vhart.pending_ipis = 0
    if vhart.fence_pending:
        info.fence = True
        vhart.fence_pending = False
    if vhart.timer_pending:
        info.timer = True
        info.vsip_bits |= STIP
        vhart.timer_pending = False
    vhart.running_on = hart_id
    return info


def leave_vhart(vhart: VHart) -> None:
    vhart.running_on = None


# --- IPIs, fences, timer ---

def send_ipi(vharts: List[VHart], caller: int, mask: int, base: int = 0) -> List[int]:
    _require_started(_get(vharts, caller))
    targets = targets_from_mask(vharts, mask, base)
    for vhart in targets:
        vhart.pending_ipis += 1
    return [v.index for v in targets]


def remote_fence(vharts: List[VHart], caller: int, mask: int, base: int = 0) -> List[int]:
    _require_started(_get(vharts, caller))
    targets = targets_from_mask(vharts, mask, base)
    for vhart in targets:
        vhart.fence_pending = True
    return [v.index for v in targets]


def program_timer(vhart: VHart, deadline: int) -> None:
    """Arm the vhart's timer. The deadline is what gets reclassified to the hypervisor."""
    vhart.timer.vs_timer_cmp = deadline
    vhart.timer.disclosed_value = deadline
    vhart.timer.armed = deadline != NO_DEADLINE
    vhart.timer_pending = False


def check_timer(vhart: VHart, clock: int) -> bool:
    """Fire the timer if its deadline has passed. Returns True exactly once per programming."""
    if vhart.timer.armed and clock >= vhart.timer.vs_timer_cmp:
        vhart.timer.armed = False
        vhart.timer_pending = True
        return True
    return False


# --- External interrupts ---

class Disposition(Enum):
    EXIT_TO_HYPERVISOR = "exit"
    DELEGATED = "delegated"
    INJECTED = "injected"
    DROPPED = "dropped"


def route_external_interrupt(flow: DomainTag, irq: int) -> Disposition:
    """Interrupts arriving while a TVM runs go back to the hypervisor; otherwise they were never ours."""
    if flow.is_tvm:
        logger.info("external irq %d during %s: exit to hypervisor", irq, flow)
        return Disposition.EXIT_TO_HYPERVISOR
    return Disposition.DELEGATED


def filter_injection(allowed: Set[int], irq: int) -> Disposition:
    if irq in allowed:
        return Disposition.INJECTED
    logger.warning("dropping injection of irq %d (allowed: %s)", irq, sorted(allowed) or "none")
    return Disposition.DROPPED


def injection_bits(disposition: Disposition) -> int:
    return SEIP if disposition is Disposition.INJECTED else 0


def observed_edges(vharts: Iterable[VHart]) -> Set[Tuple[HartState, HartState]]:
    return {edge for v in vharts for edge in v.history}
