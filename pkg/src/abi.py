# abi.py - ABI numbering, exit reasons, and the handler discipline
"""
Register convention: a7 = extension id, a6 = function id, a0..a5 arguments.
On return a0 = error code, a1 = value.

Handlers run in three phases. The constructor sees a read-only copy of the
caller's saved state, the transform does the work against TSM services, and
the destructor writes the result through a view bound to one declared
target domain. Writes anywhere else raise and are recorded.
"""
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Tuple

from errors import Denied
from machine import CSR_NAMES, DomainTag, HartArchState

# ── Extensions ─────────────────────────────────────────────────────────

EXT_BASE = 0x10
EXT_TIME = 0x54494D45
EXT_IPI = 0x735049
EXT_RFENCE = 0x52464E43
EXT_HSM = 0x48534D
EXT_ACETVM = 0x54565331
EXT_SRST = 0x53525354

# ACETVM, hypervisor side
FID_PROMOTE = 0
FID_RUN = 1
FID_DESTROY = 2
FID_TSM_INFO = 6
# ACETVM, TVM side
FID_SHARE_PAGE = 3
FID_RETRIEVE_SECRET = 4
FID_ALLOW_INTERRUPT = 5

# Base
FID_GET_SPEC_VERSION = 0
FID_PROBE_EXTENSION = 3
SPEC_VERSION = (2 << 24) | 0

# HSM
FID_HART_START = 0
FID_HART_STOP = 1
FID_HART_GET_STATUS = 2
FID_HART_SUSPEND = 3

FID_SEND_IPI = 0
FID_REMOTE_FENCE_I = 0
FID_SET_TIMER = 0

# System reset: the hypervisor may shut down or reboot; a TVM request is forwarded to it
FID_SYSTEM_RESET = 0
RESET_SHUTDOWN = 0
RESET_COLD_REBOOT = 1
RESET_WARM_REBOOT = 2
RESET_TYPES = {RESET_SHUTDOWN: "shutdown", RESET_COLD_REBOOT: "cold_reboot", RESET_WARM_REBOOT: "warm_reboot"}

NO_IRQ = 0xFFFF_FFFF_FFFF_FFFF

# CSR interrupt-pending bits
SSIP = 1 << 1
STIP = 1 << 5
SEIP = 1 << 9

# Forwarded guest ecalls expose the TVM's a0..a7 in hypervisor s2..s9
EXIT_REG_BASE = 18


class ExitReason(IntEnum):
    GUEST_ECALL = 1
    EXTERNAL_INTERRUPT = 2
    HART_START_REQUEST = 3
    HART_STOPPED = 4
    HART_SUSPENDED = 5
    YIELD = 6
    IDLE = 7
    GUEST_FAULT = 8
    TVM_KILLED = 9
    SOFTWARE_INTERRUPT = 10

    @property
    def label(self) -> str:
        return "".join(w.capitalize() for w in self.name.split("_"))

    @classmethod
    def parse(cls, text: str) -> "ExitReason":
        for reason in cls:
            if text in (reason.label, reason.name, str(int(reason))):
                return reason
        raise ValueError(f"unknown exit reason: {text}")


# (extension, fid) -> call name, split by which side may issue it
HYPERVISOR_CALLS: Dict[Tuple[int, int], str] = {
    (EXT_ACETVM, FID_PROMOTE): "promote",
    (EXT_ACETVM, FID_RUN): "run",
    (EXT_ACETVM, FID_DESTROY): "destroy",
    (EXT_ACETVM, FID_TSM_INFO): "tsm_info",
    (EXT_BASE, FID_GET_SPEC_VERSION): "get_spec_version",
    (EXT_BASE, FID_PROBE_EXTENSION): "probe_extension",
    (EXT_SRST, FID_SYSTEM_RESET): "system_reset",
}

TVM_CALLS: Dict[Tuple[int, int], str] = {
    (EXT_ACETVM, FID_SHARE_PAGE): "share_page",
    (EXT_ACETVM, FID_RETRIEVE_SECRET): "retrieve_secret",
    (EXT_ACETVM, FID_ALLOW_INTERRUPT): "allow_interrupt",
    (EXT_HSM, FID_HART_START): "hart_start",
    (EXT_HSM, FID_HART_STOP): "hart_stop",
    (EXT_HSM, FID_HART_GET_STATUS): "hart_get_status",
    (EXT_HSM, FID_HART_SUSPEND): "hart_suspend",
    (EXT_IPI, FID_SEND_IPI): "send_ipi",
    (EXT_RFENCE, FID_REMOTE_FENCE_I): "remote_fence",
    (EXT_TIME, FID_SET_TIMER): "set_timer",
    (EXT_BASE, FID_GET_SPEC_VERSION): "get_spec_version",
    (EXT_BASE, FID_PROBE_EXTENSION): "probe_extension",
}

HYPERVISOR_EXTENSIONS = frozenset({EXT_ACETVM, EXT_BASE, EXT_SRST})
TVM_EXTENSIONS = frozenset({EXT_ACETVM, EXT_BASE, EXT_HSM, EXT_IPI, EXT_RFENCE, EXT_TIME})
# always handed to the hypervisor when a TVM calls them
FORWARDED_EXTENSIONS = frozenset({EXT_SRST})

CALL_IDS = {name: key for key, name in {**HYPERVISOR_CALLS, **TVM_CALLS}.items()}

EXTENSION_NAMES = {
    "base": EXT_BASE, "time": EXT_TIME, "ipi": EXT_IPI, "rfence": EXT_RFENCE,
    "hsm": EXT_HSM, "acetvm": EXT_ACETVM, "srst": EXT_SRST,
}


# ── TSM info record ───────────────────────────────────────────────────

TSM_INFO_FORMAT = "<IIIIQQQQ"
TSM_INFO_BYTES = struct.calcsize(TSM_INFO_FORMAT)
TSM_STATE_READY = 2
TSM_IMPL_ID = 0xACE
TSM_VERSION = 1


def encode_tsm_info(state_pages: int, max_vharts: int, vhart_state_pages: int, capabilities: int = 0) -> bytes:
    return struct.pack(TSM_INFO_FORMAT, TSM_STATE_READY, TSM_IMPL_ID, TSM_VERSION, 0,
                       capabilities, state_pages, max_vharts, vhart_state_pages)


# ── Views ─────────────────────────────────────────────────────────────

class ReadView:
    """Read-only window on a saved hart state."""

    def __init__(self, state: HartArchState):
        self._state = state.copy()

    @property
    def domain(self) -> DomainTag:
        return self._state.domain_tag

    def a(self, n: int) -> int:
        return self._state.a(n)

    def get(self, index: int) -> int:
        return self._state.get(index)

    def csr(self, name: str) -> int:
        return self._state.csr(name)

    def args(self) -> List[int]:
        return [self._state.a(n) for n in range(6)]


class WriteView:
    """Write access to exactly one domain. Every write lands in `write_set`."""

    def __init__(self, target: DomainTag, state: HartArchState,
                 memory_writer: Optional[Callable[[int, bytes], None]] = None):
        self.target = target
        self._state = state
        self._memory_writer = memory_writer
        self.write_set: List[str] = []
        self.escapes: List[str] = []

    def _guard(self, domain: DomainTag, what: str) -> None:
        if domain != self.target:
            self.escapes.append(f"{domain}:{what}")
            raise Denied("write outside the declared target domain", target=str(self.target), attempted=str(domain))

    def set_a(self, n: int, value: int, domain: Optional[DomainTag] = None) -> None:
        self._guard(domain or self.target, f"a{n}")
        self._state.set_a(n, value)
        self.write_set.append(f"{self.target}:a{n}")

    def set_reg(self, index: int, value: int, domain: Optional[DomainTag] = None) -> None:
        self._guard(domain or self.target, f"x{index}")
        self._state.set(index, value)
        self.write_set.append(f"{self.target}:x{index}")

    def set_csr(self, name: str, value: int, domain: Optional[DomainTag] = None) -> None:
        if name not in CSR_NAMES:
            raise KeyError(name)
        self._guard(domain or self.target, name)
        self._state.set_csr(name, value)
        self.write_set.append(f"{self.target}:{name}")

    def or_csr(self, name: str, bits: int) -> None:
        self.set_csr(name, self._state.csr(name) | bits)

    def scrub(self) -> None:
        self._state.scrub()
        self.write_set.append(f"{self.target}:all")

    def write_memory(self, address: int, data: bytes, domain: Optional[DomainTag] = None) -> None:
        self._guard(domain or self.target, "mem")
        if self._memory_writer is None:
            raise Denied("no memory access granted to this handler")
        self._memory_writer(address, data)
        self.write_set.append(f"{self.target}:mem@{address:#x}")


# ── Handler discipline ────────────────────────────────────────────────

@dataclass
class Request:
    call: str
    args: List[int]
    caller: DomainTag
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Result:
    error: int = 0
    value: int = 0
    # optional follow-up: leave the current domain with this exit
    exit: Optional[Tuple[ExitReason, int]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class HandlerSpec:
    """`target` names the domain the destructor may write: "caller", "hypervisor" or "tvm"."""

    name: str
    constructor: Callable[..., Request]
    transform: Callable[..., Result]
    destructor: Callable[..., None]
    target: str = "caller"


def default_constructor(call: str):
    def construct(view: ReadView, extra: Dict[str, Any]) -> Request:
        return Request(call, view.args(), view.domain, dict(extra))
    return construct


def return_to_caller(_tsm, _req: Request, result: Result, view: WriteView) -> None:
    view.set_a(0, result.error)
    view.set_a(1, result.value)
