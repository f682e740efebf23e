# scenario.py - Declarative scenario files and the runner that drives the TSM with them
"""
Scenario files are versioned, sectioned text (see scenarios/README.md):

    ACESIM-SCENARIO 1
    [machine]   key = value
    [memory]    ADDR: HEX bytes written by the hypervisor before the script
    [image N]   a VM staged in non-confidential memory for promotion
    [script]    one directive per line; `expect ...` lines check the
                directive before them

Parsing is strict: every problem is a ParseError carrying the line number
and the offending field. Running never raises for TSM errors; they become
outcomes that expectations check.
"""
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from dotenv import load_dotenv

import abi
import kem
from abi import ExitReason
from attestation import MeasurementRegisters, TapBlob, TsmAttestationKey
from errors import AceError, ParseError, code_for, error_name
from machine import CSR_NAMES, HYPERVISOR, MachineConfig, PageSize, build_machine
from tracelog import TraceLog, audit_all, calls_between
from tsm import EventKind, GuestEvent, Tsm
from vmimage import ImageBuilder, NcArena, StagedImage, flip_bit, minimal_fdt

load_dotenv()

logger = logging.getLogger(__name__)

SCENARIO_HEADER = "ACESIM-SCENARIO 1"
SCENARIO_SUFFIX = ".scn"

DEFAULT_MACHINE = dict(
    memory_base=0x8000_0000,
    memory_size=2 << 30,
    confidential_base=0xC000_0000,
    confidential_size=1 << 30,
    hart_count=2,
    alignment=PageSize.SIZE_1G,
)


def scenario_dir() -> Path:
    default = Path(__file__).resolve().parent.parent / "scenarios"
    return Path(os.getenv("ACESIM_SCENARIO_DIR", str(default)))


# ── Parsed form ───────────────────────────────────────────────────────

@dataclass
class Expectation:
    kind: str
    args: Tuple[str, ...]
    line: int
    text: str


@dataclass
class Directive:
    verb: str
    args: Tuple[str, ...]
    line: int
    text: str
    hart: int = 0
    expects: List[Expectation] = field(default_factory=list)


@dataclass
class ImageSpec:
    name: str
    line: int
    entry: int = 0x8000_0000
    vharts: int = 1
    ops: List[Tuple[str, tuple]] = field(default_factory=list)
    fdt: Optional[bytes] = None
    secrets: List[Tuple[int, bytes]] = field(default_factory=list)
    reference: str = "measured"
    lockbox: str = "tsm"
    tap_flips: List[int] = field(default_factory=list)
    # file holding an encoded TAP; replaces secret, reference and lockbox
    tap: Optional[Path] = None
    # boot hart registers by name: x0..x31, a0..a7 or a CSR
    boot: Dict[str, int] = field(default_factory=dict)


@dataclass
class Scenario:
    machine: MachineConfig
    sizes: Tuple[PageSize, ...] = (PageSize.SIZE_4K, PageSize.SIZE_2M, PageSize.SIZE_1G)
    memory_image: List[Tuple[int, bytes]] = field(default_factory=list)
    images: Dict[str, ImageSpec] = field(default_factory=dict)
    script: List[Directive] = field(default_factory=list)
    source: str = "<string>"

    @property
    def name(self) -> str:
        return Path(self.source).stem


# ── Lexical helpers ───────────────────────────────────────────────────

def _int(text: str, line: int, what: str) -> int:
    try:
        return int(text.replace("_", ""), 0)
    except ValueError:
        raise ParseError(f"{what}: not a number: {text!r}", line=line, field=what) from None


def _bytes(text: str, line: int, what: str) -> bytes:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1].encode()
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise ParseError(f"{what}: bad hex bytes", line=line, field=what) from None


def _size(text: str, line: int) -> PageSize:
    try:
        return PageSize.parse(text)
    except ValueError:
        raise ParseError(f"unknown page size {text!r}", line=line, field="size") from None


# ── Section parsers ───────────────────────────────────────────────────

_MACHINE_KEYS = {
    "memory_base": "memory_base",
    "memory_size": "memory_size",
    "confidential_base": "confidential_base",
    "confidential_size": "confidential_size",
    "harts": "hart_count",
}

_KEY_VALUE = re.compile(r"^(\w+)\s*=\s*(.*)$")
_IMAGE_KEY = re.compile(r"^([\w.]+)\s*=\s*(.*)$")
_BOOT_REG = re.compile(r"^(?:x([0-9]|[12][0-9]|3[01])|a([0-7]))$")
_HEX_LINE = re.compile(r"^(\S+)\s*:\s*(.+)$")


def _parse_machine(lines, scenario_kw: dict) -> MachineConfig:
    values = dict(DEFAULT_MACHINE)
    for lineno, text in lines:
        m = _KEY_VALUE.match(text)
        if not m:
            raise ParseError(f"expected key = value: {text!r}", line=lineno)
        key, value = m.groups()
        if key in _MACHINE_KEYS:
            values[_MACHINE_KEYS[key]] = _int(value, lineno, key)
        elif key == "alignment":
            values["alignment"] = _size(value, lineno)
        elif key == "sizes":
            scenario_kw["sizes"] = tuple(sorted(_size(v, lineno) for v in value.split(",")))
        else:
            raise ParseError(f"unknown machine key {key!r}", line=lineno, field=key)
    return MachineConfig(**values)


def _parse_memory(lines) -> List[Tuple[int, bytes]]:
    out = []
    for lineno, text in lines:
        m = _HEX_LINE.match(text)
        if not m:
            raise ParseError(f"expected ADDR: HEX: {text!r}", line=lineno)
        out.append((_int(m.group(1), lineno, "address"), _bytes(m.group(2), lineno, "bytes")))
    return out


_IMAGE_VALUE = {
    "code": re.compile(r"^(\S+)\s*:\s*(.+)$"),
    "page": re.compile(r"^(\S+)(?:\s+(\w+))?(?:\s*:\s*(.+))?$"),
    "raw_leaf": re.compile(r"^(\S+)\s*->\s*(\S+)(?:\s+(\w+))?$"),
    "raw_entry": re.compile(r"^(\S+)\s+level\s+(\d)\s*=\s*(\S+)$"),
    "loop": re.compile(r"^(\S+)$"),
    "secret": re.compile(r"^(\S+)\s*:\s*(.+)$"),
}


def _boot_register(reg: str, line: int) -> str:
    if reg in CSR_NAMES or _BOOT_REG.match(reg):
        return reg
    raise ParseError(f"unknown boot register {reg!r}", line=line, field="boot")


def _read_tap(path: Path, line: int) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read TAP: {exc}", line=line, field="tap") from None
    try:
        TapBlob.parse(data)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc.args[0]}", line=line, field="tap") from None
    return data


def _parse_image(name: str, header_line: int, lines, base: Path = Path(".")) -> ImageSpec:
    spec = ImageSpec(name, header_line)
    for lineno, text in lines:
        m = _IMAGE_KEY.match(text)
        if not m:
            raise ParseError(f"expected key = value: {text!r}", line=lineno)
        key, value = m.group(1), m.group(2).strip()
        if key == "entry":
            spec.entry = _int(value, lineno, key)
        elif key == "vharts":
            spec.vharts = _int(value, lineno, key)
        elif key == "fdt":
            spec.fdt = minimal_fdt() if value == "minimal" else _bytes(value, lineno, key)
        elif key == "reference":
            if value not in ("measured", "mismatch"):
                raise ParseError("reference must be measured or mismatch", line=lineno, field=key)
            spec.reference = value
        elif key == "lockbox":
            if value not in ("tsm", "foreign"):
                raise ParseError("lockbox must be tsm or foreign", line=lineno, field=key)
            spec.lockbox = value
        elif key == "tap_flip":
            spec.tap_flips.append(_int(value, lineno, key))
        elif key == "tap":
            spec.tap = Path(value) if Path(value).is_absolute() else base / value
        elif key.startswith("boot."):
            spec.boot[_boot_register(key[5:], lineno)] = _int(value, lineno, key)
        elif key in _IMAGE_VALUE:
            vm = _IMAGE_VALUE[key].match(value)
            if not vm:
                raise ParseError(f"malformed {key} value {value!r}", line=lineno, field=key)
            g = vm.groups()
            if key == "code":
                spec.ops.append((key, (_int(g[0], lineno, key), _bytes(g[1], lineno, key))))
            elif key == "page":
                size = _size(g[1], lineno) if g[1] else PageSize.SIZE_4K
                data = _bytes(g[2], lineno, key) if g[2] else b""
                spec.ops.append((key, (_int(g[0], lineno, key), data, size)))
            elif key == "raw_leaf":
                size = _size(g[2], lineno) if g[2] else PageSize.SIZE_4K
                spec.ops.append((key, (_int(g[0], lineno, key), _int(g[1], lineno, key), size)))
            elif key == "raw_entry":
                spec.ops.append((key, (_int(g[0], lineno, key), int(g[1]), _int(g[2], lineno, key))))
            elif key == "loop":
                spec.ops.append((key, (_int(g[0], lineno, key),)))
            else:
                spec.secrets.append((_int(g[0], lineno, key), _bytes(g[1], lineno, key)))
        else:
            raise ParseError(f"unknown image key {key!r}", line=lineno, field=key)
    if spec.tap is not None and (spec.secrets or spec.reference != "measured" or spec.lockbox != "tsm"):
        raise ParseError("tap replaces secret, reference and lockbox", line=header_line, field="tap")
    return spec


# directive grammar: verb -> pattern for the rest of the line
_SCRIPT_SYNTAX: Dict[str, re.Pattern] = {
    "on": re.compile(r"^hart (\d+)$"),
    "mark": re.compile(r"^(\S+)$"),
    "promote": re.compile(r"^(\w+)(?: as (\w+))?$"),
    "ecall": re.compile(r"^(\S+) (\S+)((?: \S+)*)$"),
    "run": re.compile(r"^(\w+) (\S+)(?: irq (\S+))?(?: reply (\S+) (\S+))?$"),
    "destroy": re.compile(r"^(\S+)$"),
    "guest": re.compile(r"^(\w+) (\d+): (.+)$"),
    "continue": re.compile(r"^$"),
    "interrupt": re.compile(r"^(\S+)$"),
    "ipi": re.compile(r"^$"),
    "advance_clock": re.compile(r"^(\S+)$"),
    "hv_write": re.compile(r"^(\S+) (.+)$"),
    "hv_read": re.compile(r"^(\S+) (\S+)$"),
    "snapshot": re.compile(r"^(\w*)$"),
}

_EXPECT_SYNTAX: Dict[str, re.Pattern] = {
    "ok": re.compile(r"^$"),
    "error": re.compile(r"^(\w+)$"),
    "value": re.compile(r"^(\S+)$"),
    "exit": re.compile(r"^(\w+)(?: (\S+))?$"),
    "paused": re.compile(r"^$"),
    "trace": re.compile(r"^(\w+) (\S+)((?: \S+=\S+)*)$"),
    "no_trace": re.compile(r"^(\w+) (\S+)((?: \S+=\S+)*)$"),
    "allocator": re.compile(r"^= snapshot(?: (\w+))?$"),
    "hsm": re.compile(r"^(\w+) (\d+) (\w+)$"),
    "read": re.compile(r"^(.+)$"),
    "data": re.compile(r"^(.+)$"),
    "calls_between": re.compile(r"^(\S+) (\S+) (\d+)$"),
    "hv": re.compile(r"^(\w+) (\S+)$"),
    "tvms": re.compile(r"^(\d+)$"),
    "audit": re.compile(r"^clean$"),
}

_GUEST_SIMPLE = re.compile(r"^(yield|idle|pause)$")
_GUEST_READ = re.compile(r"^read (\S+) (\S+)$")
_GUEST_WRITE = re.compile(r"^write (\S+) (.+)$")
_GUEST_ECALL = re.compile(r"^ecall (\S+) (\S+)((?: \S+)*)$")
_GUEST_CALL = re.compile(r"^(\w+)((?: \S+)*)$")


def _split_words(match_text: str) -> Tuple[str, ...]:
    return tuple(match_text.split()) if match_text else ()


def _parse_expect(rest: str, lineno: int, text: str) -> Expectation:
    kind, _, args = rest.partition(" ")
    pattern = _EXPECT_SYNTAX.get(kind)
    if pattern is None:
        raise ParseError(f"unknown expectation {kind!r}", line=lineno, field=kind)
    m = pattern.match(args.strip())
    if not m:
        raise ParseError(f"malformed expectation: {text!r}", line=lineno, field=kind)
    if kind == "error":
        try:
            code_for(m.group(1))
        except KeyError:
            raise ParseError(f"unknown error name {m.group(1)!r}", line=lineno, field="error") from None
    if kind == "exit":
        try:
            ExitReason.parse(m.group(1))
        except ValueError:
            raise ParseError(f"unknown exit reason {m.group(1)!r}", line=lineno, field="exit") from None
    groups = m.groups()
    if kind in ("trace", "no_trace"):
        groups = groups[:2] + _split_words(groups[2])
    return Expectation(kind, tuple(g for g in groups if g is not None), lineno, text)


def _parse_guest_event(text: str, lineno: int) -> GuestEvent:
    body, sep, expect = text.partition(" expect ")
    expect = expect.strip() if sep else None
    if expect is not None:
        _parse_expect(expect, lineno, text)
    body = body.strip()
    if _GUEST_SIMPLE.match(body):
        return GuestEvent(body, expect=expect, line=lineno)
    m = _GUEST_READ.match(body)
    if m:
        return GuestEvent("read", gpa=_int(m.group(1), lineno, "gpa"), length=_int(m.group(2), lineno, "length"),
                          expect=expect, line=lineno)
    m = _GUEST_WRITE.match(body)
    if m:
        return GuestEvent("write", gpa=_int(m.group(1), lineno, "gpa"), data=_bytes(m.group(2), lineno, "data"),
                          expect=expect, line=lineno)
    m = _GUEST_ECALL.match(body)
    if m:
        ext = abi.EXTENSION_NAMES.get(m.group(1))
        ext = ext if ext is not None else _int(m.group(1), lineno, "extension")
        args = tuple(_int(a, lineno, "argument") for a in _split_words(m.group(3)))
        return GuestEvent("ecall", ext, _int(m.group(2), lineno, "fid"), args, expect=expect, line=lineno)
    m = _GUEST_CALL.match(body)
    if m and m.group(1) in abi.CALL_IDS:
        ext, fid = abi.CALL_IDS[m.group(1)]
        args = tuple(_int(a, lineno, "argument") for a in _split_words(m.group(2)))
        return GuestEvent("ecall", ext, fid, args, expect=expect, line=lineno)
    raise ParseError(f"unknown guest event {body!r}", line=lineno, field="guest")


def _parse_script(lines) -> List[Directive]:
    script: List[Directive] = []
    hart = 0
    for lineno, text in lines:
        verb, _, rest = text.partition(" ")
        rest = rest.strip()
        if verb == "expect":
            if not script:
                raise ParseError("expect without a preceding directive", line=lineno, field="expect")
            script[-1].expects.append(_parse_expect(rest, lineno, text))
            continue
        pattern = _SCRIPT_SYNTAX.get(verb)
        if pattern is None:
            raise ParseError(f"unknown directive {verb!r}", line=lineno, field=verb)
        m = pattern.match(rest)
        if not m:
            raise ParseError(f"malformed {verb} directive: {text!r}", line=lineno, field=verb)
        if verb == "run":
            # positional: tvm, vhart, irq, reply error, reply value ("" when absent)
            args = tuple(g or "" for g in m.groups())
        else:
            args = tuple(g for g in m.groups() if g is not None)
        if verb == "on":
            hart = int(args[0])
        if verb == "ecall":
            args = args[:2] + _split_words(args[2])
        if verb == "guest":
            _parse_guest_event(args[2], lineno)
        script.append(Directive(verb, args, lineno, text, hart))
    return script


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCENARIO_HEADER:
        raise ParseError(f"first line must be {SCENARIO_HEADER!r}", line=1, field="header")

    sections: List[Tuple[str, int, list]] = []
    for lineno, raw in enumerate(lines[1:], start=2):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            sections.append((stripped[1:-1].strip(), lineno, []))
            continue
        if not sections:
            raise ParseError("content before the first section", line=lineno)
        sections[-1][2].append((lineno, stripped))

    base = Path(source).parent if source != "<string>" else Path.cwd()
    scenario_kw: dict = {}
    machine = MachineConfig(**DEFAULT_MACHINE)
    memory, images, script = [], {}, []
    seen = set()
    for name, lineno, body in sections:
        head, _, arg = name.partition(" ")
        if head in ("machine", "memory", "script") and (arg or head in seen):
            raise ParseError(f"duplicate or malformed section [{name}]", line=lineno, field=head)
        seen.add(head)
        if head == "machine":
            machine = _parse_machine(body, scenario_kw)
        elif head == "memory":
            memory = _parse_memory(body)
        elif head == "image":
            if not arg or arg in images:
                raise ParseError(f"image needs a unique name: [{name}]", line=lineno, field="image")
            images[arg] = _parse_image(arg, lineno, body, base)
        elif head == "script":
            script = _parse_script(body)
        else:
            raise ParseError(f"unknown section [{name}]", line=lineno, field=head)

    for directive in script:
        if directive.hart >= machine.hart_count:
            raise ParseError(f"machine has no hart {directive.hart}", line=directive.line, field="on")
        if directive.verb == "promote" and directive.args[0] not in images:
            raise ParseError(f"promote names unknown image {directive.args[0]!r}", line=directive.line, field="promote")
    return Scenario(machine, memory_image=memory, images=images, script=script, source=source, **scenario_kw)


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists() and not path.suffix:
        candidate = scenario_dir() / (path.name + SCENARIO_SUFFIX)
        if candidate.exists():
            path = candidate
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}", field="path") from None
    return parse_scenario(text, str(path))


def bundled_scenarios() -> List[Path]:
    return sorted(scenario_dir().glob("*" + SCENARIO_SUFFIX))


# ── Running ───────────────────────────────────────────────────────────

def _image_builder(arena: NcArena, spec: ImageSpec) -> ImageBuilder:
    image = ImageBuilder(arena, spec.entry)
    image.vhart_count = spec.vharts
    if spec.fdt is not None:
        image.fdt = spec.fdt
    for reg, value in spec.boot.items():
        m = _BOOT_REG.match(reg)
        if m is None:
            image.boot_hart.set_csr(reg, value)
        elif m.group(1) is not None:
            image.boot_hart.set(int(m.group(1)), value)
        else:
            image.boot_hart.set_a(int(m.group(2)), value)
    for op, args in spec.ops:
        if op == "code":
            image.map_code(*args)
        elif op == "page":
            gpa, data, size = args
            image.map(gpa, data, size)
        elif op == "raw_leaf":
            image.map_raw_leaf(*args)
        elif op == "raw_entry":
            image.set_raw_entry(*args)
        elif op == "loop":
            image.loop_to_root(args[0])
    return image


def measure_image(scenario: Scenario, name: str) -> MeasurementRegisters:
    """Reference measurements of a scenario image, as promotion computes them."""
    spec = scenario.images.get(name)
    if spec is None:
        raise ParseError(f"{scenario.name} has no image {name!r}", field="image")
    arena = NcArena(build_machine(scenario.machine))
    for addr, data in scenario.memory_image:
        arena.write(addr, data)
    return _image_builder(arena, spec).measure()


@dataclass
class Outcome:
    error: int = 0
    value: int = 0
    exit: Optional[object] = None
    paused: bool = False
    data: Optional[bytes] = None
    trace_start: int = 0
    hart: int = 0


@dataclass
class Failure:
    line: int
    text: str
    reason: str


@dataclass
class ScenarioResult:
    name: str
    trace: TraceLog
    failures: List[Failure]
    audit: List[str]
    directives: int
    expectations: int

    @property
    def passed(self) -> bool:
        return not self.failures and not self.audit

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


class ScenarioRunner:
    def __init__(self, scenario: Scenario, key: Optional[TsmAttestationKey] = None,
                 check_double_free: bool = True):
        self.scenario = scenario
        self.machine = build_machine(scenario.machine)
        self.tsm = Tsm(self.machine, key, check_double_free, scenario.sizes)
        self.arena = NcArena(self.machine)
        self.bindings: Dict[str, int] = {}
        self.snapshots: Dict[str, dict] = {}
        self.staged: Dict[str, StagedImage] = {}
        self.failures: List[Failure] = []
        self._lock = threading.Lock()
        self.expectations = 0

        for addr, data in scenario.memory_image:
            self.arena.write(addr, data)
        for spec in scenario.images.values():
            self.staged[spec.name] = self._stage(spec)

    # --- staging ---

    def _stage(self, spec: ImageSpec) -> StagedImage:
        image = _image_builder(self.arena, spec)
        reference = None
        if spec.reference == "mismatch":
            m = image.measure()
            reference = MeasurementRegisters(bytes(48), m.pcr_fdt, m.pcr_boot_hart)
        if spec.lockbox == "foreign":
            public, _ = kem.provider(kem.ALG_TESTKEM).generate_keypair()
            keys = [(kem.ALG_TESTKEM, public)]
        else:
            keys = self.tsm.key.public_keys()
        tap = _read_tap(spec.tap, spec.line) if spec.tap is not None else None
        staged = image.build(spec.secrets, keys, reference, tap)
        for bit in spec.tap_flips:
            flip_bit(self.machine, staged.tap_addr, bit)
        return staged

    # --- value resolution ---

    def resolve(self, token: str, line: int = 0) -> int:
        if token in self.bindings:
            return self.bindings[token]
        if token == "none":
            return abi.NO_IRQ
        name, dot, attr = token.partition(".")
        if dot and name in self.staged:
            staged = self.staged[name]
            fields = {"boot": staged.boot_hart_addr, "root": staged.root_addr,
                      "fdt": staged.fdt_addr, "tap": staged.tap_addr}
            if attr in fields:
                return fields[attr]
        try:
            return int(token.replace("_", ""), 0)
        except ValueError:
            raise ParseError(f"cannot resolve {token!r}", line=line, field="value") from None

    # --- execution ---

    def run(self, threads: bool = False) -> ScenarioResult:
        script = self.scenario.script
        if threads and len({d.hart for d in script}) > 1:
            per_hart: Dict[int, List[Directive]] = {}
            for d in script:
                per_hart.setdefault(d.hart, []).append(d)
            workers = [threading.Thread(target=self._run_all, args=(ds,), name=f"hart{h}")
                       for h, ds in per_hart.items()]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
        else:
            self._run_all(script)
        self._check_guest_expectations()
        audit = audit_all(self.tsm.trace)
        result = ScenarioResult(self.scenario.name, self.tsm.trace, sorted(self.failures, key=lambda f: f.line),
                                audit, len(script), self.expectations)
        logger.info("scenario %s: %s (%d failure(s), %d audit finding(s))",
                    result.name, result.verdict, len(result.failures), len(audit))
        return result

    def _run_all(self, directives: List[Directive]) -> None:
        for directive in directives:
            outcome = self.execute(directive)
            for expectation in directive.expects:
                self._check(directive, expectation, outcome)

    def execute(self, d: Directive) -> Outcome:
        start = len(self.tsm.trace)
        logger.debug("line %d: %s", d.line, d.text)
        try:
            outcome = _DIRECTIVES[d.verb](self, d)
        except AceError as exc:
            logger.info("line %d: %s -> %s", d.line, d.verb, exc.name)
            outcome = Outcome(error=exc.code)
        outcome.trace_start, outcome.hart = start, d.hart
        return outcome

    def _fail(self, line: int, text: str, reason: str) -> None:
        with self._lock:
            self.failures.append(Failure(line, text, reason))
        logger.warning("line %d: expectation failed: %s (%s)", line, text, reason)

    def _check(self, d: Directive, e: Expectation, outcome: Outcome) -> None:
        with self._lock:
            self.expectations += 1
        try:
            problem = _EXPECT_CHECKS[e.kind](self, d, e, outcome)
        except AceError as exc:
            problem = f"{exc.name}: {exc}"
        if problem:
            self._fail(e.line, e.text, problem)

    def _check_guest_expectations(self) -> None:
        for entry in self.tsm.guest_log:
            event = entry.event
            if event.expect is None:
                continue
            e = _parse_expect(event.expect, event.line, event.expect)
            outcome = Outcome(entry.error, entry.value, data=entry.data, hart=entry.hart)
            self._check(Directive("guest", (), event.line, event.expect), e, outcome)
        queued = {e.line for q in self.tsm.guest_queue.values() for e in q if e.expect}
        logged = {o.event.line for o in self.tsm.guest_log}
        for line in sorted(queued - logged):
            self._fail(line, "guest event", "never executed")


# ── Directive handlers ────────────────────────────────────────────────

def _from_ecall(out) -> Outcome:
    return Outcome(out.error, out.value, out.exit, out.paused)


def _do_on(r: ScenarioRunner, d: Directive) -> Outcome:
    return Outcome()


def _do_mark(r: ScenarioRunner, d: Directive) -> Outcome:
    r.tsm.trace.append(d.hart, r.tsm.contexts[d.hart].flow, "mark", d.args[0])
    return Outcome()


def _do_promote(r: ScenarioRunner, d: Directive) -> Outcome:
    staged = r.staged[d.args[0]]
    out = r.tsm.hypervisor_ecall(d.hart, abi.EXT_ACETVM, abi.FID_PROMOTE, staged.promote_args())
    if out.error == 0:
        r.bindings[d.args[1] if len(d.args) > 1 else d.args[0]] = out.value
    return _from_ecall(out)


def _do_ecall(r: ScenarioRunner, d: Directive) -> Outcome:
    ext = abi.EXTENSION_NAMES.get(d.args[0])
    ext = ext if ext is not None else r.resolve(d.args[0], d.line)
    args = [r.resolve(a, d.line) for a in d.args[2:]]
    return _from_ecall(r.tsm.hypervisor_ecall(d.hart, ext, r.resolve(d.args[1], d.line), args))


def _do_run(r: ScenarioRunner, d: Directive) -> Outcome:
    tvm, vhart = r.resolve(d.args[0], d.line), r.resolve(d.args[1], d.line)
    irq = r.resolve(d.args[2], d.line) if d.args[2] else abi.NO_IRQ
    reply = [r.resolve(a, d.line) for a in d.args[3:5] if a] or [0, 0]
    return _from_ecall(r.tsm.hypervisor_ecall(d.hart, abi.EXT_ACETVM, abi.FID_RUN, [tvm, vhart, irq, *reply]))


def _do_destroy(r: ScenarioRunner, d: Directive) -> Outcome:
    tvm = r.resolve(d.args[0], d.line)
    return _from_ecall(r.tsm.hypervisor_ecall(d.hart, abi.EXT_ACETVM, abi.FID_DESTROY, [tvm]))


def _do_guest(r: ScenarioRunner, d: Directive) -> Outcome:
    event = _parse_guest_event(d.args[2], d.line)
    r.tsm.add_guest_events(r.resolve(d.args[0], d.line), int(d.args[1]), [event])
    return Outcome()


def _do_continue(r: ScenarioRunner, d: Directive) -> Outcome:
    return _from_ecall(r.tsm.continue_guest(d.hart))


def _do_interrupt(r: ScenarioRunner, d: Directive) -> Outcome:
    return _from_ecall(r.tsm.interrupt(d.hart, EventKind.EXTERNAL_INTERRUPT, r.resolve(d.args[0], d.line)))


def _do_ipi(r: ScenarioRunner, d: Directive) -> Outcome:
    return _from_ecall(r.tsm.interrupt(d.hart, EventKind.SOFTWARE_IPI))


def _do_advance_clock(r: ScenarioRunner, d: Directive) -> Outcome:
    fired = r.tsm.advance_clock(r.resolve(d.args[0], d.line))
    return Outcome(value=len(fired))


def _do_hv_write(r: ScenarioRunner, d: Directive) -> Outcome:
    r.tsm.hypervisor_access(d.hart, r.resolve(d.args[0], d.line), "write", data=_bytes(d.args[1], d.line, "bytes"))
    return Outcome()


def _do_hv_read(r: ScenarioRunner, d: Directive) -> Outcome:
    data = r.tsm.hypervisor_access(d.hart, r.resolve(d.args[0], d.line), "read", r.resolve(d.args[1], d.line))
    return Outcome(data=data)


def _do_snapshot(r: ScenarioRunner, d: Directive) -> Outcome:
    r.snapshots[d.args[0] if d.args and d.args[0] else "default"] = r.tsm.snapshot()
    return Outcome()


_DIRECTIVES: Dict[str, Callable[[ScenarioRunner, Directive], Outcome]] = {
    "on": _do_on,
    "mark": _do_mark,
    "promote": _do_promote,
    "ecall": _do_ecall,
    "run": _do_run,
    "destroy": _do_destroy,
    "guest": _do_guest,
    "continue": _do_continue,
    "interrupt": _do_interrupt,
    "ipi": _do_ipi,
    "advance_clock": _do_advance_clock,
    "hv_write": _do_hv_write,
    "hv_read": _do_hv_read,
    "snapshot": _do_snapshot,
}


# ── Expectation checks ────────────────────────────────────────────────
# Each returns None on success or a short reason.

def _got(o: Outcome) -> str:
    return error_name(o.error)


def _expect_ok(r, d, e, o: Outcome):
    return None if o.error == 0 else f"got {_got(o)}"


def _expect_error(r, d, e, o: Outcome):
    want = code_for(e.args[0])
    return None if o.error == want else f"got {_got(o)}"


def _expect_value(r, d, e, o: Outcome):
    if o.error:
        return f"got {_got(o)}"
    want = r.resolve(e.args[0], e.line)
    return None if o.value == want else f"value {o.value:#x} != {want:#x}"


def _expect_exit(r, d, e, o: Outcome):
    if o.exit is None:
        return "paused in guest" if o.paused else f"no exit ({_got(o)})"
    want = ExitReason.parse(e.args[0])
    if o.exit.reason is not want:
        return f"exit {o.exit.reason.label}"
    if len(e.args) > 1 and o.exit.detail != r.resolve(e.args[1], e.line):
        return f"exit detail {o.exit.detail:#x}"
    return None


def _expect_paused(r, d, e, o: Outcome):
    return None if o.paused else "hart left the guest"


def _trace_pattern(e: Expectation) -> dict:
    pattern = {"phase": e.args[0], "call": e.args[1]}
    for item in e.args[2:]:
        key, _, value = item.partition("=")
        pattern[key] = value
    return pattern


def _expect_trace(r, d, e, o: Outcome):
    pattern = _trace_pattern(e)
    entries = r.tsm.trace.entries[o.trace_start:]
    return None if any(x.matches(**pattern) for x in entries) else f"no entry matching {pattern}"


def _expect_no_trace(r, d, e, o: Outcome):
    pattern = _trace_pattern(e)
    hits = [x.seq for x in r.tsm.trace.entries[o.trace_start:] if x.matches(**pattern)]
    return None if not hits else f"unexpected entries at seq {hits}"


def _expect_allocator(r, d, e, o: Outcome):
    name = e.args[0] if e.args else "default"
    if name not in r.snapshots:
        return f"no snapshot {name!r}"
    now, then = r.tsm.snapshot(), r.snapshots[name]
    diff = {k: (then[k], now[k]) for k in then if then[k] != now[k]}
    return None if not diff else f"changed: {diff}"


def _expect_hsm(r, d, e, o: Outcome):
    desc = r.tsm.tvm(r.resolve(e.args[0], e.line))
    index = int(e.args[1])
    if index >= len(desc.vharts):
        return f"no vhart {index}"
    state = desc.vharts[index].state
    return None if state.value == e.args[2] or state.name == e.args[2] else f"vhart is {state.value}"


def _expect_read(r, d, e, o: Outcome):
    want = _bytes(e.args[0], e.line, "bytes")
    if o.data is None:
        return f"nothing read ({_got(o)})"
    return None if o.data == want else f"read {o.data.hex()}"


def _expect_calls_between(r, d, e, o: Outcome):
    try:
        n = calls_between(r.tsm.trace, e.args[0], e.args[1])
    except ValueError as exc:
        return str(exc)
    return None if n == int(e.args[2]) else f"{n} call(s)"


_HV_REGS = {f"a{i}": 10 + i for i in range(8)}
_HV_REGS.update({f"s{i}": 16 + i for i in range(2, 12)})


def _expect_hv(r, d, e, o: Outcome):
    ctx = r.tsm.contexts[d.hart]
    if ctx.flow != HYPERVISOR:
        return "hart is not executing the hypervisor"
    state = r.machine.harts[d.hart]
    reg, want = e.args[0], r.resolve(e.args[1], e.line)
    if reg in _HV_REGS:
        got = state.get(_HV_REGS[reg])
    elif reg in CSR_NAMES:
        got = state.csr(reg)
    else:
        return f"unknown register {reg}"
    return None if got == want else f"{reg} = {got:#x}"


def _expect_tvms(r, d, e, o: Outcome):
    return None if len(r.tsm.tvms) == int(e.args[0]) else f"{len(r.tsm.tvms)} TVM(s)"


def _expect_audit(r, d, e, o: Outcome):
    problems = audit_all(r.tsm.trace)
    return None if not problems else problems[0]


_EXPECT_CHECKS = {
    "ok": _expect_ok,
    "error": _expect_error,
    "value": _expect_value,
    "exit": _expect_exit,
    "paused": _expect_paused,
    "trace": _expect_trace,
    "no_trace": _expect_no_trace,
    "allocator": _expect_allocator,
    "hsm": _expect_hsm,
    "read": _expect_read,
    "data": _expect_read,
    "calls_between": _expect_calls_between,
    "hv": _expect_hv,
    "tvms": _expect_tvms,
    "audit": _expect_audit,
}


def run_scenario(scenario: Scenario, threads: bool = False, key: Optional[TsmAttestationKey] = None,
                 check_double_free: bool = True) -> ScenarioResult:
    return ScenarioRunner(scenario, key, check_double_free).run(threads)
