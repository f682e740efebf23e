# tracelog.py - Append-only execution trace and the audits run over it
"""
One TraceEntry per FSM phase. Text form, one entry per line after the
`ACESIM-TRACE 1` header:

    seq=12 hart=0 flow=NC phase=route call=promote result=ok residue_clear=0

Trailing key=value pairs are optional details. Values never contain spaces.
"""
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from errors import ParseError

logger = logging.getLogger(__name__)

TRACE_HEADER = "ACESIM-TRACE 1"
_FIXED = ("seq", "hart", "flow", "phase", "call", "result")


@dataclass
class TraceEntry:
    seq: int
    hart: int
    flow: str
    phase: str
    call: str
    result: str = "ok"
    residue_clear: Optional[bool] = None
    details: Dict[str, str] = field(default_factory=dict)

    def to_line(self) -> str:
        parts = [f"seq={self.seq}", f"hart={self.hart}", f"flow={self.flow}",
                 f"phase={self.phase}", f"call={self.call}", f"result={self.result}"]
        if self.residue_clear is not None:
            parts.append(f"residue_clear={int(self.residue_clear)}")
        parts.extend(f"{k}={v}" for k, v in self.details.items())
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "TraceEntry":
        fields = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ParseError(f"bad trace field {token!r}", line=lineno)
            fields[key] = value
        missing = [k for k in _FIXED if k not in fields]
        if missing:
            raise ParseError(f"trace entry missing {', '.join(missing)}", line=lineno)
        residue = fields.pop("residue_clear", None)
        return cls(
            seq=int(fields.pop("seq")),
            hart=int(fields.pop("hart")),
            flow=fields.pop("flow"),
            phase=fields.pop("phase"),
            call=fields.pop("call"),
            result=fields.pop("result"),
            residue_clear=None if residue is None else residue == "1",
            details=fields,
        )

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _FIXED}
        d["residue_clear"] = self.residue_clear
        d.update(self.details)
        return d

    def matches(self, **pattern) -> bool:
        """Field/detail equality on every given key; '*' matches anything."""
        row = self.as_dict()
        for key, want in pattern.items():
            if want == "*":
                if key not in row:
                    return False
                continue
            got = row.get(key)
            if isinstance(got, bool):
                got = int(got)
            if str(got) != str(want):
                return False
        return True


class TraceLog:
    """Thread-safe append-only sink. Per-hart order equals emission order."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: List[TraceEntry] = []
        self._by_hart: Dict[int, List[TraceEntry]] = {}
        self.counters: Counter = Counter()

    def append(self, hart: int, flow, phase: str, call: str, result: str = "ok",
               residue_clear: Optional[bool] = None, **details) -> TraceEntry:
        clean = {k: _value(v) for k, v in details.items() if v is not None}
        with self._lock:
            entry = TraceEntry(len(self.entries), hart, str(flow), phase, call, result, residue_clear, clean)
            self.entries.append(entry)
            self._by_hart.setdefault(hart, []).append(entry)
            self.counters[phase] += 1
        logger.debug("trace %s", entry.to_line())
        return entry

    def per_hart(self, hart: int) -> List[TraceEntry]:
        with self._lock:
            return list(self._by_hart.get(hart, []))

    def harts(self) -> List[int]:
        with self._lock:
            return sorted(self._by_hart)

    def __len__(self) -> int:
        return len(self.entries)

    def lines(self) -> List[str]:
        with self._lock:
            return [TRACE_HEADER] + [e.to_line() for e in self.entries]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def per_hart_lines(self) -> Dict[int, List[str]]:
        """Entries minus the global seq: comparable across threaded runs."""
        out = {}
        for hart in self.harts():
            out[hart] = [e.to_line().split(" ", 1)[1] for e in self.per_hart(hart)]
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.text())
        return path

    @classmethod
    def read(cls, path) -> "TraceLog":
        return cls.parse(Path(path).read_text())

    @classmethod
    def parse(cls, text: str) -> "TraceLog":
        lines = text.splitlines()
        if not lines or lines[0].strip() != TRACE_HEADER:
            raise ParseError("missing trace header", line=1)
        log = cls()
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            entry = TraceEntry.from_line(line, n)
            log.entries.append(entry)
            log._by_hart.setdefault(entry.hart, []).append(entry)
            log.counters[entry.phase] += 1
        return log

    def find(self, **pattern) -> List[TraceEntry]:
        with self._lock:
            return [e for e in self.entries if e.matches(**pattern)]

    def summary(self) -> Dict[str, int]:
        with self._lock:
            return dict(self.counters)


def _value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (list, tuple, set, frozenset)):
        return ",".join(str(x) for x in v) or "-"
    text = str(v)
    return text.replace(" ", "_") or "-"


# --- Audits ---
# Each returns a list of human-readable violations; empty means clean.

def audit_path_mediation(log: TraceLog) -> List[str]:
    """Consecutive entries of one hart in different flows need exactly one domain_switch between them."""
    problems = []
    for hart in log.harts():
        prev = None
        for entry in log.per_hart(hart):
            if entry.phase == "domain_switch":
                source = entry.details.get("from")
                if prev is not None and source != prev.flow:
                    problems.append(f"seq {entry.seq}: switch from {source} but hart was in {prev.flow}")
                if source == entry.flow:
                    problems.append(f"seq {entry.seq}: switch to the same domain {entry.flow}")
            elif prev is not None and entry.flow != prev.flow:
                problems.append(f"seq {entry.seq}: flow {prev.flow} -> {entry.flow} without domain_switch")
            prev = entry
    return problems


def audit_residue(log: TraceLog) -> List[str]:
    """Every switch, and the first entry executing in the new domain, carries residue_clear=1."""
    problems = []
    for hart in log.harts():
        after_switch = False
        for entry in log.per_hart(hart):
            if entry.phase == "domain_switch" or after_switch:
                if entry.residue_clear is not True:
                    problems.append(f"seq {entry.seq}: domain entered with residue present")
            after_switch = entry.phase == "domain_switch"
    return problems


def audit_confinement(log: TraceLog) -> List[str]:
    """Destructor write-sets stay inside the declared target; secret retrieval never writes NC."""
    problems = []
    for entry in log.entries:
        if entry.phase != "destructor":
            continue
        target = entry.details.get("target")
        writes = entry.details.get("writes", "-")
        if writes == "-":
            continue
        for item in writes.split(","):
            domain = item.split(":", 1)[0]
            if domain != target:
                problems.append(f"seq {entry.seq}: {entry.call} wrote {item} outside {target}")
            if entry.call == "retrieve_secret" and domain == "NC":
                problems.append(f"seq {entry.seq}: secret retrieval wrote hypervisor state")
        if entry.call != "exit" and target == "NC" and "vstimecmp" in writes:
            problems.append(f"seq {entry.seq}: timer value disclosed outside reclassification")
    return problems


def audit_interrupt_filter(log: TraceLog) -> List[str]:
    problems = []
    for entry in log.find(phase="inject"):
        allowed = set(entry.details.get("allowed", "-").split(","))
        if entry.details.get("irq") not in allowed:
            problems.append(f"seq {entry.seq}: injected irq {entry.details.get('irq')} not in allowed set")
    return problems


def audit_all(log: TraceLog) -> List[str]:
    return (audit_path_mediation(log) + audit_residue(log)
            + audit_confinement(log) + audit_interrupt_filter(log))


def calls_between(log: TraceLog, start_mark: str, end_mark: str, flow: Optional[str] = "NC") -> int:
    """Number of ABI calls routed between two scenario marks (hypervisor calls by default)."""
    inside, count = False, 0
    for entry in log.entries:
        if entry.phase == "mark":
            if entry.call == start_mark:
                inside = True
            elif entry.call == end_mark and inside:
                return count
            continue
        if inside and entry.phase == "route" and (flow is None or entry.flow == flow):
            count += 1
    raise ValueError(f"marks {start_mark}..{end_mark} not found in order")


def is_subsequence(log: TraceLog, patterns: Iterable[dict]) -> bool:
    """True if entries matching each pattern appear in this order (gaps allowed)."""
    it = iter(log.entries)
    return all(any(e.matches(**p) for e in it) for p in patterns)
