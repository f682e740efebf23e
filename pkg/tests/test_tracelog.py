"""
Tests for the trace format and the audits, using hand-built logs that
break one rule at a time.
"""
import pytest

from errors import ParseError
from machine import HYPERVISOR, TSM, DomainTag
from tracelog import (
    TRACE_HEADER,
    TraceEntry,
    TraceLog,
    audit_all,
    audit_confinement,
    audit_interrupt_filter,
    audit_path_mediation,
    audit_residue,
    calls_between,
    is_subsequence,
)

TVM = DomainTag.tvm(1, 0)


def clean_run():
    """Hypervisor runs a TVM that exits straight back."""
    log = TraceLog()
    log.append(0, HYPERVISOR, "trap", "ecall")
    log.append(0, HYPERVISOR, "route", "run", tvm=1)
    log.append(0, HYPERVISOR, "constructor", "run")
    log.append(0, HYPERVISOR, "destructor", "run", target="C(1.0)", writes=["C(1.0):a0"])
    log.append(0, TVM, "domain_switch", "run", residue_clear=True, **{"from": "NC"})
    log.append(0, TVM, "restore", "run", residue_clear=True)
    log.append(0, TVM, "trap", "ecall")
    log.append(0, TVM, "destructor", "exit", target="NC", writes=["NC:a0", "NC:vstimecmp"])
    log.append(0, HYPERVISOR, "domain_switch", "exit", residue_clear=True, **{"from": "C(1.0)"})
    log.append(0, HYPERVISOR, "restore", "exit", residue_clear=True)
    return log


# --- format ---


def test_entry_line_round_trip():
    entry = TraceEntry(3, 1, "C(2.0)", "route", "retrieve_secret", "ok", True, {"index": "0"})
    line = entry.to_line()
    assert line == "seq=3 hart=1 flow=C(2.0) phase=route call=retrieve_secret result=ok residue_clear=1 index=0"
    assert TraceEntry.from_line(line) == entry


@pytest.mark.parametrize("line", ["seq=1 hart=0 flow=NC", "seq=1 hart=0 flow=NC phase=trap call=x result=ok junk"])
def test_bad_entry_lines(line):
    with pytest.raises(ParseError):
        TraceEntry.from_line(line, 7)


def test_detail_values_are_flattened():
    log = TraceLog()
    entry = log.append(0, TSM, "mark", "start", note="two words", empty=[], flag=False, skipped=None)
    assert entry.details == {"note": "two_words", "empty": "-", "flag": "0"}


def test_write_and_read(tmp_path):
    log = clean_run()
    path = log.write(tmp_path / "out" / "run.trace")
    assert path.read_text().splitlines()[0] == TRACE_HEADER
    back = TraceLog.read(path)
    assert back.lines() == log.lines()
    assert back.summary() == log.summary()


def test_parse_needs_header():
    with pytest.raises(ParseError):
        TraceLog.parse("seq=0 hart=0 flow=NC phase=trap call=ecall result=ok\n")


def test_per_hart_lines_drop_seq():
    log = TraceLog()
    log.append(1, HYPERVISOR, "trap", "ecall")
    log.append(0, HYPERVISOR, "trap", "ecall")
    assert log.harts() == [0, 1]
    assert log.per_hart_lines()[1] == ["hart=1 flow=NC phase=trap call=ecall result=ok"]


# --- matching ---


def test_find_and_matches():
    log = clean_run()
    assert [e.seq for e in log.find(phase="domain_switch")] == [4, 8]
    assert log.find(phase="domain_switch", residue_clear=1)
    assert log.find(phase="route", tvm="*")
    assert not log.find(phase="trap", tvm="*")


def test_is_subsequence():
    log = clean_run()
    assert is_subsequence(log, [{"call": "run"}, {"phase": "trap", "flow": "C(1.0)"}, {"call": "exit"}])
    assert not is_subsequence(log, [{"call": "exit"}, {"call": "run"}])


def test_calls_between():
    log = TraceLog()
    log.append(0, TSM, "mark", "begin")
    log.append(0, HYPERVISOR, "route", "promote")
    log.append(0, TVM, "route", "get_info")
    log.append(0, TSM, "mark", "end")
    log.append(0, HYPERVISOR, "route", "run")
    assert calls_between(log, "begin", "end") == 1
    assert calls_between(log, "begin", "end", flow=None) == 2
    with pytest.raises(ValueError):
        calls_between(log, "end", "begin")


# --- audits ---


def test_clean_run_passes_every_audit():
    assert audit_all(clean_run()) == []


def test_flow_change_without_switch():
    log = clean_run()
    log.append(0, TVM, "trap", "ecall")
    assert any("without domain_switch" in p for p in audit_path_mediation(log))


def test_switch_from_wrong_domain():
    log = TraceLog()
    log.append(0, HYPERVISOR, "trap", "ecall")
    log.append(0, TVM, "domain_switch", "run", residue_clear=True, **{"from": "C(2.0)"})
    assert audit_path_mediation(log)


def test_residue_after_switch():
    log = TraceLog()
    log.append(0, HYPERVISOR, "trap", "ecall")
    log.append(0, TVM, "domain_switch", "run", residue_clear=True, **{"from": "NC"})
    log.append(0, TVM, "restore", "run", residue_clear=False)
    assert audit_residue(log) == ["seq 2: domain entered with residue present"]


def test_write_outside_target():
    log = TraceLog()
    log.append(0, HYPERVISOR, "destructor", "run", target="C(1.0)", writes=["C(1.0):a0", "NC:a1"])
    assert len(audit_confinement(log)) == 1


def test_secret_retrieval_into_hypervisor_state():
    log = TraceLog()
    log.append(0, TVM, "destructor", "retrieve_secret", target="NC", writes=["NC:a0"])
    assert any("secret retrieval" in p for p in audit_confinement(log))


def test_timer_disclosed_outside_exit():
    log = TraceLog()
    log.append(0, TVM, "destructor", "forward", target="NC", writes=["NC:vstimecmp"])
    assert any("timer value" in p for p in audit_confinement(log))


def test_injection_outside_allowed_set():
    log = TraceLog()
    log.append(0, HYPERVISOR, "inject", "run", irq=9, allowed=[3, 5])
    log.append(0, HYPERVISOR, "inject", "run", irq=3, allowed=[3, 5])
    assert audit_interrupt_filter(log) == ["seq 0: injected irq 9 not in allowed set"]
