"""
Tests for the acesim command line: exit codes (0 pass, 1 fail, 2 usage
or parse error) and the files it writes.
"""
from pathlib import Path

import pytest

import acesim
from tracelog import TraceLog

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

FAILING = """\
ACESIM-SCENARIO 1
[machine]
memory_size = 0x400_0000
confidential_base = 0x8200_0000
confidential_size = 0x200_0000
alignment = 2M
[image vm]
code = 0x8000_0000: 13000000
[script]
promote vm
expect error OutOfMemory
"""


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.delenv("ACESIM_LOG_LEVEL", raising=False)
    monkeypatch.delenv("ACESIM_TRACE_PATH", raising=False)


# --- run ---


def test_run_bundled_scenario_passes():
    assert acesim.main(["run", str(SCENARIOS / "benign_boot.scn")]) == 0


def test_run_writes_trace(tmp_path):
    out = tmp_path / "boot.trace"
    assert acesim.main(["run", str(SCENARIOS / "benign_boot.scn"), "--trace", str(out)]) == 0
    trace = TraceLog.read(out)
    assert trace.find(phase="route", call="promote")
    assert out.read_bytes() == (SCENARIOS / "benign_boot.trace").read_bytes()


def test_run_by_name_writes_the_golden_trace(tmp_path):
    out = tmp_path / "boot.trace"
    assert acesim.main(["run", "benign_boot", "--trace", str(out)]) == 0
    assert out.read_text() == (SCENARIOS / "benign_boot.trace").read_text()


def test_trace_needs_a_single_scenario(tmp_path):
    paths = [str(SCENARIOS / "benign_boot.scn"), str(SCENARIOS / "memory_faults.scn")]
    assert acesim.main(["run", *paths, "--trace", str(tmp_path / "x.trace")]) == 2


def test_malformed_scenario_is_usage_error(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text("ACESIM-SCENARIO 2\n")
    assert acesim.main(["run", str(bad)]) == 2


def test_failing_scenario_exits_one(tmp_path):
    failing = tmp_path / "failing.scn"
    failing.write_text(FAILING)
    assert acesim.main(["run", str(failing)]) == 1


def test_bad_log_level(monkeypatch):
    monkeypatch.setenv("ACESIM_LOG_LEVEL", "LOUD")
    assert acesim.main(["suite", "--only", "table-loop"]) == 2


# --- suite ---


def test_suite_passes():
    assert acesim.main(["suite"]) == 0


def test_suite_with_double_free_check_disabled_fails():
    assert acesim.main(["suite", "--disable", "double-free-check", "--only", "double-free"]) == 1


# --- report ---


def test_allocator_report():
    assert acesim.main(["report", "--allocator"]) == 0
    assert acesim.main(["report", "--allocator", "--allocate-all", "2M"]) == 0


def test_allocator_report_from_scenario():
    assert acesim.main(["report", "--allocator", "--scenario", str(SCENARIOS / "memory_faults.scn")]) == 0


def test_allocator_report_bad_size():
    assert acesim.main(["report", "--allocator", "--allocate-all", "3M"]) == 2


# --- tap ---


def _create(tmp_path) -> Path:
    out = tmp_path / "vm.tap"
    code = acesim.main([
        "tap", "create", "--out", str(out),
        "--reference", "ab" * 144,
        "--secret", "0=text:hello",
        "--secret", "1=00ff",
    ])
    assert code == 0
    return out


def test_tap_create_inspect_unseal(tmp_path):
    path = _create(tmp_path)
    assert path.read_bytes()[:4] == b"ATAP"
    assert acesim.main(["tap", "inspect", str(path)]) == 0
    assert acesim.main(["tap", "unseal", str(path)]) == 0


def test_tampered_tap_fails_to_unseal(tmp_path):
    path = _create(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 1
    path.write_bytes(bytes(raw))
    assert acesim.main(["tap", "inspect", str(path)]) == 0
    assert acesim.main(["tap", "unseal", str(path)]) == 1


@pytest.mark.parametrize("extra", [
    ["--reference", "ab" * 143],
    ["--reference", "zz"],
    ["--reference", "ab" * 144, "--secret", "nope"],
])
def test_tap_create_bad_arguments(tmp_path, extra):
    assert acesim.main(["tap", "create", "--out", str(tmp_path / "x.tap"), *extra]) == 2


def test_tap_create_unknown_algorithm(tmp_path):
    args = ["tap", "create", "--out", str(tmp_path / "x.tap"), "--reference", "ab" * 144, "--recipient", "rsa:00"]
    assert acesim.main(args) == 1


def test_tap_create_from_scenario_image(tmp_path):
    out = tmp_path / "vm.tap"
    assert acesim.main(["tap", "create", "--image", f"{SCENARIOS / 'benign_boot.scn'}:vm", "--out", str(out)]) == 0
    assert acesim.main(["tap", "unseal", str(out)]) == 0


@pytest.mark.parametrize("image", ["benign_boot.scn", "benign_boot.scn:nope"])
def test_tap_create_bad_image(tmp_path, image):
    args = ["tap", "create", "--image", str(SCENARIOS / image), "--out", str(tmp_path / "x.tap")]
    assert acesim.main(args) == 2


def test_tap_create_needs_one_reference(tmp_path):
    args = ["tap", "create", "--out", str(tmp_path / "x.tap"), "--reference", "ab" * 144,
            "--image", f"{SCENARIOS / 'benign_boot.scn'}:vm"]
    with pytest.raises(SystemExit) as info:
        acesim.main(args)
    assert info.value.code == 2


def test_tap_missing_file(tmp_path):
    assert acesim.main(["tap", "inspect", str(tmp_path / "absent.tap")]) == 2
