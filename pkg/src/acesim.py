# acesim.py
"""TSM simulator - command-line entry point."""
import argparse
import logging
import os
import sys
from pathlib import Path

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from dotenv import load_dotenv
from rich.logging import RichHandler

import kem
from allocator import PageAllocator
from attestation import MeasurementRegisters, TapBlob, TapPayload, TsmAttestationKey, inspect_blob, tap_create, tap_unseal
from errors import AceError, ConfigError, OutOfMemory, ParseError
from machine import MachineConfig, PageSize, build_machine
from scenario import DEFAULT_MACHINE, bundled_scenarios, load_scenario, measure_image, run_scenario
from suite import attack_suite, suite_passed
from ui import (
    console,
    display_allocator_report,
    display_error,
    display_info,
    display_scenario_result,
    display_startup,
    display_suite,
    display_tap_header,
    display_unsealed,
    start_spinner,
)

load_dotenv()

logger = logging.getLogger("acesim")

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def parse_args(argv=None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(prog="acesim", description="TEE Security Manager simulator")
    parser.add_argument("--verbose", action="store_true", help="Debug logging (per-phase FSM activity)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario file (or a bundled scenario by name)")
    run.add_argument("scenario", nargs="+", help="Scenario path or bundled name; 'all' runs every bundled scenario")
    run.add_argument("--trace", default=os.getenv("ACESIM_TRACE_PATH") or None,
                     help="Write the trace here (default: $ACESIM_TRACE_PATH)")
    run.add_argument("--threads", action="store_true", help="One thread per hart; trace order is per-hart only")

    suite = sub.add_parser("suite", help="Run the adversarial hypervisor suite")
    suite.add_argument("--disable", action="append", default=[], choices=["double-free-check"],
                       help="Disable a TSM check (mutation test of the suite itself)")
    suite.add_argument("--only", action="append", default=None, help="Run only the named attack")

    report = sub.add_parser("report", help="Overhead reports")
    report.add_argument("--allocator", action="store_true", required=True, help="Page-token overhead")
    report.add_argument("--scenario", help="Take the machine profile from this scenario")
    report.add_argument("--allocate-all", metavar="SIZE", help="Allocate every token of SIZE (4K, 2M, 1G) first")

    tap = sub.add_parser("tap", help="Owner-side TAP tooling")
    tap_sub = tap.add_subparsers(dest="tap_command", required=True)
    create = tap_sub.add_parser("create", help="Seal reference measurements and secrets into a TAP")
    create.add_argument("--out", required=True, help="Output file")
    measured = create.add_mutually_exclusive_group(required=True)
    measured.add_argument("--reference",
                          help="144 hex bytes: code/data, FDT and boot-hart registers, 48 bytes each")
    measured.add_argument("--image", metavar="SCENARIO:NAME",
                          help="Take the reference measurements from an image in a scenario file")
    create.add_argument("--secret", action="append", default=[], metavar="INDEX=VALUE",
                        help="Secret by index; VALUE is hex, or text:... for literal text")
    create.add_argument("--recipient", action="append", default=[], metavar="ALG:PUBHEX",
                        help="Lockbox recipient (default: the configured TSM key)")
    inspect = tap_sub.add_parser("inspect", help="Show a TAP's header without decrypting it")
    inspect.add_argument("path")
    unseal = tap_sub.add_parser("unseal", help="Open a TAP with the configured TSM key")
    unseal.add_argument("path")
    return parser.parse_args(argv)


def setup_logging(verbose: bool) -> None:
    if verbose:
        level = logging.DEBUG
    else:
        name = os.getenv("ACESIM_LOG_LEVEL", "WARNING").upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            raise ConfigError(f"ACESIM_LOG_LEVEL: unknown level {name!r}")
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, markup=False)],
        force=True,
    )


# ── Subcommands ────────────────────────────────────────────────────────

def _scenario_paths(names):
    if names == ["all"]:
        paths = bundled_scenarios()
        if not paths:
            raise ConfigError("no bundled scenarios found (check ACESIM_SCENARIO_DIR)")
        return paths
    return names


def cmd_run(args) -> int:
    paths = _scenario_paths(args.scenario)
    if args.trace and len(paths) > 1:
        raise ConfigError("--trace takes a single scenario")
    scenarios = [load_scenario(p) for p in paths]
    display_startup(f"{len(scenarios)} scenario(s)" if len(scenarios) > 1 else scenarios[0].name)
    passed = True
    for scenario in scenarios:
        result = run_scenario(scenario, threads=args.threads)
        display_scenario_result(result)
        passed = passed and result.passed
        if args.trace:
            written = result.trace.write(args.trace)
            display_info(f"trace: {written} ({len(result.trace)} entries)")
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_suite(args) -> int:
    display_startup("attack suite")
    check = "double-free-check" not in args.disable
    if not check:
        display_info("double-free check disabled")
    spinner = start_spinner("running attacks...")
    try:
        rows = attack_suite(check_double_free=check, only=args.only)
    finally:
        spinner.stop()
    display_suite(rows)
    return EXIT_PASS if suite_passed(rows) else EXIT_FAIL


def cmd_report(args) -> int:
    if args.scenario:
        scenario = load_scenario(args.scenario)
        config, sizes, origin = scenario.machine, scenario.sizes, scenario.name
    else:
        config, sizes, origin = MachineConfig(**DEFAULT_MACHINE), None, "default profile"
    machine = build_machine(config)
    allocator = PageAllocator(machine, sizes) if sizes else PageAllocator(machine)
    note = f"machine: {origin}, fresh"
    if args.allocate_all:
        try:
            size = PageSize.parse(args.allocate_all)
        except ValueError:
            raise ConfigError(f"unknown page size {args.allocate_all!r}") from None
        n = 0
        spinner = start_spinner(f"allocating every {size.label} token...")
        try:
            while True:
                allocator.allocate(size)
                n += 1
        except OutOfMemory:
            pass
        finally:
            spinner.stop()
        note = f"machine: {origin}, {n:,} token(s) of {size.label} allocated"
    display_startup("allocator")
    display_allocator_report(allocator.overhead_report(), allocator.free_by_size(),
                             config.confidential_size, note)
    return EXIT_PASS


def _parse_secret(text: str):
    index, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"--secret expects INDEX=VALUE, got {text!r}")
    try:
        data = value[5:].encode() if value.startswith("text:") else bytes.fromhex(value)
        return int(index, 0), data
    except ValueError:
        raise ConfigError(f"bad --secret {text!r}") from None


def _parse_recipient(text: str):
    name, sep, pub = text.partition(":")
    if not sep:
        raise ConfigError(f"--recipient expects ALG:PUBHEX, got {text!r}")
    try:
        return kem.algorithm_from_name(name), bytes.fromhex(pub)
    except ValueError:
        raise ConfigError(f"bad public key in {text!r}") from None


def _reference(args) -> MeasurementRegisters:
    if args.image:
        path, sep, name = args.image.rpartition(":")
        if not sep:
            raise ConfigError(f"--image expects SCENARIO:NAME, got {args.image!r}")
        return measure_image(load_scenario(path), name)
    try:
        return MeasurementRegisters.decode(bytes.fromhex(args.reference))
    except ValueError:
        raise ConfigError("--reference must be hex") from None


def cmd_tap(args) -> int:
    if args.tap_command == "create":
        reference = _reference(args)
        payload = TapPayload(reference, [_parse_secret(s) for s in args.secret])
        recipients = [_parse_recipient(r) for r in args.recipient] or TsmAttestationKey.from_env().public_keys()
        blob = tap_create(payload, recipients)
        Path(args.out).write_bytes(blob.encode())
        display_tap_header(inspect_blob(blob))
        display_info(f"wrote {args.out}")
        return EXIT_PASS

    try:
        data = Path(args.path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read TAP: {exc}") from None
    blob = TapBlob.parse(data)
    display_tap_header(inspect_blob(blob))
    if args.tap_command == "unseal":
        payload = tap_unseal(blob, TsmAttestationKey.from_env())
        display_unsealed(payload)
    return EXIT_PASS


COMMANDS = {
    "run": cmd_run,
    "suite": cmd_suite,
    "report": cmd_report,
    "tap": cmd_tap,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        setup_logging(args.verbose)
        return COMMANDS[args.command](args)
    except (ParseError, ConfigError) as exc:
        display_error(f"{exc.name}: {exc}")
        return EXIT_USAGE
    except AceError as exc:
        # TAP tooling failures (AuthFailure, NoMatchingLockbox, ...) are verdicts, not usage errors
        display_error(f"{exc.name}: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
