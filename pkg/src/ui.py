"""
Console rendering with Rich: verdicts, suite tables, allocator reports and
TAP headers. Plain, dim output with the same cyan/magenta/green accents
throughout. Nothing here ever receives key material or secret bytes.
"""

from rich.console import Console
from rich.live import Live
from rich.spinner import Spinner
from rich.style import Style
from rich.table import Table
from rich.text import Text
from rich.theme import Theme

# ── Theme ──────────────────────────────────────────────────────────────

CYBER_THEME = Theme({
    "cyan": "#00D9FF",
    "magenta": "#FF10F0",
    "neon_green": "#39FF14",
    "dim_cyan": "dim #00D9FF",
    "bright_white": "bright_white",
})

console = Console(theme=CYBER_THEME)

STYLE_ACCENT = Style(color="#00D9FF")
STYLE_DIM_ACCENT = Style(color="#00D9FF", dim=True)
STYLE_SUCCESS = Style(color="#39FF14", dim=True)
STYLE_ERROR = Style(color="#FF10F0", dim=True)


# ── Spinners ───────────────────────────────────────────────────────────

def make_spinner(message: str) -> Spinner:
    """Diamond-alternating spinner with a message."""
    s = Spinner("dots", text=Text(message, style="dim #00D9FF"), style="dim #00D9FF")
    s.frames = ["◆", "◇"]
    s.interval = 500
    return s


def start_spinner(message: str) -> Live:
    """Start an animated spinner. Returns the Live instance; call .stop() when done."""
    live = Live(make_spinner(message), console=console, refresh_per_second=4, transient=True)
    live.start()
    return live


# ── Helpers ────────────────────────────────────────────────────────────

def _bytes(n: int) -> str:
    for unit, size in (("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)):
        if n >= size and n % (size // 4) == 0:
            return f"{n / size:g} {unit}"
    return f"{n:,} B"


def _mark(ok: bool) -> Text:
    return Text("◆ pass", style="neon_green") if ok else Text("◇ fail", style="magenta")


# ── Display functions ──────────────────────────────────────────────────

def display_startup(subtitle: str = ""):
    """One-line header, dim and unobtrusive."""
    header = Text()
    header.append("  acesim", style="dim #00D9FF")
    if subtitle:
        header.append(f"  //  {subtitle}", style="dim")
    console.print()
    console.print(header)
    console.print()


def display_error(message: str):
    console.print(Text(f"  {message}", style="dim #FF10F0"))


def display_info(message: str):
    console.print(Text(f"  {message}", style="dim"))


def display_scenario_result(result):
    """Verdict line plus every failed expectation and audit finding."""
    line = Text("  ")
    line.append_text(_mark(result.passed))
    line.append(f"  {result.name}", style="bright_white")
    line.append(f"  ·  {result.directives} directive(s), {result.expectations} expectation(s), "
                f"{len(result.trace)} trace entries", style="dim")
    console.print(line)
    for failure in result.failures:
        console.print(Text(f"    line {failure.line}: {failure.text}  ↳ {failure.reason}", style="dim #FF10F0"))
    for finding in result.audit:
        console.print(Text(f"    audit: {finding}", style="dim #FF10F0"))


def display_suite(rows):
    table = Table(title="attack suite", title_style="dim #00D9FF", border_style="dim", header_style="cyan")
    table.add_column("attack")
    table.add_column("what the hypervisor does", style="dim")
    table.add_column("expected")
    table.add_column("observed")
    table.add_column("conserved", justify="center")
    table.add_column("status")
    for row in rows:
        status = Text(row.status, style="neon_green" if row.defended else "magenta")
        table.add_row(row.name, row.attack, row.expected, row.observed,
                      "yes" if row.conserved else "no", status)
    console.print(table)
    defended = sum(r.defended for r in rows)
    console.print(Text(f"  {defended}/{len(rows)} defended", style="dim"))


def display_allocator_report(report, free_by_size: dict, confidential_bytes: int, note: str = ""):
    table = Table(title="page-token overhead", title_style="dim #00D9FF", border_style="dim",
                  header_style="cyan", show_header=True)
    table.add_column("quantity")
    table.add_column("value", justify="right")
    table.add_row("confidential memory", _bytes(confidential_bytes))
    table.add_row("free bytes", _bytes(report.free_bytes))
    table.add_row("free tokens", f"{report.free_tokens:,}")
    for label, n in free_by_size.items():
        table.add_row(f"  free {label}", f"{n:,}")
    table.add_row("allocated tokens", f"{report.allocated_tokens:,}")
    table.add_row("non-empty nodes", f"{report.nonempty_nodes:,}")
    table.add_row("token bytes (9 B each)", f"{report.token_bytes:,} B ({_bytes(report.token_bytes)})")
    table.add_row("node bytes (32 B each)", f"{report.node_bytes:,} B")
    table.add_row("modeled total", f"{report.modeled_bytes:,} B")
    console.print(table)
    if note:
        display_info(note)


def display_tap_header(info: dict):
    """Header view of a TAP: version, lockboxes, sizes. Never plaintext."""
    table = Table(title="TAP", title_style="dim #00D9FF", border_style="dim", header_style="cyan")
    table.add_column("#", justify="right")
    table.add_column("algorithm")
    table.add_column("id", justify="right")
    table.add_column("encapsulated key", justify="right")
    for i, box in enumerate(info["lockboxes"]):
        table.add_row(str(i), box["algorithm"], f"{box['algorithm_id']:#06x}", f"{box['length']} B")
    console.print(table)
    display_info(f"version {info['version']}  ·  nonce {info['nonce']}  ·  ciphertext {info['ciphertext_bytes']} B")


def display_unsealed(payload):
    """Measurements and secret sizes from an unsealed TAP; secret contents are withheld."""
    regs = payload.reference_measurements
    for name in regs.NAMES:
        console.print(Text(f"  {name:<14} {getattr(regs, name).hex()}", style="dim"))
    for index, data in payload.secrets:
        console.print(Text(f"  secret {index:<7} {len(data)} B", style="dim #00D9FF"))
