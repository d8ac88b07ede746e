import contextlib
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS when the block completes, FAIL (with the reason) when it raises."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE[number] = ("FAIL", f"{title}: {reason}")
        raise
    ACCEPTANCE[number] = ("PASS", f"{title}: {'; '.join(notes)}" if notes else title)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {text}")
