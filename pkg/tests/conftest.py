import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_DETAILS: dict = {}


@pytest.fixture
def record():
    """Attach a one-line detail to an acceptance criterion (printed in the summary)."""
    def _record(criterion: int, detail: str) -> None:
        ACCEPTANCE_DETAILS.setdefault(criterion, []).append(detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = rep.nodeid.split("::")[-1]
            if "test_acceptance.py" in rep.nodeid and name.startswith("test_criterion_"):
                n = int(name.split("_")[2])
                ok = status == "passed"
                outcomes[n] = outcomes.get(n, True) and ok
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        detail = "; ".join(ACCEPTANCE_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if outcomes[n] else 'FAIL'}  {detail}")
