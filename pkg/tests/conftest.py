import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import ACCEPTANCE_RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
