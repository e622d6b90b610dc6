import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(RESULTS):
        name, passed, detail = RESULTS[k]
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        tr.write_line(f"criterion {k:2d} {verdict}  {name}: {detail}")
