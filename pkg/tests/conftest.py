import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import criteria  # noqa: E402

_OUTCOMES: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _OUTCOMES[n] = "PASS" if report.outcome == "passed" and _OUTCOMES.get(n) != "FAIL" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        detail = criteria.DETAILS.get(n, "no measurement recorded")
        terminalreporter.write_line(f"criterion {n:2d} {_OUTCOMES[n]:4s} {criteria.TITLES[n]}: {detail}")
