import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, after capture is done."""
    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)",
                          rep.nodeid)
            if m and getattr(rep, "when", "call") == "call":
                results[int(m.group(1))] = outcome == "passed"
    if not results:
        return
    from test_acceptance import CRITERIA
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(results):
        verdict = "pass" if results[n] else "FAIL"
        terminalreporter.write_line(
            f"criterion {n:2d}: {verdict}  {CRITERIA.get(n, '')}"
        )
