import sys
from pathlib import Path

# lets test modules import the loop oracles as a plain module
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    seen = {}
    for report in terminalreporter.getreports("passed") + terminalreporter.getreports("failed"):
        name = report.nodeid.rsplit("::", 1)[-1]
        if report.when == "call" and name.startswith("test_criterion_"):
            seen[int(name.split("_")[2])] = report.outcome
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(seen):
        ok, detail = RESULTS.get(n, (False, "test errored before reaching its verdict"))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
