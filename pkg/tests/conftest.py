import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_AC = re.compile(r"test_acceptance\.py::test_ac(\d+)_")
_results: dict[int, list] = {}


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or report.failed:
        entry = _results.setdefault(int(m.group(1)), [])
        text = dict(report.user_properties).get("detail", "")
        entry.append((report.passed, text))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(_results):
        runs = _results[ac]
        status = "PASS" if all(ok for ok, _ in runs) else "FAIL"
        terminalreporter.write_line(f"AC{ac}: {status}")
        for _, text in runs:
            if text:
                terminalreporter.write_line(f"    {text}")
