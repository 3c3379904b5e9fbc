import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[num])
