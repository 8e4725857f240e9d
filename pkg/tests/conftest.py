import os

# keep CPU runs single-threaded and reproducible
os.environ.setdefault("OMP_NUM_THREADS", "1")

# acceptance results, filled in by test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])
