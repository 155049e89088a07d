import sys


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts (one line per criterion) after the test report."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
