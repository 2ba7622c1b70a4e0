import sys


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion, repeated after the test report
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance summary")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
