import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        title, passed, detail = results[num]
        terminalreporter.write_line(f"{num}. [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
