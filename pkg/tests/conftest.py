import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    status = {True: "PASS", False: "FAIL", None: "SKIP"}
    for key in sorted(results, key=str):
        ok, detail = results[key]
        terminalreporter.write_line(f"criterion {key}: {status[ok]}  {detail}")
