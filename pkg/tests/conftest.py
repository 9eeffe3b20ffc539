import re


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion (tests named ``test_criterion_<n>_...``)."""
    status: dict[int, tuple[bool, str]] = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_criterion_(\d+)_", getattr(rep, "nodeid", ""))
            if not m or (outcome == "passed" and rep.when != "call"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            n = int(m.group(1))
            ok = outcome == "passed" and status.get(n, (True, ""))[0]
            status[n] = (ok, detail or status.get(n, (True, ""))[1])
    if not status:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(status):
        ok, detail = status[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
