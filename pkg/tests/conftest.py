"""Shared pytest hooks.

The acceptance tests register a measured-detail string per criterion;
this summary hook prints one pass/fail line per criterion after the
normal test report, so the acceptance verdict is visible even when
pytest swallows per-test stdout.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid or "::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            try:
                num = int(name.split("_")[2])
            except (IndexError, ValueError):
                continue
            verdict = "PASS" if status == "passed" else "FAIL"
            # keep the worst verdict if setup/call/teardown disagree
            if outcomes.get(num) != "FAIL":
                outcomes[num] = verdict
    if not outcomes:
        return
    try:
        from test_acceptance import DETAILS
    except ImportError:
        DETAILS = {}
    terminalreporter.section("acceptance criteria")
    for num in sorted(outcomes):
        detail = DETAILS.get(num, "")
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {num}: {outcomes[num]}{suffix}")
