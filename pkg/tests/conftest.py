import re


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured numbers."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m and rep.when == "call":
                detail = dict(rep.user_properties).get("detail", "")
                rows.append((int(m.group(1)), m.group(2), outcome.upper().rstrip("ED"), detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for num, name, outcome, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num:2d} {name:<28s} {outcome:<4s} {detail}")
