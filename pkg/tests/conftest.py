"""Shared pytest plumbing: a per-criterion verdict line for acceptance runs."""
import re

import pytest

# notes recorded by acceptance tests before their asserts fire
_criterion_notes: dict[int, str] = {}

_NODE_RE = re.compile(r"test_acceptance\.py::.*criterion_(\d+)")


def record_criterion(num: int, note: str) -> None:
    _criterion_notes[num] = note


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts: dict[int, bool] = {}
    for category, ok in (("passed", True), ("failed", False), ("error", False)):
        for report in terminalreporter.stats.get(category, []):
            match = _NODE_RE.search(getattr(report, "nodeid", ""))
            if match:
                num = int(match.group(1))
                verdicts[num] = verdicts.get(num, True) and ok
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(verdicts):
        status = "PASS" if verdicts[num] else "FAIL"
        note = _criterion_notes.get(num, "")
        suffix = f" - {note}" if note else ""
        terminalreporter.write_line(f"criterion {num:02d}: {status}{suffix}")
