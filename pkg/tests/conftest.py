from __future__ import annotations

import torch
from hypothesis import settings

torch.set_num_threads(1)

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# (criterion, outcome, details) for tests tagged with @pytest.mark.criterion
_CRITERIA: list[tuple[str, str, str]] = []


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.append((props["criterion"], report.outcome, props.get("details", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, details in _CRITERIA:
        line = f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{details}]" if details else line)
