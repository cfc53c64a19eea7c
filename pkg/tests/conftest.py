import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


_VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.fixture
def detail(request):
    """Records a one-line summary for the acceptance line of the current test."""
    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    notes = [v for k, v in item.user_properties if k == "detail"]
    verdict = "PASS" if report.passed else "FAIL"
    if report.failed and report.when == "call" and call.excinfo is not None:
        notes.append(call.excinfo.exconly().splitlines()[0][:200])
    _VERDICTS[marker.args[0]] = (verdict, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        verdict, text = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {text}")
