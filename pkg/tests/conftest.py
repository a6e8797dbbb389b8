import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; skips record SKIP."""
    label = request.node.get_closest_marker("criterion").args[0]
    state = {"detail": ""}

    def note(detail: str) -> None:
        state["detail"] = detail

    yield note
    report = getattr(request.node, "rep_call", None)
    if report is None:
        return
    if report.skipped:
        _ACCEPTANCE.append(f"SKIP  {label}: {_reason(report)}")
        return
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE.append(f"{status}  {label}: {state['detail']}")


def _reason(report) -> str:
    longrepr = report.longrepr
    text = longrepr[2] if isinstance(longrepr, tuple) else str(longrepr)
    return text.removeprefix("Skipped: ")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
    elif rep.when == "setup" and rep.skipped and item.get_closest_marker("criterion"):
        _ACCEPTANCE.append(f"SKIP  {item.get_closest_marker('criterion').args[0]}: {_reason(rep)}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
