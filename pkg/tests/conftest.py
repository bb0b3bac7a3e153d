"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion(request):
    """Tests call ``criterion.detail = "..."`` to attach measured numbers to their summary line."""
    class Detail:
        detail = ""
    holder = Detail()
    request.node._criterion = holder
    return holder


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    holder = getattr(item, "_criterion", None)
    if holder is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _CRITERIA.append((status, doc, holder.detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, doc, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {doc}" + (f"  [{detail}]" if detail else ""))
