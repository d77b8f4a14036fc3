import numpy as np
import pytest

from spisr import _backend


def backends():
    names = ["python"]
    if _backend.BACKEND == "compiled":
        names.insert(0, "compiled")
    return names


@pytest.fixture(params=backends())
def kernels(request):
    return _backend.get(request.param)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


_criteria = {}
_deselected = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev = _criteria.get(n)
    if prev is None or prev[1] == "PASS":
        _criteria[n] = (title, status, details)


def pytest_deselected(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _deselected[mark.args[0]] = mark.args[1]


def pytest_terminal_summary(terminalreporter):
    rows = {n: (t, "NOT RUN (deselected)", "") for n, t in _deselected.items() if n not in _criteria}
    rows.update(_criteria)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        title, status, details = rows[n]
        line = f"criterion {n}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
