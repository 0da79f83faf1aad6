import pytest

from morphotok.planted import PlantedSpec, planted_corpus

_criteria: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def small_planted():
    return planted_corpus(PlantedSpec(min_units=6000, seed=11))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    if rep.failed or (rep.when == "call" and n not in _criteria):
        _criteria[n] = ("FAIL" if rep.failed else "PASS", doc)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, doc = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {doc}")
