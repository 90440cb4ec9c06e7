"""Per-criterion PASS/FAIL summary for the acceptance suite.

Tests in ``test_acceptance.py`` carry ``@pytest.mark.criterion(n)``; a
criterion passes when every test carrying its number passes. Tests may add
measured values through the ``acceptance_note`` fixture.
"""

import pytest

TITLES = {
    1: "frame-latency reduction",
    2: "denoiser vs quadrature oracle",
    3: "small-instance recovery",
    4: "cloud/edge degeneracy",
    5: "scaled trend suite",
    6: "low-resolution advantage",
    7: "property suites",
    8: "complexity formulas",
}

_outcomes = {}
_notes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def _criterion(item):
    m = item.get_closest_marker("criterion")
    return None if m is None else int(m.args[0])


def pytest_runtest_makereport(item, call):
    n = _criterion(item)
    if n is None:
        return
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        _outcomes[n] = False
    else:
        _outcomes.setdefault(n, True)


@pytest.fixture
def acceptance_note(request):
    n = _criterion(request.node)

    def note(text):
        _notes.setdefault(n, []).append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if _outcomes[n] else "FAIL"
        tr.write_line(f"criterion {n} ({TITLES.get(n, '')}): {status}")
        for text in _notes.get(n, []):
            tr.write_line(f"    {text}")
