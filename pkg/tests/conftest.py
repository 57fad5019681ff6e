from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metachain.chains import chain_a, chain_b

DATA = Path(__file__).parent / "data"

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def two_state():
    return chain_a()


@pytest.fixture
def wells():
    return chain_b()


@pytest.fixture
def wells_linked():
    return chain_b(linked=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def idx(chain, *labels):
    return {chain.index(s) for s in labels}


# acceptance summary -------------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = getattr(item, "criterion_detail", "")
        if not rep.passed:
            detail = rep.longrepr.reprcrash.message.splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)[:120]
        _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number} [{title}]: {status}"
        terminalreporter.write_line(f"{line} -- {detail}" if detail else line)


@pytest.fixture
def report_detail(request):
    """Attach a short measurement summary to the criterion's summary line."""

    def note(text: str):
        request.node.criterion_detail = text

    return note
