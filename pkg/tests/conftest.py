import numpy as np
import pytest

from fcdistill import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


BACKENDS = [k for k in (_backend.python_kernels, _backend.compiled_kernels) if k is not None]


@pytest.fixture(params=BACKENDS, ids=lambda k: k.NAME)
def backend(request):
    return request.param


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def report():
    """``report(n, passed, detail)`` records one acceptance line."""

    def _record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
