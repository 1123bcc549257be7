import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "einn", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "einn"))


@pytest.fixture
def tmpdir_path(tmp_path):
    return str(tmp_path)


_verdicts = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` prints and records one PASS/FAIL line for acceptance criterion n."""

    def emit(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        _verdicts.append((n, line))
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_verdicts):
            terminalreporter.write_line(line)
