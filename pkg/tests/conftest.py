import numpy as np
import pytest
from hypothesis import settings

from macagg.record import EpochKeys

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def keys():
    return EpochKeys.from_secret(bytes(range(16)), 3)


@pytest.fixture
def seed():
    return bytes.fromhex("00112233445566778899aabbccddeeff")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail, elapsed, limit)`` records one acceptance line and asserts it."""

    def record(n: int, ok: bool, detail: str, elapsed: float, limit: float) -> None:
        in_time = elapsed < limit
        verdict = "PASS" if ok and in_time else "FAIL"
        ACCEPTANCE_LINES.append(f"{verdict} criterion {n:2d}: {detail} [{elapsed:.1f} s / limit {limit:.0f} s]")
        assert ok, detail
        assert in_time, f"took {elapsed:.1f} s, limit {limit:.0f} s"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
