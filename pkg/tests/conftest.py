import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from idfstudy.data import DepthSeries, days_in_year  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def hourly_year(year, depth_by_index=None, station="S1"):
    """One full hourly year of zeros with chosen hours set."""
    n = int(days_in_year(year)) * 24
    depths = np.zeros(n)
    for i, v in (depth_by_index or {}).items():
        depths[i] = v
    idx = np.arange(n)
    return DepthSeries(station, 3600, np.full(n, year), idx // 24 + 1, idx % 24, depths)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; lines are repeated in the terminal summary."""

    def _report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
