from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from anomseg import numcore as nc

VERDICT_FILE = Path(__file__).parent / "_acceptance_lines.txt"


@pytest.fixture(autouse=True)
def verification_mode():
    """Every test starts and ends in 64-bit verification mode."""
    nc.set_default_dtype(np.float64)
    yield
    nc.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_sessionstart(session):
    if VERDICT_FILE.exists():
        VERDICT_FILE.unlink()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines past pytest's capture."""
    if VERDICT_FILE.exists():
        terminalreporter.section("acceptance verdicts")
        for line in VERDICT_FILE.read_text().splitlines():
            terminalreporter.write_line(line)
