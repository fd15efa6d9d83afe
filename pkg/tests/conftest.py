import numpy as np
import pytest

from splicecm.pipeline import prepare_pool
from splicecm.synthetic import make_pool_entries

SR = 16000


def sine(freq, amp, n, sr=SR, phase=0.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr + phase)


@pytest.fixture(scope="session")
def small_pool():
    return prepare_pool(make_pool_entries(3, n_speakers=2, bona_per_speaker=3, spoof_per_speaker=3, duration_range=(1.5, 2.5)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
