import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtnetopt.channel import LinkCsi
from mtnetopt.network import RelayProblem, default_topology, single_link_topology
from mtnetopt.oracle import stationary_fading_samples

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

SNR_GAIN = 10 ** 1.1
FADE_FLOOR = 0.5
# fixed path loss used by the frozen oracle values
H_L = np.array([0.8, 0.7, 0.6, 0.5, 1.0, 1.0])


@pytest.fixture(autouse=True)
def _quiet_solver_logs():
    logging.getLogger("mtnetopt").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def relay():
    return RelayProblem(default_topology(), V=1.0, snr_gain=SNR_GAIN, fade_floor=FADE_FLOOR)


@pytest.fixture(scope="session")
def single():
    return RelayProblem(single_link_topology(), V=1.0, snr_gain=1.0)


@pytest.fixture(scope="session")
def oracle_samples():
    """Fading draws shared with the frozen conic-programming references."""
    return stationary_fading_samples(6, 9, seed=7)


@pytest.fixture(scope="session")
def relay_csi(oracle_samples):
    return LinkCsi(oracle_samples[0], H_L.copy())


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
