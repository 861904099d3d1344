import numpy as np
import pytest

from multiband_rare import scenario as sc
from multiband_rare.optimize import optimal_sum_square

TWO_PI = 2.0 * np.pi
MHZ = TWO_PI * 1e6


@pytest.fixture(scope="session")
def default():
    """(AtomScenario, BandPlan, DerivedConstants) for the bundled dual-band scenario."""
    return sc.default_scenario()


@pytest.fixture(scope="session")
def atom(default):
    return default[0]


@pytest.fixture(scope="session")
def bands(default):
    return default[1]


@pytest.fixture(scope="session")
def derived(default):
    return default[2]


@pytest.fixture(scope="session")
def a_star(derived):
    return optimal_sum_square(derived.chi0, derived.Gamma2)


def with_bands(atom, n):
    """Same atom with ``n`` RF bands."""
    from dataclasses import replace

    return replace(atom, n_bands=n)


def random_density_matrix(rng, d):
    m = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = m @ m.conj().T
    return rho / np.trace(rho).real


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
