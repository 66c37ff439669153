import numpy as np
import pytest

from pstrat import simkit
from pstrat.dataset import build


@pytest.fixture(scope="session")
def mono_data():
    data, _ = simkit.generate(simkit.preset("mono-normal", theta=0.5), seed=11)
    return data


@pytest.fixture(scope="session")
def strong_data():
    data, _ = simkit.generate(simkit.preset("strong-normal", theta=0.5), seed=12)
    return data


def cell_data(counts, y=None, covariate=None):
    """Covariate-free data with the given (n11, n10, n01, n00) cell counts."""
    z, s = [], []
    for (zz, ss), k in zip(((1, 1), (1, 0), (0, 1), (0, 0)), counts):
        z += [zz] * k
        s += [ss] * k
    n = len(z)
    cov = np.empty((n, 0)) if covariate is None else np.asarray(covariate, float).reshape(n, -1)
    names = [f"c{j}" for j in range(cov.shape[1])]
    return build(z, s, y, cov, names)


# criterion number -> "PASS ..." / "FAIL ..." line, filled by the acceptance suite
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
