import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lvhg.periodic_model import constant_coefficients, family_f1  # noqa: E402
from lvhg.stable_core import StableNoise, axis_measure  # noqa: E402

ALPHA = 1.5


@pytest.fixture
def axis_noise():
    """alpha = 1.5, atoms +-e1, +-e2 with weight 1/2 (unit mass per pair)."""
    return StableNoise(ALPHA, axis_measure(2, 0.5))


@pytest.fixture
def f1():
    return family_f1()


@pytest.fixture
def free2():
    return constant_coefficients(2)


def cf_within(samples, xi, target, n_se=3.0, floor=0.0):
    from lvhg.verify import empirical_cf

    cf = empirical_cf(samples, xi)
    diff = np.abs(cf.values - target)
    return diff, np.all(diff <= n_se * cf.stderr + floor)


@pytest.fixture
def acceptance_line(request):
    """Record a one-line verdict, echoed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(text):
        print(text)
        lines.append(text)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
