import numpy as np
import pytest

from invrescale.numerics import relative_error, seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(20240607)


def max_rel_err(probes: dict) -> float:
    return max(float(relative_error(a, n).max()) for a, n in probes.values())


def randomize(module, rng, std=0.2):
    """Give every parameter of a module nonzero random values (float64)."""
    for p in module.parameters():
        p.data = rng.normal(0.0, std, size=p.shape)
    return module


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
