import numpy as np
import pytest

from anharmonic.model import box_sites, reference_model

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record and print a one-line verdict for an acceptance criterion."""

    def record(number: int, passed: bool, message: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {message}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["harmonic-chain", "fpu-chain", "quartic-lattice-2d", "rotator-chain"])
def shipped_model(request):
    return reference_model(request.param)


def random_configuration(model, geom, rng, scale=1.0):
    from anharmonic.dynamics import Configuration

    q = scale * rng.standard_normal((geom.n_sites, model.site_dim))
    p = scale * rng.standard_normal((geom.n_sites, model.site_dim))
    return Configuration(model.wrap(q), p, geom)


def default_box(model, a1=4, a2=2):
    return box_sites(model.nu, a1 if model.nu == 1 else a2)
