import numpy as np
import pytest

from fedstab.data import DataGenSpec, generate_federation


@pytest.fixture
def small_spec():
    return DataGenSpec.synthetic(num_clients=4, num_classes=4, feature_dim=5, rho=0.5, samples_per_client=12)


@pytest.fixture
def small_fed(small_spec):
    fed, _ = generate_federation(small_spec, 123)
    return fed


def point_mass_spec(num_clients=3, num_classes=3, feature_dim=4, n=6, shared=False):
    """Every client law is a point mass: one class each and no noise.

    ``shared`` puts every client on the same point, so the data are i.i.d.
    """
    return DataGenSpec.synthetic(
        num_clients=num_clients, num_classes=num_classes, feature_dim=feature_dim, rho=1.0,
        samples_per_client=n, noise_scale=0.0, pairs=[(0, 0) if shared else (i % num_classes, i % num_classes) for i in range(num_clients)],
    )


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
