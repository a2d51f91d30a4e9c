import hypothesis
import numpy as np
import pytest

from tsdrive.anfis import LearnConfig, generate_excitation, train_model
from tsdrive.vehicle import NoiseSpec, VehicleParams

hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("default")

# one line per acceptance criterion, echoed after the run (see
# tests/test_acceptance.py)
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vehicle_params():
    return VehicleParams()


@pytest.fixture(scope="session")
def quick_model(vehicle_params):
    """Learned model shared by the controller/estimator tests; the
    acceptance suite trains its own and times it."""
    ds = generate_excitation(vehicle_params, NoiseSpec(), duration=300.0,
                             seed=1)
    model, _ = train_model(ds, LearnConfig(epochs=3))
    return model


@pytest.fixture(scope="session")
def quick_dataset(vehicle_params):
    return generate_excitation(vehicle_params, NoiseSpec(), duration=120.0,
                               seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
