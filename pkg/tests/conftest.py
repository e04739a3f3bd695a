import numpy as np
import pytest

from lrsysid.model import Dimensions, make_random_stable_system, sample_trajectory

ACCEPTANCE_LINES = []


def random_problem(seed, n_x=2, n_u=1, n_y=1, n_w=None, T=15, radius=0.8, sigma_1=0.5,
                   sigma_w=0.2, sigma_v=0.1, direct=True):
    """A seeded random model together with data sampled from it."""
    dims = Dimensions(n_x, n_u, n_y, n_w or n_x)
    model = make_random_stable_system(dims, radius, seed, sigma_1=sigma_1, sigma_w=sigma_w,
                                      sigma_v=sigma_v, direct=direct)
    model = model.replace(mu=np.random.default_rng(seed + 7).standard_normal(n_x))
    u = np.random.default_rng(seed + 11).standard_normal((T, n_u))
    traj = sample_trajectory(model, u, seed + 13)
    return model, traj.u, traj.y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
