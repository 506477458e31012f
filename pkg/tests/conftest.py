import numpy as np
import pytest

from stablebranch.cumulant import SolverOptions
from stablebranch.model import (
    BranchingMechanism,
    MotionGenerator,
    StateSpace,
    calibrate_critical,
)


@pytest.fixture(scope="session")
def scalar_model():
    """d=1, kappa=1, gamma=1.5, calibrated to beta=0; closed forms available."""
    space = StateSpace(d=1)
    motion = MotionGenerator(space=space, Q=[[0.0]])
    mech = BranchingMechanism(beta=[0.25], kappa=[1.0], gamma=[1.5])
    return calibrate_critical(motion, mech)


@pytest.fixture(scope="session")
def two_site_model():
    """Symmetric two-site chain with gamma = (1.2, 1.8); phi = phi* = 1/sqrt(2)."""
    space = StateSpace(d=2)
    motion = MotionGenerator(space=space, Q=[[-1.0, 1.0], [1.0, -1.0]])
    mech = BranchingMechanism(beta=[0.0, 0.0], kappa=[1.0, 1.0], gamma=[1.2, 1.8])
    return calibrate_critical(motion, mech)


@pytest.fixture(scope="session")
def three_site_model():
    """Asymmetric three-site chain with gamma = (1.3, 1.3, 1.7)."""
    space = StateSpace(d=3)
    motion = MotionGenerator(
        space=space,
        Q=[[-1.2, 0.8, 0.4], [0.5, -0.9, 0.4], [0.3, 0.6, -0.9]],
    )
    mech = BranchingMechanism(
        beta=[0.1, -0.05, 0.2], kappa=[1.0, 0.8, 1.2], gamma=[1.3, 1.3, 1.7]
    )
    return calibrate_critical(motion, mech)


@pytest.fixture(scope="session")
def weighted_model():
    """Two sites with non-uniform reference weights; exercises every m-scaling."""
    space = StateSpace(d=2, m=[1.0, 2.5])
    motion = MotionGenerator(space=space, Q=[[-1.2, 1.2], [0.7, -0.7]])
    mech = BranchingMechanism(beta=[0.3, -0.2], kappa=[1.0, 0.8], gamma=[1.4, 1.7])
    return calibrate_critical(motion, mech)


@pytest.fixture(scope="session")
def loose_opts():
    """Tolerance profile for long-horizon asymptotic runs."""
    return SolverOptions(rel_tol=1e-7)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260808)


def normalized_ones(model):
    ones = np.ones(model.d)
    return ones / model.inner_m(ones, model.phi_star)
