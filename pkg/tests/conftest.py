import numpy as np
import pytest

from oedkit.bayes import ForwardModel, GoalOperator, InverseProblem, Prior
from oedkit.kernels import SpaceTimeCovariance
from oedkit.linalg import BlockDiag
from oedkit.testbed import ModelConfig, build_testbed

MODES = ("diagonal", "blocks", "dense")


def random_spd(rng, n, coupling=0.3):
    A = rng.standard_normal((n, n))
    return np.eye(n) + coupling * (A @ A.T) / n


def random_noise(rng, mode, nsens, ntimes, coupling=0.3):
    if mode == "diagonal":
        return SpaceTimeCovariance.diagonal(rng.uniform(0.5, 1.5, nsens), ntimes)
    if mode == "blocks":
        return SpaceTimeCovariance.blocks(
            BlockDiag([random_spd(rng, nsens, coupling) for _ in range(ntimes)]))
    return SpaceTimeCovariance.dense(random_spd(rng, nsens * ntimes, coupling), nsens)


def random_problem(seed=0, nparam=10, nsens=4, ntimes=3, npred=3, mode="diagonal",
                   times=None, coupling=0.3, scale=1.0):
    """Small dense inverse problem with a well-conditioned prior."""
    rng = np.random.default_rng(seed)
    blocks = scale * rng.standard_normal((ntimes, nsens, nparam))
    if times is None:
        times = np.linspace(1.0, 1.0 + 0.2 * (ntimes - 1), ntimes)
    forward = ForwardModel(blocks, times=np.asarray(times, dtype=float))
    prior = Prior(np.zeros(nparam), random_spd(rng, nparam))
    goal = GoalOperator(rng.standard_normal((npred, nparam)))
    noise = random_noise(rng, mode, nsens, ntimes, coupling)
    return InverseProblem(forward, prior, goal, noise)


@pytest.fixture(scope="session")
def small_testbed():
    return build_testbed(ModelConfig(), nsens=12, ell=0.0, seed=0)


@pytest.fixture(scope="session")
def default_testbed():
    return build_testbed(ModelConfig(), nsens=43, ell=0.0, seed=0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
