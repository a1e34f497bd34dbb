import numpy as np
import pytest

from oedkit.bayes import (
    ForwardModel,
    GoalOperator,
    IndefiniteHessian,
    InverseProblem,
    Prior,
    adjoint_apply,
    forward_apply,
    goal_posterior_cov,
    lowrank_hessian_inverse,
    map_estimate,
    misfit_hessian,
    weighted_hessian,
)
from oedkit.kernels import SpaceTimeCovariance, WeightKernelSpec, build_theta, weighted_precision
from oedkit.linalg import BlockDiag

from conftest import MODES, random_problem, random_spd


def scalar_problem():
    return InverseProblem(ForwardModel(np.ones((1, 1, 1))), Prior([0.0], [[1.0]]),
                          GoalOperator([[1.0]]), SpaceTimeCovariance.diagonal([1.0], 1))


def dense_W(problem):
    return problem.noise.precision_dense()


# forward and adjoint ----------------------------------------------------------------

def test_forward_zero_and_identity():
    prob = random_problem()
    np.testing.assert_array_equal(forward_apply(prob.forward, np.zeros(10)), 0.0)
    model = ForwardModel(np.eye(3)[None])
    np.testing.assert_array_equal(forward_apply(model, [1.0, 0, 0]), [1.0, 0, 0])


def test_forward_two_cell_diffusion_step():
    # implicit step (I + dt K) u1 = u0 on two cells exchanging mass
    dt, k = 0.5, 1.0
    K = k * np.array([[1.0, -1.0], [-1.0, 1.0]])
    S = np.linalg.inv(np.eye(2) + dt * K)
    model = ForwardModel(np.stack([S, S @ S]), times=[0.5, 1.0])
    out = forward_apply(model, [1.0, 0.0])
    # closed form: mean preserved, difference damped by 1 / (1 + 2 dt k) per step
    d = 1.0 / (1.0 + 2 * dt * k)
    expected = [0.5 + 0.5 * d, 0.5 - 0.5 * d, 0.5 + 0.5 * d**2, 0.5 - 0.5 * d**2]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_forward_time_major_stacking():
    prob = random_problem(ntimes=3, nsens=4)
    theta = np.arange(10.0)
    out = forward_apply(prob.forward, theta)
    for m in range(3):
        np.testing.assert_allclose(out[4 * m:4 * m + 4], prob.forward.blocks[m] @ theta)


def test_length_checks():
    prob = random_problem()
    with pytest.raises(ValueError):
        forward_apply(prob.forward, np.zeros(9))
    with pytest.raises(ValueError):
        adjoint_apply(prob.forward, np.zeros(5))


def test_adjoint_identity_mass_is_transpose():
    prob = random_problem()
    w = np.random.default_rng(0).standard_normal(prob.nobs)
    np.testing.assert_array_equal(adjoint_apply(prob.forward, w), prob.forward.matrix.T @ w)
    np.testing.assert_array_equal(adjoint_apply(prob.forward, np.zeros(prob.nobs)), 0.0)


def test_adjoint_mass_weighted_inner_product():
    rng = np.random.default_rng(1)
    mass = rng.uniform(0.5, 2.0, 6)
    model = ForwardModel(rng.standard_normal((2, 3, 6)), mass=mass)
    for _ in range(10):
        u, v = rng.standard_normal(6), rng.standard_normal(6)
        lhs = forward_apply(model, u) @ v
        rhs = u @ (mass * adjoint_apply(model, v))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_model_validation():
    with pytest.raises(ValueError):
        ForwardModel(np.ones((2, 2)), mass=[1.0, -1.0])
    with pytest.raises(ValueError):
        ForwardModel(np.ones((2, 2, 2)), times=[1.0])
    with pytest.raises(ValueError):
        InverseProblem(ForwardModel(np.ones((1, 1, 2))), Prior([0.0], [[1.0]]),
                       GoalOperator([[1.0]]), SpaceTimeCovariance.diagonal([1.0], 1))


# Hessian -----------------------------------------------------------------------------

def test_hessian_zero_weights_is_prior_precision():
    prob = random_problem()
    H = weighted_hessian(prob, np.zeros((prob.nobs, prob.nobs)))
    np.testing.assert_allclose(H, prob.prior.precision, atol=1e-14)


def test_hessian_scalar():
    assert weighted_hessian(scalar_problem(), np.eye(1))[0, 0] == 2.0


@pytest.mark.parametrize("mode", MODES)
def test_hessian_matches_posterior_precision(mode):
    prob = random_problem(mode=mode, seed=3)
    F = prob.forward.matrix
    G = prob.noise.to_dense()
    brute = np.linalg.inv(prob.prior.cov) + F.T @ np.linalg.inv(G) @ F
    H = weighted_hessian(prob, prob.noise.precision)
    np.testing.assert_allclose(H, brute, atol=1e-10 * np.abs(brute).max())


def test_hessian_is_affine_in_theta():
    prob = random_problem(mode="blocks", seed=4)
    rng = np.random.default_rng(4)
    th1 = BlockDiag([random_spd(rng, 4) for _ in range(3)])
    th2 = BlockDiag([random_spd(rng, 4) for _ in range(3)])
    H1 = weighted_hessian(prob, weighted_precision(prob.noise, th1))
    H2 = weighted_hessian(prob, weighted_precision(prob.noise, th2))
    for t in (0.0, 0.3, 1.0):
        mix = BlockDiag([t * a + (1 - t) * b for a, b in zip(th1.blocks, th2.blocks)])
        Ht = weighted_hessian(prob, weighted_precision(prob.noise, mix))
        np.testing.assert_allclose(Ht, t * H1 + (1 - t) * H2,
                                   atol=1e-12 * np.abs(Ht).max())


def test_indefinite_hessian_is_reported():
    prob = scalar_problem()
    with pytest.raises(IndefiniteHessian):
        map_estimate(prob, -5.0 * np.eye(1), np.ones(1))


def test_non_finite_weights_rejected():
    prob = scalar_problem()
    with pytest.raises(ValueError):
        weighted_hessian(prob, np.array([[np.nan]]))


# MAP and goal covariance ------------------------------------------------------------

def test_map_scalar():
    assert map_estimate(scalar_problem(), np.eye(1), [2.0])[0] == pytest.approx(1.0)


def test_map_at_prior_mean_data():
    prob = random_problem(seed=5, mode="dense")
    rng = np.random.default_rng(5)
    mean = rng.standard_normal(10)
    prob = InverseProblem(prob.forward, Prior(mean, prob.prior.cov), prob.goal, prob.noise)
    y = forward_apply(prob.forward, mean)
    np.testing.assert_allclose(map_estimate(prob, prob.noise.precision, y), mean, atol=1e-10)
    zero = np.zeros((prob.nobs, prob.nobs))
    np.testing.assert_allclose(map_estimate(prob, zero, rng.standard_normal(prob.nobs)),
                               mean, atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_map_is_stationary(mode):
    prob = random_problem(seed=6, mode=mode)
    rng = np.random.default_rng(6)
    y = rng.standard_normal(prob.nobs)
    W = dense_W(prob)
    th = map_estimate(prob, prob.noise.precision, y)
    F = prob.forward.matrix
    grad = prob.prior.precision @ (th - prob.prior.mean) - F.T @ W @ (y - F @ th)
    scale = np.linalg.norm(F.T @ W @ y)
    assert np.linalg.norm(grad) <= 1e-8 * scale
    # second derivative of the objective is the weighted Hessian
    np.testing.assert_allclose(prob.prior.precision + F.T @ W @ F,
                               weighted_hessian(prob, prob.noise.precision), atol=1e-12)


def test_goal_cov_prior_only():
    prob = random_problem(seed=7)
    prob = InverseProblem(prob.forward, prob.prior, GoalOperator(np.eye(10)), prob.noise)
    G = goal_posterior_cov(prob, np.zeros((prob.nobs, prob.nobs)))
    np.testing.assert_allclose(G, prob.prior.cov, atol=1e-12)


def test_goal_cov_scalar():
    assert goal_posterior_cov(scalar_problem(), np.eye(1))[0, 0] == pytest.approx(0.5)


def test_goal_cov_matches_dense_inverse():
    prob = random_problem(seed=8, nparam=5, mode="dense")
    G = goal_posterior_cov(prob, prob.noise.precision)
    Hinv = np.linalg.inv(weighted_hessian(prob, prob.noise.precision))
    P = prob.goal.P
    assert np.max(np.abs(G - P @ Hinv @ P.T)) <= 1e-10
    assert np.linalg.eigvalsh(G).min() > 0


def test_non_identity_mass_is_rejected_for_posterior():
    rng = np.random.default_rng(9)
    model = ForwardModel(rng.standard_normal((1, 2, 3)), mass=[1.0, 2.0, 1.0])
    prob = InverseProblem(model, Prior(np.zeros(3), np.eye(3)), GoalOperator(np.eye(3)),
                          SpaceTimeCovariance.diagonal([1.0, 1.0], 1))
    with pytest.raises(NotImplementedError):
        goal_posterior_cov(prob, np.eye(2))


def test_information_is_monotone():
    rng = np.random.default_rng(10)
    for seed in range(20):
        prob = random_problem(seed=seed, mode="dense")
        W = dense_W(prob)
        B = rng.standard_normal((prob.nobs, 3))
        base = np.trace(goal_posterior_cov(prob, W))
        more = np.trace(goal_posterior_cov(prob, W + B @ B.T))
        assert more <= base + 1e-12 * base


def test_map_unbiased_over_noise_draws():
    prob = random_problem(seed=11, nparam=6, nsens=4, ntimes=3, mode="blocks")
    rng = np.random.default_rng(11)
    theta_true = prob.prior.mean  # zero mean keeps the prior unbiased at the truth
    F = prob.forward.matrix
    L = prob.noise.cholesky()
    W = prob.noise.precision
    draws = np.array([map_estimate(prob, W, F @ theta_true + L @ rng.standard_normal(prob.nobs))
                      for _ in range(200)])
    Hinv = np.linalg.inv(weighted_hessian(prob, W))
    bound = 3.0 * np.sum(np.sqrt(np.diag(Hinv)))
    assert np.linalg.norm(draws.mean(axis=0) - theta_true) <= bound


# low-rank inverse --------------------------------------------------------------------

def test_lowrank_full_rank_exact():
    prob = random_problem(seed=12, mode="dense")
    W = prob.noise.precision
    approx = lowrank_hessian_inverse(prob, W, 10, np.random.default_rng(0)).to_dense()
    exact = np.linalg.inv(weighted_hessian(prob, W))
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) <= 1e-8


def test_lowrank_zero_weights_gives_prior():
    prob = random_problem(seed=13)
    approx = lowrank_hessian_inverse(prob, np.zeros((prob.nobs, prob.nobs)), 3,
                                     np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal(10)
    np.testing.assert_allclose(approx.apply(x), prob.prior.cov @ x, atol=1e-12)


def test_lowrank_rank_bounds():
    prob = random_problem(seed=14)
    with pytest.raises(ValueError):
        lowrank_hessian_inverse(prob, prob.noise.precision, 11, np.random.default_rng(0))


def _preconditioned_misfit(prob, W):
    L = prob.prior.factor.L
    lam, V = np.linalg.eigh(L.T @ misfit_hessian(prob.forward, W) @ L)
    return np.clip(lam[::-1], 0, None), V[:, ::-1], L


def test_lowrank_matches_exact_truncation(small_testbed):
    prob = small_testbed.problem
    W = prob.noise.precision
    lam, V, L = _preconditioned_misfit(prob, W)
    P = prob.goal.P
    for r in (5, 12, 30):
        d = lam[:r] / (1 + lam[:r])
        exact = prob.prior.cov - L @ V[:, :r] @ np.diag(d) @ V[:, :r].T @ L.T
        approx = lowrank_hessian_inverse(prob, W, r, np.random.default_rng(0))
        np.testing.assert_allclose(np.trace(P @ approx.apply(P.T)), np.trace(P @ exact @ P.T),
                                   rtol=2e-3)


def test_lowrank_variance_reduction_rank_gives_accurate_trace(small_testbed):
    # rank from 99% of sum(lam / (1 + lam)), the prior variance removed per direction
    prob = small_testbed.problem
    W = prob.noise.precision
    lam, _, _ = _preconditioned_misfit(prob, W)
    g = lam / (1 + lam)
    rank = int(np.searchsorted(np.cumsum(g) / g.sum(), 0.99) + 1)
    approx = lowrank_hessian_inverse(prob, W, rank, np.random.default_rng(0))
    P = prob.goal.P
    tr = np.trace(goal_posterior_cov(prob, W))
    assert abs(np.trace(P @ approx.apply(P.T)) - tr) <= 0.01 * tr


def test_space_and_dense_layouts_agree():
    prob = random_problem(seed=15, mode="blocks")
    dense = prob.with_noise(SpaceTimeCovariance.dense(prob.noise.to_dense(), prob.nsens))
    kernel = WeightKernelSpec("sigmoid")
    z = np.linspace(-1, 1, prob.nsens)
    Ws = weighted_precision(prob.noise, build_theta(kernel, z, prob.times))
    Wd = weighted_precision(dense.noise, build_theta(kernel, z, prob.times, spacetime=True))
    np.testing.assert_allclose(goal_posterior_cov(prob, Ws), goal_posterior_cov(dense, Wd),
                               atol=1e-12)
