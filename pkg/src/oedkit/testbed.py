"""Finite-volume advection-diffusion testbed.

A contaminant on the unit square is advected by a fixed divergence-free
flow and diffused with no-flux walls, stepped with implicit Euler.  The
initial condition is the unknown parameter; point sensors observe the
field at a few times and the goal is the field near a target region at a
later prediction time.

Cells are indexed ``k = i + nx * j`` with ``i`` along x and ``j`` along y.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from .bayes import ForwardModel, GoalOperator, InverseProblem, Prior
from .kernels import SpaceTimeCovariance, gaspari_cohn
from .linalg import NotPositiveDefinite, spd_factorize

__all__ = [
    "ModelConfig",
    "AdvectionDiffusion",
    "SensorGrid",
    "Testbed",
    "UndefinedRAE",
    "cell_centers",
    "bilinear_operator",
    "make_sensor_grid",
    "build_dynamics",
    "build_model",
    "build_gc_covariance",
    "build_prior",
    "build_goal",
    "true_parameter",
    "synth_data",
    "error_metrics",
    "build_testbed",
]


@dataclass(frozen=True)
class ModelConfig:
    """Geometry, physics, prior and goal settings.

    ``obstacles`` is a sequence of ``(x0, x1, y0, y1)`` rectangles whose
    cells are cut out of the flow.  ``amplitude`` fixes the concentration
    unit: it is the peak of the true initial field and, unless
    ``prior_max_var`` is given, the prior standard deviation.  The prior
    covariance is ``gamma * (prior_delta * I + L)^{-2}`` scaled so its
    largest variance is ``prior_max_var``.  Goal points form a
    ``pred_n x pred_n`` grid on ``pred_box``.
    """

    nx: int = 24
    ny: int = 24
    dt: float = 0.2
    kappa: float = 0.01
    max_speed: float = 0.5
    obs_times: tuple[float, ...] = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
    t_pred: float = 2.2
    obstacles: tuple[tuple[float, float, float, float], ...] = ()
    amplitude: float = 300.0
    prior_delta: float = 0.1
    prior_max_var: float | None = None
    pred_box: tuple[float, float, float, float] = (0.6, 0.8, 0.2, 0.4)
    pred_n: int = 4
    truth_center: tuple[float, float] = (0.35, 0.65)
    truth_width: float = 0.12

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 x 2 cells")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if not self.kappa > 0:
            raise ValueError("diffusivity must be positive (step matrix would be singular)")
        times = np.asarray(self.obs_times, dtype=float)
        if times.size < 1 or np.any(np.diff(times) <= 0) or times[0] <= 0:
            raise ValueError("observation times must be positive and increasing")
        if self.t_pred < 0:
            raise ValueError("prediction time must be non-negative")
        for t in (*self.obs_times, self.t_pred):
            if abs(t / self.dt - round(t / self.dt)) > 1e-9:
                raise ValueError(f"time {t} is not a multiple of dt={self.dt}")
        if self.prior_delta <= 0 or not self.amplitude > 0:
            raise ValueError("prior_delta and amplitude must be positive")
        if self.prior_max_var is not None and not self.prior_max_var > 0:
            raise ValueError("prior_max_var must be positive")

    @property
    def prior_variance(self) -> float:
        return self.amplitude**2 if self.prior_max_var is None else float(self.prior_max_var)

    @property
    def ncells(self) -> int:
        return self.nx * self.ny

    def steps(self, t: float) -> int:
        return int(round(t / self.dt))


def cell_centers(config: ModelConfig) -> np.ndarray:
    hx, hy = 1.0 / config.nx, 1.0 / config.ny
    xs = (np.arange(config.nx) + 0.5) * hx
    ys = (np.arange(config.ny) + 0.5) * hy
    X, Y = np.meshgrid(xs, ys)  # row j, column i -> k = i + nx*j
    return np.column_stack([X.ravel(), Y.ravel()])


def _obstacle_mask(config: ModelConfig) -> np.ndarray:
    c = cell_centers(config)
    mask = np.zeros(config.ncells, dtype=bool)
    for x0, x1, y0, y1 in config.obstacles:
        mask |= (c[:, 0] >= x0) & (c[:, 0] <= x1) & (c[:, 1] >= y0) & (c[:, 1] <= y1)
    return mask


def _inside_obstacle(config: ModelConfig, pts) -> np.ndarray:
    pts = np.atleast_2d(pts)
    out = np.zeros(len(pts), dtype=bool)
    for x0, x1, y0, y1 in config.obstacles:
        out |= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
    return out


def _stream(config: ModelConfig, x, y):
    return config.max_speed / np.pi * np.sin(np.pi * x) * np.sin(np.pi * y)


def transport_operator(config: ModelConfig) -> np.ndarray:
    """Dense ``A`` with ``du/dt = -A u`` (diffusion plus upwind advection).

    Face velocities are differences of the stream function at face end
    points, so the discrete flow is exactly divergence-free without
    obstacles.  Boundary and obstacle faces carry no flux.
    """
    nx, ny = config.nx, config.ny
    hx, hy = 1.0 / nx, 1.0 / ny
    n = nx * ny
    mask = _obstacle_mask(config)
    A = np.zeros((n, n))
    k = lambda i, j: i + nx * j  # noqa: E731

    def couple(a, b, flux_ab, diff_coef):
        # flux_ab: volumetric flow rate from cell a to b across the shared face
        A[a, a] += diff_coef
        A[a, b] -= diff_coef
        A[b, b] += diff_coef
        A[b, a] -= diff_coef
        if flux_ab > 0:
            A[a, a] += flux_ab / (hx * hy)
            A[b, a] -= flux_ab / (hx * hy)
        elif flux_ab < 0:
            A[b, b] -= flux_ab / (hx * hy)
            A[a, b] += flux_ab / (hx * hy)

    # vertical faces x = (i + 1) hx between (i, j) and (i + 1, j)
    for j in range(ny):
        for i in range(nx - 1):
            a, b = k(i, j), k(i + 1, j)
            if mask[a] or mask[b]:
                continue
            xf = (i + 1) * hx
            # u = d psi / dy integrated over the face
            q = _stream(config, xf, (j + 1) * hy) - _stream(config, xf, j * hy)
            couple(a, b, q, config.kappa / hx**2)
    # horizontal faces y = (j + 1) hy between (i, j) and (i, j + 1)
    for j in range(ny - 1):
        for i in range(nx):
            a, b = k(i, j), k(i, j + 1)
            if mask[a] or mask[b]:
                continue
            yf = (j + 1) * hy
            # v = -d psi / dx integrated over the face
            q = -(_stream(config, (i + 1) * hx, yf) - _stream(config, i * hx, yf))
            couple(a, b, q, config.kappa / hy**2)
    return A


@dataclass(frozen=True)
class AdvectionDiffusion:
    """Implicit Euler stepping ``(I + dt A) u_{n+1} = u_n``."""

    config: ModelConfig
    A: np.ndarray
    _lu: tuple = field(repr=False)

    def step(self, u, nsteps: int = 1) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        for _ in range(nsteps):
            u = lu_solve(self._lu, u)
        return u

    def step_adjoint(self, w, nsteps: int = 1) -> np.ndarray:
        """Apply ``(S^T)^nsteps`` where ``S`` is one forward step."""
        w = np.asarray(w, dtype=float)
        for _ in range(nsteps):
            w = lu_solve(self._lu, w, trans=1)
        return w

    def transition(self, nsteps: int) -> np.ndarray:
        return self.step(np.eye(self.config.ncells), nsteps)

    def restricted_transitions(self, C: np.ndarray, steps: Sequence[int]) -> list[np.ndarray]:
        """``C S^n`` for each ``n`` in ``steps`` (non-decreasing), via adjoint sweeps."""
        out = []
        Wt = np.asarray(C, dtype=float).T.copy()
        done = 0
        for n in steps:
            if n < done:
                raise ValueError("steps must be non-decreasing")
            Wt = self.step_adjoint(Wt, n - done)
            done = n
            out.append(Wt.T.copy())
        return out


def build_dynamics(config: ModelConfig) -> AdvectionDiffusion:
    A = transport_operator(config)
    M = np.eye(config.ncells) + config.dt * A
    lu = lu_factor(M)
    if np.any(np.abs(np.diag(lu[0])) < 1e-14):
        raise np.linalg.LinAlgError("implicit Euler step matrix is singular")
    return AdvectionDiffusion(config, A, lu)


def bilinear_operator(config: ModelConfig, points) -> np.ndarray:
    """Rows interpolate cell-centre values bilinearly; each row sums to 1."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    nx, ny = config.nx, config.ny
    if np.any(pts < 0) or np.any(pts > 1):
        raise ValueError("points must lie in the unit square")
    # continuous index coordinates relative to cell centres, clamped at the rim
    gx = np.clip(pts[:, 0] * nx - 0.5, 0.0, nx - 1.0)
    gy = np.clip(pts[:, 1] * ny - 0.5, 0.0, ny - 1.0)
    i0 = np.minimum(np.floor(gx).astype(int), nx - 2)
    j0 = np.minimum(np.floor(gy).astype(int), ny - 2)
    fx, fy = gx - i0, gy - j0
    H = np.zeros((len(pts), config.ncells))
    rows = np.arange(len(pts))
    for di, dj, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(H, (rows, (i0 + di) + nx * (j0 + dj)), w)
    return H


@dataclass(frozen=True)
class SensorGrid:
    locations: np.ndarray
    H: np.ndarray

    @property
    def count(self) -> int:
        return self.locations.shape[0]

    def spacing(self) -> float:
        """Mean nearest-neighbour distance between sensors."""
        if self.count < 2:
            return 1.0
        D = cdist(self.locations, self.locations)
        np.fill_diagonal(D, np.inf)
        return float(np.mean(D.min(axis=1)))


def make_sensor_grid(config: ModelConfig, count: int = 12, coords=None,
                     margin: float = 0.05) -> SensorGrid:
    """Explicit coordinates, or the first admissible points of a Halton sequence.

    Points inside obstacles are skipped so the grid is deterministic.
    """
    if coords is not None:
        locs = np.atleast_2d(np.asarray(coords, dtype=float))
        if locs.shape[1] != 2:
            raise ValueError("sensor coordinates must be (n, 2)")
        if np.any(locs <= 0) or np.any(locs >= 1):
            raise ValueError("sensors must lie strictly inside the domain")
        if np.any(_inside_obstacle(config, locs)):
            raise ValueError("a sensor lies inside an obstacle")
    else:
        if count < 1:
            raise ValueError("need at least one sensor")
        sampler = qmc.Halton(d=2, scramble=False)
        locs = np.empty((0, 2))
        while len(locs) < count:
            pts = margin + (1 - 2 * margin) * sampler.random(4 * count)
            pts = pts[~_inside_obstacle(config, pts)]
            locs = np.vstack([locs, pts])
        locs = locs[:count]
    return SensorGrid(locs, bilinear_operator(config, locs))


def build_model(config: ModelConfig, sensors: SensorGrid,
                dynamics: AdvectionDiffusion | None = None) -> ForwardModel:
    """Blocks ``H S^{n_m}`` for each observation time ``t_m = n_m dt``."""
    dyn = dynamics or build_dynamics(config)
    steps = [config.steps(t) for t in config.obs_times]
    blocks = dyn.restricted_transitions(sensors.H, steps)
    return ForwardModel(np.stack(blocks), times=np.asarray(config.obs_times, dtype=float))


def build_gc_covariance(sensors: SensorGrid, ell: float, sigma: float, ntimes: int,
                        spacing: float | None = None) -> SpaceTimeCovariance:
    """Time-invariant Gaspari-Cohn spatial covariance, one block per time.

    ``ell`` is measured in units of ``spacing`` (default: the mean
    nearest-neighbour distance of the sensor grid); ``ell = 0`` gives
    uncorrelated errors.
    """
    if ell < 0:
        raise ValueError("correlation length must be non-negative")
    if not sigma > 0:
        raise ValueError("noise standard deviation must be positive")
    n = sensors.count
    if ell == 0:
        return SpaceTimeCovariance.diagonal(np.full(n, sigma**2), ntimes)
    h = sensors.spacing() if spacing is None else spacing
    D = cdist(sensors.locations, sensors.locations)
    R = sigma**2 * gaspari_cohn(D / (ell * h))
    try:
        spd_factorize(R)
    except NotPositiveDefinite as err:
        raise ValueError(f"correlation matrix is not positive definite (pivot {err.index})")
    return SpaceTimeCovariance.repeated(R, ntimes)


def neumann_laplacian(nx: int, ny: int) -> np.ndarray:
    """Dimensionless 5-point graph Laplacian with no-flux boundaries."""
    def path(n):
        L = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
        L[0, 0] = L[-1, -1] = 1
        return L
    return np.kron(np.eye(ny), path(nx)) + np.kron(path(ny), np.eye(nx))


def build_prior(config: ModelConfig) -> Prior:
    K = config.prior_delta * np.eye(config.ncells) + neumann_laplacian(config.nx, config.ny)
    Kinv = np.linalg.inv(K)
    cov = Kinv @ Kinv
    cov = 0.5 * (cov + cov.T)
    gamma = config.prior_variance / np.max(np.diag(cov))
    return Prior(np.zeros(config.ncells), gamma * cov, precision=(K @ K) / gamma)


def prediction_points(config: ModelConfig) -> np.ndarray:
    x0, x1, y0, y1 = config.pred_box
    xs = np.linspace(x0, x1, config.pred_n)
    ys = np.linspace(y0, y1, config.pred_n)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def build_goal(config: ModelConfig, dynamics: AdvectionDiffusion | None = None,
               points=None) -> GoalOperator:
    """``P = C_p S^{n_p}``: field at the prediction points at ``t_pred``."""
    if config.t_pred <= 0 and points is None:
        raise ValueError("prediction time must be positive")
    dyn = dynamics or build_dynamics(config)
    C = bilinear_operator(config, prediction_points(config) if points is None else points)
    return GoalOperator(dyn.restricted_transitions(C, [config.steps(config.t_pred)])[0])


def true_parameter(config: ModelConfig) -> np.ndarray:
    c = cell_centers(config)
    r2 = np.sum((c - np.asarray(config.truth_center)) ** 2, axis=1)
    theta = config.amplitude * np.exp(-0.5 * r2 / config.truth_width**2)
    theta[_obstacle_mask(config)] = 0.0
    return theta


def synth_data(model: ForwardModel, noise: SpaceTimeCovariance, theta_true,
               rng: np.random.Generator | None = None, noiseless: bool = False) -> np.ndarray:
    y = model.matrix @ np.asarray(theta_true, dtype=float)
    if noiseless:
        return y
    if rng is None:
        raise ValueError("a numpy Generator is required for noisy data")
    return y + noise.cholesky() @ rng.standard_normal(noise.nobs)


class UndefinedRAE(ValueError):
    """Every reference value is zero; ``rmse`` still carries the RMSE."""

    def __init__(self, rmse: float):
        self.rmse = rmse
        super().__init__("relative error undefined: reference is identically zero")


def error_metrics(estimate, truth) -> tuple[np.ndarray, float]:
    """Relative absolute error per point (NaN where truth is 0) and RMSE.

    Raises
    ------
    UndefinedRAE
        When every reference entry is zero.
    """
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape != ref.shape:
        raise ValueError("estimate and truth lengths differ")
    rmse = float(np.sqrt(np.mean((est - ref) ** 2)))
    nz = ref != 0
    if not np.any(nz):
        raise UndefinedRAE(rmse)
    rae = np.full(ref.shape, np.nan)
    rae[nz] = np.abs((est[nz] - ref[nz]) / ref[nz])
    return rae, rmse


@dataclass
class Testbed:
    """Everything needed for one experiment.

    ``sigma`` is the observation noise standard deviation actually used.
    """

    config: ModelConfig
    sensors: SensorGrid
    dynamics: AdvectionDiffusion
    problem: InverseProblem
    theta_true: np.ndarray
    goal_true: np.ndarray
    y: np.ndarray
    sigma: float
    ell: float

    def with_correlation(self, ell: float, rng: np.random.Generator | None = None,
                         noiseless: bool = False) -> "Testbed":
        """Same model and sensors under a different error correlation length.

        New data are drawn only when ``rng`` is given or ``noiseless`` is set.
        """
        noise = build_gc_covariance(self.sensors, ell, self.sigma, self.problem.forward.ntimes)
        problem = self.problem.with_noise(noise)
        y = self.y
        if rng is not None or noiseless:
            y = synth_data(problem.forward, noise, self.theta_true, rng, noiseless)
        return replace(self, problem=problem, y=y, ell=ell)


def build_testbed(config: ModelConfig = ModelConfig(), nsens: int = 12, coords=None,
                  ell: float = 0.0, sigma: float | None = None, noise_level: float = 0.005,
                  seed: int = 0, noiseless: bool = False) -> Testbed:
    """Assemble the full inverse problem and synthetic data.

    ``sigma=None`` sets the noise level to ``noise_level`` times the largest
    noiseless observation of the true parameter.
    """
    dyn = build_dynamics(config)
    sensors = make_sensor_grid(config, nsens, coords)
    model = build_model(config, sensors, dyn)
    prior = build_prior(config)
    goal = build_goal(config, dyn)
    theta = true_parameter(config)
    if sigma is None:
        sigma = noise_level * float(np.max(np.abs(model.matrix @ theta)))
        if sigma <= 0:
            raise ValueError("noise level gives zero standard deviation")
    noise = build_gc_covariance(sensors, ell, sigma, model.ntimes)
    problem = InverseProblem(model, prior, goal, noise)
    rng = np.random.default_rng(seed)
    y = synth_data(model, noise, theta, rng, noiseless)
    return Testbed(config, sensors, dyn, problem, theta, goal.P @ theta, y, sigma, ell)
