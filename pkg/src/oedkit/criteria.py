"""Goal-oriented A/D optimality criteria and their design gradients.

All evaluations at one design share a single Cholesky factorization of
the weighted Hessian (see :class:`DesignState`).  Criteria assume an
identity mass matrix, so ``F^* = F^T`` and ``P^* = P^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

from .bayes import InverseProblem, hessian_factor
from .kernels import (
    WeightKernelSpec,
    build_theta,
    diag_weight,
    theta_prime,
    vartheta_all,
    weighted_precision,
)
from .linalg import BlockDiag, CholFactor, rademacher_probes, spd_factorize

__all__ = [
    "CriterionSpec",
    "DesignState",
    "evaluate_design",
    "evaluate_weights",
    "a_criterion",
    "d_criterion",
    "a_gradient",
    "d_gradient",
    "criterion_value",
    "criterion_gradient",
    "sqrt_diagonal_gradient",
    "penalty",
    "oed_objective",
    "GradientReport",
    "fd_gradient",
    "gradient_check",
    "gradient_step_sweep",
]

Matrix = Union[np.ndarray, BlockDiag]


@dataclass(frozen=True)
class CriterionSpec:
    """Which criterion to optimize and how.

    ``kind`` is ``"A"`` or ``"D"``.  With ``randomized=True`` the A-criterion
    is replaced by a Hutchinson estimate using ``n_r`` Rademacher probes
    drawn once from ``seed``; every evaluation reuses the same probes.
    ``alpha`` weights the l1 penalty on the diagonal kernel weights.
    """

    kind: str = "A"
    randomized: bool = False
    n_r: int = 5
    alpha: float = 0.0
    p: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("A", "D"):
            raise ValueError("criterion kind must be 'A' or 'D'")
        if self.randomized and self.kind != "A":
            raise ValueError("randomized evaluation is only available for the A-criterion")
        if self.n_r < 1:
            raise ValueError("n_r must be >= 1")
        if self.alpha < 0:
            raise ValueError("penalty parameter alpha must be non-negative")
        if self.p != 1:
            raise ValueError("only the l1 penalty (p = 1) is supported")

    def probes(self, npred: int) -> np.ndarray:
        return _probes(npred, self.n_r, self.seed)


@lru_cache(maxsize=64)
def _probes(npred: int, n_r: int, seed: int) -> np.ndarray:
    Z = rademacher_probes(npred, n_r, np.random.default_rng(seed))
    Z.setflags(write=False)
    return Z


@dataclass
class DesignState:
    """Posterior quantities at one weighted precision ``W``.

    ``hinv_pstar`` is ``H^{-1} P^T`` and ``obs_pred`` is ``F H^{-1} P^T``;
    both are computed lazily from one factorization.
    """

    problem: InverseProblem
    W: Matrix
    factor: CholFactor
    _hinv_pstar: np.ndarray | None = field(default=None, repr=False)
    _gamma_pred: np.ndarray | None = field(default=None, repr=False)
    _gamma_factor: CholFactor | None = field(default=None, repr=False)

    @property
    def hinv_pstar(self) -> np.ndarray:
        if self._hinv_pstar is None:
            self._hinv_pstar = self.factor.solve(self.problem.goal.P.T)
        return self._hinv_pstar

    @property
    def obs_pred(self) -> np.ndarray:
        return self.problem.forward.matrix @ self.hinv_pstar

    @property
    def gamma_pred(self) -> np.ndarray:
        if self._gamma_pred is None:
            G = self.problem.goal.P @ self.hinv_pstar
            self._gamma_pred = 0.5 * (G + G.T)
        return self._gamma_pred

    @property
    def gamma_factor(self) -> CholFactor:
        if self._gamma_factor is None:
            self._gamma_factor = spd_factorize(self.gamma_pred)
        return self._gamma_factor


def evaluate_weights(problem: InverseProblem, W: Matrix) -> DesignState:
    return DesignState(problem, W, hessian_factor(problem, W))


def evaluate_design(problem: InverseProblem, kernel: WeightKernelSpec, design) -> DesignState:
    theta = build_theta(kernel, design, problem.times, spacetime=problem.noise.spacetime)
    return evaluate_weights(problem, weighted_precision(problem.noise, theta))


def _state(problem, kernel, design, state):
    return state if state is not None else evaluate_design(problem, kernel, design)


# criteria -----------------------------------------------------------------

def a_criterion(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
                design, state: DesignState | None = None) -> float:
    """Trace of the goal posterior covariance, exact or Hutchinson-estimated."""
    st = _state(problem, kernel, design, state)
    if not spec.randomized:
        return float(np.trace(st.gamma_pred))
    Z = spec.probes(problem.goal.npred)
    PU = problem.goal.P @ st.factor.solve(problem.goal.P.T @ Z)
    return float(np.sum(Z * PU) / Z.shape[1])


def d_criterion(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
                design, state: DesignState | None = None) -> float:
    """Log-determinant of the goal posterior covariance."""
    st = _state(problem, kernel, design, state)
    return st.gamma_factor.logdet


def criterion_value(problem, spec, kernel, design, state=None) -> float:
    fn = a_criterion if spec.kind == "A" else d_criterion
    return fn(problem, spec, kernel, design, state)


# gradients ----------------------------------------------------------------

def _space_terms(problem: InverseProblem, kernel, design):
    """Per-time ``R_m^{-1} (Hadamard) Theta'`` matrices."""
    tp = theta_prime(kernel, design)
    return [R_inv * tp for R_inv in problem.noise.precision.blocks]


def _spacetime_terms(problem: InverseProblem, kernel, design) -> np.ndarray:
    """Matrix whose column ``q`` is ``(Gamma^{-1} e_q) * vartheta_q``."""
    return problem.noise.precision * vartheta_all(kernel, design, problem.times)


def _exact_gradient(problem: InverseProblem, kernel, design, C: np.ndarray) -> np.ndarray:
    """``-2 sum_q`` contractions with ``G = C C^T`` (``C`` is ``nobs x r``)."""
    nsens, nt = problem.nsens, problem.forward.ntimes
    if not problem.noise.spacetime:
        grad = np.zeros(nsens)
        for m, T in enumerate(_space_terms(problem, kernel, design)):
            Cm = C[m * nsens:(m + 1) * nsens]
            Gmm = Cm @ Cm.T
            # diag(G_mm T)
            grad -= 2.0 * np.sum(Gmm * T.T, axis=1)
        return grad
    V = _spacetime_terms(problem, kernel, design)
    G = C @ C.T
    c = np.sum(G * V.T, axis=1)
    return -2.0 * c.reshape(nt, nsens).sum(axis=0)


def _randomized_gradient(problem: InverseProblem, kernel, design, psi: np.ndarray) -> np.ndarray:
    """Hutchinson gradient from probe images ``psi = F H^{-1} P^T Z``."""
    nsens, nt = problem.nsens, problem.forward.ntimes
    n_r = psi.shape[1]
    # identity mass: the adjoint images equal psi
    psi_adj = psi
    if not problem.noise.spacetime:
        grad = np.zeros(nsens)
        for m, T in enumerate(_space_terms(problem, kernel, design)):
            sl = slice(m * nsens, (m + 1) * nsens)
            grad -= 2.0 / n_r * np.sum(psi[sl] * (T.T @ psi_adj[sl]), axis=1)
        return grad
    V = _spacetime_terms(problem, kernel, design)
    c = np.sum(psi_adj * (V.T @ psi), axis=1)
    return -2.0 / n_r * c.reshape(nt, nsens).sum(axis=0)


def a_gradient(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
               design, state: DesignState | None = None) -> np.ndarray:
    st = _state(problem, kernel, design, state)
    if spec.randomized:
        Z = spec.probes(problem.goal.npred)
        psi = problem.forward.matrix @ st.factor.solve(problem.goal.P.T @ Z)
        return _randomized_gradient(problem, kernel, design, psi)
    return _exact_gradient(problem, kernel, design, st.obs_pred)


def d_gradient(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
               design, state: DesignState | None = None) -> np.ndarray:
    st = _state(problem, kernel, design, state)
    # C Gamma_pred^{-1} C^T = (C L^{-T})(C L^{-T})^T
    C = st.gamma_factor.solve_lower(st.obs_pred.T).T
    return _exact_gradient(problem, kernel, design, C)


def criterion_gradient(problem, spec, kernel, design, state=None) -> np.ndarray:
    fn = a_gradient if spec.kind == "A" else d_gradient
    return fn(problem, spec, kernel, design, state)


def sqrt_diagonal_gradient(problem: InverseProblem, kind: str, design) -> np.ndarray:
    """Closed form for diagonal noise with the SQRT kernel.

    ``-sum_m sum_i s_im * s_im`` with ``s_im = R_m^{-1/2} F_m H^{-1} P^T e_i``
    (for ``kind="D"`` the columns are first whitened by the goal posterior
    covariance).  Built directly from the weighted precision
    ``diag(sqrt(z)) R^{-1} diag(sqrt(z))`` without kernel derivatives.
    """
    if problem.noise.mode != "diagonal":
        raise ValueError("closed form requires a diagonal noise covariance")
    z = np.asarray(design, dtype=float)
    nsens = problem.nsens
    blocks = []
    for R in problem.noise.data.blocks:
        rinv = 1.0 / np.diag(R)
        blocks.append(np.diag(z * rinv))
    W = BlockDiag(blocks)
    fac = hessian_factor(problem, W)
    A = fac.solve(problem.goal.P.T)
    if kind == "D":
        L = np.linalg.cholesky(problem.goal.P @ A)
        A = np.linalg.solve(L, A.T).T
    grad = np.zeros(nsens)
    for Fm, R in zip(problem.forward.blocks, problem.noise.data.blocks):
        s = (Fm @ A) / np.sqrt(np.diag(R))[:, None]
        grad -= np.sum(s * s, axis=1)
    return grad


# penalty and objective ------------------------------------------------------

def penalty(kernel: WeightKernelSpec, design) -> tuple[float, np.ndarray]:
    """l1 norm of the diagonal kernel weights and its gradient."""
    w, dw = diag_weight(kernel, np.asarray(design, dtype=float))
    return float(np.sum(w)), np.asarray(dw, dtype=float)


def oed_objective(problem: InverseProblem, spec: CriterionSpec, kernel: WeightKernelSpec,
                  design) -> tuple[float, np.ndarray]:
    """Penalized criterion ``Psi + alpha * Phi`` and its gradient."""
    st = evaluate_design(problem, kernel, design)
    value = criterion_value(problem, spec, kernel, design, st)
    grad = criterion_gradient(problem, spec, kernel, design, st)
    if spec.alpha:
        phi, dphi = penalty(kernel, design)
        value += spec.alpha * phi
        grad = grad + spec.alpha * dphi
    return value, grad


# finite-difference checks ---------------------------------------------------

@dataclass(frozen=True)
class GradientReport:
    """Analytic vs central-difference gradient comparison.

    ``max_rel_err`` is ``max_i |g_i - fd_i| / max(||fd||_inf, atol)``.
    """

    step: float
    analytic: np.ndarray
    fd: np.ndarray
    max_rel_err: float
    worst_index: int

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_err <= tol


def fd_gradient(fun: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return g


def gradient_check(fun: Callable[[np.ndarray], float], grad, x, step: float = 1e-5,
                   atol: float = 1e-300) -> GradientReport:
    """Compare ``grad`` (array or callable) with central differences of ``fun``."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad(x) if callable(grad) else grad, dtype=float)
    fd = fd_gradient(fun, x, step)
    err = np.abs(g - fd)
    scale = max(float(np.max(np.abs(fd), initial=0.0)), atol)
    idx = int(np.argmax(err)) if err.size else -1
    return GradientReport(step, g, fd, float(err[idx] / scale) if err.size else 0.0, idx)


def gradient_step_sweep(fun, grad, x, steps: Sequence[float] = (1e-3, 1e-5, 1e-7)
                        ) -> list[GradientReport]:
    g = np.asarray(grad(x) if callable(grad) else grad, dtype=float)
    return [gradient_check(fun, g, x, h) for h in steps]
