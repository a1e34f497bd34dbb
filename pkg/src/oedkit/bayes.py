"""Linear Gaussian inverse problems with a weighted likelihood.

The data misfit precision ``W`` may be any symmetric matrix (dense or
:class:`~oedkit.linalg.BlockDiag`); with ``W = Gamma_noise^{-1}`` this is the
ordinary posterior.  The posterior precision (Hessian of the negative
log-posterior) is ``H(W) = Gamma_prior^{-1} + F^* W F``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .kernels import SpaceTimeCovariance
from .linalg import (
    BlockDiag,
    CholFactor,
    NotPositiveDefinite,
    spd_factorize,
    sym,
    two_pass_eigs,
)

__all__ = [
    "IndefiniteHessian",
    "ForwardModel",
    "Prior",
    "GoalOperator",
    "InverseProblem",
    "forward_apply",
    "adjoint_apply",
    "misfit_hessian",
    "weighted_hessian",
    "hessian_factor",
    "map_estimate",
    "goal_posterior_cov",
    "LowRankHessianInverse",
    "lowrank_hessian_inverse",
]

Matrix = Union[np.ndarray, BlockDiag]


class IndefiniteHessian(np.linalg.LinAlgError):
    """The weighted posterior precision is not positive definite."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"weighted Hessian is not positive definite (pivot {pivot})")


@dataclass(frozen=True)
class ForwardModel:
    """Parameter-to-observable map split by observation time.

    ``blocks`` has shape ``(ntimes, nsens, nparam)``; observations are
    stacked time-major.  ``mass`` holds the diagonal of the mass matrix
    that defines the parameter-space inner product.
    """

    blocks: np.ndarray
    mass: np.ndarray | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks[None]
        if blocks.ndim != 3:
            raise ValueError("forward blocks must be (ntimes, nsens, nparam)")
        object.__setattr__(self, "blocks", blocks)
        nt, _, npar = blocks.shape
        mass = np.ones(npar) if self.mass is None else np.asarray(self.mass, dtype=float)
        if mass.shape != (npar,) or np.any(mass <= 0):
            raise ValueError("mass matrix diagonal must be positive with length nparam")
        object.__setattr__(self, "mass", mass)
        times = np.arange(1.0, nt + 1.0) if self.times is None else np.asarray(self.times, float)
        if times.shape != (nt,):
            raise ValueError("need one time per forward block")
        object.__setattr__(self, "times", times)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray], **kw) -> "ForwardModel":
        return cls(np.stack([np.asarray(b, dtype=float) for b in blocks]), **kw)

    @property
    def ntimes(self) -> int:
        return self.blocks.shape[0]

    @property
    def nsens(self) -> int:
        return self.blocks.shape[1]

    @property
    def nparam(self) -> int:
        return self.blocks.shape[2]

    @property
    def nobs(self) -> int:
        return self.ntimes * self.nsens

    @property
    def matrix(self) -> np.ndarray:
        """Stacked ``(nobs, nparam)`` matrix."""
        return self.blocks.reshape(self.nobs, self.nparam)

    @property
    def identity_mass(self) -> bool:
        return bool(np.all(self.mass == 1.0))


def forward_apply(model: ForwardModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != model.nparam:
        raise ValueError(f"parameter length {theta.shape[0]} != {model.nparam}")
    return model.matrix @ theta


def adjoint_apply(model: ForwardModel, w) -> np.ndarray:
    """``F^* w = M^{-1} F^T w`` (adjoint in the mass-weighted inner product)."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != model.nobs:
        raise ValueError(f"observation length {w.shape[0]} != {model.nobs}")
    out = model.matrix.T @ w
    return out / (model.mass if out.ndim == 1 else model.mass[:, None])


@dataclass
class Prior:
    """Gaussian prior ``N(mean, cov)``.

    ``precision`` may be supplied when it is known in closed form (it is
    for the testbed); otherwise it is computed from the Cholesky factor.
    """

    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray | None = None
    factor: CholFactor = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = sym(self.cov)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("prior mean and covariance dimensions differ")
        self.factor = spd_factorize(self.cov)
        if self.precision is None:
            self.precision = self.factor.inverse()
        else:
            self.precision = sym(self.precision, rtol=1e-6)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class GoalOperator:
    """Linear quantity of interest ``rho = P theta``."""

    P: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape[0] < 1:
            raise ValueError("goal operator needs at least one row")
        object.__setattr__(self, "P", P)

    @property
    def npred(self) -> int:
        return self.P.shape[0]

    def adjoint(self, mass) -> np.ndarray:
        """``P^* = M^{-1} P^T`` as a dense ``(nparam, npred)`` matrix."""
        return self.P.T / np.asarray(mass)[:, None]


@dataclass(frozen=True)
class InverseProblem:
    forward: ForwardModel
    prior: Prior
    goal: GoalOperator
    noise: SpaceTimeCovariance

    def __post_init__(self):
        f = self.forward
        if self.prior.dim != f.nparam:
            raise ValueError("prior dimension does not match forward model")
        if self.goal.P.shape[1] != f.nparam:
            raise ValueError("goal operator columns do not match parameter dimension")
        if self.noise.nsens != f.nsens or self.noise.ntimes != f.ntimes:
            raise ValueError("noise covariance layout does not match forward model")

    @property
    def nobs(self) -> int:
        return self.forward.nobs

    @property
    def nsens(self) -> int:
        return self.forward.nsens

    @property
    def times(self) -> np.ndarray:
        return self.forward.times

    def with_noise(self, noise: SpaceTimeCovariance) -> "InverseProblem":
        return InverseProblem(self.forward, self.prior, self.goal, noise)

    def require_identity_mass(self):
        if not self.forward.identity_mass:
            raise NotImplementedError("posterior quantities assume an identity mass matrix")


def misfit_hessian(model: ForwardModel, W: Matrix) -> np.ndarray:
    """Dense ``F^* W F``."""
    if isinstance(W, BlockDiag):
        if W.count != model.ntimes or W.block_size != model.nsens:
            raise ValueError("weight blocks do not match forward model")
        out = np.zeros((model.nparam, model.nparam))
        for Fm, Wm in zip(model.blocks, W.blocks):
            out += Fm.T @ (Wm @ Fm)
    else:
        W = np.asarray(W, dtype=float)
        if W.shape != (model.nobs, model.nobs):
            raise ValueError("weight matrix does not match observation dimension")
        F = model.matrix
        out = F.T @ (W @ F)
    out /= model.mass[:, None]
    return out


def weighted_hessian(problem: InverseProblem, W: Matrix) -> np.ndarray:
    """Dense ``H(W) = Gamma_prior^{-1} + F^* W F``."""
    if not isinstance(W, BlockDiag) and not np.all(np.isfinite(W)):
        raise ValueError("weight matrix has non-finite entries")
    H = problem.prior.precision + misfit_hessian(problem.forward, W)
    if problem.forward.identity_mass:
        H = 0.5 * (H + H.T)
    return H


def hessian_factor(problem: InverseProblem, W: Matrix) -> CholFactor:
    """Cholesky factor of the weighted Hessian.

    Raises
    ------
    IndefiniteHessian
        When ``H(W)`` is not positive definite.
    """
    problem.require_identity_mass()
    try:
        return spd_factorize(weighted_hessian(problem, W))
    except NotPositiveDefinite as err:
        raise IndefiniteHessian(err.index) from None


def _apply_W(W: Matrix, y):
    return W.apply(y) if isinstance(W, BlockDiag) else np.asarray(W) @ y


def map_estimate(problem: InverseProblem, W: Matrix, y) -> np.ndarray:
    """MAP point of the weighted posterior, ``H^{-1}(Gamma_pr^{-1} m + F^* W y)``."""
    fac = hessian_factor(problem, W)
    prior = problem.prior
    rhs = prior.precision @ prior.mean + adjoint_apply(problem.forward, _apply_W(W, y))
    return fac.solve(rhs)


def goal_posterior_cov(problem: InverseProblem, W: Matrix) -> np.ndarray:
    """``P H(W)^{-1} P^*``."""
    fac = hessian_factor(problem, W)
    Pstar = problem.goal.adjoint(problem.forward.mass)
    return sym(problem.goal.P @ fac.solve(Pstar), rtol=1e-6)


@dataclass(frozen=True)
class LowRankHessianInverse:
    """``H^{-1} ~= Gamma - L V diag(lam / (1 + lam)) V^T L^T``.

    ``L`` is the prior covariance Cholesky factor, ``(lam, V)`` the leading
    eigenpairs of the prior-preconditioned misfit Hessian ``L^T F^* W F L``.
    """

    prior_cov: np.ndarray
    prior_factor: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.eigvals / (1.0 + self.eigvals)
        Lt_x = self.prior_factor.T @ x
        corr = self.eigvecs @ ((d[:, None] if x.ndim == 2 else d) * (self.eigvecs.T @ Lt_x))
        return self.prior_cov @ x - self.prior_factor @ corr

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.prior_cov.shape[0]))


def lowrank_hessian_inverse(problem: InverseProblem, W: Matrix, rank: int,
                            rng: np.random.Generator, oversample: int | None = None
                            ) -> LowRankHessianInverse:
    """Randomized low-rank approximation of ``H(W)^{-1}``.

    Exact whenever ``rank`` covers every non-zero eigenvalue of the
    prior-preconditioned misfit Hessian.
    """
    problem.require_identity_mass()
    n = problem.prior.dim
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}]")
    L = problem.prior.factor.L
    misfit = misfit_hessian(problem.forward, W)
    Hm = L.T @ misfit @ L
    Hm = 0.5 * (Hm + Hm.T)
    if oversample is None:
        oversample = min(10, n - rank)
    res = two_pass_eigs(Hm, n, rank, oversample=oversample, rng=rng)
    return LowRankHessianInverse(problem.prior.cov, L, res.eigvals, res.eigvecs)
