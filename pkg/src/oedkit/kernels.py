"""Design weighting kernels and the weighted observation precision.

A design ``zeta`` has one entry per candidate sensor.  A symmetric kernel
``omega(zeta_i, zeta_j)`` scales entry ``(i, j)`` of the observation
precision through a Hadamard product, optionally multiplied by a temporal
decorrelation ``rho(t_m, t_n)`` when errors are correlated in time.

Indices are zero-based throughout.  Observation vectors are stacked
time-major: entry ``k`` belongs to sensor ``k % nsens`` at time
``k // nsens``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .linalg import BlockDiag, spd_factorize, sym

__all__ = [
    "KERNELS",
    "SQRT_FLOOR",
    "WeightKernelSpec",
    "SpaceTimeCovariance",
    "eval_weight",
    "diag_weight",
    "gaspari_cohn",
    "temporal_rho",
    "build_theta",
    "eta_vector",
    "theta_prime",
    "vartheta",
    "vartheta_all",
    "weighted_precision",
    "weighted_precision_derivative",
]

KERNELS = ("sqrt", "exp", "sigmoid")
TEMPORAL = ("gauss", "gc")

# lower bound used when clamping SQRT designs; the derivative blows up at 0
SQRT_FLOOR = 1e-12

Matrix = Union[np.ndarray, BlockDiag]


@dataclass(frozen=True)
class WeightKernelSpec:
    """Weighting kernel plus optional temporal decorrelation.

    ``kind`` is one of ``"sqrt"``, ``"exp"`` or ``"sigmoid"``; ``a`` is the
    steepness used by EXP and SIGMOID.  ``temporal`` selects ``"gauss"`` or
    ``"gc"`` (Gaspari-Cohn) decorrelation with length scale ``time_scale``.
    """

    kind: str = "sigmoid"
    a: float = 1.0
    temporal: str | None = None
    time_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.a < 1:
            raise ValueError("kernel scaling a must be >= 1")
        if self.temporal is not None:
            if self.temporal not in TEMPORAL:
                raise ValueError(f"unknown temporal decorrelation {self.temporal!r}")
            if not self.time_scale > 0:
                raise ValueError("temporal length scale must be positive")

    @property
    def bounded(self) -> bool:
        """True when the design must stay inside ``[0, 1]``."""
        return self.kind == "sqrt"

    def with_a(self, a: float) -> "WeightKernelSpec":
        return WeightKernelSpec(self.kind, a, self.temporal, self.time_scale)


def _check_sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise ValueError("SQRT kernel is defined only for non-negative designs")


def eval_weight(spec: WeightKernelSpec, zi, zj):
    """Kernel value and its partials with respect to each argument.

    Returns ``(w, dw_dzi, dw_dzj)``; inputs broadcast like numpy arrays.
    For ``zi`` and ``zj`` being the same variable the total derivative is
    ``dw_dzi + dw_dzj``.
    """
    zi = np.asarray(zi, dtype=float)
    zj = np.asarray(zj, dtype=float)
    a = spec.a
    if spec.kind == "sqrt":
        _check_sqrt(zi)
        _check_sqrt(zj)
        si, sj = np.sqrt(zi), np.sqrt(zj)
        w = si * sj
        with np.errstate(divide="ignore", invalid="ignore"):
            di = np.where(zi > 0, 0.5 * sj / np.where(zi > 0, si, 1.0), np.inf)
            dj = np.where(zj > 0, 0.5 * si / np.where(zj > 0, sj, 1.0), np.inf)
        return w, di, dj
    if spec.kind == "exp":
        w = np.exp(-a * zi) * np.exp(-a * zj)
        return w, -a * w, -a * w
    # sigmoid of the mean design value
    w = 0.5 * (1.0 + np.tanh(0.25 * a * (zi + zj)))
    d = 0.5 * a * w * (1.0 - w)
    return w, d, d


def diag_weight(spec: WeightKernelSpec, z):
    """``omega(z_i, z_i)`` and its total derivative in ``z_i``."""
    w, di, dj = eval_weight(spec, z, z)
    return w, di + dj


def gaspari_cohn(r):
    """Fifth-order piecewise-rational Gaspari-Cohn correlation of ``r = d / l``.

    Supported on ``0 <= r < 2``; exactly zero beyond.
    """
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    inner = r <= 1.0
    outer = (r > 1.0) & (r < 2.0)
    x = r[inner]
    out[inner] = -0.25 * x**5 + 0.5 * x**4 + 0.625 * x**3 - (5.0 / 3.0) * x**2 + 1.0
    x = r[outer]
    out[outer] = (x**5 / 12.0 - 0.5 * x**4 + 0.625 * x**3 + (5.0 / 3.0) * x**2
                  - 5.0 * x + 4.0 - 2.0 / (3.0 * x))
    return out if out.ndim else float(out)


def temporal_rho(spec: WeightKernelSpec, tm, tn):
    """Temporal decorrelation factor; 1 when no temporal model is set."""
    d = np.abs(np.asarray(tm, dtype=float) - np.asarray(tn, dtype=float))
    if spec.temporal is None:
        return np.ones_like(d) if d.ndim else 1.0
    if spec.temporal == "gauss":
        out = np.exp(-d / (2.0 * spec.time_scale**2))
    else:
        out = gaspari_cohn(d / spec.time_scale)
    return out if np.ndim(out) else float(out)


@dataclass
class SpaceTimeCovariance:
    """Observation error covariance in one of three layouts.

    ``mode`` is ``"diagonal"`` (variances only), ``"blocks"`` (one spatial
    block per observation time) or ``"dense"`` (full space-time matrix).
    Diagonal and block modes are stored as a :class:`BlockDiag`.
    """

    mode: str
    data: Matrix
    nsens: int
    ntimes: int

    def __post_init__(self):
        if self.mode not in ("diagonal", "blocks", "dense"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.mode == "dense":
            self.data = sym(self.data)
            if self.data.shape[0] != self.nsens * self.ntimes:
                raise ValueError("dense covariance dimension must be nsens * ntimes")
            self._factor = spd_factorize(self.data)
            self._precision = sym(self._factor.solve(np.eye(self.nobs)), rtol=1e-6)
        else:
            if self.data.block_size != self.nsens or self.data.count != self.ntimes:
                raise ValueError("block dimensions must be nsens, block count ntimes")
            self.data = BlockDiag([sym(b) for b in self.data.blocks])
            self._precision = self.data.inverse()

    # constructors -------------------------------------------------------

    @classmethod
    def diagonal(cls, variances, ntimes: int) -> "SpaceTimeCovariance":
        variances = np.atleast_1d(np.asarray(variances, dtype=float))
        if np.any(variances <= 0):
            raise ValueError("variances must be positive")
        return cls("diagonal", BlockDiag.repeat(np.diag(variances), ntimes),
                   variances.size, ntimes)

    @classmethod
    def blocks(cls, blocks) -> "SpaceTimeCovariance":
        bd = blocks if isinstance(blocks, BlockDiag) else BlockDiag(list(blocks))
        return cls("blocks", bd, bd.block_size, bd.count)

    @classmethod
    def repeated(cls, R, ntimes: int) -> "SpaceTimeCovariance":
        return cls.blocks(BlockDiag.repeat(R, ntimes))

    @classmethod
    def dense(cls, G, nsens: int) -> "SpaceTimeCovariance":
        G = np.asarray(G, dtype=float)
        return cls("dense", G, nsens, G.shape[0] // nsens)

    # accessors ----------------------------------------------------------

    @property
    def nobs(self) -> int:
        return self.nsens * self.ntimes

    @property
    def spacetime(self) -> bool:
        return self.mode == "dense"

    @property
    def precision(self) -> Matrix:
        return self._precision

    def to_dense(self) -> np.ndarray:
        return self.data if self.mode == "dense" else self.data.to_dense()

    def precision_dense(self) -> np.ndarray:
        p = self._precision
        return p if isinstance(p, np.ndarray) else p.to_dense()

    def cholesky(self) -> np.ndarray:
        """Lower factor of the full covariance, for sampling noise."""
        if self.mode == "dense":
            return self._factor.L
        return BlockDiag([spd_factorize(b).L for b in self.data.blocks]).to_dense()


def _as_design(spec: WeightKernelSpec, design) -> np.ndarray:
    z = np.asarray(design, dtype=float).ravel()
    if not np.all(np.isfinite(z)):
        raise ValueError("design has non-finite entries")
    if spec.kind == "sqrt":
        _check_sqrt(z)
    return z


def _pair_matrices(spec, z):
    """Kernel matrix and matrix of partials ``D[i, j] = d omega(z_i, z_j) / d z_j``."""
    w, _, dj = eval_weight(spec, z[:, None], z[None, :])
    return w, dj


def build_theta(spec: WeightKernelSpec, design, times=None, spacetime: bool = False) -> Matrix:
    """Weighting matrix for a design.

    Space mode returns one identical ``nsens x nsens`` block per time.
    Space-time mode returns the dense ``nobs x nobs`` matrix with entry
    ``(k, h) = rho(t[k // nsens], t[h // nsens]) * omega(z[k % nsens], z[h % nsens])``.
    """
    z = _as_design(spec, design)
    times = np.atleast_1d(np.asarray([0.0] if times is None else times, dtype=float))
    block, _ = _pair_matrices(spec, z)
    if not spacetime:
        return BlockDiag.repeat(block, times.size)
    rho = temporal_rho(spec, times[:, None], times[None, :])
    return np.kron(rho, block)


def theta_prime(spec: WeightKernelSpec, design) -> np.ndarray:
    """Matrix whose column ``j`` is :func:`eta_vector` for sensor ``j``."""
    z = _as_design(spec, design)
    _, D = _pair_matrices(spec, z)
    tp = D.copy()
    # diagonal: half of the total derivative of omega(z_j, z_j)
    _, total = diag_weight(spec, z)
    tp[np.diag_indices_from(tp)] = 0.5 * total
    return tp


def eta_vector(spec: WeightKernelSpec, design, j: int) -> np.ndarray:
    """Partial derivatives of block row/column ``j`` of the weighting block.

    Entry ``i`` is ``d omega(z_i, z_j) / d z_j``, halved on ``i == j`` so that
    ``d Theta / d z_j = e_j eta^T + eta e_j^T``.
    """
    z = _as_design(spec, design)
    if not 0 <= j < z.size:
        raise IndexError(f"sensor index {j} out of range")
    return theta_prime(spec, z)[:, j]


def vartheta_all(spec: WeightKernelSpec, design, times) -> np.ndarray:
    """All space-time derivative vectors at once.

    Column ``q = i + m * nsens`` holds the vector for sensor ``i`` and
    time ``m``; its entry ``k`` equals
    ``rho(t_m, t[k // nsens]) * theta_prime[k % nsens, i]``.
    """
    z = _as_design(spec, design)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    tp = theta_prime(spec, z)
    rho = temporal_rho(spec, times[:, None], times[None, :])
    # rows: (time n, sensor s) ; cols: (time m, sensor i)
    return np.kron(rho, tp)


def vartheta(spec: WeightKernelSpec, design, times, i: int, m: int) -> np.ndarray:
    """Derivative vector for sensor ``i`` anchored at time index ``m``."""
    z = _as_design(spec, design)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if not 0 <= i < z.size:
        raise IndexError(f"sensor index {i} out of range")
    if not 0 <= m < times.size:
        raise IndexError(f"time index {m} out of range")
    tp_col = theta_prime(spec, z)[:, i]
    rho = temporal_rho(spec, times[m], times)
    return np.kron(np.atleast_1d(rho), tp_col)


def weighted_precision(noise: SpaceTimeCovariance, theta: Matrix) -> Matrix:
    """``W = Gamma_noise^{-1} (Hadamard) Theta`` in the layout of ``noise``."""
    prec = noise.precision
    if isinstance(prec, BlockDiag):
        if isinstance(theta, BlockDiag):
            return prec.hadamard(theta)
        theta = np.asarray(theta)
        if theta.shape != prec.shape:
            raise ValueError("weighting matrix does not match covariance dimension")
        n = noise.nsens
        return BlockDiag([b * theta[m * n:(m + 1) * n, m * n:(m + 1) * n]
                          for m, b in enumerate(prec.blocks)])
    if isinstance(theta, BlockDiag):
        raise ValueError("space-time covariance needs a dense space-time weighting matrix")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != prec.shape:
        raise ValueError("weighting matrix does not match covariance dimension")
    return prec * theta


def weighted_precision_derivative(noise: SpaceTimeCovariance, spec: WeightKernelSpec,
                                  design, times, i: int) -> Matrix:
    """Derivative of the weighted precision with respect to ``design[i]``.

    Block layouts get the per-block rank-two update
    ``e_i ((R_m^{-1} e_i) * eta_i)^T + transpose``; the dense layout sums
    ``e_q ((Gamma^{-1} e_q) * vartheta_{i,m})^T + transpose`` over times with
    ``q = i + m * nsens``.
    """
    z = _as_design(spec, design)
    n = z.size
    if not 0 <= i < n:
        raise IndexError(f"sensor index {i} out of range")
    prec = noise.precision
    if isinstance(prec, BlockDiag):
        eta = theta_prime(spec, z)[:, i]
        out = []
        for R_inv in prec.blocks:
            u = R_inv[:, i] * eta
            blk = np.zeros((n, n))
            blk[i, :] += u
            blk[:, i] += u
            out.append(blk)
        return BlockDiag(out)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.zeros(prec.shape)
    for m in range(times.size):
        q = i + m * n
        u = prec[:, q] * vartheta(spec, z, times, i, m)
        out[q, :] += u
        out[:, q] += u
    return out
