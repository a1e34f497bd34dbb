"""Dense symmetric-matrix helpers shared by the rest of the package.

Everything here works on plain ``numpy`` arrays.  Matrices are small enough
(a few thousand rows at most) that dense factorizations are the norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular

__all__ = [
    "NotPositiveDefinite",
    "SingularBlock",
    "sym",
    "hadamard",
    "CholFactor",
    "spd_factorize",
    "BlockDiag",
    "EigResult",
    "two_pass_eigs",
    "rademacher_probes",
]

SYMMETRY_RTOL = 1e-8


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot.

    ``index`` is the zero-based position of the offending pivot.
    """

    def __init__(self, index: int, msg: str | None = None):
        self.index = index
        super().__init__(msg or f"matrix is not positive definite (pivot {index})")


class SingularBlock(np.linalg.LinAlgError):
    """A block of a block-diagonal matrix could not be inverted."""

    def __init__(self, block: int, pivot: int):
        self.block = block
        self.pivot = pivot
        super().__init__(f"block {block} is not positive definite (pivot {pivot})")


def sym(A, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Return ``(A + A.T) / 2`` after checking ``A`` is symmetric to ``rtol``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A), initial=0.0), 1.0)
    asym = np.max(np.abs(A - A.T), initial=0.0)
    if asym > rtol * scale:
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return 0.5 * (A + A.T)


def hadamard(A, B) -> np.ndarray:
    """Entrywise (Schur) product with a strict shape check."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    return A * B


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor ``L`` with ``A = L L^T``."""

    L: np.ndarray

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b) -> np.ndarray:
        return cho_solve((self.L, True), np.asarray(b, dtype=float))

    def solve_lower(self, b) -> np.ndarray:
        """Apply ``L^{-1}``."""
        return solve_triangular(self.L, b, lower=True)

    def inverse(self) -> np.ndarray:
        return sym(self.solve(np.eye(self.n)), rtol=1e-6)


def spd_factorize(A) -> CholFactor:
    """Cholesky factorization that reports the failing pivot.

    Raises
    ------
    NotPositiveDefinite
        If a leading minor is not positive; ``err.index`` is zero-based.
    """
    A = sym(A)
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf argument {-info} invalid")
    return CholFactor(L)


@dataclass
class BlockDiag:
    """Direct sum of equally sized square blocks.

    Used for the per-time observation covariance and for the space-mode
    weighting matrix.  Vectors are stacked block after block.
    """

    blocks: list[np.ndarray]
    _inv: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        blocks = [np.asarray(b, dtype=float) for b in self.blocks]
        if not blocks:
            raise ValueError("BlockDiag needs at least one block")
        n = blocks[0].shape[0]
        for m, b in enumerate(blocks):
            if b.shape != (n, n):
                raise ValueError(f"block {m} has shape {b.shape}, expected {(n, n)}")
        self.blocks = blocks

    @classmethod
    def repeat(cls, R, count: int) -> "BlockDiag":
        R = np.asarray(R, dtype=float)
        return cls([R] * count)

    @property
    def block_size(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def count(self) -> int:
        return len(self.blocks)

    @property
    def shape(self) -> tuple[int, int]:
        n = self.block_size * self.count
        return (n, n)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.block_size
        if x.shape[0] != n * self.count:
            raise ValueError(f"length mismatch: {x.shape[0]} vs {n * self.count}")
        out = np.empty_like(x)
        for m, b in enumerate(self.blocks):
            out[m * n:(m + 1) * n] = b @ x[m * n:(m + 1) * n]
        return out

    def inverse(self) -> "BlockDiag":
        if self._inv is None:
            inv = []
            cache: dict[int, np.ndarray] = {}
            for m, b in enumerate(self.blocks):
                # identical blocks are common, invert each distinct array once
                key = id(b)
                if key not in cache:
                    try:
                        cache[key] = spd_factorize(b).inverse()
                    except NotPositiveDefinite as err:
                        raise SingularBlock(m, err.index) from None
                inv.append(cache[key])
            self._inv = inv
        return BlockDiag(list(self._inv))

    def to_dense(self) -> np.ndarray:
        n = self.block_size
        out = np.zeros(self.shape)
        for m, b in enumerate(self.blocks):
            out[m * n:(m + 1) * n, m * n:(m + 1) * n] = b
        return out

    def hadamard(self, other: "BlockDiag") -> "BlockDiag":
        if other.block_size != self.block_size or other.count != self.count:
            raise ValueError("block structures do not match")
        return BlockDiag([hadamard(a, b) for a, b in zip(self.blocks, other.blocks)])


Operator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _as_matmat(A: Operator) -> Callable[[np.ndarray], np.ndarray]:
    if callable(A):
        return A
    A = np.asarray(A, dtype=float)
    return lambda X: A @ X


@dataclass(frozen=True)
class EigResult:
    eigvals: np.ndarray
    eigvecs: np.ndarray
    deficient: bool = False


def two_pass_eigs(
    apply_A: Operator,
    n: int,
    rank: int,
    oversample: int | None = None,
    rng: np.random.Generator | None = None,
    rtol: float = 1e-12,
) -> EigResult:
    """Randomized eigendecomposition of a symmetric operator (two passes).

    The first pass sketches the range with ``rank + oversample`` Gaussian
    vectors, the second projects ``A`` onto the orthonormalized sketch.
    ``apply_A`` must accept an ``(n, k)`` block.  When the sketch has
    numerical rank below ``rank`` the returned arrays are shorter and
    ``deficient`` is set.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if oversample is None:
        oversample = min(10, n - rank)
    if rank + oversample > n:
        raise ValueError(f"rank + oversample = {rank + oversample} exceeds n = {n}")
    if rng is None:
        raise ValueError("an explicit numpy Generator is required")
    matmat = _as_matmat(apply_A)

    omega = rng.standard_normal((n, rank + oversample))
    Y = matmat(omega)
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    keep = s > rtol * max(s[0], np.finfo(float).tiny) if s.size else s > 0
    Q = U[:, keep]
    if Q.shape[1] == 0:
        return EigResult(np.zeros(0), np.zeros((n, 0)), True)

    T = Q.T @ matmat(Q)
    T = 0.5 * (T + T.T)
    lam, V = np.linalg.eigh(T)
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    r = min(rank, Q.shape[1])
    return EigResult(lam[:r], Q @ V[:, :r], r < rank)


def rademacher_probes(n: int, n_r: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, n_r)`` matrix of independent +/-1 entries."""
    if n_r < 1:
        raise ValueError("need at least one probe")
    return rng.choice(np.array([-1.0, 1.0]), size=(n, n_r))


def block_slices(block_size: int, count: int) -> Sequence[slice]:
    return [slice(m * block_size, (m + 1) * block_size) for m in range(count)]
