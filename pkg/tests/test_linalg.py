import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oedkit.linalg import (
    BlockDiag,
    NotPositiveDefinite,
    SingularBlock,
    hadamard,
    rademacher_probes,
    spd_factorize,
    sym,
    two_pass_eigs,
)

from conftest import random_spd

seeds = st.integers(min_value=0, max_value=2**31 - 1)


# hadamard ------------------------------------------------------------------

def test_hadamard_entrywise():
    out = hadamard([[1, 2], [2, 4]], [[5, 6], [6, 8]])
    np.testing.assert_array_equal(out, [[5, 12], [12, 32]])


def test_hadamard_with_zero_and_identity():
    A = random_spd(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(hadamard(A, np.zeros((4, 4))), np.zeros((4, 4)))
    np.testing.assert_array_equal(hadamard(A, np.eye(4)), np.diag(np.diag(A)))


def test_hadamard_shape_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        hadamard(np.eye(2), np.eye(3))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_hadamard_distributes(seed):
    rng = np.random.default_rng(seed)
    # integer entries keep every product and sum exactly representable
    A, B, C = (rng.integers(-1000, 1000, (5, 5)).astype(float) for _ in range(3))
    np.testing.assert_array_equal(hadamard(A, B + C), hadamard(A, B) + hadamard(A, C))


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(0, 7))
def test_hadamard_rank_one_column_identity(seed, i):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((8, 8))
    A = A + A.T
    y = rng.standard_normal(8)
    e = np.zeros(8)
    e[i] = 1.0
    lhs = hadamard(A, np.outer(e, y))
    rhs = np.outer(e, (A @ e) * y)
    assert np.max(np.abs(lhs - rhs)) == 0.0


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_diag_of_weighted_gram_is_sum_of_squares(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    A = A + A.T
    b = rng.uniform(0, 2, 6)
    lhs = np.diag(A @ A.T @ np.diag(b))
    S = np.sqrt(b)[:, None] * A  # column i is B^{1/2} A e_i
    rhs = np.sum(S * S, axis=1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1.0, np.abs(lhs).max()))


def test_sym_rejects_asymmetric_and_symmetrizes_noise():
    with pytest.raises(ValueError, match="not symmetric"):
        sym([[1.0, 2.0], [0.0, 1.0]])
    A = np.array([[1.0, 2.0], [2.0 + 1e-12, 1.0]])
    S = sym(A)
    assert np.max(np.abs(S - S.T)) == 0.0


# Cholesky --------------------------------------------------------------------

@pytest.mark.parametrize("A, expected", [
    (np.eye(3), 0.0),
    (np.diag([2.0, 3.0]), math.log(6.0)),
    (np.array([[4.0, 2.0], [2.0, 3.0]]), math.log(4 * 3 - 2 * 2)),
])
def test_logdet(A, expected):
    assert spd_factorize(A).logdet == pytest.approx(expected, abs=1e-14)


def test_factor_diag_positive():
    L = spd_factorize(random_spd(np.random.default_rng(1), 6)).L
    assert np.all(np.diag(L) > 0)
    assert np.allclose(np.triu(L, 1), 0.0)


@pytest.mark.parametrize("A, pivot", [
    ([[1.0, 0.0], [0.0, -1.0]], 1),
    ([[0.0]], 0),
    ([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1),
])
def test_not_positive_definite_names_pivot(A, pivot):
    with pytest.raises(NotPositiveDefinite) as err:
        spd_factorize(A)
    assert err.value.index == pivot
    assert str(pivot) in str(err.value)


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(2, 30))
def test_solve_residual(seed, n):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = Q @ np.diag(np.logspace(0, 6, n)) @ Q.T
    b = rng.standard_normal(n)
    x = spd_factorize(A).solve(b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-10


# block diagonal --------------------------------------------------------------

def test_blockdiag_dense_layout():
    np.testing.assert_array_equal(BlockDiag([[[2.0]], [[3.0]]]).to_dense(), np.diag([2.0, 3.0]))


def test_blockdiag_inverse_blockwise():
    rng = np.random.default_rng(2)
    blocks = [random_spd(rng, 3) for _ in range(4)]
    B = BlockDiag(blocks)
    inv = B.inverse()
    for b, bi in zip(blocks, inv.blocks):
        np.testing.assert_allclose(bi, np.linalg.inv(b), atol=1e-12)
    np.testing.assert_allclose(inv.to_dense() @ B.to_dense(), np.eye(12), atol=1e-12)


def test_identical_blocks_match_kronecker():
    R = np.array([[2.0, 0.5], [0.5, 1.0]])
    B = BlockDiag.repeat(R, 3)
    assert np.max(np.abs(B.to_dense() - np.kron(np.eye(3), R))) == 0.0


def test_blockdiag_apply():
    rng = np.random.default_rng(3)
    B = BlockDiag([random_spd(rng, 3) for _ in range(2)])
    x = rng.standard_normal(6)
    np.testing.assert_allclose(B.apply(x), B.to_dense() @ x, atol=1e-14)
    with pytest.raises(ValueError):
        B.apply(np.ones(5))


def test_singular_block_reports_index():
    B = BlockDiag([np.eye(2), np.eye(2), np.array([[1.0, 1.0], [1.0, 1.0]])])
    with pytest.raises(SingularBlock) as err:
        B.inverse()
    assert err.value.block == 2


def test_blockdiag_rejects_ragged_blocks():
    with pytest.raises(ValueError):
        BlockDiag([np.eye(2), np.eye(3)])


# randomized eigensolver --------------------------------------------------------

def test_two_pass_diagonal():
    res = two_pass_eigs(np.diag([3.0, 2.0, 1.0]), 3, 2, oversample=1,
                        rng=np.random.default_rng(0))
    np.testing.assert_allclose(res.eigvals, [3.0, 2.0], atol=1e-10)
    assert not res.deficient


def test_two_pass_rank_one():
    v = np.array([1.0, 2.0, -2.0, 0.5])
    res = two_pass_eigs(np.outer(v, v), 4, 1, rng=np.random.default_rng(0))
    assert res.eigvals[0] == pytest.approx(v @ v, rel=1e-12)


def test_two_pass_full_rank_reconstruction():
    rng = np.random.default_rng(4)
    A = random_spd(rng, 12)
    res = two_pass_eigs(A, 12, 12, oversample=0, rng=rng)
    V, lam = res.eigvecs, res.eigvals
    rel = np.linalg.norm(A - V @ np.diag(lam) @ V.T) / np.linalg.norm(A)
    assert rel <= 1e-8
    np.testing.assert_allclose(V.T @ V, np.eye(12), atol=1e-10)
    assert np.all(np.diff(lam) <= 0)


def test_two_pass_accepts_callable():
    A = np.diag(np.arange(10.0, 0.0, -1.0))
    res = two_pass_eigs(lambda X: A @ X, 10, 3, rng=np.random.default_rng(0))
    np.testing.assert_allclose(res.eigvals, [10, 9, 8], rtol=1e-10)


def test_two_pass_flags_rank_deficiency():
    v = np.ones(6)
    res = two_pass_eigs(np.outer(v, v), 6, 3, rng=np.random.default_rng(0))
    assert res.deficient
    assert res.eigvals.size < 3


def test_two_pass_argument_checks():
    with pytest.raises(ValueError):
        two_pass_eigs(np.eye(4), 4, 3, oversample=2, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        two_pass_eigs(np.eye(4), 4, 2)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_two_pass_matches_dense_with_gap(seed):
    rng = np.random.default_rng(seed)
    n, r = 30, 5
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.concatenate([np.linspace(10, 5, r), np.zeros(n - r)])
    A = Q @ np.diag(lam) @ Q.T
    res = two_pass_eigs(A, n, r, rng=rng)
    exact = np.sort(np.linalg.eigvalsh(A))[::-1][:r]
    np.testing.assert_allclose(res.eigvals, exact, rtol=1e-8)


# probes ------------------------------------------------------------------------

def test_probes_are_signs_and_exact_on_diagonals():
    rng = np.random.default_rng(0)
    Z = rademacher_probes(7, 4, rng)
    assert set(np.unique(Z)) <= {-1.0, 1.0}
    D = np.diag(rng.uniform(size=7))
    for z in Z.T:
        assert z @ D @ z == pytest.approx(np.trace(D), abs=1e-15)


def test_probes_deterministic():
    a = rademacher_probes(5, 3, np.random.default_rng(42))
    b = rademacher_probes(5, 3, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_probe_mean_near_zero():
    z = rademacher_probes(10_000, 1, np.random.default_rng(7))
    assert abs(z.mean()) <= 3.0 / math.sqrt(10_000)


def test_probes_need_at_least_one():
    with pytest.raises(ValueError):
        rademacher_probes(3, 0, np.random.default_rng(0))
