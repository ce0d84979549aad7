import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from tracefem import assemble_lb, build_box_mesh, discretize
from tracefem.solvers import estimate_condition, jacobi_scaled, solve_bicgstab, solve_cg

from conftest import BOX


def random_spd(rng, n, spread=1e3):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, spread, n)
    D = np.diag(rng.uniform(0.5, 5.0, n))
    return D @ (Q * ev) @ Q.T @ D


def dense_scaled_cond(A):
    d = np.sqrt(np.diag(A))
    ev = np.linalg.eigvalsh(A / np.outer(d, d))
    return ev[-1] / ev[0]


def test_identity_one_iteration(rng):
    b = rng.standard_normal(20)
    r = solve_cg(sp.identity(20, format="csr"), b)
    assert r.iterations == 1 and np.allclose(r.x, b, atol=1e-15) and r.converged


def test_diagonal(rng):
    d = rng.uniform(1, 10, 5)
    b = rng.standard_normal(5)
    r = solve_cg(sp.diags(d), b)
    assert np.abs(r.x - b / d).max() <= 1e-12


def test_zero_rhs():
    r = solve_cg(sp.identity(4), np.zeros(4))
    assert r.converged and np.all(r.x == 0)


def test_maxit_is_status(rng):
    A = sp.csr_matrix(random_spd(rng, 40, 1e6))
    r = solve_cg(A, rng.standard_normal(40), tol=1e-14, maxit=2)
    assert not r.converged and r.status == "not converged"


def test_nonfinite_rejected():
    A = sp.csr_matrix(np.array([[1.0, np.nan], [np.nan, 1.0]]))
    with pytest.raises(FloatingPointError):
        solve_cg(A, np.ones(2))
    with pytest.raises(FloatingPointError):
        estimate_condition(A)


def test_residual_contract(rng):
    A = sp.csr_matrix(random_spd(rng, 60))
    b = rng.standard_normal(60)
    r = solve_cg(A, b, tol=1e-9)
    assert r.converged and np.linalg.norm(b - A @ r.x) / np.linalg.norm(b) <= 1e-9


def test_energy_monotone(rng):
    A = sp.csr_matrix(random_spd(rng, 80, 1e4))
    r = solve_cg(A, rng.standard_normal(80), record=True)
    e = np.array(r.energy)
    assert len(e) > 5 and np.all(np.diff(e) <= 1e-12 * np.abs(e).max())


def test_bicgstab_nonsymmetric(rng):
    A = random_spd(rng, 50, 10.0) + 0.3 * np.triu(rng.standard_normal((50, 50)), 1)
    b = rng.standard_normal(50)
    r = solve_bicgstab(sp.csr_matrix(A), b)
    assert r.converged
    assert np.abs(r.x - np.linalg.solve(A, b)).max() <= 1e-8


def test_matches_dense_solve(sphere, harmonic):
    disc = discretize(sphere, build_box_mesh(BOX, 16), 1, 1)
    s = assemble_lb(disc, harmonic, "normal_volume")
    assert s.n <= 2000
    r = solve_cg(s.matrix, s.rhs)
    x = np.linalg.solve(s.matrix.toarray(), s.rhs)
    assert np.abs(r.x - x).max() <= 1e-8


def test_cond_diag():
    est = estimate_condition(sp.diags([1.0, 4.0]))
    assert est.cond == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cond_vs_dense(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 50)
    est = estimate_condition(sp.csr_matrix(A), seed=seed)
    assert abs(est.cond / dense_scaled_cond(A) - 1) <= 0.05
    assert est.reliable and est.lambda_max >= est.lambda_min > 0


def test_cond_deterministic(disc8, harmonic):
    A = assemble_lb(disc8, harmonic, "normal_volume").matrix
    a, b = estimate_condition(A, seed=5), estimate_condition(A, seed=5)
    assert a.cond == b.cond and a.steps == b.steps


def test_cond_large_sparse_vs_dense(disc8, harmonic):
    A = assemble_lb(disc8, harmonic, "normal_volume").matrix
    est = estimate_condition(A)
    assert abs(est.cond / dense_scaled_cond(A.toarray()) - 1) <= 0.05


def test_kernel_detection():
    # singular PSD matrix with a one-dimensional kernel
    rng = np.random.default_rng(0)
    B = rng.standard_normal((30, 29))
    A = B @ B.T + np.diag(np.full(30, 0.0))
    est = estimate_condition(sp.csr_matrix(A), kernel_tol=1e-10)
    assert est.kernel_dim == 1 and est.singular


def test_breakdown_restarts():
    # two distinct eigenvalues: the Krylov space is exhausted after two steps
    A = sp.diags(np.r_[np.ones(10), 3 * np.ones(10)])
    A = sp.csr_matrix(A + sp.csr_matrix((np.ones(2), ([0, 1], [1, 0])), shape=(20, 20)) * 0.5)
    est = estimate_condition(A, seed=1)
    dense = dense_scaled_cond(A.toarray())
    assert est.cond == pytest.approx(dense, rel=1e-8)


def test_zero_diagonal_excluded():
    A = sp.diags([2.0, 0.0, 5.0])
    est = estimate_condition(A)
    assert est.excluded_dofs == 1
    B, keep = jacobi_scaled(A)
    assert B.shape == (2, 2) and not keep[1]


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_cg_solves_random_spd(n, seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n, 100.0)
    b = rng.standard_normal(n)
    r = solve_cg(sp.csr_matrix(A), b)
    assert r.converged
    assert np.abs(A @ r.x - b).max() <= 1e-8 * np.abs(b).max() * np.abs(A).max()
