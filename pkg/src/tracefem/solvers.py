"""Krylov solvers with Jacobi preconditioning and Lanczos condition estimates."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh_tridiagonal

__all__ = ["SolveReport", "CondEstimate", "solve_cg", "solve_bicgstab", "estimate_condition", "jacobi_scaled"]


@dataclass
class SolveReport:
    x: np.ndarray
    iterations: int
    residual: float  # final relative residual |b - Ax| / |b|
    time_ms: float
    converged: bool
    method: str = "cg"
    energy: list = field(default_factory=list)

    @property
    def status(self):
        return "converged" if self.converged else "not converged"


@dataclass
class CondEstimate:
    lambda_max: float
    lambda_min: float
    steps: int
    reliable: bool
    kernel_dim: int = 0
    excluded_dofs: int = 0

    @property
    def cond(self):
        if not self.lambda_min > 0:
            return np.inf
        return self.lambda_max / self.lambda_min

    @property
    def singular(self):
        return self.kernel_dim > 0


def _jacobi(A):
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("Jacobi preconditioner needs a positive diagonal")
    inv = 1.0 / d
    return spla.LinearOperator(A.shape, matvec=lambda v: inv * np.ravel(v), dtype=float)


def _check_finite(*arrays):
    for a in arrays:
        data = a.data if sp.issparse(a) else a
        if not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values in linear system")


def _solve(method, A, b, tol, maxit, x0, record):
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    _check_finite(A, b)
    nb = np.linalg.norm(b)
    t0 = time.perf_counter()
    if nb == 0.0:
        return SolveReport(np.zeros_like(b), 0, 0.0, 0.0, True, method)
    count = [0]
    energy = []

    def cb(xk):
        count[0] += 1
        if record:
            energy.append(0.5 * xk @ (A @ xk) - b @ xk)

    solver = spla.cg if method == "cg" else spla.bicgstab
    x, info = solver(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxit, M=_jacobi(A), callback=cb)
    ms = 1000.0 * (time.perf_counter() - t0)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{method} produced non-finite iterates")
    res = float(np.linalg.norm(b - A @ x) / nb)
    return SolveReport(x, count[0], res, ms, info == 0 and res <= tol, method, energy)


def solve_cg(A, b, tol=1e-10, maxit=None, x0=None, record=False) -> SolveReport:
    """Jacobi-preconditioned conjugate gradients.

    Non-convergence within ``maxit`` is reported in the result, not raised.
    With ``record`` the energy ``x^T A x / 2 - b^T x`` of every iterate is
    kept; it decreases monotonically for symmetric positive A.
    """
    return _solve("cg", A, b, tol, maxit if maxit is not None else 10 * len(b), x0, record)


def solve_bicgstab(A, b, tol=1e-10, maxit=None, x0=None) -> SolveReport:
    """Jacobi-preconditioned BiCGStab for nonsymmetric systems."""
    return _solve("bicgstab", A, b, tol, maxit if maxit is not None else 10 * len(b), x0, False)


def jacobi_scaled(A):
    """``D^{-1/2} A D^{-1/2}`` over dofs with a positive diagonal.

    Returns the scaled matrix and the boolean mask of kept dofs.
    """
    A = sp.csr_matrix(A)
    d = A.diagonal()
    keep = d > 0
    s = 1.0 / np.sqrt(d[keep])
    B = A[keep][:, keep]
    Ds = sp.diags(s)
    return (Ds @ B @ Ds).tocsr(), keep


def estimate_condition(A, steps=200, seed=0, kernel_tol=1e-10, max_steps=1000, rtol=1e-3, max_restarts=3):
    """Extreme eigenvalues of the Jacobi-scaled matrix by Lanczos.

    Lanczos with full reorthogonalization runs ``steps`` iterations and, if
    the smallest retained Ritz value still moves by more than ``rtol``
    relative over the last 50 steps, continues up to ``max_steps``.  Ritz
    values below ``kernel_tol * lambda_max`` are counted as kernel and
    skipped.  A breakdown (invariant subspace) restarts the recursion with a
    fresh random vector orthogonal to the current basis, at most
    ``max_restarts`` times; exhausting the whole space counts as success.
    Dofs with zero diagonal are excluded and counted.
    """
    B, keep = jacobi_scaled(A)
    _check_finite(B)
    n = B.shape[0]
    excluded = int(np.count_nonzero(~keep))
    rng = np.random.default_rng(seed)
    cap = min(max(steps, 1), n) if max_steps is None else min(max(max_steps, steps), n)
    V = np.zeros((cap + 1, n))
    alpha = np.zeros(cap)
    beta = np.zeros(cap)
    v = rng.standard_normal(n)
    V[0] = v / np.linalg.norm(v)
    restarts = 0
    reliable = True
    history = []
    j = 0
    scale = None
    while j < cap:
        w = B @ V[j]
        alpha[j] = V[j] @ w
        w -= alpha[j] * V[j]
        if j > 0:
            w -= beta[j - 1] * V[j - 1]
        # full reorthogonalization, twice for stability
        for _ in range(2):
            w -= V[: j + 1].T @ (V[: j + 1] @ w)
        b = np.linalg.norm(w)
        scale = max(scale or 0.0, abs(alpha[j]), b)
        j += 1
        if j == n:
            break
        if b <= 1e-12 * scale:
            # invariant subspace: continue from a new orthogonal direction
            if restarts >= max_restarts:
                reliable = False
                break
            restarts += 1
            r = rng.standard_normal(n)
            for _ in range(2):
                r -= V[:j].T @ (V[:j] @ r)
            nr = np.linalg.norm(r)
            if nr <= 1e-12:
                break
            beta[j - 1] = 0.0
            V[j] = r / nr
        else:
            beta[j - 1] = b
            V[j] = w / b
        if j >= steps and j % 50 == 0:
            lo = _ritz_min(alpha[:j], beta[: j - 1], kernel_tol)[0]
            history.append(lo)
            if len(history) >= 2 and abs(history[-1] - history[-2]) <= rtol * history[-1]:
                break
    else:
        if n > cap:
            reliable = False
    lmin, lmax, kernel = _ritz_min(alpha[:j], beta[: j - 1], kernel_tol)
    if not (lmax >= lmin > 0):
        reliable = False
    return CondEstimate(float(lmax), float(lmin), j, reliable, kernel, excluded)


def _ritz_min(alpha, beta, kernel_tol):
    theta = eigh_tridiagonal(alpha, beta, eigvals_only=True) if len(alpha) > 1 else alpha.copy()
    lmax = theta.max()
    small = theta < kernel_tol * lmax
    rest = theta[~small]
    lmin = rest.min() if len(rest) else 0.0
    return lmin, lmax, int(np.count_nonzero(small))
