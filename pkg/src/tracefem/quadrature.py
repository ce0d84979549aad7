"""Quadrature rules on the reference triangle and tetrahedron.

Rules of degree <= 2 are the classical symmetric ones.  Higher degrees use
Stroud's conical product (Gauss-Jacobi in collapsed coordinates), which has
positive weights and interior points for every degree.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

__all__ = ["QuadRule", "get_rule", "gauss_segment", "QuadratureError", "MAX_DEGREE"]

MAX_DEGREE = 10


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    """Quadrature rule in barycentric coordinates.

    ``weights`` sum to the reference measure (1/2 for the triangle, 1/6 for
    the tetrahedron).
    """

    domain: str
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self):
        return len(self.weights)

    @property
    def reference_measure(self):
        return 0.5 if self.domain == "triangle" else 1.0 / 6.0


def _jacobi01(n, alpha):
    """Gauss-Jacobi nodes/weights on [0, 1] for the weight (1-u)**alpha."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


def _conical_triangle(degree):
    n = degree // 2 + 1
    u, wu = _jacobi01(n, 1.0)
    v, wv = _jacobi01(n, 0.0)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    x, y = U.ravel(), (V * (1.0 - U)).ravel()
    return np.column_stack([1.0 - x - y, x, y]), W.ravel()


def _conical_tet(degree):
    n = degree // 2 + 1
    u, wu = _jacobi01(n, 2.0)
    v, wv = _jacobi01(n, 1.0)
    s, ws = _jacobi01(n, 0.0)
    U, V, S = np.meshgrid(u, v, s, indexing="ij")
    W = wu[:, None, None] * wv[None, :, None] * ws[None, None, :]
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    z = (S * (1.0 - U) * (1.0 - V)).ravel()
    return np.column_stack([1.0 - x - y - z, x, y, z]), W.ravel()


@lru_cache(maxsize=None)
def get_rule(domain, degree) -> QuadRule:
    """Positive-weight rule exact for polynomials up to ``degree``.

    Parameters
    ----------
    domain : {"triangle", "tetrahedron"}
    degree : int
        Requested exactness, 0 <= degree <= 10.
    """
    if domain not in ("triangle", "tetrahedron"):
        raise QuadratureError(f"unknown reference domain {domain!r}")
    if degree > MAX_DEGREE:
        raise QuadratureError(f"rule unavailable: degree {degree} > {MAX_DEGREE}")
    degree = max(int(degree), 0)
    if domain == "triangle":
        if degree <= 1:
            pts, w = np.full((1, 3), 1.0 / 3.0), np.array([0.5])
        elif degree == 2:
            pts = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
            w = np.full(3, 1.0 / 6.0)
        else:
            pts, w = _conical_triangle(degree)
    else:
        if degree <= 1:
            pts, w = np.full((1, 4), 0.25), np.array([1.0 / 6.0])
        elif degree == 2:
            a, b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0, (5.0 - np.sqrt(5.0)) / 20.0
            pts = np.full((4, 4), b)
            np.fill_diagonal(pts, a)
            w = np.full(4, 1.0 / 24.0)
        else:
            pts, w = _conical_tet(degree)
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadRule(domain, pts, w, degree)


@lru_cache(maxsize=None)
def gauss_segment(degree):
    """Gauss-Legendre rule on [0, 1]: (points, weights summing to 1)."""
    n = max(degree, 0) // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w
