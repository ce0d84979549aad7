"""Manufactured surface problems.

A :class:`ProblemSpec` describes

    -eps * Lap_G u + w . grad_G u + (c + div_G w) u = f    on G

together with an exact solution.  All data are extended off the surface as
constants along normals, ``g^e(x) = g(p(x))``, which is how they are sampled
at the quadrature points of the discrete surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .levelset import AnalyticSurface, Sphere

__all__ = [
    "ProblemSpec",
    "sphere_harmonic_problem",
    "rotating_convection_problem",
    "spike_problem",
    "numeric_problem",
    "make_problem",
    "fd_laplacian",
    "fd_gradient",
    "fd_divergence",
    "surface_residual",
    "PROBLEMS",
]


def _zero_field(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero(x):
    return np.zeros(np.shape(x)[:-1])


@dataclass(eq=False)
class ProblemSpec:
    """Surface PDE data.

    ``u``, ``grad_u``, ``w`` and ``div_w`` are ambient callables that only
    need to be correct on the surface; ``grad_u`` may have a normal
    component, it is removed through the closest point Jacobian.
    """

    name: str
    surface: AnalyticSurface
    u: Callable
    grad_u: Callable
    f: Callable
    eps: float = 1.0
    c: float | Callable = 1.0
    w: Callable | None = None
    div_w: Callable | None = None
    params: dict = field(default_factory=dict)

    @property
    def has_convection(self):
        return self.w is not None

    @property
    def kind(self):
        return "convection_diffusion" if self.has_convection else "laplace_beltrami"

    def _p(self, x):
        return self.surface.closest_point(np.asarray(x, dtype=float))

    def u_ext(self, x):
        return self.u(self._p(x))

    def grad_u_ext(self, x):
        """Gradient of the normal-constant extension, ``Dp(x)^T grad u(p(x))``."""
        x = np.asarray(x, dtype=float)
        Dp = self.surface.closest_point_jacobian(x)
        return np.einsum("nji,nj->ni", Dp, self.grad_u(self._p(x)))

    def f_ext(self, x):
        return self.f(self._p(x))

    def w_ext(self, x):
        if self.w is None:
            return _zero_field(x)
        return self.w(self._p(x))

    def div_w_ext(self, x):
        if self.div_w is None:
            return _zero(x)
        return self.div_w(self._p(x))

    def c_ext(self, x):
        if callable(self.c):
            return self.c(self._p(x))
        return np.full(np.shape(x)[:-1], float(self.c))

    @property
    def c_const(self):
        """Constant reaction coefficient, or None if ``c`` varies."""
        return None if callable(self.c) else float(self.c)

    def describe(self):
        extra = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.name}({extra}) on {self.surface.describe()}"


def sphere_harmonic_problem(r=1.0) -> ProblemSpec:
    """``-Lap u + u = f`` on the sphere with ``u = x1 x2 / r^2``.

    ``x1 x2`` is a degree-2 spherical harmonic, so ``-Lap_G u = 6 u / r^2``.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    S = Sphere(float(r))

    def u(x):
        return x[..., 0] * x[..., 1] / r**2

    def grad_u(x):
        g = np.zeros_like(x)
        g[..., 0] = x[..., 1] / r**2
        g[..., 1] = x[..., 0] / r**2
        return g

    def f(x):
        return (6.0 / r**2 + 1.0) * u(x)

    return ProblemSpec("sphere_harmonic", S, u, grad_u, f, eps=1.0, c=1.0, params={"r": r})


def rotating_convection_problem(r=1.0, eps=1e-5, axis=(0.0, 0.0, 1.0)) -> ProblemSpec:
    """Convection-diffusion with the rigid rotation ``w = a x x``, ``c = 1``.

    ``u = x1 x2``; ``w`` is tangential on spheres centred at the origin and
    divergence free.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = np.asarray(axis, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-12:
        raise ValueError("rotation axis must be a unit vector")
    S = Sphere(float(r))

    def u(x):
        return x[..., 0] * x[..., 1]

    def grad_u(x):
        g = np.zeros_like(x)
        g[..., 0] = x[..., 1]
        g[..., 1] = x[..., 0]
        return g

    def w(x):
        return np.cross(a, x)

    def f(x):
        return (6.0 * eps / r**2 + 1.0) * u(x) + np.sum(w(x) * grad_u(x), axis=-1)

    return ProblemSpec(
        "rotating", S, u, grad_u, f, eps=float(eps), c=1.0, w=w, div_w=_zero,
        params={"r": r, "eps": eps, "axis": tuple(a)},
    )


# --- finite-difference surface operators ---------------------------------
#
# For the closest point extension g^e = g o p, the ambient gradient and
# Laplacian of g^e evaluated on the surface equal the surface gradient and
# the Laplace-Beltrami operator of g; likewise div(w o p) = div_G w.  Fourth
# order central differences with step 1e-3 * feature size balance
# truncation (~h^4) against roundoff (~eps_mach / h^2).

_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_OFFSETS = np.arange(-2, 3)


def _fd_step(surface, step):
    return (step or 1e-3) * surface.feature_size


def fd_laplacian(surface: AnalyticSurface, g, y, step=None):
    """``Lap_G g`` at surface points ``y`` via the ambient Laplacian of ``g o p``."""
    y = np.asarray(y, dtype=float)
    h = _fd_step(surface, step)
    out = np.zeros(y.shape[:-1])
    for a in range(3):
        for o, cw in zip(_OFFSETS, _D2):
            if cw == 0.0:
                continue
            e = np.zeros(3)
            e[a] = o * h
            out += cw * g(surface.closest_point(y + e))
    return out / h**2


def fd_gradient(surface: AnalyticSurface, g, y, step=None):
    """``grad_G g`` at surface points ``y``."""
    y = np.asarray(y, dtype=float)
    h = _fd_step(surface, step)
    out = np.zeros(y.shape)
    for a in range(3):
        for o, cw in zip(_OFFSETS, _D1):
            if cw == 0.0:
                continue
            e = np.zeros(3)
            e[a] = o * h
            out[..., a] += cw * g(surface.closest_point(y + e))
    return out / h


def fd_divergence(surface: AnalyticSurface, w, y, step=None):
    """``div_G w`` at surface points ``y`` via ``div(w o p)``."""
    y = np.asarray(y, dtype=float)
    h = _fd_step(surface, step)
    out = np.zeros(y.shape[:-1])
    for a in range(3):
        for o, cw in zip(_OFFSETS, _D1):
            if cw == 0.0:
                continue
            e = np.zeros(3)
            e[a] = o * h
            out += cw * w(surface.closest_point(y + e))[..., a]
    return out / h


def surface_residual(problem: ProblemSpec, y, step=None):
    """Pointwise PDE residual at surface points using the FD operators only."""
    S = problem.surface
    lap = fd_laplacian(S, problem.u, y, step)
    res = -problem.eps * lap + problem.c_ext(y) * problem.u(y) - problem.f(y)
    if problem.w is not None:
        grad = fd_gradient(S, problem.u, y, step)
        div = fd_divergence(S, problem.w, y, step)
        res += np.sum(problem.w(y) * grad, axis=-1) + div * problem.u(y)
    return res


def numeric_problem(name, surface, u, grad_u, eps=1.0, c=1.0, step=None, params=None) -> ProblemSpec:
    """Diffusion-reaction problem whose forcing is computed by the FD oracle."""

    def f(y):
        return -eps * fd_laplacian(surface, u, y, step) + c * u(y)

    return ProblemSpec(name, surface, u, grad_u, f, eps=eps, c=c, params=params or {})


def spike_problem(r=1.0, center=None, sigma=None) -> ProblemSpec:
    """``-Lap u + u = f`` with a Gaussian bump ``u = exp(-|x - x0|^2 / sigma^2)``.

    ``x0`` defaults to the pole ``(0, 0, r)``, ``sigma`` to ``0.1 r``; the
    forcing is tabulated through the finite-difference surface Laplacian.
    """
    S = Sphere(float(r))
    x0 = np.array([0.0, 0.0, r]) if center is None else np.asarray(center, dtype=float)
    sigma = 0.1 * r if sigma is None else float(sigma)
    if abs(np.linalg.norm(x0) - r) > 1e-12 * r:
        raise ValueError("spike center must lie on the sphere")
    if sigma <= 0:
        raise ValueError("sigma must be positive")

    def u(x):
        return np.exp(-np.sum((x - x0) ** 2, axis=-1) / sigma**2)

    def grad_u(x):
        return (-2.0 / sigma**2) * (x - x0) * u(x)[..., None]

    # step well below sigma keeps the FD truncation error small
    step = 1e-3 * min(1.0, sigma / r)
    return numeric_problem("spike", S, u, grad_u, step=step, params={"r": r, "sigma": sigma, "center": tuple(x0)})


PROBLEMS = {
    "sphere_harmonic": sphere_harmonic_problem,
    "rotating": rotating_convection_problem,
    "spike": spike_problem,
}


def make_problem(name, **kwargs) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}") from None
    return factory(**kwargs)
