import numpy as np
import pytest

from tracefem.levelset import Sphere, Torus
from tracefem.problems import (
    PROBLEMS,
    fd_divergence,
    fd_gradient,
    fd_laplacian,
    make_problem,
    numeric_problem,
    rotating_convection_problem,
    sphere_harmonic_problem,
    spike_problem,
    surface_residual,
)
from tracefem.quadrature import get_rule


def sphere_points(rng, n, r=1.0):
    x = rng.standard_normal((n, 3))
    return r * x / np.linalg.norm(x, axis=1)[:, None]


def sphere_integral(g, r=1.0, n=64):
    """Tensor Gauss rule in (cos theta, phi); exact for low-degree data."""
    t, wt = np.polynomial.legendre.leggauss(n)
    ph = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
    T, P = np.meshgrid(t, ph, indexing="ij")
    s = np.sqrt(1 - T**2)
    x = r * np.stack([s * np.cos(P), s * np.sin(P), T], axis=-1).reshape(-1, 3)
    w = (wt[:, None] * np.full(2 * n, 2 * np.pi / (2 * n))[None, :]).ravel() * r**2
    return np.sum(w * g(x))


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_catalog_invariants(name, rng):
    p = make_problem(name)
    y = sphere_points(rng, 200)
    if p.w is not None:
        assert np.abs(np.sum(p.w(y) * y, axis=1)).max() <= 1e-10
        assert np.abs(fd_divergence(p.surface, p.w, y)).max() <= 1e-10
        coerc = p.c_ext(y) + 0.5 * p.div_w_ext(y)
        assert coerc.min() > 0
    if name != "spike":
        # the spike forcing is itself built from the FD operator; it is
        # checked through an integral identity below
        assert np.abs(surface_residual(p, y)).max() <= 1e-8


def test_harmonic_forcing(rng):
    p = sphere_harmonic_problem()
    y = sphere_points(rng, 20)
    assert np.allclose(p.f(y), 7 * y[:, 0] * y[:, 1], rtol=0, atol=1e-15)
    assert abs(sphere_integral(p.u)) <= 1e-14
    # -Lap_G (x1 x2) = 6 x1 x2 through the FD oracle
    assert np.abs(-fd_laplacian(p.surface, p.u, y) - 6 * p.u(y)).max() <= 1e-8


def test_harmonic_radius_scaling(rng):
    p = sphere_harmonic_problem(r=2.0)
    y = sphere_points(rng, 50, 2.0)
    assert np.abs(surface_residual(p, y)).max() <= 1e-8


def test_rotating_field(rng):
    p = rotating_convection_problem(eps=1e-5)
    x = rng.standard_normal((30, 3))
    assert np.abs(np.sum(p.w(x) * x, axis=1)).max() <= 1e-14
    assert p.eps == 1e-5 and p.c_const == 1.0
    with pytest.raises(ValueError):
        rotating_convection_problem(eps=0.0)


def test_spike():
    p = spike_problem()
    assert p.u(np.array([[0.0, 0.0, 1.0]]))[0] == 1.0
    # closed surface: int -Lap u = 0, hence int f = int u
    fi, ui = sphere_integral(p.f, n=96), sphere_integral(p.u, n=96)
    assert abs(fi - ui) <= 1e-6 * max(1.0, abs(ui))
    with pytest.raises(ValueError):
        spike_problem(center=(0, 0, 0.5))


def test_extension_is_normal_constant(rng):
    p = sphere_harmonic_problem()
    y = sphere_points(rng, 30)
    x = y * rng.uniform(0.8, 1.2, (30, 1))
    assert np.allclose(p.u_ext(x), p.u(y), atol=1e-15)
    g = p.grad_u_ext(x)
    assert np.abs(np.sum(g * y, axis=1)).max() <= 1e-12
    # off the surface the extension gradient carries the Jacobian of p
    assert np.allclose(g, p.grad_u_ext(y) / np.linalg.norm(x, axis=1)[:, None], atol=1e-12)
    assert np.allclose(p.grad_u_ext(y), fd_gradient(p.surface, p.u, y), atol=1e-9)


def test_fd_oracle_on_torus(rng):
    # the z coordinate on a torus: Lap_G z = -div n_z; compare with the
    # numeric problem built from the same oracle at another step
    T = Torus(1.0, 0.4)
    q = T.closest_point(rng.standard_normal((40, 3)) * 0.3 + np.array([1.0, 0.0, 0.0]))
    z = lambda x: x[..., 2]
    a = fd_laplacian(T, z, q, step=1e-3)
    b = fd_laplacian(T, z, q, step=2e-3)
    assert np.abs(a - b).max() <= 1e-6
    prob = numeric_problem("tz", T, z, lambda x: np.tile([0.0, 0.0, 1.0], (len(x), 1)))
    assert np.abs(surface_residual(prob, q)).max() <= 1e-12


def test_unknown_problem():
    with pytest.raises(ValueError):
        make_problem("nope")
