import numpy as np
import pytest

from tracefem import build_box_mesh
from tracefem.fespace import FeSpace, tet_geometry
from tracefem.isomap import (
    MeshTooCoarseError,
    SearchFailedError,
    average_to_nodes,
    build_isomap,
    compute_dh,
    identity_map,
    mapped_surface_quadrature,
)
from tracefem.levelset import Plane, Sphere, extract_cut_topology, interpolate_levelset

from conftest import BOX

UNIT = ((0, 0, 0), (1, 1, 1))


def setup(S, n, k, bounds=BOX):
    mesh = build_box_mesh(bounds, n)
    phi = interpolate_levelset(S, mesh, k)
    return mesh, phi, extract_cut_topology(phi)


def lin_points(cut, rng, n):
    i = rng.integers(0, len(cut.tri_tet), n)
    b = rng.dirichlet(np.ones(3), n)
    x = np.einsum("na,nai->ni", b, cut.tri_points[i])
    tets = cut.tri_tet[i]
    return tets, tet_geometry(cut.mesh, tets).to_barycentric(x), x


def test_k1_is_identity(rng):
    mesh, phi, cut = setup(Sphere(1.0), 8, 1)
    tets, lam, _ = lin_points(cut, rng, 50)
    d, _ = compute_dh(phi, tets, lam)
    assert np.all(d == 0.0)
    assert build_isomap(phi, cut).is_identity


def test_affine_levelset_identity(rng):
    mesh, phi, cut = setup(Plane((1.0, 0.3, -0.2), 0.45), 4, 2, UNIT)
    act = cut.active
    d_v, _ = compute_dh(phi, np.repeat(act, 4), np.tile(np.eye(4), (len(act), 1)))
    assert np.all(d_v == 0.0)
    d_c, _ = compute_dh(phi, act, np.full((len(act), 4), 0.25))
    assert np.abs(d_c).max() <= 1e-12
    iso = build_isomap(phi, cut)
    assert np.abs(iso.disp).max() <= 1e-12


def test_search_distance_vs_closest_point(rng):
    S = Sphere(1.0)
    mesh, phi, cut = setup(S, 16, 2)  # h = 1/6 on this box
    tets, lam, x = lin_points(cut, rng, 100)
    d, G = compute_dh(phi, tets, lam)
    # d_h realizes the root of phi_h along G_h
    y = x + d[:, None] * G
    ly = tet_geometry(mesh, tets).to_barycentric(y)
    assert np.abs(phi.evaluate(tets, ly)).max() <= 1e-10
    dist = np.linalg.norm(x - S.closest_point(x), axis=1)
    ratio = np.abs(d * np.linalg.norm(G, axis=1)).max() / dist.max()
    assert 0.1 <= ratio <= 10


def test_search_failure_reports_tets(rng):
    S = Sphere(1.0)
    mesh, phi, cut = setup(S, 8, 2)
    tets, lam, x = lin_points(cut, rng, 50)
    # points well off the surface cannot find a root within a tiny radius
    with pytest.raises(SearchFailedError) as info:
        compute_dh(phi, tets, lam, delta=np.full(len(tets), 1e-9))
    assert len(info.value.tets) > 0


def test_map_invariants():
    mesh, phi, cut = setup(Sphere(1.0), 16, 2)
    iso = build_isomap(phi, cut)
    space = phi.space
    # identity away from the band
    band = np.zeros(space.n_dofs, bool)
    band[space.tet_dofs[cut.active]] = True
    assert not np.any(iso.disp[~band])
    q = mapped_surface_quadrature(cut, iso, 4)
    assert np.all(q.jac_gamma > 0)
    det = np.linalg.det(iso.jacobian(q.tet, q.lam))
    assert det.min() >= 0.5 and det.max() <= 2.0
    shift = np.linalg.norm(q.x - q.x_lin, axis=1)
    assert np.all(shift <= 0.5 * mesh.tet_diameters[q.tet])


def test_pinned_boundary_nodes():
    mesh, phi, cut = setup(Sphere(1.0), 8, 2)
    iso = build_isomap(phi, cut, pin_boundary=True)
    f = cut.faces
    outer = ~f.interior
    faces = f.faces[outer]
    assert not np.any(iso.disp[np.unique(faces)])
    assert iso.pinned and not iso.is_identity


def test_coarse_mesh_rejected():
    # two cells per axis cannot resolve a small sphere
    mesh, phi, cut = setup(Sphere(0.45), 2, 2, ((-0.5,) * 3, (0.5,) * 3))
    with pytest.raises((MeshTooCoarseError, SearchFailedError)):
        build_isomap(phi, cut)


def test_averaging_reproduces_continuous_data(rng):
    mesh = build_box_mesh(UNIT, 3)
    space = FeSpace(mesh, 2)
    g = rng.standard_normal((space.n_dofs, 3))
    tets = rng.choice(mesh.n_tets, 40, replace=False)
    out, count = average_to_nodes(space, tets, g[space.tet_dofs[tets]])
    hit = count > 0
    assert np.array_equal(out[hit], g[hit]) or np.abs(out[hit] - g[hit]).max() <= 1e-14
    assert not np.any(out[~hit])


def test_identity_quadrature_planar():
    mesh, phi, cut = setup(Plane((1, 0, 0), 0.5), 4, 1, UNIT)
    q = mapped_surface_quadrature(cut, identity_map(phi.space), 3)
    assert abs(q.weight.sum() - 1.0) <= 1e-12
    assert np.array_equal(q.normal, q.normal_lin)
    P = q.projector
    assert np.abs(P @ P - P).max() <= 1e-14


def test_gradient_transform_identity(rng):
    # quadrature-based stiffness entry vs. a direct flat-triangle computation
    mesh, phi, cut = setup(Sphere(1.0), 6, 1)
    space = phi.space
    q = mapped_surface_quadrature(cut, None, 2)
    _, g = q.basis(space)
    t = 5
    rows = slice(t * q.n_qp, (t + 1) * q.n_qp)
    via_q = np.einsum("q,qi,qi->", q.weight[rows], g[rows, 0], g[rows, 1])
    tet = cut.tri_tet[t]
    gl = tet_geometry(mesh, np.array([tet])).grad_lambda[0]
    n = cut.tri_normal[t]
    P = np.eye(3) - np.outer(n, n)
    direct = cut.tri_area[t] * (P @ gl[0]) @ (P @ gl[1])
    assert abs(via_q - direct) <= 1e-12 * max(1.0, abs(direct))


def _geom(k, n):
    S = Sphere(1.0)
    mesh, phi, cut = setup(S, n, k)
    iso = build_isomap(phi, cut)
    q = mapped_surface_quadrature(cut, iso, 6)
    return np.abs(S.phi(q.x)).max(), abs(q.weight.sum() - 4 * np.pi), mesh.h


def test_mapped_geometry_orders():
    r2 = [_geom(2, n) for n in (16, 32)]
    r1 = [_geom(1, n) for n in (16, 32)]
    eoc = lambda a, b, i: np.log(a[i] / b[i]) / np.log(a[2] / b[2])
    assert 2.7 <= eoc(*r2, 0) <= 3.3
    assert 1.7 <= eoc(*r1, 1) <= 2.3
    # the mapped area converges at least to third order and beats the flat one
    assert eoc(*r2, 1) >= 2.7
    assert r2[1][1] < r1[1][1]
