"""Isoparametric mapping of the piecewise planar surface and mapped quadrature.

The map ``Theta_h`` is a continuous degree-k vector field on the active
tets.  At each FE node of an active tet a 1-D search along
``G_h = grad phi_h`` finds the shift ``d_h`` with
``E_T phi_h(x + d_h G_h(x)) = phi_h^lin(x)``; the nodal displacements are
averaged over the adjacent active tets.  Surface integrals over
``Theta_h(Gamma_lin)`` are computed on the planar triangles with the
transformed gradients, normals and area element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import FeSpace, basis_dlambda, basis_values, tet_geometry
from .levelset import CutTopology, DiscreteLevelSet
from .mesh import TET_EDGES, TET_FACES
from .quadrature import get_rule

__all__ = [
    "IsoMap",
    "average_to_nodes",
    "SearchFailedError",
    "MeshTooCoarseError",
    "compute_dh",
    "build_isomap",
    "SurfaceQuadrature",
    "VolumeQuadrature",
    "mapped_surface_quadrature",
    "mapped_volume_quadrature",
]


class SearchFailedError(RuntimeError):
    """No sign change of the search residual within ``[-h_T, h_T]``."""

    def __init__(self, msg, tets=()):
        super().__init__(msg)
        self.tets = np.asarray(tets)


class MeshTooCoarseError(RuntimeError):
    """Mapped Jacobian determinant left ``[0.5, 2]``."""


def _lin_values(phi_h, tets, lam):
    return np.einsum("na,na->n", phi_h.lin_values[phi_h.mesh.tets[tets]], lam)


def compute_dh(phi_h: DiscreteLevelSet, tets, lam, delta=None, n_samples=8, tol=1e-12):
    """Signed search distance ``d_h`` at points given by (tet, barycentric).

    Parameters
    ----------
    phi_h : DiscreteLevelSet
    tets : (n,) int array
        Tet on whose polynomial the search is performed.
    lam : (n, 4) array
        Barycentric coordinates of the points in those tets.
    delta : (n,) array, optional
        Search radius, default ``h_T``.
    n_samples : int
        Grid samples per half interval used to bracket the root.
    tol : float
        Residual tolerance relative to ``max |phi_h|``.

    Returns
    -------
    d : (n,) array
    G : (n, 3) array
        Search directions ``grad phi_h`` evaluated in the tet.
    """
    tets = np.asarray(tets)
    lam = np.asarray(lam, dtype=float)
    k = phi_h.degree
    space = phi_h.space
    c = phi_h.values[space.tet_dofs[tets]]
    gl = tet_geometry(phi_h.mesh, tets).grad_lambda
    G = np.matmul(np.matmul(c[:, None, :], basis_dlambda(k, lam)), gl)[:, 0]
    n = len(tets)
    if k == 1:
        return np.zeros(n), G
    gn = np.linalg.norm(G, axis=1)
    if np.any(gn < 1e-8):
        raise SearchFailedError("search direction vanishes", tets[gn < 1e-8])
    if delta is None:
        delta = phi_h.mesh.tet_diameters[tets]
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (n,))
    rate = np.einsum("nai,ni->na", gl, G)  # d lambda / ds along G
    target = _lin_values(phi_h, tets, lam)
    atol = tol * phi_h.norm_inf

    def g(s, rows=slice(None)):
        return np.einsum("nl,nl->n", basis_values(k, lam[rows] + s[:, None] * rate[rows]), c[rows]) - target[rows]

    def dg(s, rows=slice(None)):
        db = basis_dlambda(k, lam[rows] + s[:, None] * rate[rows])
        return np.einsum("nl,nl->n", np.matmul(db, rate[rows][:, :, None])[:, :, 0], c[rows])

    grid = np.linspace(-1.0, 1.0, 2 * n_samples + 1)
    S = grid[None, :] * delta[:, None]
    vals = np.stack([g(S[:, j]) for j in range(S.shape[1])], axis=1)
    change = vals[:, :-1] * vals[:, 1:] <= 0.0
    found = change.any(axis=1)
    if not found.all():
        bad = tets[~found]
        raise SearchFailedError(f"search failed on {len(bad)} point(s), tets {np.unique(bad)[:10].tolist()}", bad)
    # bracket whose nearer endpoint is closest to s = 0
    near = np.minimum(np.abs(S[:, :-1]), np.abs(S[:, 1:]))
    near = np.where(np.sign(S[:, :-1]) != np.sign(S[:, 1:]), 0.0, near)
    near[~change] = np.inf
    j = np.argmin(near, axis=1)
    rows = np.arange(n)
    a, b = S[rows, j], S[rows, j + 1]
    ga, gb = vals[rows, j], vals[rows, j + 1]
    # an exact zero at an endpoint is the root
    s = np.where(ga == 0.0, a, np.where(gb == 0.0, b, 0.5 * (a + b)))
    done = (ga == 0.0) | (gb == 0.0)

    width = 1e-3 * phi_h.mesh.tet_diameters[tets]
    while True:
        act = ~done & (b - a > width)
        if not act.any():
            break
        m = 0.5 * (a[act] + b[act])
        gm = g(m, act)
        left = np.sign(gm) == np.sign(ga[act])
        aa, bb, gaa = a[act], b[act], ga[act]
        a[act] = np.where(left, m, aa)
        ga[act] = np.where(left, gm, gaa)
        b[act] = np.where(left, bb, m)
        s[act] = 0.5 * (a[act] + b[act])

    for _ in range(100):
        act = np.flatnonzero(~done)
        if len(act) == 0:
            break
        gs = g(s[act], act)
        conv = np.abs(gs) <= atol
        done[act[conv]] = True
        act, gs = act[~conv], gs[~conv]
        if len(act) == 0:
            break
        left = np.sign(gs) == np.sign(ga[act])
        a[act] = np.where(left, s[act], a[act])
        ga[act] = np.where(left, gs, ga[act])
        b[act] = np.where(left, b[act], s[act])
        d = dg(s[act], act)
        with np.errstate(divide="ignore", invalid="ignore"):
            sn = s[act] - gs / d
        outside = ~np.isfinite(sn) | (sn <= a[act]) | (sn >= b[act])
        sn[outside] = 0.5 * (a[act][outside] + b[act][outside])
        stalled = b[act] - a[act] <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(s[act]))
        s[act] = sn
        done[act[stalled]] = True
    return s, G


@dataclass(eq=False)
class IsoMap:
    """Nodal displacement field ``Theta_h - id`` in a degree-k Lagrange space.

    Only dofs of active tets carry a displacement; it is zero elsewhere.
    """

    space: FeSpace
    disp: np.ndarray  # (n_dofs, 3)
    multiplicity: np.ndarray  # adjacent active tets per dof
    pinned: bool = False

    @property
    def degree(self):
        return self.space.degree

    @property
    def is_identity(self):
        return not np.any(self.disp)

    def displacement(self, tets, lam):
        return self.space.evaluate(self.disp, tets, lam)

    def theta(self, tets, lam):
        geo = tet_geometry(self.space.mesh, tets)
        return geo.to_physical(lam) + self.displacement(tets, lam)

    def jacobian(self, tets, lam):
        """``D Theta_h`` at barycentric points, (n, 3, 3)."""
        tets = np.asarray(tets)
        n = len(tets)
        if self.is_identity:
            return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        _, grad = self.space.evaluate(self.disp, tets, lam, grad=True)
        return np.eye(3) + grad


def identity_map(space: FeSpace) -> IsoMap:
    return IsoMap(space, np.zeros((space.n_dofs, 3)), np.zeros(space.n_dofs, dtype=np.int64))


def _band_boundary_dofs(space: FeSpace, cut: CutTopology):
    f = cut.faces
    outer = ~f.interior
    t, loc = f.tets[outer, 0], f.local[outer, 0]
    lv = TET_FACES[loc]  # local vertices of each outer face
    dofs = [space.tet_dofs[t[:, None], lv].ravel()]
    if space.degree == 2:
        for e, (i, j) in enumerate(TET_EDGES):
            on = np.any(lv == i, axis=1) & np.any(lv == j, axis=1)
            dofs.append(space.tet_dofs[t[on], 4 + e])
    return np.unique(np.concatenate(dofs))


def average_to_nodes(space: FeSpace, tets, local_values):
    """Arithmetic mean over adjacent tets of per-tet nodal values.

    ``local_values`` is (len(tets), nloc, d).  Returns the nodal field
    (n_dofs, d), zero at dofs outside ``tets``, and the number of
    contributing tets per dof.
    """
    tets = np.asarray(tets)
    dofs = space.tet_dofs[tets].ravel()
    vals = np.asarray(local_values, dtype=float).reshape(len(dofs), -1)
    count = np.bincount(dofs, minlength=space.n_dofs)
    out = np.zeros((space.n_dofs, vals.shape[1]))
    for a in range(vals.shape[1]):
        out[:, a] = np.bincount(dofs, weights=vals[:, a], minlength=space.n_dofs)
    hit = count > 0
    out[hit] /= count[hit, None]
    return out, count


def build_isomap(phi_h: DiscreteLevelSet, cut: CutTopology, pin_boundary=False, check=True) -> IsoMap:
    """Degree-k isoparametric map from per-tet searches and nodal averaging.

    Parameters
    ----------
    phi_h : DiscreteLevelSet
    cut : CutTopology
        Extraction of the zero level of ``phi_h^lin``.
    pin_boundary : bool
        Fix nodes on the outer boundary of the active band to the identity.
        This lowers the geometric accuracy to second order; off by default.
    check : bool
        Verify ``det D Theta_h in [0.5, 2]`` and ``|Theta_h - x| <= h_T / 2``
        at volume and surface quadrature points.
    """
    space = phi_h.space
    if phi_h.degree == 1:
        return identity_map(space)
    act = cut.active
    # phi_h and phi_h^lin agree at vertices, so only the edge nodes move
    lam_nodes = space.dof_barycentric[4:]
    nloc = len(lam_nodes)
    tt = np.repeat(act, nloc)
    ll = np.tile(lam_nodes, (len(act), 1))
    d, G = compute_dh(phi_h, tt, ll)
    psi = np.zeros((len(act), space.n_local, 3))
    psi[:, 4:] = (d[:, None] * G).reshape(len(act), nloc, 3)
    disp, count = average_to_nodes(space, act, psi)
    if pin_boundary:
        disp[_band_boundary_dofs(space, cut)] = 0.0
    iso = IsoMap(space, disp, count, pinned=pin_boundary)
    if check:
        _check_map(iso, cut)
    return iso


def _check_map(iso: IsoMap, cut: CutTopology):
    act = cut.active
    r = get_rule("tetrahedron", 2)
    tt = np.repeat(act, r.n_points)
    ll = np.tile(r.points, (len(act), 1))
    det = np.linalg.det(iso.jacobian(tt, ll))
    if det.min() < 0.5 or det.max() > 2.0:
        raise MeshTooCoarseError(
            f"mesh too coarse for isoparametric map: det(D Theta) in [{det.min():.3g}, {det.max():.3g}]"
        )
    shift = np.linalg.norm(iso.displacement(tt, ll), axis=1)
    if np.any(shift > 0.5 * iso.space.mesh.tet_diameters[tt]):
        raise MeshTooCoarseError("mesh too coarse for isoparametric map: displacement exceeds h_T / 2")


@dataclass(eq=False)
class SurfaceQuadrature:
    """Quadrature on ``Theta_h(Gamma_lin)`` laid out as (ntri * nqp) points.

    ``weight`` already contains the triangle area and ``J_Gamma``.
    ``dtheta_inv_t`` is ``(D Theta_h)^{-T}``, used to transform gradients.
    """

    tri_tet: np.ndarray  # (ntri,)
    n_qp: int
    tet: np.ndarray  # (nq,)
    lam: np.ndarray  # (nq, 4)
    x_lin: np.ndarray  # (nq, 3)
    x: np.ndarray  # (nq, 3)
    weight: np.ndarray  # (nq,)
    normal: np.ndarray  # (nq, 3) unit normal of the mapped surface
    normal_lin: np.ndarray  # (nq, 3)
    dtheta_inv_t: np.ndarray  # (nq, 3, 3)
    jac_gamma: np.ndarray  # (nq,)
    degree: int

    @property
    def n_tri(self):
        return len(self.tri_tet)

    @property
    def projector(self):
        n = self.normal
        return np.eye(3) - n[:, :, None] * n[:, None, :]

    def integrate(self, values):
        return float(np.sum(self.weight * values))

    def per_tet(self, values, n_tets):
        """Sum point values ``weight * values`` into their tets."""
        return np.bincount(self.tet, weights=self.weight * values, minlength=n_tets)

    def basis(self, space: FeSpace, tangential=True):
        """Shape function values and (surface) gradients at the points.

        Returns ``(vals (nq, nloc), grads (nq, nloc, 3))``.  Gradients are
        transformed by ``(D Theta_h)^{-T}`` and, if ``tangential``,
        projected with ``P_h``.
        """
        vals = basis_values(space.degree, self.lam)
        gl = tet_geometry(space.mesh, self.tet).grad_lambda
        g = np.matmul(basis_dlambda(space.degree, self.lam), gl)
        g = np.matmul(g, np.swapaxes(self.dtheta_inv_t, 1, 2))
        if tangential:
            n = self.normal
            g = g - np.einsum("nlj,nj->nl", g, n)[:, :, None] * n[:, None, :]
        return vals, g

    def evaluate(self, space: FeSpace, coeffs):
        """Value and tangential gradient of an FE function at the points."""
        vals, g = self.basis(space)
        c = np.asarray(coeffs)[space.tet_dofs[self.tet]]
        return np.einsum("nl,nl->n", vals, c), np.einsum("nli,nl->ni", g, c)


def mapped_surface_quadrature(cut: CutTopology, isomap: IsoMap | None = None, degree=2, tris=None) -> SurfaceQuadrature:
    """Quadrature points, weights, normals and projectors on the mapped surface.

    With ``isomap=None`` (or an identity map) this is plain triangle
    quadrature on ``Gamma_lin`` with the flat normals.  ``tris`` restricts
    the rule to a subset (index array or slice) of the cut triangles.
    """
    r = get_rule("triangle", degree)
    nq = r.n_points
    sel = slice(None) if tris is None else tris
    P = cut.tri_points[sel]  # (ntri, 3, 3)
    tri_tet = cut.tri_tet[sel]
    x_lin = np.einsum("qa,tai->tqi", r.points, P).reshape(-1, 3)
    area = cut.tri_area[sel]
    w = (2.0 * area[:, None] * r.weights[None, :]).ravel()
    tet = np.repeat(tri_tet, nq)
    geo = tet_geometry(cut.mesh, tet)
    lam = geo.to_barycentric(x_lin)
    nhat = np.repeat(cut.tri_normal[sel], nq, axis=0)
    if isomap is None or isomap.is_identity:
        Dinv_t = np.broadcast_to(np.eye(3), (len(tet), 3, 3)).copy()
        return SurfaceQuadrature(
            tri_tet, nq, tet, lam, x_lin, x_lin.copy(), w, nhat.copy(), nhat, Dinv_t, np.ones(len(tet)), degree
        )
    D = isomap.jacobian(tet, lam)
    det = np.linalg.det(D)
    if np.any(np.abs(det) < 1e-14):
        raise MeshTooCoarseError("singular D Theta_h at a surface quadrature point")
    Dinv_t = np.transpose(np.linalg.inv(D), (0, 2, 1))
    N = np.einsum("nij,nj->ni", Dinv_t, nhat)
    nN = np.linalg.norm(N, axis=1)
    J = det * nN
    x = x_lin + isomap.displacement(tet, lam)
    return SurfaceQuadrature(tri_tet, nq, tet, lam, x_lin, x, w * J, N / nN[:, None], nhat, Dinv_t, J, degree)


@dataclass(eq=False)
class VolumeQuadrature:
    """Quadrature on mapped active tets ``Theta_h(T)``, laid out (ntet * nqp)."""

    tets: np.ndarray  # (ntet,)
    n_qp: int
    tet: np.ndarray
    lam: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    dtheta_inv_t: np.ndarray

    def basis(self, space: FeSpace):
        vals = basis_values(space.degree, self.lam)
        gl = tet_geometry(space.mesh, self.tet).grad_lambda
        g = np.matmul(basis_dlambda(space.degree, self.lam), gl)
        return vals, np.matmul(g, np.swapaxes(self.dtheta_inv_t, 1, 2))


def mapped_volume_quadrature(mesh, tets, isomap: IsoMap | None = None, degree=2) -> VolumeQuadrature:
    r = get_rule("tetrahedron", degree)
    nq = r.n_points
    tets = np.asarray(tets)
    tet = np.repeat(tets, nq)
    lam = np.tile(r.points, (len(tets), 1))
    geo = tet_geometry(mesh, tets)
    w = (np.abs(geo.det)[:, None] * r.weights[None, :]).ravel()
    x = np.einsum("qa,tai->tqi", r.points, mesh.vertices[mesh.tets[tets]]).reshape(-1, 3)
    if isomap is None or isomap.is_identity:
        Dinv_t = np.broadcast_to(np.eye(3), (len(tet), 3, 3)).copy()
        return VolumeQuadrature(tets, nq, tet, lam, x, w, Dinv_t)
    D = isomap.jacobian(tet, lam)
    det = np.linalg.det(D)
    if np.any(det <= 0):
        raise MeshTooCoarseError("non-positive D Theta_h at a volume quadrature point")
    Dinv_t = np.transpose(np.linalg.inv(D), (0, 2, 1))
    x = x + isomap.displacement(tet, lam)
    return VolumeQuadrature(tets, nq, tet, lam, x, w * det, Dinv_t)
