"""Lagrange finite element spaces on the background mesh."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import TET_EDGES, TetMesh, edge_keys

__all__ = [
    "FeSpace",
    "ActiveDofMap",
    "TetGeometry",
    "tet_geometry",
    "basis_values",
    "basis_dlambda",
    "basis_d2lambda",
    "eval_basis",
    "nodal_interpolate",
    "local_dof_count",
]


def local_dof_count(degree):
    return (degree + 1) * (degree + 2) * (degree + 3) // 6


def basis_values(degree, lam):
    """Shape function values at barycentric points ``lam`` (..., 4)."""
    if degree == 1:
        return lam.copy()
    if degree == 2:
        v = lam * (2.0 * lam - 1.0)
        e = 4.0 * lam[..., TET_EDGES[:, 0]] * lam[..., TET_EDGES[:, 1]]
        return np.concatenate([v, e], axis=-1)
    raise ValueError(f"unsupported degree {degree}")


def basis_dlambda(degree, lam):
    """Derivatives with respect to the four barycentric coordinates, (..., nloc, 4)."""
    shape = lam.shape[:-1]
    if degree == 1:
        return np.broadcast_to(np.eye(4), shape + (4, 4)).copy()
    if degree == 2:
        d = np.zeros(shape + (10, 4))
        for i in range(4):
            d[..., i, i] = 4.0 * lam[..., i] - 1.0
        for e, (i, j) in enumerate(TET_EDGES):
            d[..., 4 + e, i] = 4.0 * lam[..., j]
            d[..., 4 + e, j] = 4.0 * lam[..., i]
        return d
    raise ValueError(f"unsupported degree {degree}")


def basis_d2lambda(degree):
    """Constant second derivatives with respect to barycentrics, (nloc, 4, 4)."""
    if degree == 1:
        return np.zeros((4, 4, 4))
    if degree == 2:
        d = np.zeros((10, 4, 4))
        for i in range(4):
            d[i, i, i] = 4.0
        for e, (i, j) in enumerate(TET_EDGES):
            d[4 + e, i, j] = d[4 + e, j, i] = 4.0
        return d
    raise ValueError(f"unsupported degree {degree}")


@dataclass(frozen=True)
class TetGeometry:
    """Affine maps of a batch of tets."""

    origin: np.ndarray  # (n, 3)
    jac: np.ndarray  # (n, 3, 3), columns x_i - x_0
    det: np.ndarray  # (n,)
    grad_lambda: np.ndarray  # (n, 4, 3)

    @property
    def volume(self):
        return np.abs(self.det) / 6.0

    def to_physical(self, lam):
        """Map barycentrics (n, q, 4) or (n, 4) to physical points."""
        if lam.ndim == 2:
            return self.origin + np.einsum("tij,tj->ti", self.jac, lam[:, 1:])
        return self.origin[:, None] + np.einsum("tij,tqj->tqi", self.jac, lam[..., 1:])

    def to_barycentric(self, x):
        """Barycentric coordinates of physical points x (n, 3) or (n, q, 3)."""
        inv = self.grad_lambda[:, 1:]  # rows of J^{-1}
        if x.ndim == 2:
            r = np.einsum("tij,tj->ti", inv, x - self.origin)
        else:
            r = np.einsum("tij,tqj->tqi", inv, x - self.origin[:, None])
        return np.concatenate([1.0 - r.sum(axis=-1, keepdims=True), r], axis=-1)


def tet_geometry(mesh: TetMesh, tet_ids) -> TetGeometry:
    tet_ids = np.asarray(tet_ids)
    if tet_ids.ndim == 1 and len(tet_ids) > 64:
        # quadrature callers repeat each tet many times
        u, inv = np.unique(tet_ids, return_inverse=True)
        if 2 * len(u) <= len(tet_ids):
            g = tet_geometry(mesh, u)
            return TetGeometry(g.origin[inv], g.jac[inv], g.det[inv], g.grad_lambda[inv])
    x = mesh.vertices[mesh.tets[tet_ids]]
    jac = np.transpose(x[:, 1:] - x[:, :1], (0, 2, 1))
    det = np.linalg.det(jac)
    if np.any(np.abs(det) <= 1e-300):
        raise ValueError("degenerate tet Jacobian")
    inv = np.linalg.inv(jac)
    grad = np.concatenate([-inv.sum(axis=1, keepdims=True), inv], axis=1)
    return TetGeometry(x[:, 0].copy(), jac, det, grad)


class FeSpace:
    """Continuous Lagrange space of degree 1 or 2 on a tet mesh.

    Dofs are the mesh vertices (in mesh order) followed, for degree 2, by the
    edge midpoints in order of sorted endpoint pairs.
    """

    def __init__(self, mesh: TetMesh, degree: int):
        if degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        if degree == 1:
            self.tet_dofs = mesh.tets
            self.n_dofs = mesh.n_vertices
            self.edges = np.empty((0, 2), dtype=np.int64)
        else:
            t = mesh.tets
            keys = edge_keys(t[:, TET_EDGES[:, 0]], t[:, TET_EDGES[:, 1]])
            uniq, inv = np.unique(keys, return_inverse=True)
            self.edges = np.column_stack([uniq >> 31, uniq & ((1 << 31) - 1)])
            self.tet_dofs = np.concatenate([t, mesh.n_vertices + inv.reshape(-1, 6)], axis=1)
            self.n_dofs = mesh.n_vertices + len(uniq)

    @property
    def n_local(self):
        return local_dof_count(self.degree)

    @cached_property
    def dof_coords(self):
        v = self.mesh.vertices
        if self.degree == 1:
            return v
        return np.concatenate([v, 0.5 * (v[self.edges[:, 0]] + v[self.edges[:, 1]])])

    @cached_property
    def dof_barycentric(self):
        """Barycentric coordinates of the local nodes, (nloc, 4)."""
        lam = np.eye(4)
        if self.degree == 2:
            lam = np.concatenate([lam, 0.5 * (lam[TET_EDGES[:, 0]] + lam[TET_EDGES[:, 1]])])
        return lam

    def evaluate(self, coeffs, tets, lam, grad=False):
        """Evaluate an FE function at barycentric points of given tets.

        ``lam`` is (n, 4) paired with ``tets`` (n,).  Points outside their
        tet are evaluated with the tet's polynomial (polynomial extension).
        """
        c = np.asarray(coeffs)[self.tet_dofs[tets]]  # (n, nloc) or (n, nloc, d)
        vector = c.ndim == 3
        cc = c if vector else c[:, :, None]
        phi = basis_values(self.degree, lam)
        val = np.matmul(phi[:, None, :], cc)[:, 0]
        val = val if vector else val[:, 0]
        if not grad:
            return val
        g = tet_geometry(self.mesh, tets).grad_lambda
        dphi = np.matmul(basis_dlambda(self.degree, lam), g)
        dv = np.matmul(np.swapaxes(cc, 1, 2), dphi)  # (n, d, 3)
        return val, dv if vector else dv[:, 0]

    def active_map(self, tets) -> "ActiveDofMap":
        return ActiveDofMap.from_tets(self, tets)


@dataclass(frozen=True)
class ActiveDofMap:
    """Dofs supported on a set of active tets, numbered 0..N-1."""

    dofs: np.ndarray
    global_to_active: np.ndarray

    @classmethod
    def from_tets(cls, space: FeSpace, tets):
        dofs = np.unique(space.tet_dofs[tets])
        g2a = np.full(space.n_dofs, -1, dtype=np.int64)
        g2a[dofs] = np.arange(len(dofs))
        return cls(dofs, g2a)

    @property
    def n_active(self):
        return len(self.dofs)

    def expand(self, x, n_dofs=None, fill=0.0):
        """Scatter an active vector into the full dof space."""
        out = np.full(n_dofs or len(self.global_to_active), fill, dtype=float)
        out[self.dofs] = x
        return out

    def restrict(self, x):
        return np.asarray(x)[self.dofs]


def eval_basis(space: FeSpace, tet, ref_point, isomap=None):
    """Local shape functions of one tet at a reference point.

    Parameters
    ----------
    space : FeSpace
    tet : int
    ref_point : 3-vector in the reference tet
    isomap : IsoMap, optional
        When given, gradients are transformed with ``DTheta^{-T}``.

    Returns
    -------
    values : (nloc,) ndarray
    grads : (nloc, 3) ndarray
    """
    ref = np.asarray(ref_point, dtype=float)
    if np.any(ref < -1e-12) or ref.sum() > 1 + 1e-12:
        raise ValueError("point outside the reference tet")
    lam = np.concatenate([[1.0 - ref.sum()], ref])[None]
    geo = tet_geometry(space.mesh, np.array([tet]))
    values = basis_values(space.degree, lam)[0]
    grads = basis_dlambda(space.degree, lam)[0] @ geo.grad_lambda[0]
    if isomap is not None:
        dtheta = isomap.jacobian(np.array([tet]), lam)[0]
        grads = grads @ np.linalg.inv(dtheta)
    return values, grads


def nodal_interpolate(f, space: FeSpace):
    """Coefficients of the nodal interpolant of ``f`` (vectorized callable)."""
    vals = np.asarray(f(space.dof_coords), dtype=float)
    if vals.shape != (space.n_dofs,):
        vals = np.broadcast_to(vals, (space.n_dofs,)).copy()
    if not np.all(np.isfinite(vals)):
        raise ValueError("interpolated function is not finite at some dof")
    return vals
