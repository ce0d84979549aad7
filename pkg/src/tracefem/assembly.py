"""Assembly of trace FE systems over the active background dofs.

Bilinear forms are integrated on the (mapped) surface triangles or on the
(mapped) active tets, element by element, and merged into a sparse matrix
in a fixed element order.  Element loops are chunked to bound memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fespace import ActiveDofMap, FeSpace, basis_d2lambda, basis_dlambda, basis_values, tet_geometry
from .isomap import IsoMap, build_isomap, mapped_surface_quadrature, mapped_volume_quadrature
from .levelset import AnalyticSurface, CutTopology, DiscreteLevelSet, extract_cut_topology, interpolate_levelset
from .mesh import TetMesh
from .problems import ProblemSpec
from .quadrature import get_rule

__all__ = [
    "Discretization",
    "discretize",
    "TraceSystem",
    "STABILIZATIONS",
    "default_rho",
    "assemble_mass_stiffness",
    "assemble_lb",
    "assemble_stabilization",
    "stabilization_energy",
    "assemble_supg",
    "supg_delta",
    "export_matrix_market",
]

STABILIZATIONS = ("ghost", "full_grad_surface", "full_grad_volume", "normal_volume")

_CHUNK_POINTS = 200_000


def _chunks(n, per_item):
    step = max(1, _CHUNK_POINTS // max(per_item, 1))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


@dataclass(eq=False)
class Discretization:
    """Everything geometric a trace FE system needs on one mesh.

    ``space`` has degree m, ``phi_h`` degree k; ``isomap`` is None for k=1.
    """

    surface: AnalyticSurface
    mesh: TetMesh
    phi_h: DiscreteLevelSet
    cut: CutTopology
    space: FeSpace
    dofmap: ActiveDofMap
    isomap: IsoMap | None
    m: int
    k: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_active(self):
        return self.dofmap.n_active

    @cached_property
    def h(self):
        """Mesh size: max diameter over the active tets."""
        return float(self.cut.h_active.max())

    @property
    def quad_degree(self):
        """Surface rule degree: 2m, plus 2(k-1) when the map is active."""
        return 2 * self.m + 2 * (self.k - 1)

    @property
    def volume_degree(self):
        return max(1, 2 * (self.m - 1) + 2 * (self.k - 1))

    def local_active(self, tets):
        """Active dof numbers of the local dofs of ``tets``, (n, nloc)."""
        return self.dofmap.global_to_active[self.space.tet_dofs[tets]]

    def surface_quadrature(self, degree=None, tris=None):
        degree = self.quad_degree if degree is None else degree
        return mapped_surface_quadrature(self.cut, self.isomap, degree, tris)

    def volume_quadrature(self, degree=None, tets=None):
        degree = self.volume_degree if degree is None else degree
        tets = self.cut.active if tets is None else tets
        return mapped_volume_quadrature(self.mesh, tets, self.isomap, degree)

    def surface_chunks(self, degree=None):
        """Iterate the mapped surface quadrature in chunks of triangles."""
        degree = self.quad_degree if degree is None else degree
        nqp = get_rule("triangle", degree).n_points
        for sl in _chunks(len(self.cut.tri_tet), nqp * self.space.n_local):
            yield self.surface_quadrature(degree, sl)

    def volume_chunks(self, degree=None):
        degree = self.volume_degree if degree is None else degree
        nqp = get_rule("tetrahedron", degree).n_points
        act = self.cut.active
        for sl in _chunks(len(act), nqp * self.space.n_local):
            yield self.volume_quadrature(degree, act[sl])

    @cached_property
    def area(self):
        return sum(q.weight.sum() for q in self.surface_chunks())


def discretize(surface: AnalyticSurface, mesh: TetMesh, m=1, k=1, pin_boundary=False) -> Discretization:
    """Level set interpolation, cut extraction, map and active dofs."""
    if m not in (1, 2) or k not in (1, 2):
        raise ValueError("m and k must be 1 or 2")
    if k > m:
        raise ValueError(f"geometry degree k={k} exceeds FE degree m={m}")
    phi_h = interpolate_levelset(surface, mesh, k)
    cut = extract_cut_topology(phi_h)
    iso = build_isomap(phi_h, cut, pin_boundary=pin_boundary) if k > 1 else None
    space = phi_h.space if m == k else FeSpace(mesh, m)
    dofmap = space.active_map(cut.active)
    return Discretization(surface, mesh, phi_h, cut, space, dofmap, iso, m, k)


@dataclass(eq=False)
class TraceSystem:
    """Sparse system over active dofs plus bookkeeping."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: ActiveDofMap
    disc: Discretization
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.matrix.shape[0]

    def export_matrix_market(self, path):
        export_matrix_market(path, self.matrix)


def export_matrix_market(path, A, comment=""):
    """Write ``A`` in MatrixMarket coordinate format (symmetric when it is)."""
    A = sp.csr_matrix(A)
    diff = abs(A - A.T).max() if A.nnz else 0.0
    scale = abs(A).max() if A.nnz else 1.0
    if diff <= 1e-12 * scale:
        scipy.io.mmwrite(path, sp.coo_matrix(0.5 * (A + A.T)), comment=comment, symmetry="symmetric")
    else:
        scipy.io.mmwrite(path, sp.coo_matrix(A), comment=comment, symmetry="general")


def _gram(w, V, U, ne, nqp):
    """Element blocks ``sum_q w_q V_q U_q^T`` for point features (nq, nl, d)."""
    if V.ndim == 2:
        V, U = V[:, :, None], U[:, :, None]
    nl, d = V.shape[1], V.shape[2]
    Vr = V.reshape(ne, nqp, nl, d).transpose(0, 2, 1, 3).reshape(ne, nl, nqp * d)
    Ur = (U * w[:, None, None]).reshape(ne, nqp, nl, d).transpose(0, 2, 1, 3).reshape(ne, nl, nqp * d)
    return np.matmul(Vr, Ur.transpose(0, 2, 1))


class _Triplets:
    """Collects element blocks; duplicates are summed on compression."""

    def __init__(self, n):
        self.n = n
        self.rows, self.cols, self.vals = [], [], []

    def add(self, idx_test, idx_trial, blocks):
        nl_t, nl_u = idx_test.shape[1], idx_trial.shape[1]
        self.rows.append(np.repeat(idx_test, nl_u, axis=1).ravel())
        self.cols.append(np.tile(idx_trial, (1, nl_t)).ravel())
        self.vals.append(blocks.ravel())

    def tocsr(self):
        if not self.rows:
            return sp.csr_matrix((self.n, self.n))
        r = np.concatenate(self.rows)
        c = np.concatenate(self.cols)
        v = np.concatenate(self.vals)
        keep = (r >= 0) & (c >= 0)
        A = sp.coo_matrix((v[keep], (r[keep], c[keep])), shape=(self.n, self.n)).tocsr()
        A.sum_duplicates()
        return A


def _scatter_vec(n, idx, vals):
    keep = idx >= 0
    return np.bincount(idx[keep], weights=vals[keep], minlength=n)


def assemble_mass_stiffness(disc: Discretization, degree=None, c=None):
    """Surface mass and stiffness matrices ``(M, K)`` on ``Gamma_h``.

    ``c`` optionally weights the mass matrix (callable on points).
    """
    n = disc.n_active
    M, K = _Triplets(n), _Triplets(n)
    for q in disc.surface_chunks(degree):
        vals, grads = q.basis(disc.space)
        idx = disc.local_active(q.tri_tet)
        wm = q.weight if c is None else q.weight * c(q.x)
        M.add(idx, idx, _gram(wm, vals, vals, q.n_tri, q.n_qp))
        K.add(idx, idx, _gram(q.weight, grads, grads, q.n_tri, q.n_qp))
    return M.tocsr(), K.tocsr()


def _load(disc, f, degree=None):
    idx, vals = [], []
    for q in disc.surface_chunks(degree):
        v, _ = q.basis(disc.space)
        fl = ((q.weight * f(q.x))[:, None] * v).reshape(q.n_tri, q.n_qp, -1).sum(axis=1)
        idx.append(disc.local_active(q.tri_tet).ravel())
        vals.append(fl.ravel())
    return _scatter_vec(disc.n_active, np.concatenate(idx), np.concatenate(vals))


def default_rho(kind, h):
    """Default stabilization scaling for each kind."""
    return {"ghost": 1.0, "full_grad_surface": 1.0, "full_grad_volume": h, "normal_volume": 1.0}[kind]


def assemble_stabilization(disc: Discretization, kind, rho=None, degree=None):
    """Stabilization matrix ``s_h`` over active dofs.

    Parameters
    ----------
    kind : {"ghost", "full_grad_surface", "full_grad_volume", "normal_volume"}
    rho : float, optional
        Scaling; defaults from :func:`default_rho`.
    degree : int, optional
        Quadrature degree override.

    Returns
    -------
    S : csr_matrix
    info : dict
        ``rho`` used and flags, e.g. ``no_conditioning_guarantee`` for the
        ghost penalty with m=2.
    """
    if kind not in STABILIZATIONS:
        raise ValueError(f"unknown stabilization {kind!r}; expected one of {STABILIZATIONS}")
    rho = default_rho(kind, disc.h) if rho is None else float(rho)
    if not rho > 0:
        raise ValueError(f"stabilization parameter must be positive, got {rho}")
    info = {"stabilization": kind, "rho": rho}
    if kind == "ghost" and disc.m > 1:
        info["no_conditioning_guarantee"] = True
    T = _Triplets(disc.n_active)
    for w, J, idx, ne, nqp in _stab_blocks(disc, kind, degree):
        T.add(idx, idx, _gram(w, J, J, ne, nqp))
    return rho * T.tocsr(), info


def stabilization_energy(disc: Discretization, kind, coeffs, rho=None, degree=None):
    """``s_h(v, v)`` evaluated as a sum of squares at the quadrature points.

    Agrees with ``v^T S v`` but avoids its cancellation, so functions in the
    kernel (constants, and affine functions for the ghost penalty) give
    values at roundoff of the squared quantities.
    """
    if kind not in STABILIZATIONS:
        raise ValueError(f"unknown stabilization {kind!r}; expected one of {STABILIZATIONS}")
    rho = default_rho(kind, disc.h) if rho is None else float(rho)
    c = np.asarray(coeffs, dtype=float)
    if len(c) == disc.space.n_dofs:
        c = disc.dofmap.restrict(c)
    total = 0.0
    for w, J, idx, ne, nqp in _stab_blocks(disc, kind, degree):
        local = np.repeat(c[idx], nqp, axis=0)
        total += np.sum(w * np.einsum("nl,nl->n", J, local) ** 2)
    return rho * float(total)


def _stab_blocks(disc, kind, degree=None):
    """Yield ``(w, J, idx, ne, nqp)`` with ``s_h(u, v) = sum w (J u)(J v)``.

    ``J`` holds the stabilized quantity (a normal derivative, a jump or one
    gradient component) per point and local dof; ``idx`` maps local dofs of
    each element (tet, triangle or face pair) to active numbers.
    """
    if kind == "ghost":
        yield from _ghost_blocks(disc, degree)
    elif kind == "full_grad_surface":
        for q in disc.surface_chunks(degree):
            _, g = q.basis(disc.space, tangential=False)
            gn = np.einsum("nli,ni->nl", g, q.normal)
            yield q.weight, gn, disc.local_active(q.tri_tet), q.n_tri, q.n_qp
    else:
        for q in disc.volume_chunks(degree):
            _, g = q.basis(disc.space)
            idx = disc.local_active(q.tets)
            ne = len(q.tets)
            if kind == "full_grad_volume":
                for a in range(3):
                    yield q.weight, g[:, :, a], idx, ne, q.n_qp
            else:
                _, gphi = disc.phi_h.evaluate(q.tet, q.lam, grad=True)
                nh = gphi / np.linalg.norm(gphi, axis=1)[:, None]
                yield q.weight, np.einsum("nli,ni->nl", g, nh), idx, ne, q.n_qp


def _ghost_blocks(disc, degree=None):
    """Normal-derivative jumps over the interior faces of the active band."""
    mesh, space = disc.mesh, disc.space
    faces = disc.cut.interior_faces
    degree = max(1, 2 * (disc.m - 1)) if degree is None else degree
    r = get_rule("triangle", degree)
    nqp = r.n_points
    nf = len(faces.faces)
    for sl in _chunks(nf, nqp * 2 * space.n_local):
        fv = mesh.vertices[faces.faces[sl]]  # (nf, 3, 3)
        nrm = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
        area = 0.5 * np.linalg.norm(nrm, axis=1)
        nF = np.repeat(nrm / (2.0 * area)[:, None], nqp, axis=0)
        x = np.einsum("qa,fai->fqi", r.points, fv).reshape(-1, 3)
        w = (2.0 * area[:, None] * r.weights[None, :]).ravel()
        jumps, idx = [], []
        for side, sign in ((0, 1.0), (1, -1.0)):
            t = faces.tets[sl, side]
            tq = np.repeat(t, nqp)
            geo = tet_geometry(mesh, tq)
            lam = geo.to_barycentric(x)
            g = np.matmul(basis_dlambda(space.degree, lam), geo.grad_lambda)
            jumps.append(sign * np.einsum("nli,ni->nl", g, nF))
            idx.append(disc.local_active(t))
        yield w, np.concatenate(jumps, axis=1), np.concatenate(idx, axis=1), len(area), nqp


def assemble_lb(disc: Discretization, problem: ProblemSpec, stabilization=None, rho=None, degree=None) -> TraceSystem:
    """Laplace-Beltrami system ``eps K + c M (+ s_h)`` with load ``f_h``.

    ``f_h`` and ``c`` are sampled at the mapped quadrature points through
    the closest point map.
    """
    if disc.cut.n_active == 0:
        raise ValueError("empty active set")
    M, K = assemble_mass_stiffness(disc, degree, c=problem.c_ext)
    A = problem.eps * K + M
    b = _load(disc, problem.f_ext, degree)
    meta = {"form": "laplace_beltrami", "stabilization": "none", "m": disc.m, "k": disc.k}
    if stabilization not in (None, "none"):
        S, info = assemble_stabilization(disc, stabilization, rho)
        A = A + S
        meta.update(info)
    return TraceSystem(A.tocsr(), b, disc.dofmap, disc, meta)


def supg_delta(h, w_norm, eps, c=None, delta0=0.5, delta1=0.25):
    """Streamline parameter per element.

    ``delta = min(delta0 h / |w|, 1/c)`` when the mesh Peclet number
    ``h |w| / (2 eps)`` exceeds 1, else ``min(delta1 h^2 / eps, 1/c)``.
    The ``1/c`` cap is skipped for ``c`` None or 0.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = np.asarray(h, dtype=float)
    w_norm = np.asarray(w_norm, dtype=float)
    pe = h * w_norm / (2.0 * eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        conv = delta0 * h / w_norm
    d = np.where(pe > 1.0, conv, delta1 * h**2 / eps)
    if c is not None:
        c = np.asarray(c, dtype=float)
        with np.errstate(divide="ignore"):
            cap = np.where(c > 0, 1.0 / np.where(c > 0, c, 1.0), np.inf)
        d = np.minimum(d, cap)
    return d


def _hessians(disc, q):
    """Mapped Hessians of the shape functions, (nq, nl, 3, 3)."""
    gl = tet_geometry(disc.mesh, q.tet).grad_lambda
    d2 = basis_d2lambda(disc.space.degree)
    H = np.einsum("nai,lab,nbj->nlij", gl, d2, gl)
    Dinv_t = q.dtheta_inv_t
    return np.einsum("nij,nljk,nmk->nlim", Dinv_t, H, Dinv_t)


def assemble_supg(
    disc: Discretization,
    problem: ProblemSpec,
    delta0=0.5,
    delta1=0.25,
    stabilization="normal_volume",
    rho=None,
    degree=None,
) -> TraceSystem:
    """Convection-diffusion system with streamline stabilization.

    The Galerkin part uses the skew-symmetric convection form
    ``1/2 [(w.grad u) v - (w.grad v) u] + (c + div w / 2) u v``; the
    streamline terms ``delta_T (L u)(w.grad v)`` and ``delta_T f (w.grad v)``
    are added per active tet.  For m=1 the surface Laplacian of ``u_h``
    vanishes on each planar piece and the term is omitted.
    """
    eps = problem.eps
    if not eps > 0:
        raise ValueError("eps must be positive")
    n = disc.n_active
    ntet = disc.mesh.n_tets
    # first pass: |w| and c maxima over the surface points of each tet
    wmax = np.zeros(ntet)
    cmax = np.zeros(ntet)
    for q in disc.surface_chunks(degree):
        np.maximum.at(wmax, q.tet, np.linalg.norm(problem.w_ext(q.x), axis=1))
        np.maximum.at(cmax, q.tet, problem.c_ext(q.x))
    act = disc.cut.active
    c_cap = problem.c_const if problem.c_const is not None else cmax[act]
    c_cap = None if (np.isscalar(c_cap) and c_cap == 0) else c_cap
    delta = np.zeros(ntet)
    delta[act] = supg_delta(disc.mesh.tet_diameters[act], wmax[act], eps, c_cap, delta0, delta1)

    T = _Triplets(n)
    b_idx, b_val = [], []
    for q in disc.surface_chunks(degree):
        vals, g = q.basis(disc.space)
        idx = disc.local_active(q.tri_tet)
        w = problem.w_ext(q.x)
        cq = problem.c_ext(q.x)
        dq = problem.div_w_ext(q.x)
        fq = problem.f_ext(q.x)
        wg = np.einsum("nli,ni->nl", g, w)
        dT = delta[q.tet]
        ne, nqp = q.n_tri, q.n_qp
        wt = q.weight
        blk = eps * _gram(wt, g, g, ne, nqp)
        blk += 0.5 * (_gram(wt, vals, wg, ne, nqp) - _gram(wt, wg, vals, ne, nqp))
        blk += _gram(wt * (cq + 0.5 * dq), vals, vals, ne, nqp)
        # streamline residual of the trial functions
        res = wg + (cq + dq)[:, None] * vals
        if disc.m > 1:
            P = q.projector
            lap = np.einsum("nlij,nij->nl", _hessians(disc, q), P)
            res = res - eps * lap
        blk += _gram(wt * dT, wg, res, ne, nqp)
        T.add(idx, idx, blk)
        fl = (wt * fq)[:, None] * (vals + dT[:, None] * wg)
        b_idx.append(idx.ravel())
        b_val.append(fl.reshape(ne, nqp, -1).sum(axis=1).ravel())
    b = _scatter_vec(n, np.concatenate(b_idx), np.concatenate(b_val))
    A = T.tocsr()
    meta = {
        "form": "supg",
        "stabilization": "none",
        "m": disc.m,
        "k": disc.k,
        "delta0": delta0,
        "delta1": delta1,
        "delta": delta,
    }
    if stabilization not in (None, "none"):
        S, info = assemble_stabilization(disc, stabilization, rho)
        A = A + S
        meta.update(info)
    return TraceSystem(A.tocsr(), b, disc.dofmap, disc, meta)
