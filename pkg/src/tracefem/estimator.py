"""Residual error indicators on the planar surface and adaptive refinement.

For each active tet T with surface piece G_T,

    eta_R(T)^2 = h_T^2 || f + eps Lap u_h - (c + div w) u_h - w . grad u_h ||^2_{G_T}
    eta_E(T)^2 = sum_E h_T ( || eps (grad u_1 . m_1 + grad u_2 . m_2) ||^2_E
                             + || w . (m_1 + m_2) ||^2_E )

where E runs over the polygon edges of G_T shared with the neighbouring
piece and m_i are the in-plane outward co-normals of the two pieces.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .assembly import Discretization, assemble_lb, discretize
from .errors import ErrorRecord, surface_errors
from .fespace import basis_d2lambda, tet_geometry
from .mesh import TetMesh, bisect_refine
from .problems import ProblemSpec
from .quadrature import gauss_segment
from .solvers import solve_cg

__all__ = ["IndicatorField", "TopologyError", "compute_indicators", "mark_dorfler", "AdaptiveLevel", "adaptive_loop"]


class TopologyError(RuntimeError):
    """The discrete surface has an unmatched polygon edge."""


@dataclass
class IndicatorField:
    tets: np.ndarray  # active tet ids
    eta_r: np.ndarray
    eta_e: np.ndarray

    @property
    def eta(self):
        return np.sqrt(self.eta_r**2 + self.eta_e**2)

    @property
    def global_eta(self):
        return float(np.sqrt(np.sum(self.eta**2)))

    def on_mesh(self, n_tets):
        out = np.zeros(n_tets)
        out[self.tets] = self.eta
        return out


def _conormals(cut, seg, nhat):
    """Unit in-plane co-normals of segments, pointing away from their piece."""
    p = cut.seg_points[seg]
    t = p[:, 1] - p[:, 0]
    m = np.cross(t, nhat)
    m /= np.linalg.norm(m, axis=1)[:, None]
    # centroid of the piece in the same tet
    tet = cut.seg_tet[seg]
    cen = np.zeros((cut.mesh.n_tets, 3))
    cnt = np.bincount(cut.tri_tet, minlength=cut.mesh.n_tets)
    tri_c = cut.tri_points.mean(axis=1)
    for a in range(3):
        cen[:, a] = np.bincount(cut.tri_tet, weights=tri_c[:, a], minlength=cut.mesh.n_tets)
    cen = cen[tet] / cnt[tet, None]
    flip = np.einsum("ni,ni->n", m, 0.5 * (p[:, 0] + p[:, 1]) - cen) < 0
    m[flip] *= -1.0
    return m


def compute_indicators(disc: Discretization, coeffs, problem: ProblemSpec, degree=None) -> IndicatorField:
    """Residual indicators of a trace FE solution on the planar surface.

    Only the piecewise planar geometry (k=1) is supported.  ``coeffs`` may
    be active or global dof values.
    """
    if disc.k != 1:
        raise ValueError("indicators are defined on the planar surface only (k=1)")
    cut, space, mesh = disc.cut, disc.space, disc.mesh
    unmatched = cut.unmatched_segments
    if len(unmatched) or cut._overmatched:
        raise TopologyError(f"open surface: {len(unmatched)} unmatched polygon edge(s)")
    c = np.asarray(coeffs, dtype=float)
    if len(c) != space.n_dofs:
        c = disc.dofmap.expand(c, space.n_dofs)
    eps = problem.eps
    act = cut.active
    h = mesh.tet_diameters

    # element residual
    r2 = np.zeros(mesh.n_tets)
    for q in disc.surface_chunks(degree):
        uh, guh = q.evaluate(space, c)
        res = problem.f_ext(q.x) - (problem.c_ext(q.x) + problem.div_w_ext(q.x)) * uh
        if problem.w is not None:
            res -= np.einsum("ni,ni->n", problem.w_ext(q.x), guh)
        if space.degree > 1:
            gl = tet_geometry(mesh, q.tet).grad_lambda
            H = np.einsum("nai,lab,nbj->nlij", gl, basis_d2lambda(space.degree), gl)
            Hu = np.einsum("nlij,nl->nij", H, c[space.tet_dofs[q.tet]])
            res += eps * np.einsum("nij,nij->n", Hu, q.projector)
        r2 += q.per_tet(res**2, mesh.n_tets)
    eta_r2 = h**2 * r2

    # edge jumps
    e2 = np.zeros(mesh.n_tets)
    pairs = cut.edge_pairs
    if len(pairs):
        s1, s2 = pairs[:, 0], pairs[:, 1]
        t1, t2 = cut.seg_tet[s1], cut.seg_tet[s2]
        n1 = cut.tet_grad[cut.active_index[t1]]
        n2 = cut.tet_grad[cut.active_index[t2]]
        n1 = n1 / np.linalg.norm(n1, axis=1)[:, None]
        n2 = n2 / np.linalg.norm(n2, axis=1)[:, None]
        m1, m2 = _conormals(cut, s1, n1), _conormals(cut, s2, n2)
        ts, ws = gauss_segment(2 * space.degree + 2)
        p = cut.seg_points[s1]
        length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        jump = np.zeros(len(s1))
        conv = np.zeros(len(s1))
        for tq, wq in zip(ts, ws):
            x = p[:, 0] + tq * (p[:, 1] - p[:, 0])
            _, g1 = space.evaluate(c, t1, tet_geometry(mesh, t1).to_barycentric(x), grad=True)
            _, g2 = space.evaluate(c, t2, tet_geometry(mesh, t2).to_barycentric(x), grad=True)
            # co-normal components are unaffected by the in-plane projection
            flux = eps * (np.einsum("ni,ni->n", g1, m1) + np.einsum("ni,ni->n", g2, m2))
            jump += wq * length * flux**2
            if problem.w is not None:
                wm = np.einsum("ni,ni->n", problem.w_ext(x), m1 + m2)
                conv += wq * length * wm**2
        e_edge = jump + conv
        e2 += np.bincount(t1, weights=h[t1] * e_edge, minlength=mesh.n_tets)
        e2 += np.bincount(t2, weights=h[t2] * e_edge, minlength=mesh.n_tets)
    return IndicatorField(act.copy(), np.sqrt(eta_r2[act]), np.sqrt(e2[act]))


def mark_dorfler(eta, theta):
    """Indices of the smallest set carrying a ``theta^2`` share of ``sum eta^2``.

    Candidates are taken in descending ``eta``, ties by index.  ``theta = 1``
    marks every entry with ``eta > 0``.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    eta = np.asarray(eta, dtype=float)
    order = np.lexsort((np.arange(len(eta)), -eta))
    e2 = eta[order] ** 2
    total = e2.sum()
    if total == 0:
        return np.empty(0, dtype=np.int64)
    if theta == 1:
        return np.sort(order[e2 > 0])
    csum = np.cumsum(e2)
    k = int(np.searchsorted(csum, theta**2 * total * (1 - 1e-12))) + 1
    return np.sort(order[:k])


@dataclass
class AdaptiveLevel:
    record: ErrorRecord
    indicators: IndicatorField
    disc: Discretization
    marked: np.ndarray


def adaptive_loop(
    problem: ProblemSpec,
    mesh: TetMesh,
    theta=0.5,
    max_levels=10,
    dof_budget=np.inf,
    m=1,
    stabilization="normal_volume",
    rho=None,
    tol=1e-10,
):
    """Solve, estimate, mark and bisect until the level cap or dof budget.

    A level whose active dof count exceeds ``dof_budget`` is still solved
    and recorded, then the loop stops.
    """
    levels = []
    for level in range(max_levels):
        t0 = time.perf_counter()
        disc = discretize(problem.surface, mesh, m, 1)
        system = assemble_lb(disc, problem, stabilization, rho)
        asm = 1000.0 * (time.perf_counter() - t0)
        rep = solve_cg(system.matrix, system.rhs, tol)
        l2, h1 = surface_errors(disc, rep.x, problem)
        ind = compute_indicators(disc, rep.x, problem)
        marked = ind.tets[mark_dorfler(ind.eta, theta)]
        rec = ErrorRecord(
            level, disc.h, disc.n_active, l2, h1, asm_ms=asm, solve_ms=rep.time_ms,
            extra={"eta_global": ind.global_eta, "theta": theta},
        )
        levels.append(AdaptiveLevel(rec, ind, disc, marked))
        if disc.n_active > dof_budget or level == max_levels - 1:
            break
        mesh = bisect_refine(mesh, marked)
    return levels
