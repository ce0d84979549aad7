"""Implicit surfaces, discrete level sets and the piecewise planar cut.

Analytic surfaces provide the level set function, the closest point map and
its Jacobian.  A :class:`DiscreteLevelSet` is the nodal interpolant of the
level set function in a background Lagrange space; the zero level of its
piecewise linear interpolant is extracted tet by tet (marching tetrahedra)
into a :class:`CutTopology`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .fespace import FeSpace, nodal_interpolate, tet_geometry
from .mesh import TET_EDGES, TetMesh, edge_keys, face_adjacency

__all__ = [
    "AnalyticSurface",
    "Sphere",
    "Torus",
    "Ellipsoid",
    "Plane",
    "Shifted",
    "make_surface",
    "DiscreteLevelSet",
    "interpolate_levelset",
    "CutTopology",
    "extract_cut_topology",
    "geometry_distance",
    "SurfaceNotFoundError",
    "DegenerateCutError",
    "write_vtk_surface",
]


class SurfaceNotFoundError(RuntimeError):
    """The discrete level set has no zero level in the mesh."""


class DegenerateCutError(RuntimeError):
    """The discrete level set vanishes identically on a tet."""


def _norm(x):
    return np.linalg.norm(x, axis=-1)


class AnalyticSurface:
    """Zero level of a smooth function on R^3.

    Subclasses implement :meth:`phi`, :meth:`grad_phi` and
    :meth:`closest_point`; everything else has generic defaults.
    """

    name = "surface"
    feature_size = 1.0

    def phi(self, x):
        raise NotImplementedError

    def grad_phi(self, x):
        raise NotImplementedError

    def closest_point(self, x):
        raise NotImplementedError

    def normal(self, x):
        """Unit normal ``n(x)`` of the surface at the closest point of ``x``."""
        g = self.grad_phi(self.closest_point(x))
        return g / _norm(g)[..., None]

    def closest_point_jacobian(self, x, step=None):
        """Derivative of the closest point map by central differences."""
        x = np.asarray(x, dtype=float)
        s = (step or 1e-6) * self.feature_size
        cols = []
        for a in range(3):
            e = np.zeros(3)
            e[a] = s
            cols.append((self.closest_point(x + e) - self.closest_point(x - e)) / (2 * s))
        return np.stack(cols, axis=-1)

    def extension(self, u):
        """Normal-constant extension ``x -> u(p(x))`` of an ambient callable."""
        return lambda x: u(self.closest_point(x))

    def describe(self):
        return self.name


@dataclass(frozen=True)
class Sphere(AnalyticSurface):
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    name = "sphere"

    @property
    def feature_size(self):
        return self.radius

    def phi(self, x):
        return _norm(np.asarray(x) - self.center) - self.radius

    def grad_phi(self, x):
        y = np.asarray(x) - self.center
        return y / _norm(y)[..., None]

    def closest_point(self, x):
        y = np.asarray(x) - self.center
        return np.asarray(self.center) + self.radius * y / _norm(y)[..., None]

    def closest_point_jacobian(self, x, step=None):
        y = np.asarray(x) - self.center
        r = _norm(y)
        yh = y / r[..., None]
        proj = np.eye(3) - yh[..., :, None] * yh[..., None, :]
        return (self.radius / r)[..., None, None] * proj

    def describe(self):
        return f"sphere(r={self.radius})"


@dataclass(frozen=True)
class Torus(AnalyticSurface):
    """Torus around the x3 axis with core radius ``R`` and tube radius ``rho``."""

    R: float = 1.0
    rho: float = 0.5
    name = "torus"

    @property
    def feature_size(self):
        return self.rho

    def _core(self, x):
        x = np.asarray(x, dtype=float)
        rxy = np.hypot(x[..., 0], x[..., 1])
        q = np.zeros_like(x)
        q[..., 0] = self.R * x[..., 0] / rxy
        q[..., 1] = self.R * x[..., 1] / rxy
        return q

    def phi(self, x):
        # written without the core projection so it is defined on the axis
        x = np.asarray(x, dtype=float)
        return np.hypot(np.hypot(x[..., 0], x[..., 1]) - self.R, x[..., 2]) - self.rho

    def grad_phi(self, x):
        d = np.asarray(x) - self._core(x)
        return d / _norm(d)[..., None]

    def closest_point(self, x):
        q = self._core(x)
        d = np.asarray(x) - q
        return q + self.rho * d / _norm(d)[..., None]

    def describe(self):
        return f"torus(R={self.R},rho={self.rho})"


@dataclass(frozen=True)
class Ellipsoid(AnalyticSurface):
    axes: tuple = (1.0, 0.8, 0.6)
    name = "ellipsoid"

    @property
    def feature_size(self):
        return min(self.axes)

    def phi(self, x):
        return np.sqrt(np.sum((np.asarray(x) / self.axes) ** 2, axis=-1)) - 1.0

    def grad_phi(self, x):
        a = np.asarray(self.axes)
        x = np.asarray(x)
        s = np.sqrt(np.sum((x / a) ** 2, axis=-1))
        return x / a**2 / s[..., None]

    def closest_point(self, x, tol=1e-12, maxiter=100):
        """Closest point via Newton on the Lagrange multiplier equation.

        The minimizer is ``y_i = x_i a_i^2 / (a_i^2 + t)`` where ``t`` solves
        ``F(t) = sum (x_i a_i / (a_i^2 + t))^2 - 1 = 0``.  ``F`` is convex and
        decreasing on ``t > -min a_i^2``; Newton steps are damped to stay in
        that interval.
        """
        x = np.asarray(x, dtype=float)
        shape = x.shape
        x = x.reshape(-1, 3)
        a2 = np.asarray(self.axes, dtype=float) ** 2
        lower = -a2.min()
        t = np.zeros(len(x))
        for _ in range(maxiter):
            q = x * np.sqrt(a2) / (a2 + t[:, None])
            F = np.sum(q**2, axis=1) - 1.0
            dF = -2.0 * np.sum(q**2 / (a2 + t[:, None]), axis=1)
            step = F / dF
            tn = t - step
            bad = tn <= lower
            tn[bad] = 0.5 * (t[bad] + lower)
            t = tn
            if np.all(np.abs(F) < tol):
                break
        y = x * a2 / (a2 + t[:, None])
        return y.reshape(shape)

    def describe(self):
        return "ellipsoid(" + ",".join(f"{a:g}" for a in self.axes) + ")"


@dataclass(frozen=True)
class Plane(AnalyticSurface):
    """Plane ``normal . x = offset``; affine level set."""

    normal_vector: tuple = (1.0, 0.0, 0.0)
    offset: float = 0.0
    name = "plane"

    @property
    def _n(self):
        n = np.asarray(self.normal_vector, dtype=float)
        return n / np.linalg.norm(n)

    def phi(self, x):
        return np.asarray(x) @ self._n - self.offset

    def grad_phi(self, x):
        return np.broadcast_to(self._n, np.shape(x)).copy()

    def closest_point(self, x):
        x = np.asarray(x, dtype=float)
        return x - self.phi(x)[..., None] * self._n

    def closest_point_jacobian(self, x, step=None):
        P = np.eye(3) - np.outer(self._n, self._n)
        return np.broadcast_to(P, np.shape(x)[:-1] + (3, 3)).copy()


@dataclass(frozen=True)
class Shifted(AnalyticSurface):
    """``base`` translated by ``shift``: level set ``phi(x - shift)``."""

    base: AnalyticSurface
    shift: tuple

    @property
    def name(self):
        return self.base.name

    @property
    def feature_size(self):
        return self.base.feature_size

    def phi(self, x):
        return self.base.phi(np.asarray(x) - self.shift)

    def grad_phi(self, x):
        return self.base.grad_phi(np.asarray(x) - self.shift)

    def closest_point(self, x):
        return self.base.closest_point(np.asarray(x) - self.shift) + np.asarray(self.shift)

    def closest_point_jacobian(self, x, step=None):
        return self.base.closest_point_jacobian(np.asarray(x) - self.shift, step)

    def describe(self):
        return f"{self.base.describe()}+shift{tuple(np.round(self.shift, 6))}"


def make_surface(name, **params) -> AnalyticSurface:
    """Catalog lookup by name: sphere, torus, ellipsoid."""
    if name == "sphere":
        return Sphere(radius=float(params.get("radius", 1.0)))
    if name == "torus":
        return Torus(R=float(params.get("R", 1.0)), rho=float(params.get("rho", 0.5)))
    if name == "ellipsoid":
        return Ellipsoid(axes=tuple(params.get("axes", (1.0, 0.8, 0.6))))
    raise ValueError(f"unknown surface {name!r}; expected sphere, torus or ellipsoid")


@dataclass(frozen=True, eq=False)
class DiscreteLevelSet:
    """Level set coefficients in a Lagrange space of degree k."""

    space: FeSpace
    values: np.ndarray

    @property
    def degree(self):
        return self.space.degree

    @property
    def mesh(self):
        return self.space.mesh

    @property
    def lin_values(self):
        """Vertex values, i.e. the coefficients of the P1 interpolant."""
        return self.values[: self.mesh.n_vertices]

    @cached_property
    def norm_inf(self):
        return float(np.max(np.abs(self.values)))

    def evaluate(self, tets, lam, grad=False):
        return self.space.evaluate(self.values, tets, lam, grad=grad)

    def evaluate_lin(self, tets, lam):
        return np.einsum("na,na->n", self.lin_values[self.mesh.tets[tets]], lam)

    def shifted(self, delta):
        return DiscreteLevelSet(self.space, self.values + delta)


def interpolate_levelset(surface: AnalyticSurface, mesh: TetMesh, k=1, space=None) -> DiscreteLevelSet:
    """Nodal interpolant of ``surface.phi`` in the degree-k Lagrange space."""
    if k not in (1, 2):
        raise ValueError(f"level set degree must be 1 or 2, got {k}")
    space = space or FeSpace(mesh, k)
    try:
        vals = nodal_interpolate(surface.phi, space)
    except ValueError as exc:
        raise ValueError(f"surface not defined at every node: {exc}") from None
    return DiscreteLevelSet(space, vals)


@dataclass(eq=False)
class CutTopology:
    """Piecewise planar zero level of the P1 level set and its active tets.

    Triangles are stored grouped by parent tet in increasing tet order and
    oriented so that their normal follows the level set gradient.
    """

    mesh: TetMesh
    active: np.ndarray
    tri_tet: np.ndarray
    tri_ids: np.ndarray
    tri_points: np.ndarray
    tri_normal: np.ndarray
    seg_ids: np.ndarray
    seg_points: np.ndarray
    seg_tet: np.ndarray
    seg_on_box: np.ndarray
    tet_grad: np.ndarray  # gradient of the P1 level set on each active tet

    @property
    def n_active(self):
        return len(self.active)

    @property
    def band(self):
        return self.active

    @cached_property
    def tri_area(self):
        p = self.tri_points
        return 0.5 * _norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))

    @property
    def area(self):
        return float(self.tri_area.sum())

    @cached_property
    def active_index(self):
        idx = np.full(self.mesh.n_tets, -1, dtype=np.int64)
        idx[self.active] = np.arange(self.n_active)
        return idx

    @cached_property
    def h_active(self):
        return self.mesh.tet_diameters[self.active]

    @cached_property
    def faces(self):
        return face_adjacency(self.mesh, self.active)

    @cached_property
    def interior_faces(self):
        f = self.faces
        keep = f.interior
        return type(f)(f.faces[keep], f.tets[keep], f.local[keep])

    @cached_property
    def edge_pairs(self):
        """Matched polygon edges: (n, 2) indices into the segment arrays.

        Returns also the indices of unmatched segments not on the box
        boundary, as the attribute ``unmatched``.
        """
        ids = np.sort(self.seg_ids, axis=1)
        srt = np.lexsort((ids[:, 1], ids[:, 0]))
        s = ids[srt]
        new = np.ones(len(s), dtype=bool)
        new[1:] = np.any(s[1:] != s[:-1], axis=1)
        start = np.flatnonzero(new)
        counts = np.diff(np.append(start, len(s)))
        pairs = np.column_stack([srt[start[counts == 2]], srt[start[counts == 2] + 1]])
        lonely = srt[np.concatenate([start[counts == 1], start[counts > 2]])]
        self._unmatched = lonely[~self.seg_on_box[lonely]] if len(lonely) else lonely
        self._overmatched = int(np.count_nonzero(counts > 2))
        return pairs

    @property
    def unmatched_segments(self):
        _ = self.edge_pairs
        return self._unmatched

    def is_closed(self):
        return len(self.unmatched_segments) == 0 and self._overmatched == 0


# local edge index of the vertex pair (i, j)
_LE = np.full((4, 4), -1)
for _e, (_i, _j) in enumerate(TET_EDGES):
    _LE[_i, _j] = _LE[_j, _i] = _e


def _cases():
    """Per sign pattern: local edges carrying the polygon corners, in cyclic order."""
    table = {}
    for code in range(1, 15):
        pos = [i for i in range(4) if code >> i & 1]
        neg = [i for i in range(4) if not code >> i & 1]
        if len(pos) in (1, 3):
            lone = pos[0] if len(pos) == 1 else neg[0]
            o = [i for i in range(4) if i != lone]
            corners = [_LE[lone, o[0]], _LE[lone, o[1]], _LE[lone, o[2]]]
        else:
            a, b = neg
            c, d = pos
            corners = [_LE[a, c], _LE[a, d], _LE[b, d], _LE[b, c]]
        table[code] = np.array(corners)
    return table


_CASES = _cases()


def extract_cut_topology(phi_h: DiscreteLevelSet, snap=1e-12) -> CutTopology:
    """Marching-tetrahedra extraction of the zero level of the P1 level set.

    Vertex values with ``|phi| < snap * h`` count as positive and sit
    exactly on the surface.  Triangles that collapse under this rule are
    dropped, so a surface lying on a mesh face activates only the tet on the
    negative side.  Quads are split along their shorter diagonal.
    """
    mesh = phi_h.mesh
    tets = mesh.tets
    v = np.asarray(phi_h.lin_values, dtype=float).copy()
    zero = np.abs(v) < snap * mesh.h
    v[zero] = 0.0
    pos = v >= 0.0
    tv = pos[tets]
    npos = tv.sum(axis=1)
    allzero = zero[tets].all(axis=1)
    if allzero.any():
        raise DegenerateCutError(f"level set vanishes on tet {int(np.flatnonzero(allzero)[0])}")
    cand = np.flatnonzero((npos > 0) & (npos < 4))
    if len(cand) == 0:
        raise SurfaceNotFoundError("surface not found: the level set has no sign change in the mesh")

    ct = tets[cand]
    ea, eb = ct[:, TET_EDGES[:, 0]], ct[:, TET_EDGES[:, 1]]
    cross = pos[ea] != pos[eb]
    keys = edge_keys(ea, eb)
    ukeys, inv = np.unique(keys[cross], return_inverse=True)
    ga, gb = ukeys >> 31, ukeys & ((1 << 31) - 1)
    va, vb = v[ga], v[gb]
    t = va / (va - vb)
    X = mesh.vertices
    epts = X[ga] + t[:, None] * (X[gb] - X[ga])
    nv = mesh.n_vertices
    gid = nv + np.arange(len(ukeys))
    gid[va == 0.0] = ga[va == 0.0]
    gid[vb == 0.0] = gb[vb == 0.0]
    epts[va == 0.0] = X[ga[va == 0.0]]
    epts[vb == 0.0] = X[gb[vb == 0.0]]
    P = np.full(cross.shape, -1, dtype=np.int64)
    P[cross] = gid[inv]

    def coords(ids):
        out = np.empty(ids.shape + (3,))
        isv = ids < nv
        out[isv] = X[ids[isv]]
        # edge points: map global id back to the unique edge index
        lookup = np.full(nv + len(ukeys), -1, dtype=np.int64)
        lookup[gid] = np.arange(len(ukeys))
        out[~isv] = epts[lookup[ids[~isv]]]
        return out

    geo_grad = tet_geometry(mesh, cand).grad_lambda
    grad_lin = np.einsum("ta,tai->ti", v[ct], geo_grad)

    code = (tv[cand] * (1 << np.arange(4))).sum(axis=1)
    tri_rows, tri_ids, seg_rows, seg_ids = [], [], [], []
    for c, corners in _CASES.items():
        rows = np.flatnonzero(code == c)
        if len(rows) == 0:
            continue
        q = P[rows][:, corners]
        if len(corners) == 3:
            tri_rows.append(rows)
            tri_ids.append(q)
        else:
            pts = coords(q)
            d02 = _norm(pts[:, 2] - pts[:, 0])
            d13 = _norm(pts[:, 3] - pts[:, 1])
            short02 = d02 <= d13
            t1 = np.where(short02[:, None], q[:, [0, 1, 2]], q[:, [1, 2, 3]])
            t2 = np.where(short02[:, None], q[:, [0, 2, 3]], q[:, [1, 3, 0]])
            tri_rows += [rows, rows]
            tri_ids += [t1, t2]
        nc = len(corners)
        for j in range(nc):
            seg_rows.append(rows)
            seg_ids.append(np.column_stack([q[:, j], q[:, (j + 1) % nc]]))

    tri_rows = np.concatenate(tri_rows)
    tri_ids = np.concatenate(tri_ids)
    ok = (tri_ids[:, 0] != tri_ids[:, 1]) & (tri_ids[:, 1] != tri_ids[:, 2]) & (tri_ids[:, 0] != tri_ids[:, 2])
    tri_rows, tri_ids = tri_rows[ok], tri_ids[ok]
    tri_pts = coords(tri_ids)
    nrm = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
    keep = _norm(nrm) > 0.0
    tri_rows, tri_ids, tri_pts, nrm = tri_rows[keep], tri_ids[keep], tri_pts[keep], nrm[keep]
    flip = np.einsum("ti,ti->t", nrm, grad_lin[tri_rows]) < 0
    tri_ids[flip] = tri_ids[flip][:, [0, 2, 1]]
    tri_pts[flip] = tri_pts[flip][:, [0, 2, 1]]

    order = np.argsort(cand[tri_rows], kind="stable")
    tri_rows, tri_ids, tri_pts = tri_rows[order], tri_ids[order], tri_pts[order]
    active_rows = np.unique(tri_rows)
    if len(active_rows) == 0:
        raise SurfaceNotFoundError("surface not found: every cut is degenerate")

    seg_rows = np.concatenate(seg_rows)
    seg_ids = np.concatenate(seg_ids)
    keep = (seg_ids[:, 0] != seg_ids[:, 1]) & np.isin(seg_rows, active_rows)
    seg_rows, seg_ids = seg_rows[keep], seg_ids[keep]
    order = np.argsort(cand[seg_rows], kind="stable")
    seg_rows, seg_ids = seg_rows[order], seg_ids[order]
    seg_pts = coords(seg_ids)

    # polygon edges on the box boundary have no neighbor; interpolation
    # along a boundary edge reproduces the bound exactly
    lo, hi = np.asarray(mesh.bounds[0]), np.asarray(mesh.bounds[1])
    on_box = np.zeros(len(seg_rows), dtype=bool)
    for a in range(3):
        c = seg_pts[:, :, a]
        on_box |= np.all(c == lo[a], axis=1) | np.all(c == hi[a], axis=1)

    g = grad_lin[active_rows]
    tri_normal_tet = grad_lin[tri_rows]
    return CutTopology(
        mesh=mesh,
        active=cand[active_rows],
        tri_tet=cand[tri_rows],
        tri_ids=tri_ids,
        tri_points=tri_pts,
        tri_normal=tri_normal_tet / _norm(tri_normal_tet)[:, None],
        seg_ids=seg_ids,
        seg_points=seg_pts,
        seg_tet=cand[seg_rows],
        seg_on_box=on_box,
        tet_grad=g,
    )


def geometry_distance(points, surface: AnalyticSurface):
    """Max and mean of ``|x - p(x)|`` over surface points.

    ``points`` is an (n, 3) array, a :class:`CutTopology` (its triangle
    vertices and centroids are used) or any object with an ``x`` attribute
    holding quadrature points.
    """
    if isinstance(points, CutTopology):
        p = points.tri_points
        pts = np.concatenate([p.reshape(-1, 3), p.mean(axis=1)])
    elif hasattr(points, "x"):
        pts = points.x
    else:
        pts = np.asarray(points)
    d = _norm(pts - surface.closest_point(pts))
    return float(d.max()), float(d.mean())


def write_vtk_surface(path, points, triangles=None, cell_data=None, title="tracefem surface"):
    """Legacy ASCII VTK POLYDATA of triangles with per-triangle scalars.

    ``points`` may be an (ntri, 3, 3) array of triangle corners (then
    ``triangles`` is ignored) or an (np, 3) point array with ``triangles``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 3:
        tris = np.arange(pts.shape[0] * 3).reshape(-1, 3)
        pts = pts.reshape(-1, 3)
    else:
        tris = np.asarray(triangles)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET POLYDATA", f"POINTS {len(pts)} double"]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts]
    lines.append(f"POLYGONS {len(tris)} {4 * len(tris)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    if cell_data:
        lines.append(f"CELL_DATA {len(tris)}")
        for name, values in cell_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.17g}" for v in np.asarray(values, dtype=float)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
