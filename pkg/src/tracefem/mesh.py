"""Background tetrahedral meshes of a box.

The mesh is a Kuhn (Freudenthal) triangulation of a uniform cube lattice.
Local refinement uses newest-vertex bisection in Maubach's formulation:
every tet carries an ordered vertex tuple ``(x0, x1, x2, x3)`` and a tag
``k``; its refinement edge is ``x0 -- xk``.  Kuhn tets with tag 3 bisect
into finitely many similarity classes, so repeated refinement stays shape
regular.

Meshes are immutable; :func:`bisect_refine` returns a new mesh whose vertex
array extends the old one.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "TetMesh",
    "FaceTable",
    "MeshError",
    "NonConformingMeshError",
    "build_box_mesh",
    "bisect_refine",
    "uniform_refine",
    "face_adjacency",
    "shape_ratios",
    "write_vtk_tets",
]

#: Local vertex pairs of the six tet edges, in the fixed local edge order.
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
#: Local vertex triples of the four faces; face ``i`` is opposite vertex ``i``.
TET_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])

_KEY_BASE = np.int64(1) << np.int64(31)
_MAX_CLOSURE_ROUNDS = 64


class MeshError(ValueError):
    """Invalid mesh input."""


class NonConformingMeshError(MeshError):
    """A face is shared by more than two tets."""


def edge_keys(a, b):
    """Order-independent int64 key of the vertex pairs ``(a, b)``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.minimum(a, b) * _KEY_BASE + np.maximum(a, b)


def signed_volumes(vertices, tets):
    x = vertices[tets]
    d = x[:, 1:] - x[:, :1]
    return np.linalg.det(d) / 6.0


@dataclass(frozen=True)
class FaceTable:
    """Faces of (a subset of) a tet mesh.

    Attributes
    ----------
    faces : ndarray, shape (nf, 3)
        Sorted vertex indices of each face.
    tets : ndarray, shape (nf, 2)
        Adjacent tets; the second entry is -1 on boundary faces.
    local : ndarray, shape (nf, 2)
        Local face index (opposite vertex) within each adjacent tet.
    """

    faces: np.ndarray
    tets: np.ndarray
    local: np.ndarray

    @property
    def interior(self):
        return self.tets[:, 1] >= 0

    @property
    def n_interior(self):
        return int(np.count_nonzero(self.interior))

    @property
    def n_boundary(self):
        return len(self.faces) - self.n_interior


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Conforming tetrahedral mesh with newest-vertex bisection metadata.

    ``tets`` is stored positively oriented.  ``nvb_order`` holds the same
    vertices in bisection order and ``tag`` the index of the second vertex
    of the refinement edge ``nvb_order[:, 0] -- nvb_order[:, tag]``.
    """

    vertices: np.ndarray
    tets: np.ndarray
    nvb_order: np.ndarray
    tag: np.ndarray
    generation: np.ndarray
    parent: np.ndarray
    bounds: tuple
    _split_keys: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)
    _split_mids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64), repr=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_tets(self):
        return len(self.tets)

    @cached_property
    def volumes(self):
        return signed_volumes(self.vertices, self.tets)

    @cached_property
    def tet_diameters(self):
        x = self.vertices[self.tets]
        d = x[:, TET_EDGES[:, 0]] - x[:, TET_EDGES[:, 1]]
        return np.sqrt(np.max(np.einsum("tei,tei->te", d, d), axis=1))

    @property
    def h(self):
        return float(self.tet_diameters.max())

    @cached_property
    def faces(self):
        return face_adjacency(self)

    @cached_property
    def edges(self):
        """Sorted unique edges as an (ne, 2) array of vertex pairs."""
        k = np.unique(edge_keys(self.tets[:, TET_EDGES[:, 0]], self.tets[:, TET_EDGES[:, 1]]))
        return np.column_stack([k // _KEY_BASE, k % _KEY_BASE])

    def box_volume(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return float(np.prod(hi - lo))

    def write_vtk(self, path, cell_data=None):
        write_vtk_tets(path, self, cell_data)


def _kuhn_template():
    corners, orders = [], []
    for perm in itertools.permutations(range(3)):
        p = np.zeros(3, dtype=int)
        path = [p.copy()]
        for axis in perm[:2]:
            p[axis] += 1
            path.append(p.copy())
        path.append(np.ones(3, dtype=int))
        orders.append(path)
    return np.array(orders)  # (6, 4, 3) lattice offsets in path order


def build_box_mesh(bounds, n) -> TetMesh:
    """Kuhn triangulation of an axis-aligned box.

    Parameters
    ----------
    bounds : pair of 3-vectors
        Lower and upper box corners.
    n : int
        Number of cubes per axis; the mesh has ``6 n**3`` tets.
    """
    if int(n) != n or n < 1:
        raise MeshError(f"subdivision count must be a positive integer, got {n!r}")
    n = int(n)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi - lo <= 0):
        raise MeshError(f"degenerate box {bounds!r}")

    ticks = [np.linspace(lo[a], hi[a], n + 1) for a in range(3)]
    I, J, K = np.meshgrid(np.arange(n + 1), np.arange(n + 1), np.arange(n + 1), indexing="ij")
    lattice = np.column_stack([I.ravel(), J.ravel(), K.ravel()])
    vertices = np.column_stack([ticks[a][lattice[:, a]] for a in range(3)])

    def vid(ijk):
        return ijk[..., 0] * (n + 1) ** 2 + ijk[..., 1] * (n + 1) + ijk[..., 2]

    ci, cj, ck = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    cubes = np.column_stack([ci.ravel(), cj.ravel(), ck.ravel()])
    template = _kuhn_template()
    order = vid(cubes[:, None, None, :] + template[None]).reshape(-1, 4).astype(np.int64)

    tets = _oriented(vertices, order)
    nt = len(tets)
    return TetMesh(
        vertices=vertices,
        tets=tets,
        nvb_order=order,
        tag=np.full(nt, 3, dtype=np.int8),
        generation=np.zeros(nt, dtype=np.int32),
        parent=np.full(nt, -1, dtype=np.int64),
        bounds=(tuple(lo), tuple(hi)),
    )


def _oriented(vertices, order):
    tets = order.copy()
    neg = signed_volumes(vertices, tets) < 0
    tets[neg, 2], tets[neg, 3] = order[neg, 3], order[neg, 2]
    return tets


def _lookup(sorted_keys, values, keys):
    """Return ``values`` at ``keys`` (or -1 where a key is absent)."""
    out = np.full(len(keys), -1, dtype=np.int64)
    if len(sorted_keys) == 0:
        return out
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    hit = sorted_keys[pos] == keys
    out[hit] = values[pos[hit]]
    return out


class _Refiner:
    """Mutable working state of one call to :func:`bisect_refine`."""

    def __init__(self, mesh: TetMesh):
        self.vertices = [mesh.vertices]
        self.nv = mesh.n_vertices
        self.order = mesh.nvb_order
        self.tag = mesh.tag
        self.gen = mesh.generation
        self.anc = np.arange(mesh.n_tets, dtype=np.int64)
        self.split_keys = mesh._split_keys
        self.split_mids = mesh._split_mids

    def coords(self, ids):
        allv = np.concatenate(self.vertices) if len(self.vertices) > 1 else self.vertices[0]
        self.vertices = [allv]
        return allv[ids]

    def bisect(self, sel):
        order, tag = self.order[sel], self.tag[sel].astype(np.int64)
        m = len(order)
        rows = np.arange(m)
        a, b = order[rows, 0], order[rows, tag]
        keys = edge_keys(a, b)
        mid = _lookup(self.split_keys, self.split_mids, keys)
        missing = mid < 0
        if missing.any():
            new_keys, inv = np.unique(keys[missing], return_inverse=True)
            first = np.zeros(len(new_keys), dtype=np.int64)
            first[inv[::-1]] = np.flatnonzero(missing)[::-1]
            ends = self.coords(np.column_stack([a[first], b[first]]))
            self.vertices.append(0.5 * (ends[:, 0] + ends[:, 1]))
            new_ids = self.nv + np.arange(len(new_keys), dtype=np.int64)
            self.nv += len(new_keys)
            mid[missing] = new_ids[inv]
            allk = np.concatenate([self.split_keys, new_keys])
            allm = np.concatenate([self.split_mids, new_ids])
            srt = np.argsort(allk, kind="stable")
            self.split_keys, self.split_mids = allk[srt], allm[srt]

        c1 = np.empty_like(order)
        c2 = np.empty_like(order)
        for k in (1, 2, 3):
            s = tag == k
            if not s.any():
                continue
            x, z = order[s], mid[s]
            c1[s] = np.column_stack([x[:, :k], z, x[:, k + 1:]])
            c2[s] = np.column_stack([x[:, 1:k + 1], z, x[:, k + 1:]])
        newtag = np.where(tag > 1, tag - 1, 3).astype(np.int8)

        keep = ~sel
        kids = np.stack([c1, c2], axis=1).reshape(-1, 4)
        self.order = np.concatenate([self.order[keep], kids])
        self.tag = np.concatenate([self.tag[keep], np.repeat(newtag, 2)])
        self.gen = np.concatenate([self.gen[keep], np.repeat(self.gen[sel] + 1, 2)])
        self.anc = np.concatenate([self.anc[keep], np.repeat(self.anc[sel], 2)])

    def hanging(self):
        """Tets having an edge that already carries a midpoint."""
        if len(self.split_keys) == 0:
            return np.zeros(len(self.order), dtype=bool)
        keys = edge_keys(self.order[:, TET_EDGES[:, 0]], self.order[:, TET_EDGES[:, 1]])
        return np.isin(keys, self.split_keys).any(axis=1)


def bisect_refine(mesh: TetMesh, marked) -> TetMesh:
    """Bisect every marked tet at least once and restore conformity.

    Parameters
    ----------
    mesh : TetMesh
    marked : iterable of int or boolean mask
        Tets to refine.

    Returns
    -------
    TetMesh
        A new mesh.  ``parent`` maps each tet to its ancestor in ``mesh``.
    """
    marked = np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked)
    if marked.dtype == bool:
        sel = marked.copy()
        if len(sel) != mesh.n_tets:
            raise MeshError("marker mask length does not match the tet count")
    else:
        marked = marked.astype(np.int64).ravel()
        if len(marked) and (marked.min() < 0 or marked.max() >= mesh.n_tets):
            raise MeshError("marked tet index out of range")
        sel = np.zeros(mesh.n_tets, dtype=bool)
        sel[marked] = True
    if not sel.any():
        return mesh

    r = _Refiner(mesh)
    rounds = 0
    while sel.any():
        rounds += 1
        if rounds > _MAX_CLOSURE_ROUNDS:
            raise RuntimeError("bisection closure did not terminate; refinement tags are inconsistent")
        r.bisect(sel)
        sel = r.hanging()

    vertices = r.coords(np.arange(r.nv))
    return TetMesh(
        vertices=vertices,
        tets=_oriented(vertices, r.order),
        nvb_order=r.order,
        tag=r.tag,
        generation=r.gen,
        parent=r.anc,
        bounds=mesh.bounds,
        _split_keys=r.split_keys,
        _split_mids=r.split_mids,
    )


def uniform_refine(mesh: TetMesh, sweeps=3) -> TetMesh:
    """Bisect all tets ``sweeps`` times; three sweeps halve the mesh size."""
    for _ in range(sweeps):
        mesh = bisect_refine(mesh, np.ones(mesh.n_tets, dtype=bool))
    return mesh


def face_adjacency(mesh: TetMesh, subset=None) -> FaceTable:
    """Face-to-tet incidence for the whole mesh or a subset of its tets.

    With ``subset`` given, only faces of those tets are listed and a face is
    interior when both of its tets belong to the subset.
    """
    tet_ids = np.arange(mesh.n_tets) if subset is None else np.asarray(subset, dtype=np.int64)
    f = np.sort(mesh.tets[tet_ids][:, TET_FACES], axis=2).reshape(-1, 3)
    owner = np.repeat(tet_ids, 4)
    local = np.tile(np.arange(4), len(tet_ids))
    srt = np.lexsort((f[:, 2], f[:, 1], f[:, 0]))
    f, owner, local = f[srt], owner[srt], local[srt]
    new = np.ones(len(f), dtype=bool)
    new[1:] = np.any(f[1:] != f[:-1], axis=1)
    start = np.flatnonzero(new)
    counts = np.diff(np.append(start, len(f)))
    if counts.size and counts.max() > 2:
        bad = f[start[np.argmax(counts)]]
        raise NonConformingMeshError(f"face {tuple(bad)} is shared by {counts.max()} tets")
    tets = np.full((len(start), 2), -1, dtype=np.int64)
    loc = np.full((len(start), 2), -1, dtype=np.int64)
    tets[:, 0], loc[:, 0] = owner[start], local[start]
    two = counts == 2
    tets[two, 1], loc[two, 1] = owner[start[two] + 1], local[start[two] + 1]
    return FaceTable(faces=f[start], tets=tets, local=loc)


def shape_ratios(mesh: TetMesh, tet_ids=None):
    """Circumradius over inradius for each tet (3 for a regular tet)."""
    t = mesh.tets if tet_ids is None else mesh.tets[tet_ids]
    x = mesh.vertices[t]
    vol = np.abs(signed_volumes(mesh.vertices, t))
    fx = x[:, TET_FACES]
    area = 0.5 * np.linalg.norm(np.cross(fx[:, :, 1] - fx[:, :, 0], fx[:, :, 2] - fx[:, :, 0]), axis=2)
    inradius = 3.0 * vol / area.sum(axis=1)
    # circumcenter c solves 2 (x_i - x_0) . c = |x_i|^2 - |x_0|^2
    A = 2.0 * (x[:, 1:] - x[:, :1])
    rhs = np.einsum("tij,tij->ti", x[:, 1:], x[:, 1:]) - np.einsum("ti,ti->t", x[:, 0], x[:, 0])[:, None]
    c = np.linalg.solve(A, rhs[..., None])[..., 0]
    circumradius = np.linalg.norm(c - x[:, 0], axis=1)
    return circumradius / inradius


def write_vtk_tets(path, mesh: TetMesh, cell_data=None):
    """Write the mesh as a legacy ASCII VTK unstructured grid."""
    cell_data = cell_data or {}
    lines = [
        "# vtk DataFile Version 3.0",
        "tracefem background mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    lines += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets]
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines += ["10"] * mesh.n_tets
    if cell_data:
        lines.append(f"CELL_DATA {mesh.n_tets}")
        for name, values in cell_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.17g}" for v in np.asarray(values, dtype=float)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
