"""Independent brute-force reference computations used by the tests.

Nothing here goes through the package's quadrature, FE space or cut
extraction code.
"""
import itertools

import numpy as np


def collapsed_triangle_rule(n=8):
    """Tensor Gauss-Legendre on the square collapsed onto the unit triangle.

    Returns points (q, 2) in reference coordinates and weights summing to 1/2.
    Exact for polynomials of degree <= 2n - 2.
    """
    t, w = np.polynomial.legendre.leggauss(n)
    t, w = 0.5 * (t + 1), 0.5 * w
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    x = u.ravel()
    y = (v * (1 - u)).ravel()
    return np.stack([x, y], 1), (wu * wv * (1 - u)).ravel()


def p1_basis(verts):
    """Coefficients (a_j, b_j) with phi_j(x) = a_j + b_j . x on a tet."""
    V = np.hstack([np.ones((4, 1)), verts])
    C = np.linalg.inv(V)  # column j: coefficients of phi_j
    return C[0], C[1:].T  # (4,), (4, 3)


def plane_polygon(verts, phi_vals):
    """Intersection points of the zero level of an affine function with a tet."""
    pts = []
    for i, j in itertools.combinations(range(4), 2):
        a, b = phi_vals[i], phi_vals[j]
        if (a < 0) != (b < 0):
            t = a / (a - b)
            pts.append(verts[i] + t * (verts[j] - verts[i]))
    return np.array(pts)


def fan(points, normal):
    """Triangles of a convex planar polygon, ordered by angle."""
    c = points.mean(0)
    e1 = points[0] - c
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    ang = np.arctan2((points - c) @ e2, (points - c) @ e1)
    p = points[np.argsort(ang)]
    return [np.array([p[0], p[i], p[i + 1]]) for i in range(1, len(p) - 1)]


def integrate_triangle(tri, f, n=8):
    ref, w = collapsed_triangle_rule(n)
    x = tri[0] + ref[:, :1] * (tri[1] - tri[0]) + ref[:, 1:] * (tri[2] - tri[0])
    area2 = np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    return area2 * np.sum(w[:, None] * f(x), axis=0)


def brute_plane_forms(vertices, tets, normal, offset):
    """Dense matrices over all vertices for an affine level set n.x - d.

    Keys: mass, stiffness, full_grad_surface, full_grad_volume,
    normal_volume, ghost.  Only tets with a sign change contribute.
    """
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    nv = len(vertices)
    out = {k: np.zeros((nv, nv)) for k in ("mass", "stiffness", "full_grad_surface", "full_grad_volume", "normal_volume", "ghost")}
    P = np.eye(3) - np.outer(n, n)
    active = []
    grads = {}
    for t, tet in enumerate(tets):
        X = vertices[tet]
        ph = X @ n - offset
        if np.all(ph >= 0) or np.all(ph < 0):
            continue
        active.append(t)
        a, B = p1_basis(X)
        grads[t] = B
        vol = abs(np.linalg.det(X[1:] - X[0])) / 6
        idx = np.ix_(tet, tet)
        for tri in fan(plane_polygon(X, ph), n):
            out["mass"][idx] += integrate_triangle(
                tri, lambda x: ((a + x @ B.T)[:, :, None] * (a + x @ B.T)[:, None, :]).reshape(len(x), -1)
            ).reshape(4, 4)
            area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
            PB = B @ P
            out["stiffness"][idx] += area * PB @ PB.T
            Bn = B @ n
            out["full_grad_surface"][idx] += area * np.outer(Bn, Bn)
        out["full_grad_volume"][idx] += vol * B @ B.T
        out["normal_volume"][idx] += vol * np.outer(B @ n, B @ n)
    # ghost penalty: faces shared by two active tets
    faces = {}
    for t in active:
        for f in itertools.combinations(sorted(tets[t]), 3):
            faces.setdefault(f, []).append(t)
    for f, ts in faces.items():
        if len(ts) != 2:
            continue
        F = vertices[list(f)]
        nf = np.cross(F[1] - F[0], F[2] - F[0])
        area = 0.5 * np.linalg.norm(nf)
        nf /= 2 * area
        jump = np.zeros(nv)
        for sign, t in zip((1.0, -1.0), ts):
            jump[tets[t]] += sign * (grads[t] @ nf)
        out["ghost"] += area * np.outer(jump, jump)
    return out, active
