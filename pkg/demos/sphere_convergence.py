"""Laplace-Beltrami on the unit sphere: P1 and isoparametric P2 convergence.

Run from the repository root::

    python demos/sphere_convergence.py

The background grid is a Kuhn mesh of the box [-4/3, 4/3]^3.  The surface is
never meshed; the solution lives on the traces of the tets the zero level
of the interpolated distance function passes through.
"""
from tracefem import assemble_lb, build_box_mesh, discretize, eoc, make_problem, solve_cg, surface_errors

BOX = ((-4.0 / 3.0,) * 3, (4.0 / 3.0,) * 3)
problem = make_problem("sphere_harmonic")  # -Lap_G u + u = f with u = x y

for m in (1, 2):
    print(f"\nP{m} trace elements on the degree-{m} isoparametric surface")
    print(f"{'n':>4} {'dofs':>7} {'L2 error':>11} {'EOC':>6} {'H1 error':>11} {'EOC':>6} {'CG its':>7}")
    prev = None
    for n in (8, 16, 32):
        disc = discretize(problem.surface, build_box_mesh(BOX, n), m, m)
        system = assemble_lb(disc, problem, "normal_volume")
        sol = solve_cg(system.matrix, system.rhs)
        l2, h1 = surface_errors(disc, sol.x, problem)
        rates = ("", "") if prev is None else (
            f"{eoc(prev[1], l2, prev[0], disc.h):6.2f}", f"{eoc(prev[2], h1, prev[0], disc.h):6.2f}")
        print(f"{n:4d} {disc.n_active:7d} {l2:11.3e} {rates[0]:>6} {h1:11.3e} {rates[1]:>6} {sol.iterations:7d}")
        prev = (disc.h, l2, h1)

print("\nexpected: P1 rates near 2 (L2) and 1 (H1); P2 near 3 and 2")
