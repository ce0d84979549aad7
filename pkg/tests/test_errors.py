import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracefem import build_box_mesh, discretize
from tracefem.errors import (
    CSV_COLUMNS,
    EOC_UNDEFINED,
    ErrorRecord,
    eoc,
    eoc_table,
    star_norm,
    surface_errors,
    write_report_csv,
)
from tracefem.fespace import nodal_interpolate
from tracefem.levelset import Plane
from tracefem.problems import ProblemSpec, rotating_convection_problem

UNIT = ((0, 0, 0), (1, 1, 1))


def affine_problem():
    P = Plane((1.0, 0.0, 0.0), 0.5)

    def u(x):
        return 1 + 2 * x[..., 1] - 3 * x[..., 2] + 0.5 * x[..., 0]

    def grad_u(x):
        return np.broadcast_to([0.5, 2.0, -3.0], np.shape(x)).copy()

    return ProblemSpec("affine_plane", P, u, grad_u, u)


def test_interpolant_of_affine_is_exact():
    p = affine_problem()
    disc = discretize(p.surface, build_box_mesh(UNIT, 4), 1, 1)
    c = nodal_interpolate(p.u, disc.space)
    l2, h1 = surface_errors(disc, c, p)
    assert l2 <= 1e-12 and h1 <= 1e-12
    # active vectors are accepted as well
    assert surface_errors(disc, disc.dofmap.restrict(c), p)[0] <= 1e-12


def test_eoc_arithmetic():
    assert eoc(1.0, 0.25, 1.0, 0.5) == pytest.approx(2.0, abs=1e-15)
    assert eoc(1.0, 0.5, 1.0, 0.5) == pytest.approx(1.0, abs=1e-15)
    assert eoc(9.0, 1.0, 3.0, 1.0) == pytest.approx(2.0, abs=1e-15)
    assert eoc(4e-3, 1e-3, 0.2, 0.1) == pytest.approx(2.0, abs=1e-12)
    assert math.isnan(eoc(0.0, 1.0, 1.0, 0.5)) and math.isnan(EOC_UNDEFINED)


@given(st.floats(1e-8, 1e3), st.floats(0.1, 5.0), st.floats(1.5, 4.0))
def test_eoc_recovers_power_law(c, p, ratio):
    h1, h2 = 0.3, 0.3 / ratio
    assert eoc(c * h1**p, c * h2**p, h1, h2) == pytest.approx(p, rel=1e-9)


def test_record_validation():
    with pytest.raises(ValueError):
        ErrorRecord(0, 0.1, 10, err_l2=-1.0)
    with pytest.raises(ValueError):
        ErrorRecord(0, 0.1, 10, err_h1=float("inf"))


def test_star_norm_zero_and_collapse(disc8, harmonic, rng):
    # e = 0: use the exact interpolant on the trivial problem u = 0
    zero = ProblemSpec("zero", harmonic.surface, lambda x: np.zeros(x.shape[:-1]), lambda x: np.zeros_like(x), lambda x: 0 * x[..., 0])
    assert star_norm(disc8, np.zeros(disc8.n_active), zero) == 0.0
    c = rng.standard_normal(disc8.n_active)
    l2, h1 = surface_errors(disc8, c, harmonic)
    st_ = star_norm(disc8, c, harmonic)
    assert st_ == pytest.approx(math.sqrt(harmonic.eps * h1**2 + l2**2), rel=1e-12)


def test_star_norm_of_constant_is_area():
    p = rotating_convection_problem(eps=1e-5)
    disc = discretize(p.surface, build_box_mesh(((-4 / 3,) * 3, (4 / 3,) * 3), 16), 2, 2)
    delta = np.full(disc.mesh.n_tets, 0.1)
    v = star_norm(disc, np.ones(disc.n_active), p, delta, subtract_exact=False)
    assert v**2 == pytest.approx(4 * np.pi, rel=1e-4)


def test_quadrature_saturation(sphere, harmonic):
    from tracefem import assemble_lb, solve_cg

    disc = discretize(sphere, build_box_mesh(((-4 / 3,) * 3, (4 / 3,) * 3), 32), 1, 1)
    s = assemble_lb(disc, harmonic, "normal_volume")
    x = solve_cg(s.matrix, s.rhs).x
    hi = surface_errors(disc, x, harmonic)
    lo = surface_errors(disc, x, harmonic, degree=disc.quad_degree)
    assert all(abs(a / b - 1) < 0.02 for a, b in zip(hi, lo))


def test_csv(tmp_path):
    recs = [ErrorRecord(0, 0.2, 10, 4e-3, 1e-1), ErrorRecord(1, 0.1, 40, 1e-3, 5e-2, cond=12.5, asm_ms=3.0)]
    p = tmp_path / "r.csv"
    write_report_csv(p, recs)
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    row = lines[2].split(",")
    assert float(row[CSV_COLUMNS.index("eoc_l2")]) == pytest.approx(2.0)
    assert row[CSV_COLUMNS.index("eoc_star")] == "nan"
    assert row[CSV_COLUMNS.index("asm_ms")] == ""
    write_report_csv(p, recs, timings=True)
    assert p.read_text().splitlines()[2].split(",")[CSV_COLUMNS.index("asm_ms")] == "3.0"
    table = eoc_table(recs)
    assert math.isnan(table["eoc_l2"][0])
