"""Surface error norms, EOC tables and the report CSV."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import Discretization
from .problems import ProblemSpec

__all__ = [
    "ErrorRecord",
    "surface_errors",
    "star_norm",
    "eoc",
    "eoc_table",
    "CSV_COLUMNS",
    "write_report_csv",
    "EOC_UNDEFINED",
]

CSV_COLUMNS = (
    "level", "h", "n_active", "err_l2", "err_h1", "err_star",
    "eoc_l2", "eoc_h1", "eoc_star", "cond", "asm_ms", "solve_ms",
)

# EOC of a pair with a zero (or missing) error
EOC_UNDEFINED = float("nan")


@dataclass
class ErrorRecord:
    level: int
    h: float
    n_active: int
    err_l2: float = float("nan")
    err_h1: float = float("nan")
    err_star: float = float("nan")
    cond: float = float("nan")
    asm_ms: float = float("nan")
    solve_ms: float = float("nan")
    extra: dict = field(default_factory=dict)
    failed: str = ""

    def __post_init__(self):
        for name in ("err_l2", "err_h1", "err_star"):
            v = getattr(self, name)
            if not (math.isnan(v) or (v >= 0 and math.isfinite(v))):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _full(disc: Discretization, coeffs):
    coeffs = np.asarray(coeffs, dtype=float)
    if len(coeffs) == disc.space.n_dofs:
        return coeffs
    return disc.dofmap.expand(coeffs, disc.space.n_dofs)


def _error_terms(disc, coeffs, problem, degree, subtract_exact=True):
    """Yield per-chunk (quadrature, e, grad_G e)."""
    c = _full(disc, coeffs)
    for q in disc.surface_chunks(degree):
        uh, guh = q.evaluate(disc.space, c)
        if subtract_exact:
            e = problem.u_ext(q.x) - uh
            ge = problem.grad_u_ext(q.x) - guh
            ge -= np.einsum("ni,ni->n", ge, q.normal)[:, None] * q.normal
        else:
            e, ge = uh, guh
        yield q, e, ge


def surface_errors(disc: Discretization, coeffs, problem: ProblemSpec, degree=None):
    """``L2`` and tangential ``H1``-semi errors of ``u^e - u_h`` on ``Gamma_h``.

    The default rule is two degrees above the assembly rule.  ``coeffs``
    may be active or global dof values.
    """
    degree = disc.quad_degree + 2 if degree is None else degree
    l2 = h1 = 0.0
    for q, e, ge in _error_terms(disc, coeffs, problem, degree):
        l2 += np.sum(q.weight * e**2)
        h1 += np.sum(q.weight * np.sum(ge**2, axis=1))
    return float(np.sqrt(l2)), float(np.sqrt(h1))


def star_norm(disc: Discretization, coeffs, problem: ProblemSpec, delta=None, degree=None, subtract_exact=True):
    """Streamline norm ``(eps |e|_1^2 + int delta |w.grad e|^2 + int c e^2)^(1/2)``.

    ``delta`` is a per-tet array (as stored by the SUPG assembly); None
    means zero.  With ``subtract_exact=False`` the norm of ``u_h`` itself
    is returned.
    """
    degree = disc.quad_degree + 2 if degree is None else degree
    total = 0.0
    for q, e, ge in _error_terms(disc, coeffs, problem, degree, subtract_exact):
        total += problem.eps * np.sum(q.weight * np.sum(ge**2, axis=1))
        total += np.sum(q.weight * problem.c_ext(q.x) * e**2)
        if delta is not None and problem.w is not None:
            wg = np.einsum("ni,ni->n", problem.w_ext(q.x), ge)
            total += np.sum(q.weight * delta[q.tet] * wg**2)
    return float(np.sqrt(total))


def eoc(e1, e2, h1, h2):
    """``log(e1/e2) / log(h1/h2)``; undefined when an error is zero."""
    if not (e1 > 0 and e2 > 0) or h1 == h2:
        return EOC_UNDEFINED
    return math.log(e1 / e2) / math.log(h1 / h2)


def eoc_table(records, norms=("err_l2", "err_h1", "err_star")):
    """Per-norm EOC lists aligned with ``records`` (first entry undefined)."""
    out = {}
    for name in norms:
        col = [EOC_UNDEFINED]
        for a, b in zip(records[:-1], records[1:]):
            col.append(eoc(getattr(a, name), getattr(b, name), a.h, b.h))
        out["eoc_" + name[4:]] = col
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_report_csv(path, records, extra_columns=(), timings=False):
    """Write the per-level table.

    Timing columns are left empty unless ``timings`` is set, so that
    repeated runs produce identical files.
    """
    eocs = eoc_table(records)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(list(CSV_COLUMNS) + list(extra_columns))
        for i, r in enumerate(records):
            row = [
                r.level, r.h, r.n_active, r.err_l2, r.err_h1, r.err_star,
                eocs["eoc_l2"][i] if i else None,
                eocs["eoc_h1"][i] if i else None,
                eocs["eoc_star"][i] if i else None,
                r.cond,
                r.asm_ms if timings else None,
                r.solve_ms if timings else None,
            ]
            row += [r.extra.get(c) for c in extra_columns]
            wr.writerow([_fmt(v) for v in row])
