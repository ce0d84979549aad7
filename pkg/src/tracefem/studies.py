"""Configuration-driven studies writing CSV, text and VTK artifacts.

Study kinds: ``convergence`` (uniform refinement EOCs), ``conditioning``
(condition numbers under refinement and under random surface offsets),
``supg`` (streamline norm EOCs for a convection-dominated problem),
``adapt`` (adaptive versus uniform refinement) and ``geometry`` (distance
of the discrete surfaces to the exact one).
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .assembly import (
    STABILIZATIONS,
    assemble_lb,
    assemble_mass_stiffness,
    assemble_stabilization,
    assemble_supg,
    discretize,
)
from .errors import ErrorRecord, eoc, eoc_table, star_norm, surface_errors, write_report_csv
from .estimator import adaptive_loop
from .fespace import tet_geometry
from .isomap import MeshTooCoarseError, SearchFailedError
from .levelset import (
    DegenerateCutError,
    Shifted,
    SurfaceNotFoundError,
    make_surface,
    write_vtk_surface,
)
from .mesh import build_box_mesh
from .problems import make_problem
from .solvers import estimate_condition, solve_bicgstab, solve_cg

__all__ = ["StudyConfig", "StudyReport", "ConfigError", "parse_config", "run_study", "STUDY_KINDS"]

STUDY_KINDS = ("convergence", "conditioning", "supg", "adapt", "geometry")
_EOC_STUDIES = ("convergence", "supg", "geometry")

# failures that make a single level infeasible without aborting a study
_LEVEL_ERRORS = (SurfaceNotFoundError, DegenerateCutError, SearchFailedError, MeshTooCoarseError, ValueError)


class ConfigError(ValueError):
    pass


@dataclass
class StudyConfig:
    study: str = "convergence"
    surface: str = "sphere"
    radius: float = 1.0
    problem: str = ""
    m: int = 1
    k: int = 1
    stab: str = "normal_volume"
    rho: float | None = None
    levels: int = 4
    box: float = 4.0 / 3.0
    n0: int = 8
    seed: int = 42
    theta: float = 0.5
    eps: float = 1e-5
    tol: float = 1e-10
    out: str = "out"
    offsets: int = 20
    offset_level: int = 1
    max_adapt_levels: int = 40
    sigma: float = 0.1
    cond: bool = False
    timings: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.study not in STUDY_KINDS:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDY_KINDS}")
        if self.m not in (1, 2) or self.k not in (1, 2):
            raise ConfigError("m and k must be 1 or 2")
        if self.k > self.m:
            raise ConfigError(f"k={self.k} > m={self.m} is not allowed (need k <= m)")
        if self.stab not in STABILIZATIONS + ("none",):
            raise ConfigError(f"unknown stabilization {self.stab!r}; expected one of {STABILIZATIONS + ('none',)}")
        if self.rho is not None and not self.rho > 0:
            raise ConfigError("rho must be positive")
        if self.study in _EOC_STUDIES and self.levels < 2:
            raise ConfigError(f"{self.study} needs levels >= 2")
        if self.levels < 1 or self.n0 < 1:
            raise ConfigError("levels and n0 must be positive")
        if not 0 < self.theta <= 1:
            raise ConfigError("theta must be in (0, 1]")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not self.box > 0:
            raise ConfigError("box half-width must be positive")

    @property
    def bounds(self):
        return ((-self.box,) * 3, (self.box,) * 3)

    def resolved_problem(self):
        if self.problem:
            return self.problem
        return {"supg": "rotating", "adapt": "spike"}.get(self.study, "sphere_harmonic")

    def echo(self):
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(StudyConfig)}
VALID_KEYS = tuple(_TYPES)


def _convert(key, text):
    t = _TYPES[key]
    text = text.strip()
    try:
        if "bool" in t:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key == "rho":
            return None if text.lower() in ("", "none", "default") else float(text)
        if t == "int":
            return int(text)
        if "float" in t:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for key {key!r}") from None


def parse_config(path=None, overrides=None) -> StudyConfig:
    """Read ``key=value`` lines (``#`` starts a comment); overrides win.

    Parameters
    ----------
    path : str, optional
        Config file.  A missing file raises ``FileNotFoundError``.
    overrides : dict, optional
        Values from the command line; None entries are ignored.
    """
    values = {}
    if path is not None:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in _TYPES:
                    raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
                values[key] = _convert(key, val)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
        values[key] = _convert(key, val) if isinstance(val, str) else val
    return StudyConfig(**values)


def parse_config_text(text, overrides=None) -> StudyConfig:
    """Like :func:`parse_config` for an in-memory string."""
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as fh:
        fh.write(text)
        name = fh.name
    try:
        return parse_config(name, overrides)
    finally:
        os.unlink(name)


@dataclass
class StudyReport:
    config: StudyConfig
    records: list
    flags: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(self.flags.values())

    def eocs(self):
        return eoc_table(self.records)


# expectation windows on the final EOC per (m, norm)
_EXPECT = {
    (1, "l2"): (1.8, 2.2),
    (1, "h1"): (0.8, 1.2),
    (2, "l2"): (2.6, 3.4),
    (2, "h1"): (1.7, 2.3),
}


def _within(v, lo, hi):
    return v is not None and not math.isnan(v) and lo <= v <= hi


def _mesh(cfg, level):
    return build_box_mesh(cfg.bounds, cfg.n0 * 2**level)


def _surface(cfg):
    if cfg.surface == "sphere":
        return make_surface("sphere", radius=cfg.radius)
    return make_surface(cfg.surface)


def _problem(cfg):
    name = cfg.resolved_problem()
    if cfg.surface != "sphere":
        raise ConfigError(f"problem {name!r} is defined on the sphere only, not on {cfg.surface!r}")
    kw = {"r": cfg.radius}
    if name == "rotating":
        kw["eps"] = cfg.eps
    if name == "spike":
        kw["sigma"] = cfg.sigma * cfg.radius
    return make_problem(name, **kw)


def _write_vtk(cfg, level, disc, data):
    """Surface triangles (corners moved by the isomap) with per-triangle data."""
    pts = disc.cut.tri_points
    if disc.isomap is not None:
        tt = np.repeat(disc.cut.tri_tet, 3)
        lam = tet_geometry(disc.mesh, tt).to_barycentric(pts.reshape(-1, 3))
        pts = disc.isomap.theta(tt, lam).reshape(-1, 3, 3)
    write_vtk_surface(os.path.join(cfg.out, f"level_{level}.vtk"), pts, cell_data=data)


def _failed_record(level, n, exc):
    return ErrorRecord(level, float("nan"), 0, failed=f"n={n}: {type(exc).__name__}: {exc}")


def _run_convergence(cfg, report):
    problem = _problem(cfg)
    recs = report.records
    for level in range(cfg.levels):
        n = cfg.n0 * 2**level
        try:
            t0 = time.perf_counter()
            disc = discretize(problem.surface, _mesh(cfg, level), cfg.m, cfg.k)
            system = assemble_lb(disc, problem, cfg.stab, cfg.rho)
            asm = 1000.0 * (time.perf_counter() - t0)
        except _LEVEL_ERRORS as exc:
            recs.append(_failed_record(level, n, exc))
            continue
        rep = solve_cg(system.matrix, system.rhs, cfg.tol)
        l2, h1 = surface_errors(disc, rep.x, problem)
        cond = estimate_condition(system.matrix, seed=cfg.seed).cond if cfg.cond else float("nan")
        recs.append(ErrorRecord(level, disc.h, disc.n_active, l2, h1, cond=cond, asm_ms=asm, solve_ms=rep.time_ms))
        report.flags[f"solver_converged_level_{level}"] = rep.converged
        c = disc.dofmap.expand(rep.x, disc.space.n_dofs)
        q = disc.surface_quadrature(1)
        uh, _ = q.evaluate(disc.space, c)
        _write_vtk(cfg, level, disc, {"u_h": uh, "error": np.abs(problem.u_ext(q.x) - uh)})
    ok = [r for r in recs if not r.failed]
    if len(ok) >= 2:
        a, b = ok[-2], ok[-1]
        for norm in ("l2", "h1"):
            val = eoc(getattr(a, "err_" + norm), getattr(b, "err_" + norm), a.h, b.h)
            lo, hi = _EXPECT[(cfg.m, norm)]
            report.flags[f"final_eoc_{norm}_in_[{lo},{hi}]"] = _within(val, lo, hi)


def _matrix_only(disc, stab, rho):
    M, K = assemble_mass_stiffness(disc)
    A = M + K
    if stab != "none":
        S, _ = assemble_stabilization(disc, stab, rho)
        A = A + S
    return A


def _run_conditioning(cfg, report):
    S = _surface(cfg)
    recs = report.records
    stab = cfg.stab
    for level in range(cfg.levels):
        n = cfg.n0 * 2**level
        try:
            t0 = time.perf_counter()
            disc = discretize(S, _mesh(cfg, level), cfg.m, cfg.k)
            A = _matrix_only(disc, stab, cfg.rho)
            asm = 1000.0 * (time.perf_counter() - t0)
        except _LEVEL_ERRORS as exc:
            recs.append(_failed_record(level, n, exc))
            continue
        t1 = time.perf_counter()
        est = estimate_condition(A, seed=cfg.seed)
        recs.append(
            ErrorRecord(level, disc.h, disc.n_active, cond=est.cond, asm_ms=asm,
                        solve_ms=1000.0 * (time.perf_counter() - t1))
        )
        _write_vtk(cfg, level, disc, {"tet_h": disc.mesh.tet_diameters[disc.cut.tri_tet]})
    ok = [r for r in recs if not r.failed]
    ratios = [b.cond / a.cond for a, b in zip(ok[:-1], ok[1:])]
    report.tables["cond_ratios"] = ratios
    if ratios:
        report.flags["cond_ratio_in_[2.5,5.5]"] = all(2.5 <= r <= 5.5 for r in ratios)

    # random offsets of the level set at a fixed mesh
    rng = np.random.default_rng(cfg.seed)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    lvl = min(cfg.offset_level, cfg.levels - 1)
    mesh = _mesh(cfg, lvl)
    h = discretize(S, mesh, cfg.m, cfg.k).h
    mags = rng.uniform(0.0, 0.5 * h, cfg.offsets)
    rows = []
    for i, s in enumerate(mags):
        Ss = Shifted(S, tuple(s * d))
        disc = discretize(Ss, mesh, cfg.m, cfg.k)
        est = estimate_condition(_matrix_only(disc, stab, cfg.rho), seed=cfg.seed)
        est0 = estimate_condition(_matrix_only(disc, "none", None), seed=cfg.seed)
        rows.append((i, s, est.cond, est0.cond, est0.kernel_dim))
    report.tables["offsets"] = rows
    conds = np.array([r[2] for r in rows])
    conds0 = np.array([r[3] for r in rows])
    spread = conds.max() / conds.min()
    singular = any(r[4] > 0 for r in rows) or not np.all(np.isfinite(conds0))
    spread0 = conds0.max() / conds0.min() if np.all(np.isfinite(conds0)) else np.inf
    report.tables["offset_spread"] = (float(spread), float(spread0), bool(singular))
    report.flags["offset_cond_spread_le_10"] = bool(spread <= 10)
    report.flags["unstabilized_spread_ge_100_or_singular"] = bool(singular or spread0 >= 100)
    with open(os.path.join(cfg.out, "offsets.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["offset", "shift", "cond", "cond_unstabilized", "kernel_unstabilized"])
        for i, s, c, c0, kdim in rows:
            wr.writerow([i, repr(float(s)), repr(float(c)), repr(float(c0)), kdim])


def _run_supg(cfg, report):
    problem = _problem(cfg)
    if problem.w is None:
        raise ConfigError("supg study needs a convection problem")
    recs = report.records
    for level in range(cfg.levels):
        n = cfg.n0 * 2**level
        try:
            t0 = time.perf_counter()
            disc = discretize(problem.surface, _mesh(cfg, level), cfg.m, cfg.k)
            system = assemble_supg(disc, problem, stabilization=cfg.stab, rho=cfg.rho)
            asm = 1000.0 * (time.perf_counter() - t0)
        except _LEVEL_ERRORS as exc:
            recs.append(_failed_record(level, n, exc))
            continue
        rep = solve_bicgstab(system.matrix, system.rhs, cfg.tol)
        report.flags[f"solver_converged_level_{level}"] = rep.converged
        l2, h1 = surface_errors(disc, rep.x, problem)
        st = star_norm(disc, rep.x, problem, system.meta["delta"])
        cond = estimate_condition(system.matrix, seed=cfg.seed).cond if cfg.cond else float("nan")
        recs.append(ErrorRecord(level, disc.h, disc.n_active, l2, h1, st, cond, asm, rep.time_ms))
        c = disc.dofmap.expand(rep.x, disc.space.n_dofs)
        q = disc.surface_quadrature(1)
        uh, _ = q.evaluate(disc.space, c)
        _write_vtk(cfg, level, disc, {"u_h": uh, "delta": system.meta["delta"][q.tet]})
    ok = [r for r in recs if not r.failed]
    if len(ok) >= 2:
        a, b = ok[-2], ok[-1]
        report.flags["final_eoc_star_in_[1.3,2.2]"] = _within(eoc(a.err_star, b.err_star, a.h, b.h), 1.3, 2.2)


def _run_adapt(cfg, report):
    problem = _problem(cfg)
    # uniform reference run
    uniform = []
    for level in range(cfg.levels):
        disc = discretize(problem.surface, _mesh(cfg, level), cfg.m, 1)
        system = assemble_lb(disc, problem, cfg.stab, cfg.rho)
        rep = solve_cg(system.matrix, system.rhs, cfg.tol)
        l2, h1 = surface_errors(disc, rep.x, problem)
        uniform.append(ErrorRecord(level, disc.h, disc.n_active, l2, h1, solve_ms=rep.time_ms))
    target = uniform[-1]
    levels = adaptive_loop(
        problem, _mesh(cfg, 0), cfg.theta, cfg.max_adapt_levels, target.n_active,
        m=cfg.m, stabilization=cfg.stab, rho=cfg.rho, tol=cfg.tol,
    )
    for L in levels:
        report.records.append(L.record)
        q = L.disc.surface_quadrature(1)
        _write_vtk(cfg, L.record.level, L.disc, {"eta": L.indicators.on_mesh(L.disc.mesh.n_tets)[q.tet]})
    reached = [L.record for L in levels if L.record.err_h1 <= target.err_h1]
    ndofs = reached[0].n_active if reached else None
    report.tables["uniform"] = uniform
    report.tables["adaptive_dofs_to_reach_uniform"] = ndofs
    report.flags["adaptive_reaches_uniform_h1_with_le_70pct_dofs"] = bool(
        ndofs is not None and ndofs <= 0.7 * target.n_active
    )
    write_report_csv(os.path.join(cfg.out, "uniform_report.csv"), uniform, timings=cfg.timings)


def _run_geometry(cfg, report):
    S = _surface(cfg)
    recs = report.records
    for k in (1, 2):
        level_recs = []
        for level in range(cfg.levels):
            n = cfg.n0 * 2**level
            try:
                disc = discretize(S, _mesh(cfg, level), k, k)
            except _LEVEL_ERRORS as exc:
                rec = _failed_record(level, n, exc)
                rec.extra["k"] = k
                recs.append(rec)
                continue
            q = disc.surface_quadrature(disc.quad_degree + 2)
            dist = np.linalg.norm(q.x - S.closest_point(q.x), axis=1)
            rec = ErrorRecord(level, disc.h, disc.n_active, extra={"k": k, "dist_max": float(dist.max()),
                                                                   "dist_mean": float(dist.mean())})
            if level_recs:
                p = level_recs[-1]
                rec.extra["eoc_dist"] = eoc(p.extra["dist_max"], rec.extra["dist_max"], p.h, rec.h)
            level_recs.append(rec)
            recs.append(rec)
            if k == 2:
                q1 = disc.surface_quadrature(1)
                _write_vtk(cfg, level, disc, {"dist": np.linalg.norm(q1.x - S.closest_point(q1.x), axis=1)})
        if len(level_recs) >= 2:
            val = level_recs[-1].extra["eoc_dist"]
            lo, hi = (1.7, 2.3) if k == 1 else (2.6, 3.4)
            report.flags[f"dist_eoc_k{k}_in_[{lo},{hi}]"] = _within(val, lo, hi)


_RUNNERS = {
    "convergence": _run_convergence,
    "conditioning": _run_conditioning,
    "supg": _run_supg,
    "adapt": _run_adapt,
    "geometry": _run_geometry,
}

_EXTRA_COLUMNS = {"adapt": ("eta_global", "theta"), "geometry": ("k", "dist_max", "dist_mean", "eoc_dist")}


def run_study(cfg: StudyConfig) -> StudyReport:
    """Run one study and write ``report.csv``, ``summary.txt`` and VTK files."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    report = StudyReport(cfg, [])
    t0 = time.perf_counter()
    _RUNNERS[cfg.study](cfg, report)
    wall = time.perf_counter() - t0
    # geometry rows carry their distance EOCs (per k) in an extra column
    extra = _EXTRA_COLUMNS.get(cfg.study, ())
    write_report_csv(os.path.join(cfg.out, "report.csv"), report.records, extra, timings=cfg.timings)
    _write_summary(cfg, report, wall)
    return report


def _write_summary(cfg, report, wall):
    lines = ["# study configuration", cfg.echo(), "", "# levels"]
    for r in report.records:
        if r.failed:
            lines.append(f"level {r.level}: FAILED {r.failed}")
        else:
            lines.append(
                f"level {r.level}: h={r.h:.6g} n_active={r.n_active} l2={r.err_l2:.6g} h1={r.err_h1:.6g} "
                f"star={r.err_star:.6g} cond={r.cond:.6g} asm_ms={r.asm_ms:.1f} solve_ms={r.solve_ms:.1f}"
            )
    for key, val in report.tables.items():
        if key in ("offsets", "uniform"):
            continue
        lines.append(f"{key}: {val}")
    lines += ["", "# checks"]
    for name, ok in report.flags.items():
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}")
    lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
    lines.append(f"wall_s: {wall:.2f}")
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
