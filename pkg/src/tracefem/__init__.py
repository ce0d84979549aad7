"""Trace finite elements for elliptic PDEs on implicitly defined surfaces."""
from .assembly import (
    STABILIZATIONS,
    Discretization,
    TraceSystem,
    assemble_lb,
    assemble_mass_stiffness,
    assemble_stabilization,
    assemble_supg,
    discretize,
    supg_delta,
)
from .errors import ErrorRecord, eoc, star_norm, surface_errors, write_report_csv
from .estimator import adaptive_loop, compute_indicators, mark_dorfler
from .fespace import FeSpace
from .isomap import build_isomap, mapped_surface_quadrature
from .levelset import extract_cut_topology, interpolate_levelset, make_surface
from .mesh import TetMesh, bisect_refine, build_box_mesh, uniform_refine
from .problems import make_problem
from .solvers import estimate_condition, solve_bicgstab, solve_cg
from .studies import StudyConfig, StudyReport, parse_config, run_study

__version__ = "0.1.0"
