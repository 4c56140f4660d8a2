"""Exactly divergence-free DG solver for 2D incompressible flow.

Velocity fields live in an H(div)-conforming space whose divergence
vanishes identically; explicit time stepping advances them with one
statically condensed constrained mass inversion per stage.
"""

from .config import (
    PRESET_NAMES,
    ConfigError,
    RunConfig,
    load_config,
    parse_config,
    preset,
    serialize_config,
)
from .diagnostics import (
    Diagnostics,
    compute_energy,
    compute_enstrophy,
    compute_l2_error,
    sample,
)
from .forms import (
    Inflow,
    NoFlow,
    Outflow,
    ProblemData,
    WallNoSlip,
    forms_context,
    make_state,
)
from .mesh import Mesh, load_mesh, reference_triangle, square_mesh
from .output import read_csv, write_csv, write_figures, write_vtk
from .solver import (
    HybridSystem,
    StageSolution,
    build_hybrid,
    project_initial,
    solve_direct_divfree,
    solve_mixed,
    solve_stage,
)
from .timeloop import (
    BlowUpError,
    Integrator,
    SimState,
    StepControl,
    compute_dt,
    initial_state,
    run,
)

__version__ = "0.1.0"

__all__ = [
    "PRESET_NAMES",
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "preset",
    "serialize_config",
    "Diagnostics",
    "compute_energy",
    "compute_enstrophy",
    "compute_l2_error",
    "sample",
    "Inflow",
    "NoFlow",
    "Outflow",
    "ProblemData",
    "WallNoSlip",
    "forms_context",
    "make_state",
    "Mesh",
    "load_mesh",
    "reference_triangle",
    "square_mesh",
    "read_csv",
    "write_csv",
    "write_figures",
    "write_vtk",
    "HybridSystem",
    "StageSolution",
    "build_hybrid",
    "project_initial",
    "solve_direct_divfree",
    "solve_mixed",
    "solve_stage",
    "BlowUpError",
    "Integrator",
    "SimState",
    "StepControl",
    "compute_dt",
    "initial_state",
    "run",
]
