"""Explicit time integration over the divergence-free subspace.

Every stage of every integrator is one constrained mass inversion: the
spatial operator is evaluated on a known state, combined with mass
terms, and handed to the hybrid solver.  Intermediate stage states are
convex or affine combinations of solver outputs, so they inherit the
divergence and flux constraints exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import sample
from .forms import forms_context, make_state
from .output import write_csv, write_figures, write_vtk
from .solver import build_hybrid, project_initial, solve_stage


class BlowUpError(RuntimeError):
    """Raised when the velocity norm exceeds the abort threshold.

    Carries the last finite state so a driver can write a snapshot."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class SimState:
    """Velocity state plus bookkeeping carried between steps."""
    sys: object
    u: object
    t: float
    step: int = 0
    u0_norm: float = 0.0
    history: list = field(default_factory=list)

    def advanced(self, u, dt):
        return SimState(self.sys, u, self.t + dt, self.step + 1,
                        self.u0_norm, self.history)


@dataclass(frozen=True)
class StepControl:
    """Step-size policy: fixed dt or CFL-driven, clamped and end-aware."""
    t_end: float
    dt: float = None
    c_convective: float = None
    c_viscous: float = None
    dt_min: float = 1e-12
    dt_max: float = 1.0

    @property
    def mode(self):
        return "fixed" if self.dt is not None else "cfl"


@dataclass(frozen=True)
class Integrator:
    kind: str = "tvd_rk3"

    _STAGES = {"forward_euler": 1, "tvd_rk3": 3, "rk4": 4}

    def __post_init__(self):
        if self.kind not in self._STAGES:
            raise ValueError(f"unknown integrator '{self.kind}'")

    @property
    def stages(self):
        return self._STAGES[self.kind]

    def step(self, state, dt, data, stage_hook=None):
        fn = {"forward_euler": step_forward_euler,
              "tvd_rk3": step_tvdrk3,
              "rk4": step_rk4}[self.kind]
        return fn(state, dt, data, stage_hook=stage_hook)


def initial_state(sys, u0, t0=0.0):
    """Project the initial field and package it for stepping."""
    u = project_initial(u0, sys, t=t0)
    ctx = forms_context(u.mesh, u.degree)
    return SimState(sys, u, t0, 0, ctx.l2_norm(u.coeffs))


def mesh_diameter_min(mesh):
    """Smallest element diameter (longest edge per element, min over all)."""
    fac = mesh.facets
    return fac.lengths[fac.elem_facet].max(axis=1).min()


def compute_dt(state, control, data):
    """CFL-limited step size, clamped and trimmed to land on t_end."""
    remaining = control.t_end - state.t
    if control.mode == "fixed":
        return min(control.dt, remaining)
    ctx = forms_context(state.u.mesh, state.u.degree)
    k = state.u.degree
    h = mesh_diameter_min(state.u.mesh)
    cc = control.c_convective
    cb = control.c_viscous
    if cc is None:
        cc = 0.5 / (2 * k + 1)
    if cb is None:
        cb = 0.1 / (2 * k + 1) ** 2
    dt = control.dt_max
    vmax = ctx.vmax(state.u.coeffs)
    if vmax > 0:
        dt = min(dt, cc * h / (k * k * vmax))
    if data.nu > 0:
        dt = min(dt, cb * h * h / (k ** 4 * data.nu))
    dt = max(dt, control.dt_min)
    return min(dt, remaining)


def _check_blowup(state, new_u):
    ctx = forms_context(new_u.mesh, new_u.degree)
    norm = ctx.l2_norm(new_u.coeffs)
    if np.isfinite(norm) and state.u0_norm == 0.0:
        # started from rest: the first forced state sets the scale
        state.u0_norm = norm
        return
    if not np.isfinite(norm) or norm > 1e6 * max(state.u0_norm, 1e-30):
        raise BlowUpError(
            f"velocity norm {norm:.3e} exceeded abort threshold at "
            f"t = {state.t:.6g} (step {state.step})", state)


def _stage_solve(state, data, mass_coeffs, op_state, coef, t_source, t_new,
                 stage_hook):
    ctx = forms_context(state.u.mesh, state.u.degree)
    F = ctx.mass_apply(mass_coeffs)
    F -= coef * ctx.operator(op_state.coeffs, data, t_source)
    sol = solve_stage(state.sys, F.ravel(), coef, t=t_new)
    if stage_hook is not None:
        stage_hook(sol, t_new)
    return sol


def step_forward_euler(state, dt, data, stage_hook=None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    un = state.u
    sol = _stage_solve(state, data, un.coeffs, un, dt, state.t,
                       state.t + dt, stage_hook)
    _check_blowup(state, sol.u)
    return state.advanced(sol.u, dt)


def step_tvdrk3(state, dt, data, stage_hook=None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    un = state.u
    t = state.t
    u1 = _stage_solve(state, data, un.coeffs, un, dt, t, t + dt,
                      stage_hook).u
    mass2 = 0.75 * un.coeffs + 0.25 * u1.coeffs
    u2 = _stage_solve(state, data, mass2, u1, dt / 4.0, t + dt,
                      t + dt / 2.0, stage_hook).u
    mass3 = un.coeffs / 3.0 + 2.0 / 3.0 * u2.coeffs
    u3 = _stage_solve(state, data, mass3, u2, 2.0 * dt / 3.0, t + dt / 2.0,
                      t + dt, stage_hook).u
    _check_blowup(state, u3)
    return state.advanced(u3, dt)


def step_rk4(state, dt, data, stage_hook=None):
    if dt <= 0:
        raise ValueError("dt must be positive")
    _, _, inflow = forms_context(state.u.mesh,
                                 state.u.degree).bc_groups(data)
    if inflow:
        raise ValueError(
            "rk4 stages solve for time derivatives, which have no "
            "well-defined inflow flux data; use tvd_rk3 instead")
    un = state.u
    mesh, k = un.mesh, un.degree
    ctx = forms_context(mesh, k)
    t = state.t

    def slope(coeffs, ts):
        F = -ctx.operator(coeffs, data, ts)
        sol = solve_stage(state.sys, F.ravel(), dt, t=ts)
        if stage_hook is not None:
            stage_hook(sol, ts)
        return sol.u.coeffs

    k1 = slope(un.coeffs, t)
    k2 = slope(un.coeffs + 0.5 * dt * k1, t + dt / 2.0)
    k3 = slope(un.coeffs + 0.5 * dt * k2, t + dt / 2.0)
    k4 = slope(un.coeffs + dt * k3, t + dt)
    new = un.coeffs + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    u_new = make_state(new, k, mesh, t=t + dt)
    _check_blowup(state, u_new)
    return state.advanced(u_new, dt)


def _cell_pressure(state, data):
    """Mean pressure per cell, recovered by one extra stage solve."""
    u = state.u
    ctx = forms_context(u.mesh, u.degree)
    dtp = 1e-3
    F = ctx.mass_apply(u.coeffs) - dtp * ctx.operator(u.coeffs, data, u.t)
    try:
        sol = solve_stage(state.sys, F.ravel(), dtp, t=u.t)
    except (ValueError, RuntimeError):
        return None
    # constant pressure mode has value sqrt(2) on the reference element
    return np.sqrt(2.0) * sol.pressure[:, 0]


def _write_outputs(config, series, state, data):
    os.makedirs(config.out_dir, exist_ok=True)
    write_csv(series, os.path.join(config.out_dir, "diagnostics.csv"))
    write_vtk(state.u, state.u.mesh,
              os.path.join(config.out_dir, "final.vtk"),
              cell_pressure=_cell_pressure(state, data))
    write_figures(series, state.u, config.out_dir)


def run(config, stage_hook=None):
    """Drive one configured simulation to its end time.

    Returns (series, state): the sampled diagnostics rows and the final
    SimState.  When an output directory is configured, the delimited
    diagnostics, a final VTK snapshot, and summary figures are written
    there; on blow-up the last finite state is written before the error
    propagates.
    """
    mesh = config.build_mesh()
    data = config.problem_data()
    sys = build_hybrid(config.degree, mesh, data)
    state = initial_state(sys, config.initial_condition())
    exact = config.exact_solution()
    scheme = Integrator(config.integrator)
    control = config.step_control()

    series = [sample(state.u, 0.0, exact)]
    edge = control.t_end - 1e-12 * max(control.t_end, 1.0)
    try:
        while state.t < edge:
            dt = compute_dt(state, control, data)
            state = scheme.step(state, dt, data, stage_hook)
            if state.t >= edge or state.step % config.sample_every == 0:
                series.append(sample(state.u, dt, exact))
            if (config.out_dir and config.vtk_every
                    and state.step % config.vtk_every == 0):
                os.makedirs(config.out_dir, exist_ok=True)
                write_vtk(state.u, mesh,
                          os.path.join(config.out_dir,
                                       f"step_{state.step:06d}.vtk"))
    except BlowUpError as err:
        if config.out_dir:
            _write_outputs(config, series, err.last_good, data)
        raise
    if config.out_dir:
        _write_outputs(config, series, state, data)
    return series, state
