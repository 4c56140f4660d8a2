"""Scalar observables recorded along a run."""

from dataclasses import dataclass

import numpy as np

from .forms import forms_context
from .quadrature import quadrature_rule
from .spaces import scalar_basis


@dataclass
class Diagnostics:
    """One sampled row of run observables."""
    t: float
    energy: float
    half_energy: float
    enstrophy: float
    div_norm: float
    l2_error: float  # None when no exact solution is configured
    vmax: float
    dt: float


def compute_energy(u):
    """Squared L2 norm of the velocity."""
    ctx = forms_context(u.mesh, u.degree)
    return ctx.l2_norm(u.coeffs) ** 2


def compute_enstrophy(u):
    """Squared L2 norm of the broken vorticity curl(u)."""
    ctx = forms_context(u.mesh, u.degree)
    omega = ctx.vorticity_values(u.coeffs)
    return float(np.einsum("eq,q,e->", omega ** 2, ctx.vol_rule.weights,
                           ctx.detB))


def compute_l2_error(u, exact, t):
    """L2 distance to an exact field callback (x, y, t) -> (2, n)."""
    mesh, k = u.mesh, u.degree
    rule = quadrature_rule("triangle", 2 * k + 4)
    phi = scalar_basis("triangle", k).eval(rule.points)
    xq = mesh.geometry.push(rule.points)
    flat = np.asarray(exact(xq[:, :, 0].ravel(), xq[:, :, 1].ravel(), t),
                      dtype=float)
    ex = flat.reshape(2, mesh.num_triangles, -1).transpose(1, 0, 2)
    uh = np.einsum("eci,iq->ecq", u.coeffs, phi)
    return float(np.sqrt(np.einsum("ecq,q,e->", (uh - ex) ** 2,
                                   rule.weights, mesh.geometry.det)))


def sample(u, dt, exact=None):
    """Collect all observables for one state."""
    ctx = forms_context(u.mesh, u.degree)
    energy = compute_energy(u)
    err = None if exact is None else compute_l2_error(u, exact, u.t)
    return Diagnostics(
        t=u.t,
        energy=energy,
        half_energy=0.5 * energy,
        enstrophy=compute_enstrophy(u),
        div_norm=ctx.div_norm(u.coeffs),
        l2_error=err,
        vmax=ctx.vmax(u.coeffs),
        dt=dt,
    )
