"""Run artifacts: delimited diagnostics, VTK snapshots, summary figures."""

import csv
import os

import numpy as np

from .diagnostics import Diagnostics
from .forms import forms_context
from .spaces import scalar_basis

CSV_COLUMNS = ("t", "energy", "enstrophy", "div_norm", "l2_error",
               "vmax", "dt")


def _fmt(value):
    return "" if value is None else "%.12e" % value


def write_csv(series, path):
    """Write diagnostics rows as delimited text, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in series:
            writer.writerow([_fmt(getattr(row, name)) for name in CSV_COLUMNS])


def read_csv(path):
    """Parse a diagnostics file back into Diagnostics rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError("unexpected columns in %s: %r" % (path, header))
        for rec in reader:
            vals = {name: (None if cell == "" else float(cell))
                    for name, cell in zip(CSV_COLUMNS, rec)}
            vals["half_energy"] = 0.5 * vals["energy"]
            rows.append(Diagnostics(**vals))
    return rows


def vertex_velocity(u):
    """Velocity sampled at mesh vertices, averaged over adjacent cells."""
    mesh = u.mesh
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    phi = scalar_basis("triangle", u.degree).eval(corners)
    vals = np.einsum("eci,iq->eqc", u.coeffs, phi)
    out = np.zeros((len(mesh.vertices), 2))
    cnt = np.zeros(len(mesh.vertices))
    idx = mesh.triangles.ravel()
    np.add.at(out, idx, vals.reshape(-1, 2))
    np.add.at(cnt, idx, 1.0)
    return out / np.maximum(cnt, 1.0)[:, None]


def cell_vorticity(u):
    """Mean vorticity per triangle."""
    ctx = forms_context(u.mesh, u.degree)
    omega = ctx.vorticity_values(u.coeffs)
    # reference triangle has area 1/2, so the mean is 2 * sum(w * omega)
    return 2.0 * omega @ ctx.vol_rule.weights


def write_vtk(u, mesh, path, cell_pressure=None):
    """Write one velocity snapshot as a legacy ASCII unstructured grid."""
    verts = mesh.vertices
    tris = mesh.triangles
    vel = vertex_velocity(u)
    omega = cell_vorticity(u)
    if cell_pressure is None:
        cell_pressure = np.zeros(len(tris))
    lines = [
        "# vtk DataFile Version 3.0",
        "divfree2d snapshot t=%.6f" % u.t,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        "POINTS %d double" % len(verts),
    ]
    for x, y in verts:
        lines.append("%.12e %.12e 0.0" % (x, y))
    lines.append("CELLS %d %d" % (len(tris), 4 * len(tris)))
    for a, b, c in tris:
        lines.append("3 %d %d %d" % (a, b, c))
    lines.append("CELL_TYPES %d" % len(tris))
    lines.extend(["5"] * len(tris))
    lines.append("POINT_DATA %d" % len(verts))
    lines.append("VECTORS velocity double")
    for vx, vy in vel:
        lines.append("%.12e %.12e 0.0" % (vx, vy))
    lines.append("CELL_DATA %d" % len(tris))
    lines.append("SCALARS vorticity double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend("%.12e" % w for w in omega)
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend("%.12e" % p for p in cell_pressure)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_figures(series, u, outdir):
    """Render summary plots; returns the list of files written."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    t = [row.t for row in series]

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(t, [row.energy for row in series], "-", label="energy")
    ax.plot(t, [row.half_energy for row in series], "--",
            label="half energy")
    ax.set_xlabel("t")
    ax.set_ylabel("kinetic energy")
    ax.legend(frameon=False)
    fig.tight_layout()
    p = os.path.join(outdir, "energy.png")
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(t, [row.enstrophy for row in series], "-", color="tab:red")
    ax.set_xlabel("t")
    ax.set_ylabel("enstrophy")
    fig.tight_layout()
    p = os.path.join(outdir, "enstrophy.png")
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)

    mesh = u.mesh
    fig, ax = plt.subplots(figsize=(5.4, 4.6))
    tpc = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1],
                       mesh.triangles, facecolors=cell_vorticity(u),
                       cmap="RdBu_r")
    fig.colorbar(tpc, ax=ax, label="vorticity")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    p = os.path.join(outdir, "vorticity.png")
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(p)
    return paths
