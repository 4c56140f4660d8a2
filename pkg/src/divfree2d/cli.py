"""Command line driver."""

import argparse
import sys

from .config import (
    PRESET_NAMES,
    ConfigError,
    RunConfig,
    apply_mesh_spec,
    load_config,
    preset,
)
from .timeloop import BlowUpError, run


def build_parser():
    p = argparse.ArgumentParser(
        prog="divfree2d",
        description="Exactly divergence-free DG solver for the 2D "
                    "incompressible Euler and Navier-Stokes equations.")
    p.add_argument("--config", metavar="FILE",
                   help="INI run configuration file")
    p.add_argument("--preset", metavar="NAME",
                   help="named run: " + ", ".join(PRESET_NAMES))
    p.add_argument("--degree", type=int, metavar="K",
                   help="polynomial degree of the velocity space")
    p.add_argument("--mesh", metavar="SPEC",
                   help="mesh file path or 'square:nx=16,jitter=0.1,"
                        "seed=0,periodic=true,size=6.283'")
    p.add_argument("--dt", type=float, metavar="DT",
                   help="fixed time step (otherwise CFL-driven)")
    p.add_argument("--tend", type=float, metavar="T",
                   help="end time")
    p.add_argument("--out", metavar="DIR",
                   help="output directory for diagnostics, VTK, figures")
    p.add_argument("--integrator",
                   choices=("forward_euler", "tvd_rk3", "rk4"),
                   help="time integrator")
    return p


def build_config(args):
    """Layer configuration sources: defaults, preset, file, then flags."""
    cfg = RunConfig()
    if args.preset is not None:
        cfg = preset(args.preset)
    if args.config is not None:
        cfg = load_config(args.config, base=cfg)
    if args.degree is not None:
        cfg.degree = args.degree
    if args.mesh is not None:
        apply_mesh_spec(cfg, args.mesh)
    if args.dt is not None:
        cfg.dt = args.dt
    if args.tend is not None:
        cfg.t_end = args.tend
    if args.out is not None:
        cfg.out_dir = args.out
    if args.integrator is not None:
        cfg.integrator = args.integrator
    cfg.validate()
    if cfg.mesh_file is not None:
        cfg.build_mesh()  # surface bad paths and format errors early
    return cfg


def _describe(cfg):
    if cfg.mesh_file is not None:
        mesh = cfg.mesh_file
    else:
        tags = [f"{cfg.nx}x{cfg.nx}"]
        if cfg.periodic:
            tags.append("periodic")
        if cfg.jitter:
            tags.append(f"jitter={cfg.jitter:g}")
        mesh = " ".join(tags)
    head = f"preset {cfg.preset}: " if cfg.preset else "run: "
    return (f"{head}degree {cfg.degree}, mesh {mesh}, nu={cfg.nu:g}, "
            f"integrator {cfg.integrator}, t_end={cfg.t_end:g}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    print(_describe(cfg))
    try:
        series, state = run(cfg)
    except BlowUpError as err:
        print(f"error: {err}", file=sys.stderr)
        if cfg.out_dir:
            print(f"last finite state written to {cfg.out_dir}",
                  file=sys.stderr)
        return 3
    except OSError as err:
        print(f"error: cannot write output: {err}", file=sys.stderr)
        return 4
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    last = series[-1]
    msg = (f"t = {state.t:.6f}  steps = {state.step}  "
           f"energy = {last.energy:.6e}  div = {last.div_norm:.3e}")
    if last.l2_error is not None:
        msg += f"  l2_error = {last.l2_error:.6e}"
    print(msg)
    if cfg.out_dir:
        print(f"wrote diagnostics.csv, final.vtk, energy.png, "
              f"enstrophy.png, vorticity.png in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
