"""Run configuration: INI files, named presets, reference flows."""

import configparser
import math
from dataclasses import dataclass, replace

import numpy as np

from .forms import NoFlow, Outflow, ProblemData, WallNoSlip
from .mesh import load_mesh, square_mesh
from .timeloop import Integrator, StepControl

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


# reference flows; velocity callbacks return (2, n) for flat x, y

def taylor_green_velocity(nu):
    """Periodic vortex array; an exact solution decaying at rate 2*nu."""
    def u(x, y, t):
        decay = math.exp(-2.0 * nu * t)
        return decay * np.array([-np.cos(x) * np.sin(y),
                                 np.sin(x) * np.cos(y)])
    return u


def oscillating_shear_velocity(nu):
    """Time-periodic crossed shear flow, driven by a matching body force."""
    def u(x, y, t):
        s = math.sin(6.0 * math.pi * t)
        return np.array([s * np.sin(y), s * np.sin(2.0 * x)])
    return u


def oscillating_shear_source(nu):
    """Body force that makes oscillating_shear_velocity an exact solution."""
    def f(x, y, t):
        w = 6.0 * math.pi
        s, c = math.sin(w * t), math.cos(w * t)
        f1 = (w * c * np.sin(y) + s * s * np.sin(2.0 * x) * np.cos(y)
              + nu * s * np.sin(y))
        f2 = (w * c * np.sin(2.0 * x) + 2.0 * s * s * np.sin(y) * np.cos(2.0 * x)
              + 4.0 * nu * s * np.sin(2.0 * x))
        return np.array([f1, f2])
    return f


def shear_layer_initial(rho, delta):
    """Double shear layer of width rho with a sinusoidal perturbation."""
    def u0(x, y):
        lower = np.tanh((y - 0.5 * math.pi) / rho)
        upper = np.tanh((1.5 * math.pi - y) / rho)
        u1 = np.where(y <= math.pi, lower, upper)
        return np.array([u1, delta * np.sin(x)])
    return u0


_EXACT = {
    "taylor_green": taylor_green_velocity,
    "oscillating_shear": oscillating_shear_velocity,
}

_SOURCES = {
    "oscillating_shear": oscillating_shear_source,
}

_INTEGRATORS = ("forward_euler", "tvd_rk3", "rk4")

_BC_KINDS = {
    "noflow": NoFlow,
    "wall": WallNoSlip,
    "outflow": Outflow,
}


@dataclass
class RunConfig:
    """Complete description of one simulation run."""

    preset: str = None
    # mesh: either a file or a generated square
    mesh_file: str = None
    nx: int = 16
    size: float = TWO_PI
    periodic: bool = True
    jitter: float = 0.0
    mesh_seed: int = 0
    # discretization
    degree: int = 2
    # problem
    nu: float = 0.0
    alpha: float = 2.0
    solution: str = None
    source: str = None
    initial: str = None
    bcs: str = "periodic"
    rho: float = math.pi / 15.0
    delta: float = 0.05
    include_convection: bool = True
    # time stepping
    integrator: str = "tvd_rk3"
    t_end: float = 1.0
    dt: float = None
    c_convective: float = None
    c_viscous: float = None
    dt_min: float = 1e-12
    dt_max: float = 1.0
    dt_sweep: tuple = ()
    # output
    out_dir: str = None
    sample_every: int = 1
    vtk_every: int = 0

    def validate(self):
        """Raise ConfigError listing every violated invariant."""
        problems = []
        if not 1 <= self.degree <= 6:
            problems.append(f"degree must lie in 1..6, got {self.degree}")
        if self.mesh_file is None and self.nx < 1:
            problems.append(f"nx must be >= 1, got {self.nx}")
        if self.mesh_file is None and not self.size > 0:
            problems.append(f"mesh size must be > 0, got {self.size}")
        if self.mesh_file is None and not 0.0 <= self.jitter <= 0.25:
            problems.append(f"jitter must lie in [0, 0.25], got {self.jitter}")
        if self.nu < 0:
            problems.append(f"nu must be >= 0, got {self.nu}")
        if self.alpha <= 0:
            problems.append(f"alpha must be > 0, got {self.alpha}")
        if self.integrator not in _INTEGRATORS:
            problems.append(f"unknown integrator {self.integrator!r}")
        if self.t_end < 0:
            problems.append(f"end time must be >= 0, got {self.t_end}")
        if self.dt is not None and self.dt <= 0:
            problems.append(f"dt must be > 0, got {self.dt}")
        if not 0 < self.dt_min <= self.dt_max:
            problems.append("need 0 < dt_min <= dt_max, got "
                            f"{self.dt_min}, {self.dt_max}")
        if any(d <= 0 for d in self.dt_sweep):
            problems.append(f"dt_sweep values must be > 0, got {self.dt_sweep}")
        if self.sample_every < 1:
            problems.append(f"sample_every must be >= 1, got {self.sample_every}")
        if self.vtk_every < 0:
            problems.append(f"vtk_every must be >= 0, got {self.vtk_every}")
        if self.solution is not None and self.solution not in _EXACT:
            problems.append(f"unknown solution {self.solution!r}")
        if self.source is not None and self.source not in _SOURCES:
            problems.append(f"unknown source {self.source!r}")
        known_initial = set(_EXACT) | {"shear_layer", "zero"}
        if self.initial is not None and self.initial not in known_initial:
            problems.append(f"unknown initial condition {self.initial!r}")
        if self.rho <= 0:
            problems.append(f"rho must be > 0, got {self.rho}")
        try:
            self._parse_bcs()
        except ConfigError as err:
            problems.append(str(err))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def _parse_bcs(self):
        text = (self.bcs or "periodic").strip()
        if text == "periodic":
            return {}
        table = {}
        for item in text.split(","):
            label, sep, kind = item.partition("=")
            label, kind = label.strip(), kind.strip()
            if not sep or not label or kind not in _BC_KINDS:
                raise ConfigError(
                    f"bad boundary spec {item.strip()!r}; use label=kind with "
                    f"kind in {sorted(_BC_KINDS)}")
            table[label] = _BC_KINDS[kind]()
        return table

    # factories

    def build_mesh(self):
        if self.mesh_file is not None:
            return load_mesh(self.mesh_file)
        return square_mesh(self.nx, size=self.size, periodic=self.periodic,
                           jitter=self.jitter, seed=self.mesh_seed)

    def problem_data(self):
        source = None
        if self.source is not None:
            source = _SOURCES[self.source](self.nu)
        return ProblemData(nu=self.nu, alpha=self.alpha, source=source,
                           bcs=self._parse_bcs(),
                           include_convection=self.include_convection)

    def exact_solution(self):
        if self.solution is None:
            return None
        return _EXACT[self.solution](self.nu)

    def initial_condition(self):
        name = self.initial if self.initial is not None else self.solution
        if name is None or name == "zero":
            return lambda x, y: np.zeros((2, len(np.atleast_1d(x))))
        if name == "shear_layer":
            return shear_layer_initial(self.rho, self.delta)
        exact = _EXACT[name](self.nu)
        return lambda x, y: exact(x, y, 0.0)

    def step_control(self):
        return StepControl(t_end=self.t_end, dt=self.dt,
                           c_convective=self.c_convective,
                           c_viscous=self.c_viscous,
                           dt_min=self.dt_min, dt_max=self.dt_max)

    def integrator_scheme(self):
        return Integrator(self.integrator)


# INI serialization; one (section, key) per field, types drive both ways

_SCHEMA = (
    ("run", "preset", "preset", "str"),
    ("run", "degree", "degree", "int"),
    ("run", "integrator", "integrator", "str"),
    ("mesh", "file", "mesh_file", "str"),
    ("mesh", "nx", "nx", "int"),
    ("mesh", "size", "size", "float"),
    ("mesh", "periodic", "periodic", "bool"),
    ("mesh", "jitter", "jitter", "float"),
    ("mesh", "seed", "mesh_seed", "int"),
    ("problem", "nu", "nu", "float"),
    ("problem", "alpha", "alpha", "float"),
    ("problem", "solution", "solution", "str"),
    ("problem", "source", "source", "str"),
    ("problem", "initial", "initial", "str"),
    ("problem", "bcs", "bcs", "str"),
    ("problem", "rho", "rho", "float"),
    ("problem", "delta", "delta", "float"),
    ("problem", "include_convection", "include_convection", "bool"),
    ("time", "t_end", "t_end", "float"),
    ("time", "dt", "dt", "float"),
    ("time", "c_convective", "c_convective", "float"),
    ("time", "c_viscous", "c_viscous", "float"),
    ("time", "dt_min", "dt_min", "float"),
    ("time", "dt_max", "dt_max", "float"),
    ("time", "dt_sweep", "dt_sweep", "floats"),
    ("output", "dir", "out_dir", "str"),
    ("output", "sample_every", "sample_every", "int"),
    ("output", "vtk_every", "vtk_every", "int"),
)


def _decode(value, typ, where):
    text = value.strip()
    if text.lower() == "none" or text == "":
        return None
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if typ == "floats":
            return tuple(float(p) for p in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {where}") from None


def _encode(value, typ):
    if typ == "bool":
        return "true" if value else "false"
    if typ == "float":
        return repr(float(value))
    if typ == "floats":
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def parse_config(text, base=None):
    """Build a RunConfig from INI text layered over `base` (or defaults).

    A `preset` key inside the file restarts from that preset before the
    remaining keys apply.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse configuration: {err}") from None

    name = cp.get("run", "preset", fallback=None)
    if name is not None:
        cfg = preset(name.strip())
    elif base is not None:
        cfg = replace(base)
    else:
        cfg = RunConfig()

    known = {}
    for section, key, attr, typ in _SCHEMA:
        known[(section, key)] = (attr, typ)
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) not in known:
                raise ConfigError(f"unknown configuration key [{section}] {key}")
            attr, typ = known[(section, key)]
            if attr == "preset":
                continue
            value = _decode(raw, typ, f"[{section}] {key}")
            if value is None and typ in ("int", "bool"):
                raise ConfigError(f"[{section}] {key} must not be empty")
            if typ == "floats" and value is None:
                value = ()
            setattr(cfg, attr, value)
    return cfg


def serialize_config(cfg):
    """Render a RunConfig as canonical INI text; parse round-trips it."""
    sections = {}
    for section, key, attr, typ in _SCHEMA:
        value = getattr(cfg, attr)
        if value is None or (typ == "floats" and not value):
            continue
        sections.setdefault(section, []).append(
            f"{key} = {_encode(value, typ)}")
    lines = []
    for section in ("run", "mesh", "problem", "time", "output"):
        if section in sections:
            lines.append(f"[{section}]")
            lines.extend(sections[section])
            lines.append("")
    return "\n".join(lines)


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base=base)


def apply_mesh_spec(cfg, spec):
    """Set mesh fields from 'square:key=value,...' or a mesh file path."""
    text = spec.strip()
    if text == "square" or text.startswith("square:"):
        cfg.mesh_file = None
        body = text.partition(":")[2]
        keys = {"nx": ("nx", "int"), "size": ("size", "float"),
                "periodic": ("periodic", "bool"),
                "jitter": ("jitter", "float"), "seed": ("mesh_seed", "int")}
        for item in filter(None, (p.strip() for p in body.split(","))):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in keys:
                raise ConfigError(
                    f"bad mesh option {item!r}; use {sorted(keys)}")
            attr, typ = keys[key]
            parsed = _decode(value, typ, f"mesh option {key}")
            if parsed is None:
                raise ConfigError(f"mesh option {key} must not be empty")
            setattr(cfg, attr, parsed)
    else:
        cfg.mesh_file = text
    return cfg


# named runs

_PRESETS = {
    "taylor_green_euler": dict(
        nx=16, periodic=True, degree=2, nu=0.0,
        solution="taylor_green", t_end=1.0, integrator="tvd_rk3",
        c_viscous=0.1),
    "taylor_green_ns": dict(
        nx=16, periodic=True, degree=2, nu=0.01,
        solution="taylor_green", t_end=1.0, integrator="tvd_rk3",
        c_viscous=0.1),
    "temporal_rk3": dict(
        nx=32, periodic=True, degree=6, nu=1.0 / 4000.0,
        solution="oscillating_shear", source="oscillating_shear",
        t_end=0.1, integrator="tvd_rk3", dt=0.1 / 32.0,
        dt_sweep=(0.1 / 4.0, 0.1 / 8.0, 0.1 / 16.0, 0.1 / 32.0)),
    "temporal_rk4": dict(
        nx=32, periodic=True, degree=6, nu=1.0 / 4000.0,
        solution="oscillating_shear", source="oscillating_shear",
        t_end=0.1, integrator="rk4", dt=0.1 / 32.0,
        dt_sweep=(0.1 / 4.0, 0.1 / 8.0, 0.1 / 16.0, 0.1 / 32.0)),
    "shear_layer_coarse": dict(
        nx=40, periodic=True, degree=3, nu=0.0,
        initial="shear_layer", t_end=8.0, integrator="tvd_rk3",
        rho=math.pi / 15.0, delta=0.05),
    "shear_layer_fine": dict(
        nx=80, periodic=True, degree=3, nu=0.0,
        initial="shear_layer", t_end=8.0, integrator="tvd_rk3",
        rho=math.pi / 15.0, delta=0.05),
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset(name):
    """Named, fully specified run configuration."""
    try:
        kwargs = _PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}"
        ) from None
    return RunConfig(preset=name, **kwargs)
