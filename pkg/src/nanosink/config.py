"""Case catalogue and configuration files.

A case bundles everything needed to reproduce a run: geometry kind and
grid, material properties, boundary values, design-interpolation
parameters, solver settings, and the projection-continuation schedule.
Cases are defined in INI files with a fixed schema; unknown sections or
keys are rejected, missing optional keys fall back to documented
defaults (logged at INFO level).

Geometry kinds:

``square-design-domain``
    Plenum / design square / plenum, ports of width L_ref centered on
    the left and right edges, no-slip adiabatic walls elsewhere. The
    design domain spans 2 * L_ref around the domain center, full height.
``mmchs-unit-cell``
    Full-height pressure ports left/right, free-slip top and bottom.
    The design domain is the interior minus ``port_margin`` wide
    fixed-fluid strips at the ports.
``straight-channel``
    Full-height ports, walls of configurable kind; used for channel
    validation runs and for parallel-fin reference designs.
``parallel-plate-validation``
    Half-gap channel: isothermal no-slip bottom wall, symmetry top,
    uniform-velocity inlet, pressure outlet. No design domain.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .boundary import BoundarySpec, Segment
from .closures import MaterialProps, water_copper
from .design import InterpolationParams, heat_generation_coeff, inverse_permeability
from .grid import Grid, ScalarField, make_grid
from .solver import PenalizationFields, SolverSettings

log = logging.getLogger("nanosink.config")

GEOMETRY_KINDS = (
    "parallel-plate-validation",
    "square-design-domain",
    "mmchs-unit-cell",
    "straight-channel",
)

WALL_KINDS = {"no-slip": "no-slip-wall", "free-slip": "free-slip-wall"}


class ConfigError(ValueError):
    """Raised for unparseable or invalid case configurations."""


@dataclass
class ContinuationSchedule:
    """Projection-sharpening schedule for the optimizer."""

    beta_init: float = 1.0
    beta_max: float = 64.0
    growth: float = 2.0
    stage_iters: int = 200   # iteration cap per beta stage
    eps: float = 1e-4        # relative objective change declaring a stage done

    def __post_init__(self):
        if self.beta_init < 1.0:
            raise ConfigError("beta_init must be >= 1")
        if self.beta_max < self.beta_init:
            raise ConfigError("beta_max must be >= beta_init")
        if self.growth <= 1.0:
            raise ConfigError("beta growth factor must exceed 1")
        if self.stage_iters < 1:
            raise ConfigError("stage_iters must be >= 1")
        if self.eps <= 0.0:
            raise ConfigError("eps must be positive")

    def betas(self) -> Tuple[float, ...]:
        out = [self.beta_init]
        while out[-1] < self.beta_max:
            out.append(min(out[-1] * self.growth, self.beta_max))
        return tuple(out)


@dataclass
class CaseConfig:
    name: str
    kind: str
    nx: int
    ny: int
    lx: float
    ly: float
    props: MaterialProps
    L_ref: float
    dp: float = 0.0
    u_in: Optional[float] = None
    T_in: float = 300.0
    T_wall: Optional[float] = None
    T_Q: float = 360.0
    phi_in: float = 0.0
    wall: str = "no-slip"
    port_margin: float = 0.0
    interp: Optional[InterpolationParams] = None
    radius: Optional[float] = None
    eta: float = 0.5
    gamma_init: float = 0.9
    settings: SolverSettings = field(default_factory=SolverSettings)
    schedule: ContinuationSchedule = field(default_factory=ContinuationSchedule)
    move: float = 0.1
    gradient_mode: str = "implicit"
    tape_sweeps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GEOMETRY_KINDS:
            raise ConfigError(f"unknown geometry kind {self.kind!r}")
        if not 0.0 <= self.phi_in < 1.0:
            raise ConfigError(f"phi_in={self.phi_in} outside [0, 1)")
        if self.kind == "parallel-plate-validation":
            if self.u_in is None or self.u_in <= 0.0:
                raise ConfigError("validation case needs u_in > 0")
            if self.T_wall is None:
                raise ConfigError("validation case needs T_wall")
        else:
            if self.dp <= 0.0:
                raise ConfigError(f"{self.kind} needs dp > 0")
        if self.wall not in WALL_KINDS:
            raise ConfigError(f"wall must be one of {sorted(WALL_KINDS)}")
        if self.port_margin < 0.0:
            raise ConfigError("port_margin must be nonnegative")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError("eta must lie in (0, 1)")
        if not 0.0 <= self.gamma_init <= 1.0:
            raise ConfigError("gamma_init must lie in [0, 1]")
        if self.radius is not None and self.radius <= 0.0:
            raise ConfigError("filter radius must be positive")
        if self.gradient_mode not in ("implicit", "tape"):
            raise ConfigError("gradient_mode must be 'implicit' or 'tape'")
        if self.tape_sweeps < 1:
            raise ConfigError("tape_sweeps must be >= 1")
        if not 0.0 < self.move <= 1.0:
            raise ConfigError("move limit must lie in (0, 1]")
        if self.L_ref <= 0.0:
            raise ConfigError("L_ref must be positive")


# ------------------------------------------------------------- geometry

def build_grid(case: CaseConfig) -> Grid:
    return make_grid(case.nx, case.ny, case.lx, case.ly)


def _port_rows(case: CaseConfig, grid: Grid) -> Tuple[int, int]:
    dy = grid.dy
    lo = int(round((case.ly / 2.0 - case.L_ref / 2.0) / dy))
    hi = int(round((case.ly / 2.0 + case.L_ref / 2.0) / dy))
    return max(lo, 1), min(hi, grid.ny - 2)


def build_boundary(case: CaseConfig, grid: Grid) -> BoundarySpec:
    nx, ny = grid.nx, grid.ny
    inflow = dict(T_f=case.T_in, T_p=case.T_in, phi_p=case.phi_in)

    if case.kind == "square-design-domain":
        lo, hi = _port_rows(case, grid)
        segs = [
            Segment("no-slip-wall", "bottom", 0, nx - 1),
            Segment("no-slip-wall", "top", 0, nx - 1),
            Segment("inlet-pressure", "left", lo, hi, p=case.dp, **inflow),
            Segment("outlet-pressure", "right", lo, hi, p=0.0),
        ]
        for edge in ("left", "right"):
            if lo > 1:
                segs.append(Segment("no-slip-wall", edge, 1, lo - 1))
            if hi < ny - 2:
                segs.append(Segment("no-slip-wall", edge, hi + 1, ny - 2))
        return BoundarySpec(grid, segs)

    if case.kind in ("mmchs-unit-cell", "straight-channel"):
        wall = ("free-slip-wall" if case.kind == "mmchs-unit-cell"
                else WALL_KINDS[case.wall])
        segs = [
            Segment(wall, "bottom", 0, nx - 1),
            Segment(wall, "top", 0, nx - 1),
            Segment("inlet-pressure", "left", 1, ny - 2, p=case.dp, **inflow),
            Segment("outlet-pressure", "right", 1, ny - 2, p=0.0),
        ]
        return BoundarySpec(grid, segs)

    # parallel-plate-validation: the inlet owns the centerline corner so
    # the prescribed influx covers the full half-gap
    segs = [
        Segment("no-slip-wall", "bottom", 0, nx - 1, T_wall=case.T_wall),
        Segment("symmetry", "top", 1, nx - 1),
        Segment("inlet-velocity", "left", 1, ny - 1, u_n=case.u_in, **inflow),
        Segment("outlet-pressure", "right", 1, ny - 2, p=0.0),
    ]
    return BoundarySpec(grid, segs)


def design_mask(case: CaseConfig, grid: Grid) -> np.ndarray:
    """Boolean flat mask of the design domain D."""
    x, _ = grid.coords()
    tol = 1e-9 * max(grid.dx, grid.dy)
    if case.kind == "square-design-domain":
        mask = np.abs(x - case.lx / 2.0) <= case.L_ref + tol
    elif case.kind in ("mmchs-unit-cell", "straight-channel"):
        mask = ((x >= case.port_margin - tol)
                & (x <= case.lx - case.port_margin + tol))
    else:
        mask = np.zeros_like(x, dtype=bool)
    return mask.ravel()


def initial_design(case: CaseConfig, grid: Grid) -> np.ndarray:
    """Full-grid design field: gamma_init inside D, fixed fluid outside."""
    gamma = np.ones(grid.n_nodes)
    gamma[design_mask(case, grid)] = case.gamma_init
    return gamma


def full_design(case: CaseConfig, grid: Grid, x: np.ndarray) -> np.ndarray:
    """Scatter a design vector (values on D) onto the full grid."""
    mask = design_mask(case, grid)
    if x.shape != (int(mask.sum()),):
        raise ValueError(f"design vector has {x.shape[0]} entries, "
                         f"domain has {int(mask.sum())} nodes")
    gamma = np.ones(grid.n_nodes)
    gamma[mask] = x
    return gamma


def penalization_fields(case: CaseConfig, grid: Grid,
                        gamma_projected: np.ndarray) -> PenalizationFields:
    """Material fields for a projected design; heat source only inside D."""
    if case.interp is None:
        zero = ScalarField(grid, np.zeros(grid.n_nodes))
        return PenalizationFields(zero, zero, case.T_Q)
    g = np.clip(np.asarray(gamma_projected).ravel(), 0.0, 1.0)
    alpha = np.asarray(inverse_permeability(g, case.interp))
    Q = np.asarray(heat_generation_coeff(g, case.interp))
    Q = Q * design_mask(case, grid)
    return PenalizationFields(ScalarField(grid, alpha),
                              ScalarField(grid, Q), case.T_Q)


def reynolds_reference(case: CaseConfig) -> float:
    """Reported Reynolds number of a case.

    Pressure-driven cases use the pressure-velocity scale
    sqrt(dp / rho_f) with L_ref; the velocity-inlet validation case uses
    the hydraulic diameter of the full gap (4x the modeled half-gap).
    """
    p = case.props
    if case.kind == "parallel-plate-validation":
        return p.rho_f * case.u_in * (4.0 * case.ly) / p.mu_f
    return np.sqrt(case.dp * p.rho_f) * case.L_ref / p.mu_f


# ------------------------------------------------------------- INI schema

_REQUIRED = object()

_MATERIAL_KEYS = ("mu_f", "rho_f", "c_f", "k_f", "mu_p", "rho_p",
                  "c_p", "k_p", "d_p", "omega")

_SCHEMA: Dict[str, Dict[str, tuple]] = {
    "case": {
        "name": (str, None),
        "kind": (str, _REQUIRED),
        "nx": (int, _REQUIRED),
        "ny": (int, _REQUIRED),
        "lx": (float, _REQUIRED),
        "ly": (float, _REQUIRED),
        "L_ref": (float, None),
        "seed": (int, 0),
    },
    "material": {k: (float, None) for k in _MATERIAL_KEYS},
    "boundary": {
        "dp": (float, 0.0),
        "u_in": (float, None),
        "T_in": (float, 300.0),
        "T_wall": (float, None),
        "T_Q": (float, 360.0),
        "phi_in": (float, 0.0),
        "wall": (str, "no-slip"),
        "port_margin": (float, 0.0),
    },
    "penalization": {
        "alpha_max": (float, _REQUIRED),
        "q_max": (float, _REQUIRED),
        "alpha_min": (float, 0.0),
        "q": (float, 0.05),
    },
    "design": {
        "radius": (float, None),
        "eta": (float, 0.5),
        "gamma_init": (float, 0.9),
    },
    "solver": {f.name: (type(f.default), f.default)
               for f in dataclasses.fields(SolverSettings)},
    "continuation": {f.name: (type(f.default), f.default)
                     for f in dataclasses.fields(ContinuationSchedule)},
    "optimizer": {
        "move": (float, 0.1),
        "mode": (str, "implicit"),
        "tape_sweeps": (int, 50),
    },
}


def _convert(raw: str, typ, section: str, key: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(
            f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}")


def _parse_section(parser, section: str, name: str) -> Dict[str, object]:
    spec = _SCHEMA[section]
    out: Dict[str, object] = {}
    present = parser.has_section(section)
    raw = dict(parser.items(section)) if present else {}
    for key in raw:
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for key, (typ, default) in spec.items():
        if key in raw:
            out[key] = _convert(raw[key], typ, section, key)
        else:
            out[key] = default
            if present and default is not _REQUIRED and default is not None:
                log.info("config %s: [%s] %s defaulting to %r",
                         name, section, key, default)
    missing = [k for k, v in out.items() if v is _REQUIRED]
    if missing and present:
        raise ConfigError(
            f"section [{section}] is missing required keys: {missing}")
    return out


def load_case(path) -> CaseConfig:
    """Parse and validate a case configuration file."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    if not parser.has_section("case"):
        raise ConfigError("missing required section [case]")

    name = path.stem
    case_kv = _parse_section(parser, "case", name)
    mat_kv = _parse_section(parser, "material", name)
    bnd_kv = _parse_section(parser, "boundary", name)
    des_kv = _parse_section(parser, "design", name)
    sol_kv = _parse_section(parser, "solver", name)
    con_kv = _parse_section(parser, "continuation", name)
    opt_kv = _parse_section(parser, "optimizer", name)

    props = water_copper(mat_kv["d_p"] if mat_kv["d_p"] is not None else 100e-9)
    overrides = {k: v for k, v in mat_kv.items()
                 if v is not None and k != "d_p"}
    if overrides:
        props = dataclasses.replace(props, **overrides)

    interp = None
    if parser.has_section("penalization"):
        pen_kv = _parse_section(parser, "penalization", name)
        try:
            interp = InterpolationParams(**pen_kv)
        except ValueError as e:
            raise ConfigError(f"[penalization]: {e}") from e

    try:
        settings = SolverSettings(**sol_kv)
    except ValueError as e:
        raise ConfigError(f"[solver]: {e}") from e
    try:
        schedule = ContinuationSchedule(**con_kv)
    except ValueError as e:
        raise ConfigError(f"[continuation]: {e}") from e

    try:
        return CaseConfig(
            name=case_kv["name"] or path.stem,
            kind=case_kv["kind"],
            nx=case_kv["nx"], ny=case_kv["ny"],
            lx=case_kv["lx"], ly=case_kv["ly"],
            props=props,
            L_ref=case_kv["L_ref"] if case_kv["L_ref"] is not None
            else case_kv["ly"],
            dp=bnd_kv["dp"], u_in=bnd_kv["u_in"],
            T_in=bnd_kv["T_in"], T_wall=bnd_kv["T_wall"],
            T_Q=bnd_kv["T_Q"], phi_in=bnd_kv["phi_in"],
            wall=bnd_kv["wall"], port_margin=bnd_kv["port_margin"],
            interp=interp,
            radius=des_kv["radius"], eta=des_kv["eta"],
            gamma_init=des_kv["gamma_init"],
            settings=settings, schedule=schedule,
            move=opt_kv["move"], gradient_mode=opt_kv["mode"],
            tape_sweeps=opt_kv["tape_sweeps"],
            seed=case_kv["seed"],
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def bundled_config_path(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    base = resources.files("nanosink") / "configs"
    p = base / (name if name.endswith(".cfg") else name + ".cfg")
    if not p.is_file():
        raise ConfigError(
            f"no bundled config {name!r}; available: {list_bundled()}")
    return Path(str(p))


def list_bundled() -> Tuple[str, ...]:
    base = resources.files("nanosink") / "configs"
    return tuple(sorted(p.name[:-4] for p in base.iterdir()
                        if p.name.endswith(".cfg")))
