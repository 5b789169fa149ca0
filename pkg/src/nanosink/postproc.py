"""Derived quantities and multi-run drivers built on the solver.

Houses the Nusselt-number evaluation of the heated-wall validation
geometry, whole-case analysis, the crosscheck driver (optimize under a
sweep of conditions, re-analyze every design under every condition),
and the parallel-fin reference sweep for straight channels.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .closures import effective_conductivities_tilde
from .config import (
    CaseConfig,
    build_boundary,
    build_grid,
    design_mask,
    initial_design,
    penalization_fields,
)
from .grid import FlowState, Grid
from .optimize import run_optimization
from .sensitivity import assemble, solve_design
from .solver import ConvergenceReport, initial_state, solve_steady

log = logging.getLogger("nanosink.postproc")


class UnsupportedCaseError(ValueError):
    """The requested postprocessing does not apply to this geometry."""


# ----------------------------------------------------------- Nusselt

def _field(state: FlowState, name: str) -> np.ndarray:
    g = state.grid
    attr, phase = name.split("_")
    obj = state.fluid if phase == "f" else state.particle
    return getattr(obj, attr).values.reshape(g.nx, g.ny)


def nusselt_profile(state: FlowState, case: CaseConfig):
    """Local Nusselt number along the heated bottom wall.

    Wall heat flux combines both phases through the conductivities that
    enter the energy fluxes, evaluated at the wall-node particle
    fraction; the bulk temperature is the mass-flow-weighted mixture
    temperature of the cross section. The hydraulic diameter of the
    symmetric half-channel is 4x its height, and the flux is normalized
    by the base-fluid conductivity.
    """
    if case.kind != "parallel-plate-validation":
        raise UnsupportedCaseError(
            f"Nusselt evaluation needs the heated-wall validation "
            f"geometry, not {case.kind!r}")
    g = state.grid
    props = case.props
    dy = g.dy
    T_f = _field(state, "T_f")
    T_p = _field(state, "T_p")
    u_f = _field(state, "u_f")
    u_p = _field(state, "u_p")
    phi = state.particle.phi.values.reshape(g.nx, g.ny)

    # 3-point one-sided gradient at the isothermal bottom wall
    dTf = (-3.0 * T_f[:, 0] + 4.0 * T_f[:, 1] - T_f[:, 2]) / (2.0 * dy)
    dTp = (-3.0 * T_p[:, 0] + 4.0 * T_p[:, 1] - T_p[:, 2]) / (2.0 * dy)
    k_t_f, k_t_p = effective_conductivities_tilde(1.0 - phi[:, 0], props)
    q_wall = -(np.asarray(k_t_f) * dTf + np.asarray(k_t_p) * dTp)

    wy = np.full(g.ny, dy)
    wy[0] = wy[-1] = 0.5 * dy
    cf = (1.0 - phi) * props.rho_f * props.c_f * u_f
    cp = phi * props.rho_p * props.c_p * u_p
    T_bulk = ((cf * T_f + cp * T_p) @ wy) / ((cf + cp) @ wy)

    d_h = 4.0 * g.ly
    nu = q_wall * d_h / (props.k_f * (case.T_wall - T_bulk))
    x = np.linspace(0.0, g.lx, g.nx)
    return x, nu


def nusselt_average(state: FlowState, case: CaseConfig) -> float:
    """Length-averaged Nusselt number (trapezoid over the full wall)."""
    x, nu = nusselt_profile(state, case)
    return float(np.trapezoid(nu, x) / (x[-1] - x[0]))


# ----------------------------------------------------------- analysis

@dataclass
class AnalysisResult:
    state: FlowState
    report: ConvergenceReport
    J: Optional[float] = None
    T_ave: Optional[float] = None
    gamma_projected: Optional[np.ndarray] = None
    nu_average: Optional[float] = None


def run_analysis(case: CaseConfig, gamma=None, beta: float = 1.0,
                 warm=None) -> AnalysisResult:
    """Solve one case as configured, without optimizing.

    Cases with a design domain are solved at ``gamma`` (default: the
    configured uniform initial design) and report the objective; the
    validation geometry reports the average Nusselt number instead.
    """
    if case.interp is not None and design_mask(case, build_grid(case)).any():
        a = assemble(case)
        g = initial_design(case, a.grid) if gamma is None else gamma
        sol = solve_design(case, g, beta, assembly=a, warm=warm)
        return AnalysisResult(state=sol.state, report=sol.report, J=sol.J,
                              T_ave=sol.T_ave,
                              gamma_projected=sol.gamma_projected)
    grid = build_grid(case)
    bc = build_boundary(case, grid)
    pen = penalization_fields(case, grid, np.ones(grid.n_nodes))
    s0 = initial_state(grid, case.props, bc) if warm is None else warm
    state, report = solve_steady(grid, case.props, bc, pen,
                                 case.settings, s0)
    nu = (nusselt_average(state, case)
          if case.kind == "parallel-plate-validation" else None)
    return AnalysisResult(state=state, report=report, nu_average=nu)


# --------------------------------------------------------- crosscheck

CROSSCHECK_AXES = ("pressure", "volume-fraction", "diameter")


def vary_case(case: CaseConfig, axis: str, value: float) -> CaseConfig:
    """Derive a case with one analysis condition changed."""
    if axis == "pressure":
        return dataclasses.replace(case, name=f"{case.name}-dp{value:g}",
                                   dp=float(value))
    if axis == "volume-fraction":
        return dataclasses.replace(case, name=f"{case.name}-phi{value:g}",
                                   phi_in=float(value))
    if axis == "diameter":
        props = dataclasses.replace(case.props, d_p=float(value))
        return dataclasses.replace(case, name=f"{case.name}-dp{value:g}",
                                   props=props)
    raise ValueError(f"unknown crosscheck axis {axis!r}; "
                     f"expected one of {CROSSCHECK_AXES}")


@dataclass
class CrosscheckTable:
    """J[i][j]: design optimized at value j, analyzed at value i."""

    axis: str
    values: List[float]
    J: np.ndarray
    designs: List[np.ndarray] = field(default_factory=list, repr=False)

    def diagonal_dominant(self) -> bool:
        """Every design performs best at its own condition (row max)."""
        n = len(self.values)
        return all(np.argmax(self.J[i, :]) == i for i in range(n))

    def column_dominant(self) -> bool:
        n = len(self.values)
        return all(np.argmax(self.J[:, j]) == j for j in range(n))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["analyzed_at"] + [f"opt_at_{v:g}"
                                           for v in self.values])
            for i, v in enumerate(self.values):
                wr.writerow([f"{v:g}"] + [format(x, ".17g")
                                          for x in self.J[i]])


def run_crosscheck(base: CaseConfig, axis: str, values: Sequence[float], *,
                   workdir=None) -> CrosscheckTable:
    """Optimize one design per value, then analyze each design at each.

    Partial results are written to ``workdir`` as they complete, so an
    aborted table leaves its finished cells on disk.
    """
    values = [float(v) for v in values]
    if len(values) < 1:
        raise ValueError("crosscheck needs at least one axis value")
    out = Path(workdir) if workdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    designs = []
    finals = []
    for v in values:
        case_v = vary_case(base, axis, v)
        res = run_optimization(case_v)
        if res.record.aborted or res.solution is None:
            raise RuntimeError(
                f"optimization at {axis}={v:g} aborted: "
                f"{res.record.message}")
        designs.append(res.gamma)
        finals.append(res)
        if out is not None:
            np.save(out / f"design_{axis}_{v:g}.npy", res.gamma)
        log.info("optimized %s=%g: J=%.6g", axis, v, res.solution.J)

    n = len(values)
    J = np.full((n, n), np.nan)
    beta_final = base.schedule.betas()[-1]
    try:
        for j, res in enumerate(finals):
            for i, v in enumerate(values):
                case_i = vary_case(base, axis, v)
                if i == j:
                    J[i, j] = res.solution.J
                else:
                    a = assemble(case_i)
                    J[i, j] = solve_design(case_i, designs[j], beta_final,
                                           assembly=a).J
                if out is not None:
                    np.savetxt(out / "partial_J.csv", J, delimiter=",")
    except Exception:
        if out is not None:
            np.savetxt(out / "partial_J.csv", J, delimiter=",")
        raise
    return CrosscheckTable(axis=axis, values=values, J=J, designs=designs)


# ----------------------------------------------------------- fin sweep

@dataclass
class FinSweepResult:
    thicknesses: List[float]
    J: List[float]
    best_thickness: float
    best_J: float
    designs: List[np.ndarray] = field(repr=False, default_factory=list)


def fin_design(case: CaseConfig, grid: Grid, thickness: float) -> np.ndarray:
    """Binary design: solid strips along both channel walls.

    The strips span the design columns; a node is solid when its
    distance to either wall is under the fin thickness, so zero
    thickness leaves the channel fully open.
    """
    if thickness < 0.0:
        raise ValueError("fin thickness must be nonnegative")
    if 2.0 * thickness >= grid.ly:
        raise ValueError(
            f"fins of thickness {thickness:g} m overlap in a channel "
            f"of height {grid.ly:g} m")
    mask = design_mask(case, grid).reshape(grid.nx, grid.ny)
    y = np.linspace(0.0, grid.ly, grid.ny)
    solid_row = (y < thickness) | (y > grid.ly - thickness)
    gamma = np.ones((grid.nx, grid.ny))
    gamma[mask & solid_row[None, :]] = 0.0
    return gamma.ravel()


def fin_sweep(case: CaseConfig, thicknesses: Sequence[float]) -> FinSweepResult:
    """Analyze parallel-fin designs of the given thicknesses."""
    if case.kind != "straight-channel":
        raise UnsupportedCaseError(
            f"the fin sweep runs on straight-channel geometry, "
            f"not {case.kind!r}")
    a = assemble(case)
    Js, designs = [], []
    warm = None
    for t in thicknesses:
        gamma = fin_design(case, a.grid, float(t))
        sol = solve_design(case, gamma, beta=1.0, assembly=a, warm=warm)
        if not sol.report.converged:
            raise RuntimeError(
                f"fin analysis at thickness {t:g} did not converge: "
                f"{sol.report.message}")
        warm = sol
        Js.append(sol.J)
        designs.append(gamma)
        log.info("fin thickness %g m: J=%.6g", t, sol.J)
    k = int(np.argmax(Js))
    return FinSweepResult(thicknesses=[float(t) for t in thicknesses],
                          J=Js, best_thickness=float(thicknesses[k]),
                          best_J=Js[k], designs=designs)


# ------------------------------------------------------ branch counting

def count_branches(gamma_projected, grid: Grid, threshold: float = 0.5) -> int:
    """Fluid intervals crossed by the vertical midline of the domain.

    A deterministic proxy for the number of flow branches: the column
    nearest x = lx/2 is scanned and maximal runs of fluid nodes
    (projected design above the threshold) are counted.
    """
    gp = np.asarray(gamma_projected).reshape(grid.nx, grid.ny)
    i = int(round((grid.nx - 1) / 2))
    fluid = gp[i, :] > threshold
    return int(np.sum(fluid[1:] & ~fluid[:-1]) + int(fluid[0]))
