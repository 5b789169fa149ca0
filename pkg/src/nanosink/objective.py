"""Design objective: heat moved from the solid into the coolant.

The figure of merit is the design-domain mean of Q * (T_Q - T_ave),
where T_ave is a single scalar: the mass-flow-weighted average
temperature of both phases over the design domain. Larger J means the
coolant stays colder while the same heat is produced, i.e. better heat
extraction at the fixed pressure drop.

The array-level helpers are written with jax.numpy so the same formulas
can sit inside a differentiable pipeline; the public functions accept
and return plain Python/numpy types.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import jax.numpy as jnp
import numpy as np

from .closures import MaterialProps
from .grid import FlowState, Grid
from .solver import PenalizationFields

# smoothing floor for |u| so the weighting stays differentiable at
# stagnation points; far below any physical velocity here
EPS_SPEED = 1e-12


class UndefinedAverageError(ValueError):
    """No flow anywhere in the averaging domain."""


@dataclass
class ObjectiveReport:
    """Objective value with its ingredients.

    ``breakdown`` holds the per-node integrand Q * (T_Q - T_ave)
    (zero outside the design domain); integrating it with the
    normalized domain weights reproduces ``J`` exactly.
    """

    J: float
    T_ave: float
    breakdown: np.ndarray


def quadrature_weights(grid: Grid) -> np.ndarray:
    """Trapezoidal nodal weights, shape (nx, ny), summing to lx * ly."""
    wx = np.full(grid.nx, grid.dx)
    wx[0] = wx[-1] = grid.dx / 2.0
    wy = np.full(grid.ny, grid.dy)
    wy[0] = wy[-1] = grid.dy / 2.0
    return np.outer(wx, wy)


def smooth_speed(u, v):
    return jnp.sqrt(u * u + v * v + EPS_SPEED * EPS_SPEED)


def average_temperature_arrays(u_f, v_f, T_f, u_p, v_p, T_p, w,
                               props: MaterialProps):
    """Mass-flow-weighted mean temperature over weighted nodes (traced)."""
    wf = props.rho_f * props.c_f * smooth_speed(u_f, v_f) * w
    wp = props.rho_p * props.c_p * smooth_speed(u_p, v_p) * w
    num = jnp.sum(wf * T_f) + jnp.sum(wp * T_p)
    den = jnp.sum(wf) + jnp.sum(wp)
    return num / den


def _domain_weights(grid: Grid, domain: Optional[np.ndarray]) -> np.ndarray:
    w = quadrature_weights(grid).ravel()
    if domain is None:
        return w
    mask = np.asarray(domain).ravel()
    if mask.shape != w.shape:
        raise ValueError("domain mask does not match the grid")
    return w * mask.astype(float)


def average_temperature(state: FlowState, props: MaterialProps,
                        domain: Optional[np.ndarray] = None) -> float:
    """Average coolant temperature seen by the moving mass.

    ``domain`` optionally restricts the average to a boolean node mask
    (the design domain); default is the whole grid.
    """
    w = _domain_weights(state.grid, domain)
    moving = (np.abs(state.fluid.u.values) + np.abs(state.fluid.v.values)
              + np.abs(state.particle.u.values)
              + np.abs(state.particle.v.values)) * (w > 0.0)
    if not np.any(moving > 0.0):
        raise UndefinedAverageError(
            "average temperature undefined: no flow in the averaging domain")
    return float(average_temperature_arrays(
        state.fluid.u.values, state.fluid.v.values, state.fluid.T.values,
        state.particle.u.values, state.particle.v.values,
        state.particle.T.values, w, props))


def objective(state: FlowState, pen: PenalizationFields,
              props: MaterialProps,
              domain: Optional[np.ndarray] = None) -> ObjectiveReport:
    """Evaluate J = mean over the design domain of Q * (T_Q - T_ave).

    The mean uses trapezoidal node weights normalized by the domain
    measure, so J carries the units of Q * dT regardless of domain size.
    """
    if state.grid != pen.alpha.grid:
        raise ValueError("state and penalization grids differ")
    t_ave = average_temperature(state, props, domain)
    w = _domain_weights(state.grid, domain)
    measure = w.sum()
    if measure <= 0.0:
        raise ValueError("empty objective domain")
    mask = (w > 0.0).astype(float)
    breakdown = pen.Q.values * (pen.T_Q - t_ave) * mask
    J = float(np.dot(w / measure, breakdown))
    return ObjectiveReport(J=J, T_ave=t_ave, breakdown=breakdown)


def objective_arrays(u_f, v_f, T_f, u_p, v_p, T_p, Q, w, T_Q,
                     props: MaterialProps):
    """Traced objective on raw arrays; ``w`` are domain-masked weights."""
    t_ave = average_temperature_arrays(u_f, v_f, T_f, u_p, v_p, T_p, w, props)
    return jnp.sum(w * Q * (T_Q - t_ave)) / jnp.sum(w), t_ave
