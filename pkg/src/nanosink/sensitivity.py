"""Design sensitivities of the heat-transfer objective.

The chain design -> filter -> projection -> material fields -> flow
state -> objective is differentiated in reverse. The flow state is the
fixed point of the solver sweep, so the pullback through the solve is
computed one of two ways:

``implicit`` (default)
    Adjoint fixed-point iteration: the converged sweep is linearized at
    the solution and the adjoint state is iterated with the transposed
    sweep until it stops changing. Memory cost is one sweep tape
    regardless of how many forward iterations the solve took.
``tape``
    Differentiates through the last ``tape_sweeps`` sweeps replayed
    from the converged state. Simpler but biased when the replayed tail
    is shorter than the solver's memory of the design perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from .boundary import BoundarySpec
from .config import CaseConfig, build_boundary, build_grid, design_mask
from .design import (
    FilterTable,
    heat_generation_coeff,
    inverse_permeability,
    project_density_values,
)
from .grid import FlowState, Grid, ScalarField
from .objective import _domain_weights, objective_arrays
from .solver import (
    ConvergenceReport,
    PenalizationFields,
    SolverDivergedError,
    _arrays_to_state,
    _build_params,
    _run_sweeps,
    _state_arrays,
    _sweep,
    apply_boundary_conditions,
    initial_state,
)

ADJOINT_RTOL = 1e-10


class GradientUnavailableError(RuntimeError):
    """The flow or adjoint solve did not converge; carries the report."""

    def __init__(self, message: str, report: Optional[ConvergenceReport]):
        super().__init__(message)
        self.report = report


@dataclass
class CaseAssembly:
    """Reusable per-case plumbing shared by repeated design evaluations."""

    case: CaseConfig
    grid: Grid
    bc: BoundarySpec
    table: Optional[FilterTable]
    mask: np.ndarray      # flat bool, True inside the design domain
    weights: np.ndarray   # (nx, ny) quadrature weights masked to the domain
    P: dict
    static: tuple


@dataclass
class DesignSolution:
    state: FlowState
    report: ConvergenceReport
    J: float
    T_ave: float
    gamma_projected: np.ndarray
    # converged sweep arrays including the pressure-linked face fluxes;
    # this, not the nodal state, is the fixed point the adjoint needs
    arrays: dict = None


@dataclass
class SensitivityField:
    """dJ/dgamma on the full grid; zero outside the design domain."""

    grid: Grid
    values: np.ndarray
    J: float
    T_ave: float
    state: FlowState
    report: ConvergenceReport
    gamma_projected: np.ndarray
    adjoint: object = None       # adjoint state, reusable as warm start
    adjoint_iterations: int = 0
    solution: Optional[DesignSolution] = None


def assemble(case: CaseConfig) -> CaseAssembly:
    if case.interp is None:
        raise ValueError(f"case {case.name!r} has no penalization parameters")
    grid = build_grid(case)
    bc = build_boundary(case, grid)
    mask = design_mask(case, grid)
    if not mask.any():
        raise ValueError(f"case {case.name!r} has no design domain")
    table = FilterTable(grid, case.radius) if case.radius is not None else None
    zero = ScalarField(grid, np.zeros(grid.n_nodes))
    pen0 = PenalizationFields(zero, zero, case.T_Q)
    P, static = _build_params(grid, case.props, bc, pen0, case.settings)
    weights = _domain_weights(grid, mask).reshape(grid.nx, grid.ny)
    return CaseAssembly(case=case, grid=grid, bc=bc, table=table, mask=mask,
                        weights=weights, P=P, static=static)


def _material_arrays(a: CaseAssembly, gamma, beta: float):
    """Traceable design chain: gamma -> (alpha, Q) as (nx, ny) arrays."""
    g = jnp.asarray(gamma).ravel()
    gf = a.table.apply(g) if a.table is not None else g
    gp = project_density_values(gf, beta, a.case.eta)
    md = jnp.asarray(a.mask, dtype=jnp.float64)
    alpha = inverse_permeability(gp, a.case.interp) * md
    Q = heat_generation_coeff(gp, a.case.interp) * md
    shape = (a.grid.nx, a.grid.ny)
    return alpha.reshape(shape), Q.reshape(shape), gp


def _objective_of(a: CaseAssembly):
    w = jnp.asarray(a.weights)
    props, T_Q = a.case.props, a.case.T_Q

    def J_fun(s, alpha, Q):
        J, _ = objective_arrays(s["u_f"], s["v_f"], s["T_f"],
                                s["u_p"], s["v_p"], s["T_p"],
                                Q, w, T_Q, props)
        return J

    return J_fun


def _check_gamma(a: CaseAssembly, gamma) -> np.ndarray:
    g = np.asarray(gamma, dtype=np.float64).ravel()
    if g.shape != (a.grid.n_nodes,):
        raise ValueError(f"design field has {g.size} values for a grid "
                         f"with {a.grid.n_nodes} nodes")
    return g


def solve_design(case: CaseConfig, gamma, beta: float = 1.0, *,
                 assembly: Optional[CaseAssembly] = None,
                 warm=None) -> DesignSolution:
    """Solve the flow for one design and evaluate the objective.

    ``warm`` may be a FlowState, a previous DesignSolution (whose
    converged sweep arrays give the cheapest restart), or None for the
    standard cold start.
    """
    a = assembly if assembly is not None else assemble(case)
    g = _check_gamma(a, gamma)
    alpha, Q, gp = _material_arrays(a, g, beta)
    Pd = dict(a.P)
    Pd["alpha"], Pd["Q"] = alpha, Q
    if isinstance(warm, DesignSolution):
        s0 = warm.arrays
    elif isinstance(warm, FlowState):
        s0 = _state_arrays(apply_boundary_conditions(warm, a.bc), a.grid)
    else:
        s0 = _state_arrays(initial_state(a.grid, case.props, a.bc), a.grid)
    s, report = _run_sweeps(Pd, a.static, case.settings, s0)
    Jv, t_ave = objective_arrays(s["u_f"], s["v_f"], s["T_f"],
                                 s["u_p"], s["v_p"], s["T_p"],
                                 Q, jnp.asarray(a.weights),
                                 case.T_Q, case.props)
    return DesignSolution(state=_arrays_to_state(a.grid, s), report=report,
                          J=float(Jv), T_ave=float(t_ave),
                          gamma_projected=np.asarray(gp), arrays=s)


def _leaf_converged(new, old) -> bool:
    for n, o in zip(jax.tree_util.tree_leaves(new),
                    jax.tree_util.tree_leaves(old)):
        scale = float(jnp.max(jnp.abs(n)))
        diff = float(jnp.max(jnp.abs(n - o)))
        if diff > ADJOINT_RTOL * scale + 1e-300:
            return False
    return True


def _implicit_pullback(a: CaseAssembly, s_star, alpha, Q, lam0,
                       report: ConvergenceReport):
    """Adjoint fixed point: lam = dJ/ds + lam * dF/ds, then pull to (alpha, Q).

    Convergence is judged on the pulled-back material-field gradients
    rather than on the adjoint state itself: components of the adjoint
    that live on stagnant nodes can drift along neutral directions of
    the linearized sweep, but those directions have exactly zero
    pullback onto the material fields.
    """
    J_fun = _objective_of(a)

    def F(s, al, qh):
        Pd = dict(a.P)
        Pd["alpha"], Pd["Q"] = al, qh
        return _sweep(a.static, Pd, s)

    _, vjp_F = jax.vjp(F, s_star, alpha, Q)
    gJ_s, gJ_a, gJ_q = jax.grad(J_fun, argnums=(0, 1, 2))(s_star, alpha, Q)

    lam = gJ_s if lam0 is None else lam0
    grads = (gJ_a, gJ_q)
    its = 0
    for its in range(1, a.case.settings.max_iter + 1):
        pull_s, pull_a, pull_q = vjp_F(lam)
        lam = jax.tree_util.tree_map(jnp.add, gJ_s, pull_s)
        new = (gJ_a + pull_a, gJ_q + pull_q)
        if not all(bool(jnp.all(jnp.isfinite(g))) for g in new):
            raise GradientUnavailableError(
                f"adjoint iteration produced non-finite values at sweep {its}",
                report)
        done = _leaf_converged(new, grads)
        grads = new
        if done and its >= 2:
            break
    else:
        raise GradientUnavailableError(
            f"adjoint iteration did not converge within "
            f"{a.case.settings.max_iter} sweeps", report)

    return grads[0], grads[1], lam, its


def _tape_pullback(a: CaseAssembly, s_star, gamma, beta: float):
    """Differentiate through tape_sweeps replayed sweeps."""
    s0 = jax.tree_util.tree_map(jax.lax.stop_gradient, s_star)
    J_fun = _objective_of(a)

    def loss(g):
        alpha, Q, _ = _material_arrays(a, g, beta)
        Pd = dict(a.P)
        Pd["alpha"], Pd["Q"] = alpha, Q

        def body(s, _):
            return _sweep(a.static, Pd, s), None

        sK, _ = jax.lax.scan(body, s0, xs=None,
                             length=a.case.tape_sweeps)
        return J_fun(sK, alpha, Q)

    return jax.grad(loss)(jnp.asarray(gamma))


def gradient(case: CaseConfig, gamma, beta: float = 1.0, *,
             assembly: Optional[CaseAssembly] = None,
             warm=None, adjoint_warm=None) -> SensitivityField:
    """dJ/dgamma for one design; solves the flow as a side effect.

    Raises GradientUnavailableError when the flow solve diverges or does
    not converge, or when the adjoint iteration fails; the error carries
    the convergence report of the offending solve.
    """
    a = assembly if assembly is not None else assemble(case)
    g = _check_gamma(a, gamma)
    try:
        sol = solve_design(case, g, beta, assembly=a, warm=warm)
    except SolverDivergedError as e:
        raise GradientUnavailableError(str(e), e.report) from e
    if not sol.report.converged:
        raise GradientUnavailableError(
            f"flow solve did not converge: {sol.report.message}", sol.report)

    s_star = sol.arrays
    lam = None
    its = 0
    if case.gradient_mode == "tape":
        g_gamma = _tape_pullback(a, s_star, g, beta)
    else:
        alpha, Q, _ = _material_arrays(a, g, beta)
        g_alpha, g_Q, lam, its = _implicit_pullback(
            a, s_star, alpha, Q, adjoint_warm, sol.report)
        _, vjp_design = jax.vjp(
            lambda gg: _material_arrays(a, gg, beta)[:2], jnp.asarray(g))
        (g_gamma,) = vjp_design((g_alpha, g_Q))

    values = np.where(a.mask, np.asarray(g_gamma).ravel(), 0.0)
    if not np.all(np.isfinite(values)):
        raise GradientUnavailableError("non-finite sensitivity values",
                                       sol.report)
    return SensitivityField(grid=a.grid, values=values, J=sol.J,
                            T_ave=sol.T_ave, state=sol.state,
                            report=sol.report,
                            gamma_projected=sol.gamma_projected,
                            adjoint=lam, adjoint_iterations=its,
                            solution=sol)
