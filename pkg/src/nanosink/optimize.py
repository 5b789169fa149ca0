"""Topology-optimization driver: projection continuation around GCMMA.

Each continuation stage holds the projection slope beta fixed and
iterates gradient evaluation + GCMMA update until the relative change
of the objective between consecutive iterations drops below the
schedule tolerance (or the per-stage iteration cap is hit). Beta then
doubles and the loop continues from the current design. Flow solves are
warm-started from the previous design's converged state, and the
adjoint from the previous adjoint.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .config import CaseConfig, initial_design
from .mma import MmaState, convergence_check, mma_update
from .sensitivity import (
    CaseAssembly,
    DesignSolution,
    GradientUnavailableError,
    SensitivityField,
    _material_arrays,
    assemble,
    gradient,
    solve_design,
)
from .solver import SolverDivergedError

log = logging.getLogger("nanosink.optimize")

CSV_COLUMNS = ("iteration", "stage", "beta", "J", "T_ave", "design_change",
               "solver_iterations", "adjoint_iterations", "mma_inner",
               "residual", "imbalance_fluid", "imbalance_particle")


@dataclass
class IterationRow:
    iteration: int
    stage: int
    beta: float
    J: float
    T_ave: float
    design_change: float
    solver_iterations: int
    adjoint_iterations: int
    mma_inner: int
    residual: float
    imbalance_fluid: float
    imbalance_particle: float


@dataclass
class OptimizationRecord:
    case_name: str
    rows: List[IterationRow] = field(default_factory=list)
    stage_betas: List[float] = field(default_factory=list)
    stage_converged: List[bool] = field(default_factory=list)
    converged: bool = False
    aborted: bool = False
    stagnant: bool = False
    used_absolute_convergence: bool = False
    message: str = ""
    wall_time: float = 0.0

    @property
    def J_history(self) -> np.ndarray:
        return np.array([r.J for r in self.rows])


@dataclass
class OptimizationResult:
    gamma: np.ndarray
    gamma_projected: np.ndarray
    solution: Optional[DesignSolution]
    record: OptimizationRecord


def write_history_csv(record: OptimizationRecord, path) -> None:
    """One header row plus exactly one row per optimization iteration."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_COLUMNS)
        for r in record.rows:
            wr.writerow([r.iteration, r.stage, format(r.beta, ".17g"),
                         format(r.J, ".17g"), format(r.T_ave, ".17g"),
                         format(r.design_change, ".17g"),
                         r.solver_iterations, r.adjoint_iterations,
                         r.mma_inner,
                         format(r.residual, ".17g"),
                         format(r.imbalance_fluid, ".17g"),
                         format(r.imbalance_particle, ".17g")])


def _row(it, stage, beta, sens: SensitivityField, change, inner):
    res = max(v for v in sens.report.residuals.values())
    return IterationRow(iteration=it, stage=stage, beta=beta, J=sens.J,
                        T_ave=sens.T_ave, design_change=change,
                        solver_iterations=sens.report.iterations,
                        adjoint_iterations=sens.adjoint_iterations,
                        mma_inner=inner, residual=res,
                        imbalance_fluid=sens.report.imbalance_fluid,
                        imbalance_particle=sens.report.imbalance_particle)


def run_optimization(case: CaseConfig, *,
                     assembly: Optional[CaseAssembly] = None,
                     gamma0: Optional[np.ndarray] = None,
                     snapshot: Optional[Callable] = None,
                     snapshot_every: int = 0) -> OptimizationResult:
    """Maximize the heat-transfer objective over the design domain.

    Runs the full continuation schedule and returns the final design,
    its converged flow solution, and the per-iteration record. A solver
    failure mid-run aborts and returns the last good design with the
    history accumulated so far. ``snapshot(iteration, sens)`` is called
    every ``snapshot_every`` accepted iterations when provided.
    """
    t0 = time.perf_counter()
    a = assembly if assembly is not None else assemble(case)
    gamma = (initial_design(case, a.grid) if gamma0 is None
             else np.asarray(gamma0, dtype=np.float64).ravel().copy())
    record = OptimizationRecord(case_name=case.name)
    state = MmaState(move_limit=case.move)
    warm = None
    adjoint = None
    sens = None
    gamma_good = gamma
    it = 0

    def finish(sol, gp):
        record.wall_time = time.perf_counter() - t0
        return OptimizationResult(gamma=gamma, gamma_projected=gp,
                                  solution=sol, record=record)

    for stage, beta in enumerate(case.schedule.betas()):
        record.stage_betas.append(beta)
        J_hist: List[float] = []
        stage_done = False
        log.info("stage %d: beta=%g", stage, beta)
        for _ in range(case.schedule.stage_iters):
            it += 1
            try:
                sens = gradient(case, gamma, beta, assembly=a, warm=warm,
                                adjoint_warm=adjoint)
            except (GradientUnavailableError, SolverDivergedError) as e:
                record.aborted = True
                record.message = str(e)
                log.warning("aborting at iteration %d: %s", it, e)
                if sens is None:
                    gp = np.asarray(_material_arrays(a, gamma, beta)[2])
                    return finish(None, gp)
                gamma = gamma_good
                return finish(sens.solution, sens.gamma_projected)
            warm, adjoint = sens.solution, sens.adjoint
            gamma_good = gamma
            J_hist.append(sens.J)

            done, used_abs = convergence_check(J_hist, case.schedule.eps)
            record.used_absolute_convergence |= used_abs
            if done:
                # drop the re-evaluation row: the design did not change
                record.rows.append(_row(it, stage, beta, sens, 0.0, 0))
                stage_done = True
                break

            cache = {}

            def evaluate(x):
                sol = solve_design(case, x, beta, assembly=a,
                                   warm=sens.solution)
                if not sol.report.converged:
                    raise GradientUnavailableError(
                        f"flow solve did not converge during the design "
                        f"update: {sol.report.message}", sol.report)
                cache["x"], cache["sol"] = x, sol
                return sol.J

            try:
                gamma_new, state = mma_update(gamma, sens.J, sens.values,
                                              state, evaluate=evaluate)
            except (GradientUnavailableError, SolverDivergedError) as e:
                record.rows.append(_row(it, stage, beta, sens, 0.0, 0))
                record.aborted = True
                record.message = str(e)
                log.warning("aborting at iteration %d: %s", it, e)
                return finish(sens.solution, sens.gamma_projected)

            if state.stagnant:
                record.rows.append(_row(it, stage, beta, sens, 0.0, 0))
                record.stagnant = True
                record.message = f"zero gradient at iteration {it}"
                log.info("stagnation: %s", record.message)
                return finish(sens.solution, sens.gamma_projected)

            change = float(np.max(np.abs(gamma_new - gamma)))
            record.rows.append(_row(it, stage, beta, sens, change,
                                    state.inner_iterations))
            gamma = gamma_new
            if "x" in cache and cache["x"] is gamma_new:
                warm = cache["sol"]
            if snapshot is not None and snapshot_every > 0 \
                    and it % snapshot_every == 0:
                snapshot(it, sens)
        record.stage_converged.append(stage_done)

    record.converged = bool(record.stage_converged
                            and record.stage_converged[-1])
    # final analysis at the last design and the final beta
    beta_final = record.stage_betas[-1]
    sol = solve_design(case, gamma, beta_final, assembly=a, warm=warm)
    return finish(sol, sol.gamma_projected)
