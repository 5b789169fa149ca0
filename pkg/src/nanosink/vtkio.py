"""Legacy-ASCII VTK structured-grid output for converged flow states."""

from __future__ import annotations

from typing import Optional, TextIO

import numpy as np

from .grid import FlowState, Grid

# Point-data blocks, written in exactly this order.
FIELD_ORDER = (
    "u_f",
    "v_f",
    "T_f",
    "phi_p",
    "u_p",
    "v_p",
    "T_p",
    "p",
    "gamma_proj",
)

_FMT = "%.9e"


def _write_block(out: TextIO, name: str, values: np.ndarray, grid: Grid) -> None:
    out.write(f"SCALARS {name} double 1\n")
    out.write("LOOKUP_TABLE default\n")
    # VTK structured points run x fastest; flat node storage runs y fastest.
    table = np.asarray(values, dtype=float).reshape(grid.nx, grid.ny).T
    for row in table:
        out.write(" ".join(_FMT % v for v in row))
        out.write("\n")


def write_vtk(
    state: FlowState,
    gamma_projected: Optional[np.ndarray],
    path,
    *,
    title: str = "nanosink steady state",
) -> None:
    """Write both phase fields, pressure and the projected design to ``path``.

    ``gamma_projected`` may be None (pure-analysis runs without a design); the
    design block is then written as all-fluid. The point-data blocks appear in
    the fixed order ``FIELD_ORDER`` with ``%.9e`` formatting.
    """
    grid = state.grid
    if grid.n_nodes <= 0:
        raise ValueError("cannot write an empty grid")
    if gamma_projected is None:
        gamma_projected = np.ones(grid.n_nodes)
    gamma_projected = np.asarray(gamma_projected, dtype=float).reshape(-1)
    if gamma_projected.size != grid.n_nodes:
        raise ValueError(
            f"design has {gamma_projected.size} values for a grid with {grid.n_nodes} nodes"
        )

    fields = {
        "u_f": state.fluid.u.values,
        "v_f": state.fluid.v.values,
        "T_f": state.fluid.T.values,
        "phi_p": state.particle.phi.values,
        "u_p": state.particle.u.values,
        "v_p": state.particle.v.values,
        "T_p": state.particle.T.values,
        "p": state.p.values,
        "gamma_proj": gamma_projected,
    }

    xs = grid.origin[0] + grid.dx * np.arange(grid.nx)
    ys = grid.origin[1] + grid.dy * np.arange(grid.ny)
    try:
        with open(path, "w", encoding="ascii") as out:
            out.write("# vtk DataFile Version 3.0\n")
            out.write(title.replace("\n", " ")[:255] + "\n")
            out.write("ASCII\n")
            out.write("DATASET STRUCTURED_GRID\n")
            out.write(f"DIMENSIONS {grid.nx} {grid.ny} 1\n")
            out.write(f"POINTS {grid.n_nodes} double\n")
            for y in ys:
                for x in xs:
                    out.write(f"{_FMT % x} {_FMT % y} {_FMT % 0.0}\n")
            out.write(f"POINT_DATA {grid.n_nodes}\n")
            for name in FIELD_ORDER:
                _write_block(out, name, fields[name], grid)
    except OSError as exc:
        raise OSError(f"failed to write VTK file {path}: {exc}") from exc
