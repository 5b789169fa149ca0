"""Structured collocated grid and field containers shared by all modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform quadrilateral mesh with all unknowns stored at the nodes.

    Node (i, j) sits at origin + (i*dx, j*dy). Arrays are stored flat in
    row-major order with i (the x index) outermost: k = i*ny + j.
    """

    nx: int
    ny: int
    dx: float  # m
    dy: float  # m
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3 nodes per direction, got {self.nx}x{self.ny}")
        if self.dx <= 0.0 or self.dy <= 0.0:
            raise ValueError(f"grid spacing must be positive, got dx={self.dx}, dy={self.dy}")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def lx(self) -> float:
        return (self.nx - 1) * self.dx

    @property
    def ly(self) -> float:
        return (self.ny - 1) * self.dy

    def node_index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"node ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return i * self.ny + j

    def node_ij(self, k: int) -> Tuple[int, int]:
        if not (0 <= k < self.n_nodes):
            raise IndexError(f"node index {k} outside grid with {self.n_nodes} nodes")
        return k // self.ny, k % self.ny

    def node_xy(self, k: int) -> Tuple[float, float]:
        i, j = self.node_ij(k)
        return self.origin[0] + i * self.dx, self.origin[1] + j * self.dy

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays of shape (nx, ny)."""
        x = self.origin[0] + self.dx * np.arange(self.nx)
        y = self.origin[1] + self.dy * np.arange(self.ny)
        return np.meshgrid(x, y, indexing="ij")


def make_grid(nx: int, ny: int, lx: float, ly: float, origin: Tuple[float, float] = (0.0, 0.0)) -> Grid:
    """Build an nx-by-ny node grid spanning lx-by-ly; dx = lx/(nx-1)."""
    if nx < 3 or ny < 3:
        raise ValueError(f"need at least 3 nodes per direction, got {nx}x{ny}")
    if lx <= 0.0 or ly <= 0.0:
        raise ValueError(f"domain size must be positive, got lx={lx}, ly={ly}")
    return Grid(nx=int(nx), ny=int(ny), dx=lx / (nx - 1), dy=ly / (ny - 1), origin=origin)


@dataclass
class ScalarField:
    """One scalar unknown sampled at every grid node (flat, row-major)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.grid.n_nodes:
            raise ValueError(
                f"field has {self.values.size} values for a grid with {self.grid.n_nodes} nodes"
            )

    def view2d(self) -> np.ndarray:
        return self.values.reshape(self.grid.nx, self.grid.ny)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())

    def __add__(self, other: "ScalarField") -> "ScalarField":
        if other.grid is not self.grid and other.grid != self.grid:
            raise ValueError("cannot add fields on different grids")
        return ScalarField(self.grid, self.values + other.values)

    def scaled(self, a: float) -> "ScalarField":
        return ScalarField(self.grid, a * self.values)


def uniform_field(grid: Grid, value: float) -> ScalarField:
    return ScalarField(grid, np.full(grid.n_nodes, float(value)))


def gradient_at(fld: ScalarField, node: int) -> Tuple[float, float]:
    """(d/dx, d/dy) at one node: central in the interior, one-sided on boundaries."""
    g = fld.grid
    i, j = g.node_ij(node)  # raises on out-of-range
    a = fld.view2d()
    if i == 0:
        ddx = (a[1, j] - a[0, j]) / g.dx
    elif i == g.nx - 1:
        ddx = (a[i, j] - a[i - 1, j]) / g.dx
    else:
        ddx = (a[i + 1, j] - a[i - 1, j]) / (2.0 * g.dx)
    if j == 0:
        ddy = (a[i, 1] - a[i, 0]) / g.dy
    elif j == g.ny - 1:
        ddy = (a[i, j] - a[i, j - 1]) / g.dy
    else:
        ddy = (a[i, j + 1] - a[i, j - 1]) / (2.0 * g.dy)
    return float(ddx), float(ddy)


@dataclass
class PhaseState:
    """Velocity, temperature and volume fraction of one phase."""

    u: ScalarField  # m/s
    v: ScalarField  # m/s
    T: ScalarField  # K
    phi: ScalarField  # volume fraction

    def __post_init__(self):
        g = self.u.grid
        for f in (self.v, self.T, self.phi):
            if f.grid != g:
                raise ValueError("phase fields must share one grid")


@dataclass
class FlowState:
    """Both phases plus the shared pressure field."""

    fluid: PhaseState
    particle: PhaseState
    p: ScalarField  # Pa

    def __post_init__(self):
        if self.fluid.u.grid != self.particle.u.grid or self.fluid.u.grid != self.p.grid:
            raise ValueError("both phases and the pressure must share one grid")

    @property
    def grid(self) -> Grid:
        return self.p.grid


def make_flow_state(
    grid: Grid,
    uf=0.0, vf=0.0, tf=300.0,
    up=0.0, vp=0.0, tp=300.0,
    phi_p=0.0, p=0.0,
) -> FlowState:
    """Assemble a FlowState; the fluid fraction is stored as 1 - phi_p by construction."""

    def as_field(v):
        if isinstance(v, ScalarField):
            return v.copy()
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 0:
            return uniform_field(grid, float(v))
        return ScalarField(grid, v)

    phi_p_f = as_field(phi_p)
    if np.any(phi_p_f.values < 0.0) or np.any(phi_p_f.values > 1.0):
        raise ValueError("particle volume fraction must lie in [0, 1]")
    phi_f_f = ScalarField(grid, 1.0 - phi_p_f.values)
    fluid = PhaseState(as_field(uf), as_field(vf), as_field(tf), phi_f_f)
    particle = PhaseState(as_field(up), as_field(vp), as_field(tp), phi_p_f)
    return FlowState(fluid, particle, as_field(p))
