"""Boundary segments and the per-variable masks compiled from them.

A rectangular domain has four edges; each edge is tiled by one or more
segments, and every boundary node must belong to exactly one segment.
Segment kinds:

``inlet-pressure``
    Fixed pressure port carrying inflow scalar data (fluid/particle
    temperature and particle volume fraction).
``outlet-pressure``
    Fixed pressure port; temperature and volume fraction leave with zero
    normal gradient (realized by copying from the adjacent interior node).
``inlet-velocity``
    Uniform normal velocity for both phases, with inflow scalar data.
``no-slip-wall``
    Zero velocity for both phases. Optionally isothermal (``T_wall``),
    otherwise adiabatic.
``free-slip-wall`` / ``symmetry``
    Zero normal velocity; tangential velocity, temperature and volume
    fraction keep zero normal gradient (natural treatment, no mask).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import Grid

KINDS = (
    "inlet-pressure",
    "outlet-pressure",
    "inlet-velocity",
    "no-slip-wall",
    "free-slip-wall",
    "symmetry",
)

EDGES = ("left", "right", "bottom", "top")


class BoundaryError(ValueError):
    """Raised for inconsistent or incomplete boundary specifications."""


@dataclass(frozen=True)
class Segment:
    """A contiguous run of boundary nodes sharing one condition.

    ``lo``/``hi`` are inclusive node indices along the edge: j-indices for
    the left/right edges, i-indices for the bottom/top edges.
    """

    kind: str
    edge: str
    lo: int
    hi: int
    p: Optional[float] = None
    u_n: Optional[float] = None
    T_f: Optional[float] = None
    T_p: Optional[float] = None
    phi_p: Optional[float] = None
    T_wall: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise BoundaryError(f"unknown segment kind {self.kind!r}")
        if self.edge not in EDGES:
            raise BoundaryError(f"unknown edge {self.edge!r}")
        if self.lo > self.hi:
            raise BoundaryError(f"segment range [{self.lo}, {self.hi}] is empty")
        if self.kind in ("inlet-pressure", "outlet-pressure") and self.p is None:
            raise BoundaryError(f"{self.kind} segment needs a pressure value")
        if self.kind in ("inlet-pressure", "inlet-velocity"):
            for name in ("T_f", "T_p", "phi_p"):
                if getattr(self, name) is None:
                    raise BoundaryError(f"{self.kind} segment needs {name}")
            if not 0.0 <= self.phi_p < 1.0:
                raise BoundaryError(f"phi_p={self.phi_p} outside [0, 1)")
        if self.kind == "inlet-velocity":
            if self.u_n is None or self.u_n <= 0.0:
                raise BoundaryError("inlet-velocity segment needs u_n > 0")


@dataclass
class BoundaryMasks:
    """Dense per-node boundary data consumed by the solver.

    All 2D arrays have shape (nx, ny). ``*_dir`` arrays are boolean
    Dirichlet masks; the matching ``*_val`` arrays hold the imposed values
    (zero where the mask is false). ``t_gather``/``phi_gather`` are flat
    index maps realizing zero-gradient copies at outlets (identity
    elsewhere). ``qb`` is the prescribed boundary volume influx per unit
    depth at inlet-velocity nodes (m^2/s, positive into the domain).
    """

    u_dir: np.ndarray
    u_val: np.ndarray
    v_dir: np.ndarray
    v_val: np.ndarray
    p_dir: np.ndarray
    p_val: np.ndarray
    t_dir: np.ndarray
    t_f_val: np.ndarray
    t_p_val: np.ndarray
    phi_dir: np.ndarray
    phi_val: np.ndarray
    qb: np.ndarray
    t_gather: np.ndarray
    phi_gather: np.ndarray


def _edge_nodes(grid: Grid, edge: str, lo: int, hi: int):
    if edge in ("left", "right"):
        i = 0 if edge == "left" else grid.nx - 1
        return [(i, j) for j in range(lo, hi + 1)]
    j = 0 if edge == "bottom" else grid.ny - 1
    return [(i, j) for i in range(lo, hi + 1)]


def _edge_extent(grid: Grid, edge: str) -> int:
    return grid.ny if edge in ("left", "right") else grid.nx


def _inward_neighbor(grid: Grid, edge: str, i: int, j: int):
    if edge == "left":
        return (1, j)
    if edge == "right":
        return (grid.nx - 2, j)
    if edge == "bottom":
        return (i, 1)
    return (i, grid.ny - 2)


class BoundarySpec:
    """Validated set of segments covering the whole domain boundary."""

    def __init__(self, grid: Grid, segments: Sequence[Segment]):
        self.grid = grid
        self.segments = tuple(segments)
        self._validate()
        self._masks: Optional[BoundaryMasks] = None

    def _validate(self) -> None:
        grid = self.grid
        seen: dict = {}
        for seg in self.segments:
            n_edge = _edge_extent(grid, seg.edge)
            if seg.lo < 0 or seg.hi >= n_edge:
                raise BoundaryError(
                    f"segment on {seg.edge} spans [{seg.lo}, {seg.hi}] "
                    f"outside 0..{n_edge - 1}"
                )
            for node in _edge_nodes(grid, seg.edge, seg.lo, seg.hi):
                if node in seen:
                    raise BoundaryError(f"boundary node {node} covered twice")
                seen[node] = seg
        # exact cover
        for i in range(grid.nx):
            for j in range(grid.ny):
                if i in (0, grid.nx - 1) or j in (0, grid.ny - 1):
                    if (i, j) not in seen:
                        raise BoundaryError(f"boundary node {(i, j)} uncovered")
        kinds = {s.kind for s in self.segments}
        if "outlet-pressure" not in kinds and "inlet-pressure" not in kinds:
            raise BoundaryError("need at least one pressure port")
        if "inlet-velocity" in kinds and "outlet-pressure" not in kinds:
            raise BoundaryError("inlet-velocity needs an outlet-pressure port")
        self._node_segment = seen

    def masks(self) -> BoundaryMasks:
        if self._masks is not None:
            return self._masks
        grid = self.grid
        nx, ny = grid.nx, grid.ny
        shape = (nx, ny)
        wy = np.full(ny, grid.dy)
        wy[0] = wy[-1] = grid.dy / 2.0
        wx = np.full(nx, grid.dx)
        wx[0] = wx[-1] = grid.dx / 2.0

        m = BoundaryMasks(
            u_dir=np.zeros(shape, bool), u_val=np.zeros(shape),
            v_dir=np.zeros(shape, bool), v_val=np.zeros(shape),
            p_dir=np.zeros(shape, bool), p_val=np.zeros(shape),
            t_dir=np.zeros(shape, bool), t_f_val=np.zeros(shape),
            t_p_val=np.zeros(shape),
            phi_dir=np.zeros(shape, bool), phi_val=np.zeros(shape),
            qb=np.zeros(shape),
            t_gather=np.arange(nx * ny, dtype=np.int32),
            phi_gather=np.arange(nx * ny, dtype=np.int32),
        )

        for seg in self.segments:
            for (i, j) in _edge_nodes(grid, seg.edge, seg.lo, seg.hi):
                k = grid.node_index(i, j)
                if seg.kind == "no-slip-wall":
                    m.u_dir[i, j] = m.v_dir[i, j] = True
                    if seg.T_wall is not None:
                        m.t_dir[i, j] = True
                        m.t_f_val[i, j] = m.t_p_val[i, j] = seg.T_wall
                elif seg.kind in ("free-slip-wall", "symmetry"):
                    if seg.edge in ("left", "right"):
                        m.u_dir[i, j] = True
                    else:
                        m.v_dir[i, j] = True
                elif seg.kind == "inlet-pressure":
                    m.p_dir[i, j] = True
                    m.p_val[i, j] = seg.p
                    m.t_dir[i, j] = True
                    m.t_f_val[i, j] = seg.T_f
                    m.t_p_val[i, j] = seg.T_p
                    m.phi_dir[i, j] = True
                    m.phi_val[i, j] = seg.phi_p
                elif seg.kind == "outlet-pressure":
                    m.p_dir[i, j] = True
                    m.p_val[i, j] = seg.p
                    src = grid.node_index(*_inward_neighbor(grid, seg.edge, i, j))
                    m.t_gather[k] = src
                    m.phi_gather[k] = src
                elif seg.kind == "inlet-velocity":
                    sign = {"left": 1.0, "right": -1.0, "bottom": 1.0, "top": -1.0}
                    m.u_dir[i, j] = m.v_dir[i, j] = True
                    if seg.edge in ("left", "right"):
                        m.u_val[i, j] = sign[seg.edge] * seg.u_n
                        m.qb[i, j] = seg.u_n * wy[j]
                    else:
                        m.v_val[i, j] = sign[seg.edge] * seg.u_n
                        m.qb[i, j] = seg.u_n * wx[i]
                    m.t_dir[i, j] = True
                    m.t_f_val[i, j] = seg.T_f
                    m.t_p_val[i, j] = seg.T_p
                    m.phi_dir[i, j] = True
                    m.phi_val[i, j] = seg.phi_p

        self._masks = m
        return m
