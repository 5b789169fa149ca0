"""Density-method design representation.

Covers the cone-weight convolution filter, the tanh projection, and the two
material interpolations (inverse permeability for the momentum sink, heat
generation coefficient for the energy source).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .grid import Grid, ScalarField


@dataclass(frozen=True)
class InterpolationParams:
    """Parameters of the design-to-material interpolation."""

    alpha_max: float        # solid inverse permeability, kg/(m^3 s)
    q_max: float            # solid heat generation coefficient, W/(m^3 K)
    alpha_min: float = 0.0  # fluid inverse permeability
    q: float = 0.05         # convexity of the permeability interpolation

    def __post_init__(self):
        if not (self.alpha_max > self.alpha_min >= 0.0):
            raise ValueError("need alpha_max > alpha_min >= 0")
        if self.q_max <= 0.0:
            raise ValueError("q_max must be positive")
        if self.q <= 0.0:
            raise ValueError("convex parameter q must be positive")


@dataclass
class DesignField:
    """Raw, filtered, and projected design variables with their parameters."""

    gamma: ScalarField
    gamma_filtered: ScalarField
    gamma_projected: ScalarField
    radius: float  # filter radius, m
    beta: float    # projection slope
    eta: float     # projection threshold

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ValueError("filter radius must be positive")
        if self.beta < 1.0:
            raise ValueError("projection slope must be >= 1")
        if not (0.0 < self.eta < 1.0):
            raise ValueError("projection threshold must lie in (0, 1)")
        for f in (self.gamma, self.gamma_filtered, self.gamma_projected):
            v = f.values
            if np.any(v < -1e-12) or np.any(v > 1.0 + 1e-12):
                raise ValueError("design fields must lie in [0, 1]")


class FilterTable:
    """Precomputed, renormalized cone filter weights.

    Each node k averages nodes i within radius R using w = R - |x_i - x_k|,
    truncated at the domain boundary and renormalized there. The table is a
    fixed-width gather (index, weight) pair per node so applying the filter
    is one take plus one weighted sum, and its adjoint is the exact
    transpose of a linear map.
    """

    def __init__(self, grid: Grid, radius: float):
        if radius <= 0.0:
            raise ValueError("filter radius must be positive")
        self.grid = grid
        self.radius = float(radius)
        nx, ny, dx, dy = grid.nx, grid.ny, grid.dx, grid.dy
        mi = int(np.floor((radius - 1e-15) / dx))
        mj = int(np.floor((radius - 1e-15) / dy))
        if mi == 0 and mj == 0:
            warnings.warn(
                f"filter radius {radius:g} m does not reach past the node spacing "
                f"({dx:g} x {dy:g} m); the filter degenerates to the identity",
                stacklevel=3,
            )
        offs = []
        for di in range(-mi, mi + 1):
            for dj in range(-mj, mj + 1):
                dist = np.hypot(di * dx, dj * dy)
                if dist < radius:
                    offs.append((di, dj, radius - dist))
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        ii = ii.reshape(-1)
        jj = jj.reshape(-1)
        n = grid.n_nodes
        m = len(offs)
        idx = np.zeros((n, m), dtype=np.int32)
        wts = np.zeros((n, m), dtype=np.float64)
        for col, (di, dj, w) in enumerate(offs):
            i2 = ii + di
            j2 = jj + dj
            ok = (i2 >= 0) & (i2 < nx) & (j2 >= 0) & (j2 < ny)
            idx[:, col] = np.where(ok, i2 * ny + j2, 0)
            wts[:, col] = np.where(ok, w, 0.0)
        wts /= wts.sum(axis=1, keepdims=True)
        self.indices = idx
        self.weights = wts

    def apply(self, values):
        """Filter a flat nodal array; jax-traceable."""
        vals = jnp.asarray(values).reshape(-1)
        return jnp.sum(self.weights * jnp.take(vals, self.indices), axis=1)

    def dense_matrix(self) -> np.ndarray:
        """Explicit (n, n) weight matrix; for tests and small grids only."""
        n = self.grid.n_nodes
        mat = np.zeros((n, n))
        rows = np.repeat(np.arange(n), self.indices.shape[1])
        # np.add.at accumulates duplicate (row, col) pairs; += would drop them
        np.add.at(mat, (rows, self.indices.reshape(-1)), self.weights.reshape(-1))
        return mat


def build_filter(grid: Grid, radius: float) -> FilterTable:
    return FilterTable(grid, radius)


def filter_density(gamma: ScalarField, radius: float) -> ScalarField:
    """Cone-weight convolution of the raw design field."""
    table = FilterTable(gamma.grid, radius)
    return ScalarField(gamma.grid, np.asarray(table.apply(gamma.values)))


def project_density_values(values, beta: float, eta: float):
    """tanh projection on a raw array; jax-traceable."""
    num = jnp.tanh(beta * eta) + jnp.tanh(beta * (values - eta))
    den = jnp.tanh(beta * eta) + jnp.tanh(beta * (1.0 - eta))
    return num / den


def project_density(gamma_filtered, beta: float, eta: float = 0.5):
    """Smoothed Heaviside pushing the filtered field toward 0/1.

        proj(g) = [tanh(beta eta) + tanh(beta (g - eta))]
                  / [tanh(beta eta) + tanh(beta (1 - eta))]

    Maps [0,1] onto [0,1], strictly increasing, with fixed endpoints.
    """
    if beta <= 0.0:
        raise ValueError("projection slope beta must be positive")
    if not (0.0 < eta < 1.0):
        raise ValueError("projection threshold eta must lie in (0, 1)")
    if isinstance(gamma_filtered, ScalarField):
        out = project_density_values(gamma_filtered.values, beta, eta)
        return ScalarField(gamma_filtered.grid, np.asarray(out))
    out = project_density_values(gamma_filtered, beta, eta)
    return float(out) if np.ndim(gamma_filtered) == 0 else np.asarray(out)


def _like_input(out, ref):
    # jax inputs (including tracers) pass through untouched so these
    # maps stay differentiable; plain arrays and scalars come back as
    # numpy / float
    if isinstance(ref, jax.Array):
        return out
    return float(out) if np.ndim(ref) == 0 else np.asarray(out)


def inverse_permeability(gamma_proj, params: InterpolationParams):
    """Momentum penalization coefficient, monotone decreasing in the design.

        alpha(g) = alpha_max + (alpha_min - alpha_max) g (1 + q) / (g + q)
    """
    g = jnp.asarray(gamma_proj)
    out = params.alpha_max + (params.alpha_min - params.alpha_max) * g * (1.0 + params.q) / (g + params.q)
    return _like_input(out, gamma_proj)


def inverse_permeability_deriv(gamma_proj, params: InterpolationParams):
    """d alpha / d gamma, analytic."""
    g = jnp.asarray(gamma_proj)
    out = (params.alpha_min - params.alpha_max) * (1.0 + params.q) * params.q / (g + params.q) ** 2
    return _like_input(out, gamma_proj)


def heat_generation_coeff(gamma_proj, params: InterpolationParams):
    """Energy-source coefficient: Q(g) = q_max (1 - g); solid generates, fluid does not."""
    g = jnp.asarray(gamma_proj)
    out = params.q_max * (1.0 - g)
    return _like_input(out, gamma_proj)


def heat_generation_deriv(gamma_proj, params: InterpolationParams):
    g = jnp.asarray(gamma_proj)
    out = jnp.full_like(g, -params.q_max)
    return _like_input(out, gamma_proj)
