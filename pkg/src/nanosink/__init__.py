"""Two-phase nanofluid flow solver with density-based topology optimization.

The package couples a steady Eulerian-Eulerian solver for a dilute
copper-water nanofluid with a Brinkman-penalized density method so that
microchannel flow fields can be designed for maximum solid-to-coolant heat
transfer under a fixed pressure drop.
"""

import jax

# The solver iterates fixed points to 1e-6 and differentiates through them;
# float32 is not an option.
jax.config.update("jax_enable_x64", True)

from .grid import Grid, ScalarField, PhaseState, FlowState, make_grid, gradient_at
from .closures import (
    MaterialProps,
    particle_reynolds,
    drag_coefficient,
    momentum_exchange,
    interphase_heat_coeff,
    effective_conductivities,
)
from .design import (
    DesignField,
    InterpolationParams,
    FilterTable,
    build_filter,
    filter_density,
    project_density,
    inverse_permeability,
    heat_generation_coeff,
)

__version__ = "0.1.0"
