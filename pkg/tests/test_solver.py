"""Solver behavior on small cases: exact oracles, invariants, failure paths.

The acceptance-scale validation lives in test_acceptance.py; everything
here runs on desk-size grids so the whole file stays fast.
"""

import dataclasses

import numpy as np
import pytest

from nanosink.boundary import BoundarySpec, Segment
from nanosink.closures import water_copper
from nanosink.grid import ScalarField, make_flow_state, make_grid, uniform_field
from nanosink.solver import (
    PenalizationFields,
    SolverDivergedError,
    SolverSettings,
    apply_boundary_conditions,
    initial_state,
    residual_max,
    solve_steady,
)

PROPS = water_copper()

BLOCK = (slice(7, 13), slice(3, 7))


def channel_bc(grid, dp=10.0, phi=0.01, T_in=293.0):
    nx, ny = grid.nx, grid.ny
    segs = (
        Segment("no-slip-wall", "bottom", 0, nx - 1),
        Segment("no-slip-wall", "top", 0, nx - 1),
        Segment("inlet-pressure", "left", 1, ny - 2, p=dp,
                T_f=T_in, T_p=T_in, phi_p=phi),
        Segment("outlet-pressure", "right", 1, ny - 2, p=0.0),
    )
    return BoundarySpec(grid, segs)


def ported_bc(grid, dp=300.0, phi=0.01, T_in=293.0):
    """Ports on part of the left/right edges, walls elsewhere."""
    nx, ny = grid.nx, grid.ny
    segs = (
        Segment("no-slip-wall", "bottom", 0, nx - 1),
        Segment("no-slip-wall", "top", 0, nx - 1),
        Segment("inlet-pressure", "left", 2, ny - 3, p=dp,
                T_f=T_in, T_p=T_in, phi_p=phi),
        Segment("no-slip-wall", "left", 1, 1),
        Segment("no-slip-wall", "left", ny - 2, ny - 2),
        Segment("outlet-pressure", "right", 2, ny - 3, p=0.0),
        Segment("no-slip-wall", "right", 1, 1),
        Segment("no-slip-wall", "right", ny - 2, ny - 2),
    )
    return BoundarySpec(grid, segs)


def zero_pen(grid, T_Q=350.0):
    z = uniform_field(grid, 0.0)
    return PenalizationFields(z, z, T_Q)


def block_pen(grid, a_bar=1e12, q_bar=1.5e10, T_Q=350.0):
    alpha = np.zeros((grid.nx, grid.ny))
    Q = np.zeros((grid.nx, grid.ny))
    alpha[BLOCK] = a_bar
    Q[BLOCK] = q_bar
    return PenalizationFields(ScalarField(grid, alpha.ravel()),
                              ScalarField(grid, Q.ravel()), T_Q)


@pytest.fixture(scope="module")
def desk():
    """Heated solid block in a 20x10 ported cavity, solved once."""
    grid = make_grid(20, 10, 9e-5, 6e-5)
    bc = ported_bc(grid)
    pen = block_pen(grid)
    settings = SolverSettings()
    state, rep = solve_steady(grid, PROPS, bc, pen, settings,
                              initial_state(grid, PROPS, bc))
    return grid, bc, pen, settings, state, rep


# ------------------------------------------------------------ settings

def test_settings_defaults():
    s = SolverSettings()
    assert s.relax_u == 0.5
    assert s.relax_p == 0.3
    assert s.relax_T == 0.7
    assert s.relax_phi == 0.5
    assert s.flux_tol == 1e-4


@pytest.mark.parametrize("kw", [
    {"relax_u": 0.0}, {"relax_p": 1.2}, {"relax_T": -0.5},
    {"tol_u": 0.0}, {"tol_T": -1e-6}, {"max_iter": 0},
])
def test_settings_validation(kw):
    with pytest.raises(ValueError):
        SolverSettings(**kw)


def test_penalization_validation():
    g = make_grid(5, 4, 1.0, 1.0)
    with pytest.raises(ValueError):
        PenalizationFields(uniform_field(g, -1.0), uniform_field(g, 0.0), 350.0)
    g2 = make_grid(5, 5, 1.0, 1.0)
    with pytest.raises(ValueError):
        PenalizationFields(uniform_field(g, 0.0), uniform_field(g2, 0.0), 350.0)


def test_solver_rejects_penalization_on_other_grid():
    g = make_grid(6, 5, 1.0, 1.0)
    g2 = make_grid(6, 6, 1.0, 1.0)
    bc = channel_bc(g)
    with pytest.raises(ValueError):
        solve_steady(g, PROPS, bc, zero_pen(g2), SolverSettings(),
                     initial_state(g, PROPS, bc))


# ------------------------------------------------------------ residuals

def test_residual_max_zero_for_identical_states():
    g = make_grid(5, 4, 1.0, 1.0)
    a = make_flow_state(g, uf=1.0, tf=300.0, phi_p=0.01)
    b = make_flow_state(g, uf=1.0, tf=300.0, phi_p=0.01)
    r = residual_max(a, b)
    assert set(r) == {"u_f", "v_f", "T_f", "u_p", "v_p", "T_p", "phi_p", "p"}
    assert all(v == 0.0 for v in r.values())


def test_residual_max_reports_largest_change():
    g = make_grid(5, 4, 1.0, 1.0)
    a = make_flow_state(g, tf=300.0)
    vals = np.full(g.n_nodes, 300.0)
    vals[7] = 302.5
    b = make_flow_state(g, tf=ScalarField(g, vals))
    assert residual_max(b, a)["T_f"] == pytest.approx(2.5)
    assert residual_max(b, a)["u_f"] == 0.0


def test_residual_max_grid_mismatch():
    a = make_flow_state(make_grid(5, 4, 1.0, 1.0))
    b = make_flow_state(make_grid(4, 4, 1.0, 1.0))
    with pytest.raises(ValueError):
        residual_max(a, b)


# ------------------------------------------------------ boundary handling

def test_apply_bcs_idempotent():
    g = make_grid(8, 6, 1.0, 1.0)
    bc = channel_bc(g, dp=40.0, phi=0.02)
    rng = np.random.default_rng(0)
    state = make_flow_state(
        g, uf=rng.normal(size=g.n_nodes), vf=rng.normal(size=g.n_nodes),
        tf=300.0 + rng.normal(size=g.n_nodes), up=rng.normal(size=g.n_nodes),
        vp=rng.normal(size=g.n_nodes), tp=300.0 + rng.normal(size=g.n_nodes),
        phi_p=rng.uniform(0.0, 0.1, g.n_nodes), p=rng.normal(size=g.n_nodes))
    once = apply_boundary_conditions(state, bc)
    twice = apply_boundary_conditions(once, bc)
    assert all(v == 0.0 for v in residual_max(twice, once).values())


def test_apply_bcs_sets_port_and_wall_values():
    g = make_grid(8, 6, 1.0, 1.0)
    bc = channel_bc(g, dp=40.0, phi=0.02, T_in=290.0)
    state = make_flow_state(g, uf=1.0, vf=1.0, up=1.0, vp=1.0,
                            tf=320.0, tp=320.0, phi_p=0.05, p=7.0)
    out = apply_boundary_conditions(state, bc)
    u = out.fluid.u.values.reshape(8, 6)
    v = out.particle.v.values.reshape(8, 6)
    assert np.all(u[:, 0] == 0.0) and np.all(u[:, -1] == 0.0)
    assert np.all(v[:, 0] == 0.0) and np.all(v[:, -1] == 0.0)
    p = out.p.values.reshape(8, 6)
    assert np.all(p[0, 1:-1] == 40.0) and np.all(p[-1, 1:-1] == 0.0)
    T = out.fluid.T.values.reshape(8, 6)
    phi = out.particle.phi.values.reshape(8, 6)
    assert np.all(T[0, 1:-1] == 290.0)
    assert np.all(phi[0, 1:-1] == 0.02)
    # outlet scalars copy the neighboring interior values
    assert np.all(T[-1, 1:-1] == 320.0)
    assert np.all(phi[-1, 1:-1] == 0.05)
    # fluid fraction mirrors the updated particle fraction
    assert np.allclose(out.fluid.phi.values + out.particle.phi.values, 1.0)


def test_initial_state_layout():
    g = make_grid(9, 5, 3.0, 1.0)
    bc = channel_bc(g, dp=60.0, phi=0.03, T_in=291.0)
    s0 = initial_state(g, PROPS, bc)
    assert np.all(s0.fluid.u.values == 0.0)
    assert np.all(s0.particle.v.values == 0.0)
    p = s0.p.values.reshape(9, 5)
    x = np.linspace(0.0, 3.0, 9)
    assert np.allclose(p[:, 2], 60.0 * (1.0 - x / 3.0))
    assert np.all(s0.fluid.T.values == 291.0)
    inner = s0.particle.phi.values.reshape(9, 5)[1:-1, 1:-1]
    assert np.all(inner == 0.03)


# ------------------------------------------------------------ Poiseuille

def poiseuille_setup(nx=41, ny=21, dp=10.0):
    lx, ly = 600e-6, 60e-6
    grid = make_grid(nx, ny, lx, ly)
    bc = channel_bc(grid, dp=dp, phi=0.0)
    y = np.linspace(0.0, ly, ny)
    u_exact = dp / (2.0 * PROPS.mu_f * lx) * y * (ly - y)
    return grid, bc, u_exact


def test_poiseuille_profile_matches_parabola():
    grid, bc, u_exact = poiseuille_setup()
    settings = SolverSettings(tol_u=1e-8, tol_v=1e-8, tol_T=1e-8,
                              max_iter=5000)
    state, rep = solve_steady(grid, PROPS, bc, zero_pen(grid), settings,
                              initial_state(grid, PROPS, bc))
    assert rep.converged
    u = state.fluid.u.values.reshape(grid.nx, grid.ny)
    mid = u[grid.nx // 2]
    assert np.abs(mid - u_exact).max() / u_exact.max() < 1e-3
    # symmetric about the centerline, no cross-flow
    assert np.abs(mid - mid[::-1]).max() / u_exact.max() < 1e-9
    v = state.fluid.v.values
    assert np.abs(v).max() < 1e-6 * u_exact.max()


def test_poiseuille_is_discrete_fixed_point():
    grid, bc, u_exact = poiseuille_setup()
    nx, ny = grid.nx, grid.ny
    u0 = np.tile(u_exact, (nx, 1)).ravel()
    x = np.linspace(0.0, grid.lx, nx)
    p0 = np.tile(10.0 * (1.0 - x / grid.lx)[:, None], (1, ny)).ravel()
    exact = apply_boundary_conditions(
        make_flow_state(grid, uf=u0, up=u0, tf=293.0, tp=293.0,
                        phi_p=0.0, p=p0), bc)
    settings = SolverSettings(tol_u=1e-9, tol_v=1e-9, tol_T=1e-9, max_iter=8)
    state, rep = solve_steady(grid, PROPS, bc, zero_pen(grid), settings, exact)
    assert rep.converged and rep.iterations == 2
    drift = residual_max(state, exact)
    assert drift["u_f"] < 1e-9 * u_exact.max()
    assert drift["p"] < 1e-9 * 10.0


# ------------------------------------------------------ invariants (desk)

def test_desk_case_converges(desk):
    *_, rep = desk
    assert rep.converged
    assert rep.message == "converged"
    assert rep.iterations < 1000


def test_mass_conservation_per_phase(desk):
    *_, rep = desk
    assert rep.imbalance_fluid <= 1e-4
    assert rep.imbalance_particle <= 1e-4


def test_temperature_bounded_by_sources(desk):
    _, _, pen, _, state, _ = desk
    for T in (state.fluid.T.values, state.particle.T.values):
        assert T.min() >= 293.0 - 0.1
        assert T.max() <= pen.T_Q + 0.1


def test_velocity_suppressed_in_solid(desk):
    grid, _, _, _, state, _ = desk
    for ph in (state.fluid, state.particle):
        speed = np.hypot(ph.u.values, ph.v.values).reshape(grid.nx, grid.ny)
        assert speed[BLOCK].max() < 1e-3 * speed.max()


def test_particle_fraction_stays_uniform(desk):
    _, _, _, _, state, _ = desk
    assert np.allclose(state.particle.phi.values, 0.01, atol=1e-12)


def test_report_history_layout(desk):
    *_, rep = desk
    assert rep.history.shape == (rep.iterations, 10)
    assert np.all(np.isfinite(rep.history))
    # residuals fell by orders of magnitude from the first sweep
    assert rep.history[-1, 0] < 1e-3 * rep.history[0, 0]


def test_deterministic_resolve(desk):
    grid, bc, pen, settings, state, rep = desk
    again, rep2 = solve_steady(grid, PROPS, bc, pen, settings,
                               initial_state(grid, PROPS, bc))
    assert rep2.iterations == rep.iterations
    assert all(v == 0.0 for v in residual_max(again, state).values())


def test_warm_start_is_consistent(desk):
    # face fluxes are rebuilt from nodal values on entry, so a warm start
    # still needs some sweeps, but fewer than cold, and lands on the
    # same answer
    grid, bc, pen, settings, state, rep = desk
    warm, rep2 = solve_steady(grid, PROPS, bc, pen, settings, state)
    assert rep2.converged
    assert rep2.iterations < rep.iterations
    u_scale = np.abs(state.fluid.u.values).max()
    assert residual_max(warm, state)["u_f"] < 1e-4 * u_scale


def test_temperature_translation_symmetry(desk):
    grid, _, _, settings, state, _ = desk
    bc1 = ported_bc(grid, T_in=294.0)
    pen1 = block_pen(grid, T_Q=351.0)
    shifted, rep = solve_steady(grid, PROPS, bc1, pen1, settings,
                                initial_state(grid, PROPS, bc1))
    assert rep.converged
    # velocities never see the temperature, shift leaves them untouched
    assert np.array_equal(shifted.fluid.u.values, state.fluid.u.values)
    assert np.array_equal(shifted.particle.v.values, state.particle.v.values)
    dT_f = shifted.fluid.T.values - state.fluid.T.values
    dT_p = shifted.particle.T.values - state.particle.T.values
    assert np.abs(dT_f - 1.0).max() < 1e-9
    assert np.abs(dT_p - 1.0).max() < 1e-9


def test_all_solid_domain_blocks_flow():
    grid = make_grid(20, 10, 9e-5, 6e-5)
    bc = ported_bc(grid)
    pen = PenalizationFields(uniform_field(grid, 1e12),
                             uniform_field(grid, 0.0), 350.0)
    state, rep = solve_steady(grid, PROPS, bc, pen, SolverSettings(),
                              initial_state(grid, PROPS, bc))
    assert np.abs(state.fluid.u.values).max() < 1e-4


# ------------------------------------------------------ phase decoupling

def test_zero_coupling_makes_phases_identical():
    """With matched properties and the exchange terms switched off, the
    particle phase solves the same equations as the fluid and must
    reproduce it bit for bit."""
    eq_props = dataclasses.replace(
        PROPS, mu_p=PROPS.mu_f, rho_p=PROPS.rho_f, c_p=PROPS.c_f,
        k_p=PROPS.k_f)
    grid = make_grid(21, 9, 1.8e-4, 6e-5)
    bc = channel_bc(grid, dp=50.0, phi=0.5, T_in=293.0)
    settings = SolverSettings(drag_scale=0.0, heat_scale=0.0)
    state, rep = solve_steady(grid, eq_props, bc, zero_pen(grid, T_Q=293.0),
                              settings, initial_state(grid, eq_props, bc))
    assert rep.converged
    assert np.array_equal(state.fluid.u.values, state.particle.u.values)
    assert np.array_equal(state.fluid.v.values, state.particle.v.values)
    # the effective-conductivity model is phase-asymmetric even with
    # k_p = k_f, so T only matches to round-off of the constant solution
    assert np.abs(state.fluid.T.values - state.particle.T.values).max() < 1e-9
    assert np.allclose(state.particle.phi.values, 0.5, atol=1e-12)
    assert np.allclose(state.fluid.T.values, 293.0, atol=1e-9)
    assert np.abs(state.fluid.u.values).max() > 0.0


# ------------------------------------------------------------ failure paths

def test_nan_in_initial_state_raises():
    grid = make_grid(20, 10, 9e-5, 6e-5)
    bc = ported_bc(grid)
    bad = initial_state(grid, PROPS, bc)
    bad.fluid.u.values[grid.node_index(10, 5)] = np.nan
    with pytest.raises(SolverDivergedError, match="u_f"):
        solve_steady(grid, PROPS, bc, zero_pen(grid), SolverSettings(), bad)


def test_unstable_relaxation_raises_diverged():
    grid = make_grid(20, 10, 9e-5, 6e-5)
    bc = ported_bc(grid)
    settings = SolverSettings(relax_u=0.9, relax_p=0.9, max_iter=1500)
    with pytest.raises(SolverDivergedError) as err:
        solve_steady(grid, PROPS, bc, zero_pen(grid), settings,
                     initial_state(grid, PROPS, bc))
    assert err.value.report.converged is False
    assert err.value.report.iterations >= 1
