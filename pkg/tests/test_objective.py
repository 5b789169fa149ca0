import numpy as np
import pytest

from nanosink.closures import water_copper
from nanosink.grid import ScalarField, make_flow_state, make_grid, uniform_field
from nanosink.objective import (
    ObjectiveReport,
    UndefinedAverageError,
    average_temperature,
    objective,
    quadrature_weights,
)
from nanosink.solver import PenalizationFields

PROPS = water_copper()


def pen_uniform(grid, q=1.0, T_Q=350.0):
    return PenalizationFields(uniform_field(grid, 0.0),
                              uniform_field(grid, q), T_Q)


# ------------------------------------------------------------ quadrature

def test_weights_sum_to_area():
    g = make_grid(7, 5, 3.0, 2.0)
    assert quadrature_weights(g).sum() == pytest.approx(6.0)


def test_weights_3x3_hand_table():
    g = make_grid(3, 3, 2.0, 2.0)  # dx = dy = 1
    w = quadrature_weights(g)
    assert w[0, 0] == pytest.approx(0.25)   # corner
    assert w[1, 0] == pytest.approx(0.5)    # edge
    assert w[1, 1] == pytest.approx(1.0)    # interior


def test_weights_integrate_bilinear_exactly():
    g = make_grid(6, 9, 1.0, 1.0)
    x, y = g.coords()
    val = np.sum(quadrature_weights(g) * x * y)
    assert val == pytest.approx(0.25, rel=1e-12)


# ------------------------------------------------------ average temperature

def test_uniform_temperature_is_fixed_point():
    g = make_grid(5, 4, 1.0, 1.0)
    state = make_flow_state(g, uf=0.3, up=0.1, tf=300.0, tp=300.0)
    assert average_temperature(state, PROPS) == pytest.approx(300.0)


def test_equal_weights_give_arithmetic_mean():
    # two interior nodes share the same quadrature weight and speed;
    # everything else is stagnant (poisoned with T = 500)
    g = make_grid(4, 4, 3.0, 3.0)
    u = np.zeros(16)
    T = np.full(16, 500.0)
    a, b = g.node_index(1, 1), g.node_index(2, 2)
    u[a] = u[b] = 0.7
    T[a], T[b] = 300.0, 320.0
    state = make_flow_state(g, uf=u, tf=T, tp=500.0)
    assert average_temperature(state, PROPS) == pytest.approx(310.0, abs=1e-6)


def test_single_phase_reduces_to_fluid_mean():
    g = make_grid(5, 4, 1.0, 1.0)
    T_f = np.linspace(300.0, 340.0, g.n_nodes)
    state = make_flow_state(g, uf=0.5, tf=T_f, up=0.0, vp=0.0, tp=999.0)
    w = quadrature_weights(g).ravel()
    expect = np.dot(w, T_f) / w.sum()
    assert average_temperature(state, PROPS) == pytest.approx(expect, abs=1e-8)


def test_stagnant_flow_raises():
    g = make_grid(5, 4, 1.0, 1.0)
    state = make_flow_state(g, tf=300.0)
    with pytest.raises(UndefinedAverageError):
        average_temperature(state, PROPS)


def test_domain_mask_restricts_average():
    g = make_grid(5, 4, 1.0, 1.0)
    T = np.full(g.n_nodes, 300.0)
    mask = np.zeros(g.n_nodes, bool)
    left = [g.node_index(1, j) for j in range(4)]
    mask[left] = True
    T[~mask] = 400.0
    state = make_flow_state(g, uf=1.0, tf=T, tp=T)
    assert average_temperature(state, PROPS, mask) == pytest.approx(300.0)


# ------------------------------------------------------------ objective

def test_zero_heat_source_gives_zero():
    g = make_grid(5, 4, 1.0, 1.0)
    state = make_flow_state(g, uf=1.0, tf=300.0, tp=300.0)
    rep = objective(state, pen_uniform(g, q=0.0), PROPS)
    assert rep.J == 0.0
    assert np.all(rep.breakdown == 0.0)


def test_matched_temperatures_give_zero():
    g = make_grid(5, 4, 1.0, 1.0)
    state = make_flow_state(g, uf=1.0, tf=350.0, tp=350.0)
    rep = objective(state, pen_uniform(g, q=2e10, T_Q=350.0), PROPS)
    # T_ave carries ~1e-16 relative round-off, amplified by Q * T
    assert abs(rep.J) < 1e-12 * 2e10 * 350.0


def test_uniform_case_closed_form():
    g = make_grid(6, 5, 1.0, 1.0)
    state = make_flow_state(g, uf=1.0, tf=310.0, tp=310.0)
    rep = objective(state, pen_uniform(g, q=3.0, T_Q=350.0), PROPS)
    assert isinstance(rep, ObjectiveReport)
    assert rep.T_ave == pytest.approx(310.0)
    assert rep.J == pytest.approx(3.0 * 40.0, rel=1e-12)


def test_breakdown_quadrature_reproduces_J():
    rng = np.random.default_rng(3)
    g = make_grid(7, 6, 2.0, 1.0)
    state = make_flow_state(
        g, uf=rng.uniform(0.1, 1.0, g.n_nodes),
        tf=300.0 + rng.uniform(0, 50, g.n_nodes),
        up=rng.uniform(0.0, 0.5, g.n_nodes),
        tp=300.0 + rng.uniform(0, 50, g.n_nodes), phi_p=0.01)
    Q = ScalarField(g, rng.uniform(0, 1e10, g.n_nodes))
    pen = PenalizationFields(uniform_field(g, 0.0), Q, 350.0)
    rep = objective(state, pen, PROPS)
    w = quadrature_weights(g).ravel()
    recomputed = np.dot(w / w.sum(), rep.breakdown)
    assert rep.J == pytest.approx(recomputed, rel=1e-12)


def test_sum_order_invariance():
    rng = np.random.default_rng(4)
    g = make_grid(7, 6, 2.0, 1.0)
    state = make_flow_state(
        g, uf=rng.uniform(0.1, 1.0, g.n_nodes),
        tf=300.0 + rng.uniform(0, 50, g.n_nodes), phi_p=0.0)
    Q = ScalarField(g, rng.uniform(0, 1e10, g.n_nodes))
    pen = PenalizationFields(uniform_field(g, 0.0), Q, 350.0)
    rep = objective(state, pen, PROPS)
    w = quadrature_weights(g).ravel() / quadrature_weights(g).sum()
    perm = rng.permutation(g.n_nodes)
    assert rep.J == pytest.approx(np.sum((w * rep.breakdown)[perm]), rel=1e-12)


def test_heat_outside_domain_ignored():
    g = make_grid(6, 5, 1.0, 1.0)
    state = make_flow_state(g, uf=1.0, tf=310.0, tp=310.0)
    mask = np.zeros((6, 5), bool)
    mask[2:4, 1:4] = True
    Q = np.full(g.n_nodes, 5.0)
    Q[~mask.ravel()] = 7e9  # large but outside the domain
    pen = PenalizationFields(uniform_field(g, 0.0), ScalarField(g, Q), 350.0)
    rep = objective(state, pen, PROPS, domain=mask.ravel())
    assert rep.J == pytest.approx(5.0 * 40.0, rel=1e-12)
    assert np.all(rep.breakdown[~mask.ravel()] == 0.0)


def test_grid_mismatch_rejected():
    g = make_grid(5, 4, 1.0, 1.0)
    g2 = make_grid(5, 5, 1.0, 1.0)
    state = make_flow_state(g, uf=1.0)
    with pytest.raises(ValueError):
        objective(state, pen_uniform(g2), PROPS)
