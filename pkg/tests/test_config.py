import logging

import numpy as np
import pytest

from nanosink.config import (
    CaseConfig,
    ConfigError,
    ContinuationSchedule,
    build_boundary,
    build_grid,
    bundled_config_path,
    design_mask,
    full_design,
    initial_design,
    list_bundled,
    load_case,
    penalization_fields,
    reynolds_reference,
)
from nanosink.closures import water_copper
from nanosink.design import InterpolationParams

PROPS = water_copper()

BUNDLED = (
    "mmchs_fins", "mmchs_reduced", "mmchs_unit",
    "parallel_plate", "parallel_plate_fine",
    "square_baseline", "square_desk", "square_reduced",
    "straight_channel",
)


def desk_case(**kw):
    base = dict(
        name="desk", kind="square-design-domain", nx=20, ny=10,
        lx=90e-6, ly=60e-6, props=PROPS, L_ref=30e-6, dp=300.0,
        phi_in=0.01,
    )
    base.update(kw)
    return CaseConfig(**base)


# ---------------------------------------------------------- dataclasses

def test_schedule_betas_doubling():
    s = ContinuationSchedule()
    assert s.betas() == (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


def test_schedule_caps_at_beta_max():
    s = ContinuationSchedule(beta_init=3.0, beta_max=10.0)
    assert s.betas() == (3.0, 6.0, 10.0)


@pytest.mark.parametrize("kw", [
    dict(beta_init=0.5), dict(beta_max=0.5), dict(growth=1.0),
    dict(stage_iters=0), dict(eps=0.0),
])
def test_schedule_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        ContinuationSchedule(**kw)


@pytest.mark.parametrize("kw", [
    dict(kind="torus"), dict(phi_in=1.0), dict(phi_in=-0.1),
    dict(dp=0.0), dict(wall="sticky"), dict(eta=0.0), dict(eta=1.0),
    dict(gamma_init=1.5), dict(radius=0.0), dict(gradient_mode="magic"),
    dict(tape_sweeps=0), dict(move=0.0), dict(move=1.5),
    dict(port_margin=-1e-6), dict(L_ref=0.0),
])
def test_case_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        desk_case(**kw)


def test_validation_case_needs_inflow_and_wall_temperature():
    kw = dict(name="v", kind="parallel-plate-validation", nx=10, ny=5,
              lx=1e-3, ly=1e-4, props=PROPS, L_ref=1e-4)
    with pytest.raises(ConfigError, match="u_in"):
        CaseConfig(**kw)
    with pytest.raises(ConfigError, match="T_wall"):
        CaseConfig(u_in=1.0, **kw)
    CaseConfig(u_in=1.0, T_wall=303.0, **kw)


# ------------------------------------------------------------- geometry

def test_square_port_rows_on_paper_mesh():
    case = desk_case(nx=100, ny=50, dp=5000.0)
    spec = build_boundary(case, build_grid(case))
    p_dir = np.asarray(spec.masks().p_dir).reshape(100, 50)
    left = np.flatnonzero(p_dir[0])
    assert left.min() == 12 and left.max() == 37
    right = np.flatnonzero(p_dir[-1])
    assert np.array_equal(left, right)


def test_square_port_rows_on_desk_mesh():
    case = desk_case()
    spec = build_boundary(case, build_grid(case))
    p_dir = np.asarray(spec.masks().p_dir).reshape(20, 10)
    assert np.flatnonzero(p_dir[0]).tolist() == [2, 3, 4, 5, 6, 7]


def test_square_design_mask_full_height_strip():
    case = desk_case()
    grid = build_grid(case)
    mask = design_mask(case, grid).reshape(20, 10)
    cols = np.flatnonzero(mask.any(axis=1))
    assert cols.tolist() == list(range(4, 16))
    assert mask[cols].all()  # full height inside the strip


def test_mmchs_design_mask_spares_port_margins():
    case = load_case(bundled_config_path("mmchs_reduced"))
    grid = build_grid(case)
    mask = design_mask(case, grid).reshape(grid.nx, grid.ny)
    x = grid.dx * np.arange(grid.nx)
    inside = (x >= case.port_margin) & (x <= case.lx - case.port_margin)
    assert np.array_equal(mask.any(axis=1), inside)
    assert mask[grid.nx // 2].all()


def test_validation_case_has_no_design_domain():
    case = load_case(bundled_config_path("parallel_plate"))
    assert not design_mask(case, build_grid(case)).any()


def test_validation_boundary_layout():
    case = load_case(bundled_config_path("parallel_plate"))
    grid = build_grid(case)
    m = build_boundary(case, grid).masks()
    qb = np.asarray(m.qb)
    # the wall owns the bottom corner half cell, so the prescribed flux
    # is the trapezoid of the discrete profile (zero at the wall node)
    assert qb[0].sum() == pytest.approx(case.u_in * (case.ly - grid.dy / 2))
    assert qb[0, -1] == pytest.approx(case.u_in * grid.dy / 2)
    t_dir = np.asarray(m.t_dir).reshape(grid.nx, grid.ny)
    assert t_dir[:, 0].all()  # isothermal bottom wall
    tf = np.asarray(m.t_f_val).reshape(grid.nx, grid.ny)
    assert tf[5, 0] == case.T_wall
    # symmetry top: normal velocity pinned, temperature free
    v_dir = np.asarray(m.v_dir).reshape(grid.nx, grid.ny)
    assert v_dir[5, -1] and not t_dir[5, -1]


def test_initial_and_full_design_roundtrip():
    case = desk_case()
    grid = build_grid(case)
    gamma = initial_design(case, grid)
    mask = design_mask(case, grid)
    assert np.all(gamma[mask] == 0.9) and np.all(gamma[~mask] == 1.0)
    x = np.linspace(0.2, 0.8, int(mask.sum()))
    full = full_design(case, grid, x)
    assert np.allclose(full[mask], x) and np.all(full[~mask] == 1.0)
    with pytest.raises(ValueError, match="entries"):
        full_design(case, grid, x[:-1])


def test_penalization_fields_mask_heat_to_design_domain():
    case = desk_case(interp=InterpolationParams(alpha_max=1e10, q_max=2e10))
    grid = build_grid(case)
    g = np.zeros(grid.n_nodes)  # fully solid everywhere
    pen = penalization_fields(case, grid, g)
    mask = design_mask(case, grid)
    assert np.all(pen.alpha.values == 1e10)
    assert np.all(pen.Q.values[mask] == 2e10)
    assert np.all(pen.Q.values[~mask] == 0.0)
    assert pen.T_Q == case.T_Q


def test_penalization_fields_without_interp_are_zero():
    case = desk_case()
    grid = build_grid(case)
    pen = penalization_fields(case, grid, np.ones(grid.n_nodes))
    assert not pen.alpha.values.any() and not pen.Q.values.any()


# ------------------------------------------------------------ INI files

def write_cfg(tmp_path, text):
    p = tmp_path / "case.cfg"
    p.write_text(text)
    return p


MINIMAL = """
[case]
kind = straight-channel
nx = 12
ny = 6
lx = 1.2e-4
ly = 6e-5

[boundary]
dp = 50.0
"""


def test_load_minimal_config(tmp_path):
    case = load_case(write_cfg(tmp_path, MINIMAL))
    assert case.name == "case" and case.kind == "straight-channel"
    assert case.dp == 50.0 and case.T_in == 300.0
    assert case.L_ref == 6e-5  # defaults to ly
    assert case.interp is None and case.props == water_copper()


def test_unknown_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"\[turbulence\]"):
        load_case(write_cfg(tmp_path, MINIMAL + "\n[turbulence]\nc = 1\n"))


def test_unknown_key_rejected(tmp_path):
    bad = MINIMAL.replace("dp = 50.0", "dp = 50.0\nswirl = 3")
    with pytest.raises(ConfigError, match="swirl"):
        load_case(write_cfg(tmp_path, bad))


def test_bad_number_names_section_and_key(tmp_path):
    bad = MINIMAL.replace("nx = 12", "nx = many")
    with pytest.raises(ConfigError, match=r"\[case\] nx"):
        load_case(write_cfg(tmp_path, bad))


def test_missing_case_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match=r"\[case\]"):
        load_case(write_cfg(tmp_path, "[boundary]\ndp = 1.0\n"))


def test_missing_required_key_rejected(tmp_path):
    bad = MINIMAL.replace("nx = 12\n", "")
    with pytest.raises(ConfigError, match="nx"):
        load_case(write_cfg(tmp_path, bad))


def test_defaults_are_logged(tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="nanosink.config"):
        load_case(write_cfg(tmp_path, MINIMAL))
    assert any("T_in" in r.message and "defaulting" in r.message
               for r in caplog.records)


def test_material_overrides_apply(tmp_path):
    cfg = MINIMAL + "\n[material]\nd_p = 30e-9\nk_p = 400.0\n"
    case = load_case(write_cfg(tmp_path, cfg))
    assert case.props.d_p == 30e-9 and case.props.k_p == 400.0
    assert case.props.mu_f == water_copper().mu_f


def test_solver_and_optimizer_sections_parse(tmp_path):
    cfg = MINIMAL + ("\n[solver]\nrelax_u = 0.6\nmax_iter = 123\n"
                     "\n[optimizer]\nmode = tape\ntape_sweeps = 7\n")
    case = load_case(write_cfg(tmp_path, cfg))
    assert case.settings.relax_u == 0.6 and case.settings.max_iter == 123
    assert case.settings.relax_p == 0.3  # untouched default
    assert case.gradient_mode == "tape" and case.tape_sweeps == 7


def test_invalid_field_value_reported_with_path(tmp_path):
    bad = MINIMAL.replace("dp = 50.0", "dp = -5.0")
    with pytest.raises(ConfigError, match="dp > 0"):
        load_case(write_cfg(tmp_path, bad))


# ------------------------------------------------------- bundled cases

def test_bundled_list_is_complete():
    assert list_bundled() == BUNDLED


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_load_and_build(name):
    case = load_case(bundled_config_path(name))
    grid = build_grid(case)
    build_boundary(case, grid)  # validates segment cover
    assert grid.lx == pytest.approx(case.lx)


def test_unknown_bundled_name():
    with pytest.raises(ConfigError, match="available"):
        bundled_config_path("nope")


def test_square_baseline_values():
    case = load_case(bundled_config_path("square_baseline"))
    assert (case.nx, case.ny) == (100, 50)
    assert case.dp == 5000.0 and case.phi_in == 0.01
    assert case.T_in == 300.0 and case.T_Q == 360.0
    assert case.interp.alpha_max == 4.44e10
    assert case.interp.q_max == 5.33e10
    assert case.interp.q == 0.05
    assert case.radius == 1.8e-6 and case.gamma_init == 0.9
    assert case.schedule.beta_max == 64.0


def test_mmchs_unit_values():
    case = load_case(bundled_config_path("mmchs_unit"))
    assert (case.nx, case.ny) == (250, 30)
    assert case.dp == 2000.0 and case.phi_in == 0.005
    assert case.L_ref == 50e-6 and case.port_margin == 5e-6
    assert case.interp.alpha_max == 1.6e10
    assert case.interp.q_max == 1.5e10
    assert case.radius == 4e-6


def test_fins_case_matches_reduced_unit_cell():
    fins = load_case(bundled_config_path("mmchs_fins"))
    unit = load_case(bundled_config_path("mmchs_reduced"))
    assert fins.kind == "straight-channel" and fins.wall == "free-slip"
    assert (fins.nx, fins.ny, fins.lx, fins.ly) == (
        unit.nx, unit.ny, unit.lx, unit.ly)
    assert fins.dp == unit.dp and fins.phi_in == unit.phi_in
    assert fins.interp == unit.interp
    # identical boundary segments, so objective values are comparable
    gf = build_grid(fins)
    mf = build_boundary(fins, gf).masks()
    mu = build_boundary(unit, build_grid(unit)).masks()
    for a, b in ((mf.u_dir, mu.u_dir), (mf.p_dir, mu.p_dir),
                 (mf.p_val, mu.p_val), (mf.t_dir, mu.t_dir)):
        assert np.array_equal(np.asarray(a), np.asarray(b))


def test_reynolds_reference_reproduces_reported_values():
    square = load_case(bundled_config_path("square_baseline"))
    assert reynolds_reference(square) == pytest.approx(67.1, rel=0.02)
    mmchs = load_case(bundled_config_path("mmchs_unit"))
    assert reynolds_reference(mmchs) == pytest.approx(70.7, rel=0.02)
    plate = load_case(bundled_config_path("parallel_plate"))
    assert reynolds_reference(plate) == pytest.approx(500.0)
