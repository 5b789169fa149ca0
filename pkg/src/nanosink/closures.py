"""Interphase closure models for the dilute copper-water nanofluid.

Every function here is a deterministic pure map, written with jax.numpy so
the same code path serves the flow solver, the adjoint, and plain unit
evaluation with Python floats. Elementwise branch selection uses jnp.where
with guarded operands so that no NaN can leak through either the value or
the reverse-mode derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

# Particle fraction clamp used only inside the conductivity evaluation; the
# energy equation multiplies by phi again, keeping the product well-behaved.
PHI_CLAMP = 1e-9

# Slip-speed smoothing for differentiability at zero slip (m/s).
SLIP_EPS = 1e-12


@dataclass(frozen=True)
class MaterialProps:
    """Constant material properties of both phases."""

    mu_f: float   # fluid viscosity, Pa s
    rho_f: float  # fluid density, kg/m^3
    c_f: float    # fluid heat capacity, J/(kg K)
    k_f: float    # fluid conductivity, W/(m K)
    mu_p: float   # particle-phase viscosity, Pa s
    rho_p: float  # particle density, kg/m^3
    c_p: float    # particle heat capacity, J/(kg K)
    k_p: float    # particle conductivity, W/(m K)
    d_p: float    # particle diameter, m
    omega: float = 7.26e-3  # conductivity blending constant

    def __post_init__(self):
        for name in ("mu_f", "rho_f", "c_f", "k_f", "mu_p", "rho_p", "c_p", "k_p", "d_p"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"material property {name} must be positive")
        if not (0.0 < self.omega < 1.0):
            raise ValueError("omega must lie in (0, 1)")

    @property
    def prandtl(self) -> float:
        return self.mu_f * self.c_f / self.k_f


def water_copper(d_p: float = 100e-9) -> MaterialProps:
    """Reference Cu-water property set used by all bundled cases."""
    return MaterialProps(
        mu_f=0.001, rho_f=1000.0, c_f=4181.8, k_f=0.6,
        mu_p=1.38e-3, rho_p=8954.0, c_p=383.1, k_p=386.0,
        d_p=d_p,
    )


def slip_speed(u_f, v_f, u_p, v_p, smooth: bool = False):
    """|u_f - u_p|, optionally smoothed as sqrt(du^2 + dv^2 + eps^2)."""
    du = u_f - u_p
    dv = v_f - v_p
    if smooth:
        return jnp.sqrt(du * du + dv * dv + SLIP_EPS * SLIP_EPS)
    return jnp.sqrt(du * du + dv * dv)


def particle_reynolds(u_f, u_p, props: MaterialProps):
    """Re_p = rho_f |u_f - u_p| d_p / mu_f for velocity pairs (u, v)."""
    rel = slip_speed(u_f[0], u_f[1], u_p[0], u_p[1], smooth=False)
    return props.rho_f * rel * props.d_p / props.mu_f


def _drag_coefficient_raw(re_p):
    """Piecewise drag law; valid for 0 < Re_p <= 1000, no range check."""
    re_safe = jnp.maximum(re_p, 1e-300)
    stokes = 24.0 / re_safe
    inertial = (24.0 / re_safe) * (1.0 + 0.15 * jnp.power(re_safe, 0.687))
    return jnp.where(re_p < 1.0, stokes, inertial)


def drag_coefficient(re_p):
    """Drag coefficient of a single sphere.

    Cd = 24/Re_p            for Re_p < 1
    Cd = (24/Re_p)(1 + 0.15 Re_p^0.687)  for 1 <= Re_p <= 1000

    Raises for Re_p > 1000; the correlation has no branch beyond that.
    """
    arr = np.asarray(re_p, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("drag_coefficient requires Re_p > 0; the momentum-exchange "
                         "path handles the Re_p -> 0 limit analytically")
    if np.any(arr > 1000.0):
        raise ValueError(f"Re_p = {float(np.max(arr)):g} outside correlation range (max 1000)")
    out = _drag_coefficient_raw(arr)
    return float(out) if np.ndim(re_p) == 0 else np.asarray(out)


def momentum_exchange_from_slip(phi_f, rel_speed, props: MaterialProps):
    """Drag coupling coefficient K from the fluid fraction and slip speed.

    Dilute branch (phi_f > 0.8):
        K = (3/4) Cd(Re_p) phi_p phi_f rho_f |du| / d_p * phi_f^-2.65,
    with the Cd |du| product collapsed to its Stokes form
        K = 18 mu_f phi_p phi_f^-1.65 / d_p^2
    for Re_p < 1 so K stays finite and smooth as the slip vanishes.
    Dense branch (phi_f <= 0.8), Ergun form:
        K = 150 phi_p^2 mu_f / (phi_f d_p^2) + 1.75 phi_p rho_f |du| / d_p.
    """
    phi_p = 1.0 - phi_f
    d = props.d_p
    re_p = props.rho_f * rel_speed * d / props.mu_f
    phif_pow = jnp.power(jnp.maximum(phi_f, 1e-12), -1.65)

    k_stokes = 18.0 * props.mu_f * phi_p * phif_pow / (d * d)
    # Cd * |du| with Cd from the inertial branch; safe at re_p ~ 0 because the
    # branch is only selected for re_p >= 1.
    re_safe = jnp.maximum(re_p, 1.0)
    cd_du = (24.0 * props.mu_f / (props.rho_f * d)) * (1.0 + 0.15 * jnp.power(re_safe, 0.687))
    k_inertial = 0.75 * cd_du * phi_p * phi_f * props.rho_f / d * jnp.power(jnp.maximum(phi_f, 1e-12), -2.65)
    k_dilute = jnp.where(re_p < 1.0, k_stokes, k_inertial)

    phif_safe = jnp.maximum(phi_f, 1e-12)
    k_ergun = (150.0 * phi_p * phi_p * props.mu_f / (phif_safe * d * d)
               + 1.75 * phi_p * props.rho_f * rel_speed / d)

    return jnp.where(phi_f > 0.8, k_dilute, k_ergun)


def momentum_exchange(phi_f, u_f, u_p, props: MaterialProps):
    """Public entry for K; velocity arguments are (u, v) pairs."""
    arr = np.asarray(phi_f, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("phi_f must lie in [0, 1]")
    rel = slip_speed(u_f[0], u_f[1], u_p[0], u_p[1], smooth=False)
    out = momentum_exchange_from_slip(arr, rel, props)
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def particle_nusselt(re_p, props: MaterialProps):
    """Nu_p = 2 + 1.1 Re_p^0.6 Pr^(1/3); the additive 2 is the conduction limit."""
    pr = props.prandtl
    re_safe = jnp.maximum(re_p, 0.0)
    # x^0.6 has unbounded slope at 0; evaluate on a guarded argument and zero
    # the branch out so neither value nor gradient can blow up at re_p = 0.
    pos = re_safe > 0.0
    powered = jnp.where(pos, jnp.power(jnp.where(pos, re_safe, 1.0), 0.6), 0.0)
    return 2.0 + 1.1 * powered * jnp.power(pr, 1.0 / 3.0)


def interphase_heat_coeff(phi_f, re_p, props: MaterialProps):
    """Volumetric interphase heat transfer coefficient.

    h_p = Nu_p k_f / d_p per particle surface, scaled by the specific surface
    area of monodispersed spheres: h = 6 (1 - phi_f) h_p / d_p.
    """
    nu_p = particle_nusselt(re_p, props)
    h_p = nu_p * props.k_f / props.d_p
    out = 6.0 * (1.0 - phi_f) * h_p / props.d_p
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def kuipers_gamma(phi_f, props: MaterialProps):
    """Deformed-sphere conduction shape factor of the particle-packing model.

    With A = k_p/k_f and B = 1.25 ((1-phi_f)/phi_f)^(10/9):

        Gamma = 2/(1 - B/A) * [ B(A-1)/(A (1-B/A)^2) ln(A/B)
                                - (B-1)/(1-B/A) - (B+1)/2 ].
    """
    a = props.k_p / props.k_f
    phi_p = jnp.maximum(1.0 - phi_f, PHI_CLAMP)
    phif_safe = jnp.maximum(phi_f, PHI_CLAMP)
    b = 1.25 * jnp.power(phi_p / phif_safe, 10.0 / 9.0)
    denom = 1.0 - b / a
    denom = jnp.where(jnp.abs(denom) < 1e-12, 1e-12, denom)
    log_ab = jnp.log(a / jnp.maximum(b, 1e-300))
    term = (b * (a - 1.0) / (a * denom * denom) * log_ab
            - (b - 1.0) / denom - (b + 1.0) / 2.0)
    return 2.0 / denom * term


def effective_conductivities_tilde(phi_f, props: MaterialProps):
    """(k_tilde_f, k_tilde_p): phase conductivities as they enter the energy fluxes.

    k_tilde_f = (1 - sqrt(1 - phi_f)) k_f
    k_tilde_p = sqrt(1 - phi_f) (omega A + (1 - omega) Gamma) k_f

    Pure fluid recovers k_tilde_f = k_f while the sqrt(1-phi_f) prefactor
    sends k_tilde_p to zero. The particle fraction is clamped to PHI_CLAMP
    so the dilute limit stays NaN-free in both value and derivative.
    """
    a = props.k_p / props.k_f
    phi_p = jnp.maximum(1.0 - phi_f, PHI_CLAMP)
    sq = jnp.sqrt(phi_p)
    k_t_f = (1.0 - sq) * props.k_f
    gam = kuipers_gamma(1.0 - phi_p, props)
    k_t_p = sq * (props.omega * a + (1.0 - props.omega) * gam) * props.k_f
    return k_t_f, k_t_p


def effective_conductivities(phi_f, props: MaterialProps):
    """(k_hat_f, k_hat_p) = (k_tilde_f/phi_f, k_tilde_p/phi_p), clamped fractions."""
    k_t_f, k_t_p = effective_conductivities_tilde(phi_f, props)
    phif_safe = jnp.maximum(phi_f, PHI_CLAMP)
    phip_safe = jnp.maximum(1.0 - phi_f, PHI_CLAMP)
    k_h_f = k_t_f / phif_safe
    k_h_p = k_t_p / phip_safe
    if np.ndim(phi_f) == 0:
        return float(k_h_f), float(k_h_p)
    return np.asarray(k_h_f), np.asarray(k_h_p)
