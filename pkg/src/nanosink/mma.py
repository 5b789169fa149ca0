"""Globally convergent method of moving asymptotes (Svanberg's GCMMA).

Each outer iteration builds a convex separable approximation of the
objective around the current design, with per-node asymptotes that
adapt to the iteration history. The approximation is made conservative
in an inner loop: a candidate design is accepted only once the true
objective, re-evaluated at the candidate, does not undercut the model's
prediction; otherwise the model is stiffened and re-solved.

The package's design problem has box bounds only, so the hot path is
the closed-form minimizer of the unconstrained separable subproblem.
A primal-dual interior-point solver for the general subproblem with
inequality constraints is included for completeness and used whenever
constraints are supplied.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ASYMPTOTE_MIN = 0.01   # closest approach to the design, fraction of range
ASYMPTOTE_MAX = 10.0   # farthest retreat, fraction of range
BOUND_GAP = 0.1        # bounds keep this fraction of the asymptote gap
RHO_MIN = 1e-5


@dataclass
class MmaState:
    """Optimizer memory carried between outer iterations."""

    lower_asymptotes: Optional[np.ndarray] = None
    upper_asymptotes: Optional[np.ndarray] = None
    iteration: int = 0
    move_limit: float = 0.1
    asymptote_init: float = 0.5
    asymptote_incr: float = 1.2
    asymptote_decr: float = 0.7
    x_prev: Optional[np.ndarray] = None
    x_prev2: Optional[np.ndarray] = None
    stagnant: bool = False
    inner_iterations: int = 0

    def __post_init__(self):
        if not 0.0 < self.move_limit <= 1.0:
            raise ValueError("move_limit must be in (0, 1]")
        if not 0.0 < self.asymptote_decr < 1.0 < self.asymptote_incr:
            raise ValueError("need asymptote_decr < 1 < asymptote_incr")
        if self.asymptote_init <= 0.0:
            raise ValueError("asymptote_init must be positive")


def _asymptotes(state: MmaState, x, x_min, x_max):
    span = x_max - x_min
    if state.iteration < 2 or state.x_prev is None or state.x_prev2 is None:
        low = x - state.asymptote_init * span
        upp = x + state.asymptote_init * span
        return low, upp
    osc = (x - state.x_prev) * (state.x_prev - state.x_prev2)
    factor = np.where(osc > 0.0, state.asymptote_incr,
                      np.where(osc < 0.0, state.asymptote_decr, 1.0))
    low = x - factor * (state.x_prev - state.lower_asymptotes)
    upp = x + factor * (state.upper_asymptotes - state.x_prev)
    low = np.clip(low, x - ASYMPTOTE_MAX * span, x - ASYMPTOTE_MIN * span)
    upp = np.clip(upp, x + ASYMPTOTE_MIN * span, x + ASYMPTOTE_MAX * span)
    return low, upp


def _bounds(state: MmaState, x, low, upp, x_min, x_max):
    span = x_max - x_min
    alpha = np.maximum.reduce([np.broadcast_to(x_min, x.shape),
                               low + BOUND_GAP * (x - low),
                               x - state.move_limit * span])
    beta = np.minimum.reduce([np.broadcast_to(x_max, x.shape),
                              upp - BOUND_GAP * (upp - x),
                              x + state.move_limit * span])
    return alpha, beta


def _approximation(x, df, low, upp, span, rho):
    dfp = np.maximum(df, 0.0)
    dfm = np.maximum(-df, 0.0)
    stiff = rho / span
    p = (upp - x) ** 2 * (1.001 * dfp + 0.001 * dfm + stiff)
    q = (x - low) ** 2 * (0.001 * dfp + 1.001 * dfm + stiff)
    return p, q


def _model_value(xc, x, p, q, low, upp):
    # approximation value relative to the expansion point
    at_xc = p / (upp - xc) + q / (xc - low)
    at_x = p / (upp - x) + q / (x - low)
    return float(np.sum(at_xc - at_x))


def box_minimizer(p, q, low, upp, alpha, beta):
    """Exact minimizer of sum p/(upp-x) + q/(x-low) over [alpha, beta]."""
    sp, sq = np.sqrt(p), np.sqrt(q)
    x = (low * sp + upp * sq) / (sp + sq)
    return np.clip(x, alpha, beta)


def mma_update(gamma, J: float, dJ, state: MmaState, *,
               evaluate: Optional[Callable] = None,
               x_min=0.0, x_max=1.0, max_inner: int = 15):
    """One outer iteration maximizing J; returns (new design, new state).

    ``evaluate`` maps a candidate design to its true objective (same
    maximization convention as J) and enables the conservative inner
    loop; without it the first subproblem solution is accepted. A zero
    gradient returns the design unchanged with ``stagnant`` set.
    """
    x = np.asarray(gamma, dtype=np.float64).ravel()
    df = -np.asarray(dJ, dtype=np.float64).ravel()
    if x.shape != df.shape:
        raise ValueError("design and gradient sizes differ")
    if not np.any(df):
        return x.copy(), dataclasses.replace(state, stagnant=True)

    x_min = np.broadcast_to(np.asarray(x_min, dtype=np.float64), x.shape)
    x_max = np.broadcast_to(np.asarray(x_max, dtype=np.float64), x.shape)
    span = x_max - x_min
    low, upp = _asymptotes(state, x, x_min, x_max)
    alpha, beta = _bounds(state, x, low, upp, x_min, x_max)

    f0 = -float(J)
    rho = max(RHO_MIN, 0.1 * float(np.mean(np.abs(df) * span)))
    inner = 0
    while True:
        p, q = _approximation(x, df, low, upp, span, rho)
        xc = box_minimizer(p, q, low, upp, alpha, beta)
        if evaluate is None or inner >= max_inner:
            break
        inner += 1
        f_true = -float(evaluate(xc))
        f_model = f0 + _model_value(xc, x, p, q, low, upp)
        if f_true <= f_model + 1e-12 * (1.0 + abs(f_model)):
            break
        # not conservative: stiffen the model toward the current point
        d = float(np.sum((upp - low) * (xc - x) ** 2
                         / ((upp - xc) * (xc - low) * span)))
        rho = min(1.1 * (rho + (f_true - f_model) / max(d, 1e-300)),
                  10.0 * rho)

    new_state = dataclasses.replace(
        state, lower_asymptotes=low, upper_asymptotes=upp,
        iteration=state.iteration + 1, x_prev=x.copy(),
        x_prev2=None if state.x_prev is None else state.x_prev.copy(),
        stagnant=False, inner_iterations=inner)
    return xc, new_state


def solve_subproblem(p0, q0, P, Q, b, low, upp, alpha, beta, *,
                     a0: float = 1.0, a=None, c=None, d=None,
                     epsimin: float = 1e-9):
    """Primal-dual interior-point solve of the constrained subproblem.

    minimize   sum_j p0_j/(upp_j - x_j) + q0_j/(x_j - low_j)
               + a0 z + sum_i (c_i y_i + d_i y_i^2 / 2)
    subject to sum_j P_ij/(upp_j - x_j) + Q_ij/(x_j - low_j)
               - a_i z - y_i <= b_i,   alpha <= x <= beta,  y, z >= 0

    Returns (x, y, z, lam). With no constraints this reduces to the
    closed-form ``box_minimizer``.
    """
    p0, q0 = np.asarray(p0, float), np.asarray(q0, float)
    low, upp = np.asarray(low, float), np.asarray(upp, float)
    alpha, beta = np.asarray(alpha, float), np.asarray(beta, float)
    P = np.asarray(P, float).reshape(-1, p0.size)
    Q = np.asarray(Q, float).reshape(-1, q0.size)
    b = np.asarray(b, float).ravel()
    m, n = P.shape
    if m == 0:
        return box_minimizer(p0, q0, low, upp, alpha, beta), \
            np.zeros(0), 0.0, np.zeros(0)
    a = np.zeros(m) if a is None else np.asarray(a, float).ravel()
    c = np.full(m, 1e4) if c is None else np.asarray(c, float).ravel()
    d = np.ones(m) if d is None else np.asarray(d, float).ravel()

    x = 0.5 * (alpha + beta)
    y = np.ones(m)
    z = 1.0
    lam = np.ones(m)
    xsi = np.maximum(1.0 / (x - alpha), 1.0)
    eta = np.maximum(1.0 / (beta - x), 1.0)
    mu = np.maximum(0.5 * c, 1.0)
    zet = 1.0
    s = np.ones(m)

    def residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux, xl = upp - x, x - low
        plam = p0 + lam @ P
        qlam = q0 + lam @ Q
        gvec = P @ (1.0 / ux) + Q @ (1.0 / xl)
        rex = plam / ux ** 2 - qlam / xl ** 2 - xsi + eta
        rey = c + d * y - mu - lam
        rez = a0 - zet - a @ lam
        relam = gvec - a * z - y + s - b
        rexsi = xsi * (x - alpha) - epsi
        reeta = eta * (beta - x) - epsi
        remu = mu * y - epsi
        rezet = zet * z - epsi
        res = lam * s - epsi
        r = np.concatenate([rex, rey, [rez], relam, rexsi, reeta,
                            remu, [rezet], res])
        return r, float(np.linalg.norm(r)), float(np.max(np.abs(r)))

    epsi = 1.0
    while epsi > epsimin:
        _, rnorm, rmax = residuals(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        for _ in range(200):
            if rmax <= 0.9 * epsi:
                break
            ux, xl = upp - x, x - low
            plam = p0 + lam @ P
            qlam = q0 + lam @ Q
            gvec = P @ (1.0 / ux) + Q @ (1.0 / xl)
            GG = P / ux ** 2 - Q / xl ** 2
            delx = (plam / ux ** 2 - qlam / xl ** 2
                    - epsi / (x - alpha) + epsi / (beta - x))
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = (2.0 * (plam / ux ** 3 + qlam / xl ** 3)
                     + xsi / (x - alpha) + eta / (beta - x))
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy

            blam = dellam + dely / diagy - GG @ (delx / diagx)
            Alam = np.diag(diaglamyi) + (GG / diagx) @ GG.T
            AA = np.block([[Alam, a[:, None]],
                           [a[None, :], np.array([[-zet / z]])]])
            sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
            dlam, dz = sol[:m], sol[m]
            dx = -delx / diagx - (dlam @ GG) / diagx
            dy = (dlam - dely) / diagy
            dxsi = -xsi + (epsi - xsi * dx) / (x - alpha)
            deta = -eta + (epsi + eta * dx) / (beta - x)
            dmu = -mu + (epsi - mu * dy) / y
            dzet = -zet + (epsi - zet * dz) / z
            ds = -s + (epsi - s * dlam) / lam

            # largest step keeping every slack strictly positive
            w = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dw = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu,
                                 [dzet], ds])
            steps = [np.max(-1.01 * dw / w),
                     np.max(-1.01 * dx / (x - alpha)),
                     np.max(1.01 * dx / (beta - x)), 1.0]
            step = 1.0 / max(steps)

            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            for _ in range(50):
                trial = (old[0] + step * dx, old[1] + step * dy,
                         old[2] + step * dz, old[3] + step * dlam,
                         old[4] + step * dxsi, old[5] + step * deta,
                         old[6] + step * dmu, old[7] + step * dzet,
                         old[8] + step * ds)
                _, new_norm, rmax = residuals(*trial, epsi)
                if new_norm < rnorm:
                    break
                step *= 0.5
            x, y, z, lam, xsi, eta, mu, zet, s = trial
            rnorm = new_norm
        epsi *= 0.1
    return x, y, float(z), lam


def convergence_check(J_history, epsilon: float):
    """Relative-change stop test on the last two objective values.

    Returns (converged, used_absolute): with a vanishing latest value
    the relative measure is undefined, so the absolute change is
    compared instead and flagged.
    """
    hist = [float(v) for v in J_history]
    if len(hist) < 2:
        return False, False
    j_new, j_old = hist[-1], hist[-2]
    if j_new == 0.0:
        return abs(j_new - j_old) < epsilon, True
    return abs((j_new - j_old) / j_new) < epsilon, False
