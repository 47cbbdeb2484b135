"""Enthalpy-method heat kernels and the per-cell radial heat equation.

Temperature and enthalpy are linked by a continuous piecewise-linear map
``T = omega(E)`` whose steep middle branch (slope 1/c_inf) regularizes the
phase change at the critical temperature.  Two law instances are used:
the pure-water law (fibers, T_crit = T_c) and the sap law (vessel/macro,
T_crit = T_c_sap, lowered by the freezing point depression).

The per-cell temperature lives on an annulus between the fiber phase
boundary and the artificial coupling circle at radius R_gamma.  Nodes are
spaced uniformly in log-radius, which makes the discrete steady state of
the cylindrical operator coincide with the exact logarithmic conduction
profile, and makes the conservative face fluxes independent of radius:
the heat flow rate through the face between nodes j, j+1 (per unit axial
depth, in units of the int(c_w*T) budget) is

    G = 2*pi*D_face*(T[j+1] - T[j]) / dxi,      dxi = node spacing in ln(y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sapsim.params import ModelParams


@dataclass(frozen=True)
class EnthalpyLaw:
    """Coefficients of the temperature-enthalpy map for one liquid."""

    c_i: float
    c_w: float
    c_inf: float
    e_ice: float      # enthalpy of ice at the critical temperature, J/kg
    e_wat: float      # enthalpy of water at the critical temperature, J/kg
    delta_i: float
    delta_w: float
    t_crit: float     # melting temperature, K

    @property
    def e_mid(self) -> float:
        """Mush midpoint: omega(e_mid) = t_crit exactly."""
        return 0.5 * (self.e_ice + self.e_wat)


def water_law(params: ModelParams) -> EnthalpyLaw:
    """Enthalpy law of pure fiber water (critical temperature T_c)."""
    return EnthalpyLaw(params.c_i, params.c_w, params.c_inf, params.E_i,
                       params.E_w, params.delta_i, params.delta_w, params.T_c)


def sap_law(params: ModelParams) -> EnthalpyLaw:
    """Enthalpy law of vessel sap (critical temperature lowered by the FPD)."""
    return EnthalpyLaw(params.c_i, params.c_w, params.c_inf, params.E_i,
                       params.E_w, params.delta_i, params.delta_w, params.T_c_sap)


def omega(E, law: EnthalpyLaw):
    """Temperature from enthalpy: continuous, non-decreasing, three branches.

    The ice and water branches are anchored to the mush endpoints so the map
    stays continuous for any t_crit (the sap law shifts with the FPD).
    """
    E = np.asarray(E, dtype=float)
    lo = law.e_ice - law.delta_i
    hi = law.e_wat + law.delta_w
    t_ice = law.t_crit + (E - law.e_ice) / law.c_i
    t_mush = law.t_crit + (2.0 * E - law.e_ice - law.e_wat) / (2.0 * law.c_inf)
    t_wat = law.t_crit + (E - law.e_wat) / law.c_w
    out = np.where(E < lo, t_ice, np.where(E > hi, t_wat, t_mush))
    return out if out.ndim else float(out)


def omega_inv(T, law: EnthalpyLaw):
    """Enthalpy from temperature (inverse of omega; t_crit maps to mid-mush)."""
    T = np.asarray(T, dtype=float)
    t_lo = law.t_crit - law.delta_i / law.c_i
    t_hi = law.t_crit + law.delta_w / law.c_w
    e_ice = law.e_ice + law.c_i * (T - law.t_crit)
    e_mush = law.e_mid + law.c_inf * (T - law.t_crit)
    e_wat = law.e_wat + law.c_w * (T - law.t_crit)
    out = np.where(T < t_lo, e_ice, np.where(T > t_hi, e_wat, e_mush))
    return out if out.ndim else float(out)


def liquid_enthalpy(T, law: EnthalpyLaw):
    """Liquid-branch enthalpy e_wat + c_w*(T - t_crit), valid for any T.

    The per-cell profile lives on the liquid subregion, so its enthalpies
    stay on the liquid branch even when the water is transiently below the
    critical temperature during freezing; :func:`liquid_temperature` is the
    exact inverse.  This keeps the conduction coefficient at its liquid
    value and the temperature round trip exact (the general omega map would
    fold supercooled states into the mush).
    """
    T = np.asarray(T, dtype=float)
    out = law.e_wat + law.c_w * (T - law.t_crit)
    return out if out.ndim else float(out)


def liquid_temperature(E, law: EnthalpyLaw):
    """Inverse of :func:`liquid_enthalpy` (coincides with omega above the mush)."""
    E = np.asarray(E, dtype=float)
    out = law.t_crit + (E - law.e_wat) / law.c_w
    return out if out.ndim else float(out)


def diffusivity(E, params: ModelParams):
    """Conduction coefficient D(E) = k/rho, blended linearly across the mush."""
    E = np.asarray(E, dtype=float)
    d_i = params.k_i / params.rho_i
    d_w = params.k_w / params.rho_w
    frac = np.clip((E - params.E_i) / (params.E_w - params.E_i), 0.0, 1.0)
    out = d_i + frac * (d_w - d_i)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# per-cell radial profile

@dataclass
class MicroProfile:
    """Radial enthalpy samples on the liquid annulus of the reference cell.

    ``y`` holds the node radii (log-spaced, y[0] at the phase boundary,
    y[-1] at the coupling circle); ``E`` the nodal enthalpies, stored on
    the liquid branch (see :func:`liquid_enthalpy`).
    """

    y: np.ndarray
    E: np.ndarray

    @property
    def n(self) -> int:
        return self.y.shape[-1]

    @property
    def dxi(self) -> float:
        return (math.log(self.y[-1]) - math.log(self.y[0])) / (self.n - 1)

    def temperatures(self, law: EnthalpyLaw) -> np.ndarray:
        return np.asarray(liquid_temperature(self.E, law))

    def copy(self) -> "MicroProfile":
        return MicroProfile(self.y.copy(), self.E.copy())


def log_nodes(r_inner: float, r_outer: float, n: int) -> np.ndarray:
    if not 0.0 < r_inner < r_outer:
        raise ValueError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    return np.exp(np.linspace(math.log(r_inner), math.log(r_outer), n))


def make_profile(r_inner: float, r_outer: float, n: int, T_init,
                 law: EnthalpyLaw) -> MicroProfile:
    """Fresh profile with log-spaced nodes at a uniform (or nodal) temperature."""
    y = log_nodes(r_inner, r_outer, n)
    T = np.broadcast_to(np.asarray(T_init, dtype=float), y.shape)
    return MicroProfile(y, np.asarray(liquid_enthalpy(T, law)))


def remap_profile(profile: MicroProfile, r_inner: float, r_outer: float,
                  law: EnthalpyLaw) -> MicroProfile:
    """Move the mesh to new interface radii, interpolating T linearly in ln(y).

    Nodes falling outside the old span take the nearest old end value.
    """
    y_new = log_nodes(r_inner, r_outer, profile.n)
    t_old = profile.temperatures(law)
    t_new = np.interp(np.log(y_new), np.log(profile.y), t_old)
    return MicroProfile(y_new, np.asarray(liquid_enthalpy(t_new, law)))


def micro_face_coeffs(y: np.ndarray, E: np.ndarray, params: ModelParams):
    """Conservative coefficients of the cylindrical operator in log-radius.

    Returns (gcoef, vol): ``gcoef[..., k]`` scales the temperature jump
    across face k (between nodes k and k+1) into a heat flow rate, and
    ``vol[..., j]`` is the exact annular area of interior cell j+1.
    Works on stacked profiles (leading dimensions broadcast).
    """
    dxi = (np.log(y[..., -1:]) - np.log(y[..., :1])) / (y.shape[-1] - 1)
    d_nodes = diffusivity(E, params)
    d_face = 0.5 * (d_nodes[..., :-1] + d_nodes[..., 1:])
    gcoef = 2.0 * math.pi * d_face / dxi
    y_face = np.sqrt(y[..., :-1] * y[..., 1:])
    vol = math.pi * (y_face[..., 1:] ** 2 - y_face[..., :-1] ** 2)
    return gcoef, vol


def micro_temperature_rate(y, E, T, T_inner, T_outer, params):
    """Interior dT/dt of c_w dT/dt = div(D grad T) with Dirichlet ends.

    ``T`` supplies interior node temperatures (T[..., 1:-1] is used); the
    boundary nodes are replaced by the given Dirichlet values.
    """
    gcoef, vol = micro_face_coeffs(y, E, params)
    Tb = np.array(T, dtype=float, copy=True)
    Tb[..., 0] = T_inner
    Tb[..., -1] = T_outer
    g = gcoef * (Tb[..., 1:] - Tb[..., :-1])
    return (g[..., 1:] - g[..., :-1]) / (params.c_w * vol)


def solve_tridiagonal(sub, diag, sup, rhs):
    """Thomas algorithm, vectorized over leading dimensions."""
    m = diag.shape[-1]
    cp = np.empty_like(diag)
    dp = np.empty_like(diag)
    cp[..., 0] = sup[..., 0] / diag[..., 0]
    dp[..., 0] = rhs[..., 0] / diag[..., 0]
    for k in range(1, m):
        den = diag[..., k] - sub[..., k] * cp[..., k - 1]
        cp[..., k] = sup[..., k] / den if k < m - 1 else 0.0
        dp[..., k] = (rhs[..., k] - sub[..., k] * dp[..., k - 1]) / den
    x = np.empty_like(diag)
    x[..., -1] = dp[..., -1]
    for k in range(m - 2, -1, -1):
        x[..., k] = dp[..., k] - cp[..., k] * x[..., k + 1]
    return x


def implicit_micro_temperatures(y, E, T_old, T_inner, T_outer, dt, params):
    """One backward-Euler step of the interior temperatures (stacked).

    D(E) is lagged to the supplied enthalpies, so the solve is a single
    tridiagonal system; backward differencing preserves the maximum
    principle at any step size.
    """
    gcoef, vol = micro_face_coeffs(y, E, params)
    cap = params.c_w * vol / dt                      # (..., m)
    a_in = gcoef[..., :-1]                           # face below interior node
    a_out = gcoef[..., 1:]                           # face above
    diag = cap + a_in + a_out
    sub = np.concatenate([np.zeros_like(a_in[..., :1]), -a_in[..., 1:]], axis=-1)
    sup = np.concatenate([-a_out[..., :-1], np.zeros_like(a_out[..., :1])], axis=-1)
    rhs = cap * T_old[..., 1:-1]
    rhs = rhs.copy()
    rhs[..., 0] += a_in[..., 0] * np.asarray(T_inner)
    rhs[..., -1] += a_out[..., -1] * np.asarray(T_outer)
    t_int = solve_tridiagonal(sub, diag, sup, rhs)
    T_new = np.array(T_old, dtype=float, copy=True)
    T_new[..., 1:-1] = t_int
    T_new[..., 0] = T_inner
    T_new[..., -1] = T_outer
    return T_new


def micro_heat_step(profile: MicroProfile, T_macro: float, dt: float,
                    params: ModelParams):
    """Advance the per-cell heat equation one implicit step.

    Boundary conditions: T = T_c at the inner (phase-change) node and
    T = T_macro at the coupling circle.  Returns the updated profile, the
    outward radial temperature gradient at the phase boundary (feeds the
    interface motion), and the outward flux D*dT/dy at the outer node
    (feeds the macroscale source through :func:`gamma_flux_integral`).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    law = water_law(params)
    T_old = profile.temperatures(law)
    T_new = implicit_micro_temperatures(profile.y, profile.E, T_old,
                                        params.T_c, T_macro, dt, params)
    if not np.all(np.isfinite(T_new)):
        raise FloatingPointError("micro heat step did not converge to finite values")
    new = MicroProfile(profile.y.copy(), np.asarray(liquid_enthalpy(T_new, law)))
    dxi = profile.dxi
    grad_inner = (T_new[..., 1] - T_new[..., 0]) / (dxi * profile.y[..., 0])
    d_nodes = diffusivity(new.E, params)
    d_outer = 0.5 * (d_nodes[..., -2] + d_nodes[..., -1])
    flux_gamma = d_outer * (T_new[..., -1] - T_new[..., -2]) / (dxi * profile.y[..., -1])
    return new, float(grad_inner), float(flux_gamma)


def gamma_flux_integral(profile: MicroProfile, params: ModelParams) -> float:
    """Macroscale source from the heat flux through the coupling circle.

    Radial symmetry reduces the surface integral to circumference times
    flux, divided by the fast-region area.  The sign convention is that a
    cell absorbing heat (outer boundary hotter than the interior, as when
    fiber ice is melting) yields a negative source: the macro field loses
    that energy.
    """
    law = water_law(params)
    T = profile.temperatures(law)
    d_nodes = diffusivity(profile.E, params)
    d_outer = 0.5 * (d_nodes[..., -2] + d_nodes[..., -1])
    grad_out = (T[..., -1] - T[..., -2]) / (profile.dxi * profile.y[..., -1])
    r_out = profile.y[..., -1]
    return float(-2.0 * math.pi * r_out * d_outer * grad_out / params.area_y1)
