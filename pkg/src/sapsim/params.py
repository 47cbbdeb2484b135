"""Physical constants and tree parameters, with derived quantities.

All quantities are SI with temperature in Kelvin internally (ambient
temperatures are supplied in degrees Celsius and converted at the signal
boundary).  The base case describes a young sugar-maple sapling: stem
radius 7 cm, no heartwood, 3% sap sugar content.

Parameters are immutable after construction; parameter sweeps construct
fresh instances via :func:`build_params`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields


class ParamError(ValueError):
    """Raised for out-of-range or inconsistent parameter sets."""


#: Pure-water melting temperature used internally, K.  Enthalpy reference
#: values (e_ice, e_wat) are per-mass enthalpies at the melting point.
T_MELT = 273.15

#: Atmospheric pressure used for gauge-pressure output, Pa.
P_ATM = 101325.0

# Base-case primitive values.  Every key is accepted in flat config files
# (``key = value`` lines, SI units).
BASE_CASE = {
    # geometry of the stem cross-section
    "R_tree": 0.07,        # stem radius, m
    "R_sap": 0.0,          # heartwood (non-conducting core) radius, m
    # microstructure
    "R_f": 3.5e-6,         # fiber inner radius, m
    "R_v": 2.0e-5,         # vessel inner radius, m
    "L_f": 1.0e-3,         # fiber length, m
    "L_v": 5.0e-4,         # vessel element length, m
    "N": 16.0,             # fibers per vessel
    # hydraulics
    "A_tree": 14.0,        # total root area, m^2
    "Lw": 5.54e-13,        # fiber-vessel wall conductivity, m/s/Pa
    "Lr": 2.7e-16,         # root conductivity, m/s/Pa
    "Cr_in": 1.0,          # root reflection coefficient, inflow
    "Cr_out": 0.2,         # root reflection coefficient, outflow
    "p_soil": 2.03e5,      # soil water pressure (= initial sap pressure), Pa
    # sap chemistry
    "gamma_s": 0.03,       # sugar mass fraction
    "M_s": 0.3423,         # molar mass of sucrose, kg/mol
    "M_g": 0.029,          # molar mass of air, kg/mol
    "H": 0.0274,           # Henry's constant, dimensionless
    "K_b": 1.853,          # cryoscopic constant, kg K / mol
    "Rgas": 8.314,         # universal gas constant, J/K/mol
    # water / ice properties
    "c_i": 2100.0,         # specific heat of ice, J/K/kg
    "c_w": 4180.0,         # specific heat of water, J/K/kg
    "c_inf": 1.0e7,        # regularization slope of the mushy zone, J/K/kg
    "E_i": 574.0e3,        # ice enthalpy at the melting point, J/kg
    "E_w": 907.0e3,        # water enthalpy at the melting point, J/kg
    "k_i": 2.22,           # ice conductivity, W/m/K
    "k_w": 0.556,          # water conductivity, W/m/K
    "rho_i": 917.0,        # ice density, kg/m^3
    "rho_w": 1000.0,       # water density, kg/m^3
    "sigma_iw": 0.033,     # ice-water surface tension, N/m
    "sigma_gw": 0.076,     # gas-water surface tension, N/m
    "T_c": T_MELT,         # pure-water melting temperature, K
    # microcell model settings
    "n_y": 6,              # radial nodes of the per-cell temperature grid
    "p_ice_model": "melt-film",  # suction closure: melt-film | clapeyron | young-laplace
    "init_vessel_gas_frac": 0.05,   # initial vessel gas volume fraction
    "init_fiber_gas_frac": 0.5,     # initial s_g / R_f
    "radius_floor": 1.0e-9,         # bubble-collapse floor for s_g and r, m
}

_DERIVED = ("theta", "A_fv", "A_r", "eps", "C_s", "T_c_sap",
            "delta_i", "delta_w", "R_gamma", "area_y1", "area_y2")

_STR_KEYS = ("p_ice_model",)
_INT_KEYS = ("n_y",)


@dataclass(frozen=True)
class ModelParams:
    """Full parameter catalog: primitives plus derived quantities.

    Immutable and freely shareable across threads.
    """

    R_tree: float
    R_sap: float
    R_f: float
    R_v: float
    L_f: float
    L_v: float
    N: float
    A_tree: float
    Lw: float
    Lr: float
    Cr_in: float
    Cr_out: float
    p_soil: float
    gamma_s: float
    M_s: float
    M_g: float
    H: float
    K_b: float
    Rgas: float
    c_i: float
    c_w: float
    c_inf: float
    E_i: float
    E_w: float
    k_i: float
    k_w: float
    rho_i: float
    rho_w: float
    sigma_iw: float
    sigma_gw: float
    T_c: float
    n_y: int
    p_ice_model: str
    init_vessel_gas_frac: float
    init_fiber_gas_frac: float
    radius_floor: float
    # derived
    theta: float
    A_fv: float
    A_r: float
    eps: float
    C_s: float
    T_c_sap: float
    delta_i: float
    delta_w: float
    R_gamma: float
    area_y1: float
    area_y2: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_config_text(self) -> str:
        """Serialize as flat ``key = value`` lines (round-trips bit-exactly)."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, str) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def latent_heat(self) -> float:
        """E_w - E_i, the latent heat of fusion, J/kg."""
        return self.E_w - self.E_i


def fpd(gamma_s: float, k_b: float = BASE_CASE["K_b"],
        m_s: float = BASE_CASE["M_s"]) -> float:
    """Freezing point depression of sap, K, for a sugar mass fraction.

    The sugar concentration C_s = gamma_s*rho_w/M_s lowers the sap melting
    point by K_b*C_s/rho_w = K_b*gamma_s/M_s; the water density cancels.
    Linear in gamma_s.
    """
    if gamma_s < 0:
        raise ParamError(f"gamma_s must be non-negative, got {gamma_s}")
    return k_b * gamma_s / m_s


def build_params(raw: dict | None = None) -> ModelParams:
    """Build a validated ModelParams from a flat key-value set.

    Unspecified keys take base-case values.  Derived fields are always
    recomputed from primitives, so feeding a previous instance's dict back
    in reproduces it exactly.  ``theta`` may be given instead of ``R_sap``;
    if both are present they must agree.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(BASE_CASE) - set(_DERIVED)
    if unknown:
        raise ParamError(f"unknown parameter keys: {sorted(unknown)}")

    p = dict(BASE_CASE)
    overrides = {k: raw[k] for k in raw if k in BASE_CASE}
    p.update(overrides)

    # heartwood can be specified as a fraction of the stem radius
    if "theta" in raw:
        theta = float(raw["theta"])
        if not 0.0 <= theta < 1.0:
            raise ParamError(f"theta must be in [0, 1), got {theta}")
        r_sap = theta * p["R_tree"]
        if "R_sap" in raw and not math.isclose(raw["R_sap"], r_sap,
                                               rel_tol=1e-9, abs_tol=1e-12):
            raise ParamError("theta and R_sap are inconsistent")
        p["R_sap"] = r_sap

    for key in _STR_KEYS:
        p[key] = str(p[key])
    for key in _INT_KEYS:
        p[key] = int(p[key])
    for key in BASE_CASE:
        if key not in _STR_KEYS and key not in _INT_KEYS:
            p[key] = float(p[key])

    _validate_primitives(p)

    eps = math.sqrt(math.pi * p["R_v"] ** 2 + math.pi * p["R_f"] ** 2 * p["N"])
    a_fv = float(raw.get("A_fv", 2.0 * math.pi * p["R_v"] * p["L_v"]))
    a_r = p["A_tree"] * (p["R_v"] / p["R_tree"]) ** 2
    c_s = p["gamma_s"] * p["rho_w"] / p["M_s"]
    t_c_sap = p["T_c"] - p["K_b"] * c_s / p["rho_w"]
    lat = p["E_w"] - p["E_i"]
    delta_i = p["c_i"] * lat / (2.0 * (p["c_inf"] - p["c_i"]))
    delta_w = p["c_w"] * lat / (2.0 * (p["c_inf"] - p["c_w"]))
    r_gamma = float(raw.get("R_gamma", eps / 2.0 - p["R_f"]))

    if delta_i <= 0 or delta_w <= 0:
        raise ParamError("enthalpy regularization half-widths must be positive "
                         "(requires c_inf > c_w > c_i and E_w > E_i)")
    if not p["R_f"] < r_gamma <= eps / 2.0:
        raise ParamError(f"R_gamma = {r_gamma} must lie in (R_f, eps/2]")
    if p["p_ice_model"] not in ("melt-film", "clapeyron", "young-laplace"):
        raise ParamError(f"unknown p_ice_model {p['p_ice_model']!r}")

    area_y2 = math.pi * r_gamma ** 2
    area_y1 = eps ** 2 - area_y2

    return ModelParams(
        **{k: p[k] for k in BASE_CASE},
        theta=p["R_sap"] / p["R_tree"],
        A_fv=a_fv, A_r=a_r, eps=eps, C_s=c_s, T_c_sap=t_c_sap,
        delta_i=delta_i, delta_w=delta_w, R_gamma=r_gamma,
        area_y1=area_y1, area_y2=area_y2,
    )


def _validate_primitives(p: dict) -> None:
    for key in ("R_tree", "R_f", "R_v", "L_f", "L_v", "N", "A_tree",
                "Lw", "Lr", "c_i", "c_w", "c_inf", "k_i", "k_w",
                "rho_i", "rho_w", "sigma_gw", "M_s", "M_g", "K_b", "Rgas"):
        if p[key] <= 0:
            raise ParamError(f"{key} must be strictly positive, got {p[key]}")
    if p["sigma_iw"] < 0:
        raise ParamError("sigma_iw must be non-negative")
    if not 0.0 <= p["gamma_s"] <= 0.10:
        raise ParamError(f"gamma_s must be in [0, 0.10], got {p['gamma_s']}")
    if not 0.0 <= p["Cr_out"] <= 1.0:
        raise ParamError(f"Cr_out must be in [0, 1], got {p['Cr_out']}")
    if not 0.0 <= p["Cr_in"] <= 1.0:
        raise ParamError(f"Cr_in must be in [0, 1], got {p['Cr_in']}")
    if p["R_sap"] < 0 or p["R_sap"] >= p["R_tree"]:
        raise ParamError(f"R_sap must satisfy 0 <= R_sap < R_tree, "
                         f"got R_sap={p['R_sap']}, R_tree={p['R_tree']}")
    if p["E_w"] <= p["E_i"]:
        raise ParamError("E_w must exceed E_i (positive latent heat)")
    if p["H"] < 0:
        raise ParamError("Henry's constant must be non-negative")
    if not 0.0 < p["init_vessel_gas_frac"] < 1.0:
        raise ParamError("init_vessel_gas_frac must be in (0, 1)")
    if not 0.0 < p["init_fiber_gas_frac"] < 1.0:
        raise ParamError("init_fiber_gas_frac must be in (0, 1)")
    if p["n_y"] < 3:
        raise ParamError("n_y must be at least 3")


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` config lines (UTF-8, ``#`` comments)."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParamError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip().strip("'\"")
        if not key:
            raise ParamError(f"config line {lineno}: empty key")
        if key in _STR_KEYS:
            out[key] = value
        else:
            try:
                out[key] = float(value)
            except ValueError as exc:
                raise ParamError(f"config line {lineno}: bad value {value!r} "
                                 f"for key {key!r}") from exc
    return out


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
