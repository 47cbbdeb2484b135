"""Per-reference-cell freeze-thaw dynamics of a fiber/vessel pair.

The fiber holds nested annular layers: a gas core of radius s_g, an ice
annulus out to s_iw, and liquid water out to the fiber wall R_f.  The
vessel holds a gas bubble of radius r suspended in sap.  Five cumulative
quantities evolve: the two fiber interfaces, the vessel bubble radius, the
melt-water volume U pushed through the porous fiber-vessel wall (positive
fiber to vessel), and the root water uptake U_r.  Algebraic closures give
gas densities (total free plus dissolved gas mass is conserved) and liquid
pressures (ideal gas minus capillary jump).

Integration uses squared radii (s_g^2, s_iw^2, r^2) as unknowns: the fiber
volume bookkeeping, the vessel liquid/gas volume exchange, and the gas
mass closure are all linear in these variables and in U, U_r, so every
converged implicit step satisfies the conservation identities to solver
round-off at any step size.

A cell passes through discrete freeze-thaw states (the phase tag).  The
fiber is frozen, thawing, thawed, or freezing; the vessel is frozen or
thawed, flipped by the macroscale solver as the local enthalpy crosses the
sap melting point.  Fiber onsets switch on the interface temperature
crossing the mush corners T_c - delta_i/c_i (freeze) and T_c + delta_w/c_w
(thaw), which provides a small natural hysteresis band; completions switch
when an interface annulus empties.  Transitions never skip states; forced
reversals (rapid temperature swings) are logged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from sapsim.params import ModelParams
from sapsim import thermal

logger = logging.getLogger(__name__)

FIBER_FROZEN, FIBER_THAWING, FIBER_THAWED, FIBER_FREEZING = 0, 1, 2, 3
VESSEL_FROZEN, VESSEL_THAWED = 0, 1

_FIBER_NAMES = {FIBER_FROZEN: "frozen", FIBER_THAWING: "thawing",
                FIBER_THAWED: "thawed", FIBER_FREEZING: "freezing"}
_VESSEL_NAMES = {VESSEL_FROZEN: "frozen", VESSEL_THAWED: "thawed"}
_FIBER_CODES = {v: k for k, v in _FIBER_NAMES.items()}
_VESSEL_CODES = {v: k for k, v in _VESSEL_NAMES.items()}

#: Admissible (fiber, vessel) combinations: the full thaw cycle plus the
#: mixed fronts.  A thawing or thawed fiber next to a frozen vessel cannot
#: occur because sap melts before pure fiber ice.
ADMISSIBLE_TAGS = frozenset([
    ("thawed", "thawed"), ("thawing", "thawed"), ("frozen", "thawed"),
    ("frozen", "frozen"), ("freezing", "frozen"), ("freezing", "thawed"),
])

#: Residual water fraction below which a fiber annulus counts as empty.
WATER_FLOOR_FRAC = 4.0e-6

#: Width (fraction of R_f^2) of the linear taper applied to interface and
#: outflow rates as an annulus empties; wide enough that finite-difference
#: Jacobians resolve the ramp.
GATE_FRAC = 64.0e-6


def _smooth_pos(x, eps):
    """Differentiable positive part: 0.5*(x + sqrt(x^2 + eps^2))."""
    return 0.5 * (x + np.sqrt(x * x + eps * eps))


class CellIntegrationError(RuntimeError):
    """Implicit micro step failed to converge."""

    def __init__(self, message, cell_index=None, time=None, residual=None):
        detail = message
        if cell_index is not None:
            detail += f" (cell {cell_index}"
            if time is not None:
                detail += f", t={time:.6g} s"
            if residual is not None:
                detail += f", residual={residual:.3g}"
            detail += ")"
        super().__init__(detail)
        self.cell_index = cell_index
        self.time = time
        self.residual = residual


class BubbleCollapseError(CellIntegrationError):
    """A gas bubble radius reached its singularity floor."""


@dataclass(frozen=True)
class PhaseTag:
    """Discrete fiber/vessel freeze-thaw case selector."""

    fiber: str
    vessel: str

    def __post_init__(self):
        if (self.fiber, self.vessel) not in ADMISSIBLE_TAGS:
            raise ValueError(f"inadmissible phase tag {(self.fiber, self.vessel)}")

    @property
    def stefan_active(self) -> bool:
        return self.fiber in ("thawing", "freezing")

    @property
    def vessel_thawed(self) -> bool:
        return self.vessel == "thawed"


@dataclass
class CellState:
    """Microscale state at one macro grid point (a value type)."""

    s_g: float
    s_iw: float
    r: float
    U: float
    U_r: float
    rho_g_f: float
    rho_g_v: float
    p_w_f: float
    p_w_v: float
    micro_y: np.ndarray
    micro_E: np.ndarray
    tag: PhaseTag

    def copy(self) -> "CellState":
        return replace(self, micro_y=self.micro_y.copy(),
                       micro_E=self.micro_E.copy())


def p_ice_value(s_iw: float, T: float, params: ModelParams) -> float:
    """Cryostatic suction at a frozen fiber, Pa (pluggable closure).

    ``melt-film`` (default) models the ice surface as pulling sugar-free
    film water: the generalized Clausius-Clapeyron pull of ice under the
    local undercooling, rho_w*L*(T_c - T)/T_c, plus the osmotic term it
    must overcome in the wall balance.  The net wall drive in the frozen
    state is then p_w_v - p_w_f + rho_w*L*(T_c - T)/T_c, which sustains
    the strong suction uptake (and its growth with sugar content through
    the wider freezing-point-depression window) that drives multi-cycle
    pressure build-up.  ``clapeyron`` keeps the bare pull, which the
    osmotic term cancels near the sap liquidus; ``young-laplace`` uses the
    ice-water surface tension across the interface of radius s_iw.  The
    latter two produce much weaker storage and exist for comparison.
    """
    undercool = max(params.T_c - T, 0.0)
    pull = params.rho_w * (params.E_w - params.E_i) * undercool / params.T_c
    if params.p_ice_model == "young-laplace":
        return 2.0 * params.sigma_iw / s_iw
    if params.p_ice_model == "clapeyron":
        return pull
    return pull + params.C_s * params.Rgas * T


def fiber_gas_rate(state: CellState, siw_rate: float, U_rate: float,
                   params: ModelParams) -> float:
    """ds_g/dt from the differentiated fiber volume constraint.

    Ice growth (ds_iw/dt > 0) compresses the gas through the ice/water
    density contrast; outflow through the wall (dU/dt > 0) lets it expand.
    """
    if state.s_g <= params.radius_floor:
        raise BubbleCollapseError("fiber gas bubble at singularity floor")
    lead = -(params.rho_w - params.rho_i) * state.s_iw * siw_rate \
        / (params.rho_i * state.s_g)
    push = params.rho_w * U_rate / (2.0 * math.pi * params.L_f
                                    * params.rho_i * state.s_g)
    return lead + push


def vessel_gas_rate(state: CellState, U_rate: float, Ur_rate: float,
                    params: ModelParams) -> float:
    """dr/dt: liquid volume gained by the vessel equals gas volume lost."""
    if state.r <= params.radius_floor:
        raise BubbleCollapseError("vessel gas bubble at singularity floor")
    return -(params.N * U_rate + Ur_rate) / (2.0 * math.pi * params.L_v * state.r)


def stefan_rate(state: CellState, grad_T_at_interface: float, U_rate: float,
                params: ModelParams) -> float:
    """ds_iw/dt from the interfacial energy balance.

    ``grad_T_at_interface`` is the outward-normal liquid temperature
    gradient at the ice-water interface; heating (positive gradient)
    recedes the interface.
    """
    kappa = (params.k_w / params.rho_w) / (params.E_w - params.E_i)
    return -kappa * grad_T_at_interface \
        + U_rate / (2.0 * math.pi * params.L_f * state.s_iw)


def wall_flux_rate(state: CellState, params: ModelParams) -> float:
    """dU/dt through the selectively permeable fiber-vessel wall.

    Balances vessel and fiber liquid pressures, the osmotic pull of the
    sap sugar (evaluated at the wall temperature), and cryostatic suction
    when the fiber is completely frozen next to a thawed vessel.  A frozen
    vessel freezes the flux to zero.  Under the young-laplace and clapeyron
    closures a frozen fiber admits inflow only (its ice cannot leave);
    the melt-film closure carries both directions through the premelted
    film at the wall.
    """
    if not state.tag.vessel_thawed:
        return 0.0
    t_wall = _wall_temperature(state, params)
    p_ice = 0.0
    if state.tag.fiber == "frozen":
        p_ice = p_ice_value(state.s_iw, t_wall, params)
    drive = state.p_w_v - state.p_w_f - params.C_s * params.Rgas * t_wall + p_ice
    flux = -(params.Lw * params.A_fv / params.N) * drive
    if flux > 0.0 and state.tag.fiber == "frozen"             and params.p_ice_model != "melt-film":
        return 0.0
    return flux


def root_flux_rate(state: CellState, params: ModelParams) -> float:
    """dU_r/dt through the roots, with check-valve asymmetry.

    Inflow (vessel pressure below soil pressure) sees the full root
    conductivity; outflow is scaled by the reflection coefficient Cr_out.
    """
    c_r = params.Cr_in if state.p_w_v <= params.p_soil else params.Cr_out
    return -c_r * params.Lr * params.A_r * (state.p_w_v - params.p_soil)


def vessel_volumes(r: float, params: ModelParams):
    """(V_g_v, V_w_v): gas and sap volumes partitioning the vessel exactly."""
    v_g = math.pi * params.L_v * r ** 2
    return v_g, math.pi * params.L_v * params.R_v ** 2 - v_g


def gas_density(mass: float, v_g: float, v_w: float, h: float) -> float:
    """Free-gas density when a conserved mass spreads over gas plus solution."""
    return mass / (v_g + h * v_w)


def vessel_pressure(state: CellState, params: ModelParams, mass: float = None):
    """(p_w_v, rho_g_v) from the gas bubble radius and conserved gas mass.

    ``mass`` is the free-plus-dissolved gas mass recorded at t=0; when
    omitted, the state's current density is taken as already consistent.
    """
    if state.r <= params.radius_floor:
        raise BubbleCollapseError("vessel gas bubble at singularity floor")
    v_g, v_w = vessel_volumes(state.r, params)
    rho = state.rho_g_v if mass is None else gas_density(mass, v_g, v_w, params.H)
    p = rho * params.Rgas * params.T_c / params.M_g - 2.0 * params.sigma_gw / state.r
    return p, rho


def fiber_pressure(state: CellState, params: ModelParams) -> float:
    """p_w_f by the same closure as the vessel, on the fiber geometry.

    Dissolved gas follows Henry's law only into the liquid annulus, whose
    volume vanishes when the fiber is fully frozen.
    """
    if state.s_g <= params.radius_floor:
        raise BubbleCollapseError("fiber gas bubble at singularity floor")
    return state.rho_g_f * params.Rgas * params.T_c / params.M_g \
        - 2.0 * params.sigma_gw / state.s_g


def _wall_temperature(state: CellState, params: ModelParams) -> float:
    """Sap temperature at the fiber-vessel wall, K, from the micro profile."""
    law = thermal.water_law(params)
    temps = thermal.liquid_temperature(state.micro_E, law)
    return float(np.interp(math.log(params.R_f),
                           np.log(state.micro_y), temps))


def gas_mass(rho: float, v_g: float, v_w: float, h: float) -> float:
    """Conserved free-plus-dissolved gas mass."""
    return rho * (v_g + h * v_w)


def init_cell_state(params: ModelParams, T_init: float) -> CellState:
    """Initial state with pressures balancing the soil pressure.

    Warm starts are fully thawed: the vessel gas occupies
    ``init_vessel_gas_frac`` of the vessel volume, the fiber gas radius is
    ``init_fiber_gas_frac * R_f`` with no ice, and both gas densities are
    chosen so the initial liquid pressures equal p_soil (the stated
    initial vessel pressure).  Cold starts (T_init at or below the fiber
    freeze onset) hold the same water inventory as ice, with the gas core
    compressed by the freezing expansion and the phase tag set to match
    the vessel state implied by T_init.
    """
    r0 = math.sqrt(params.init_vessel_gas_frac) * params.R_v
    s_g0 = params.init_fiber_gas_frac * params.R_f
    gas_t = params.Rgas * params.T_c / params.M_g
    rho_v0 = (params.p_soil + 2.0 * params.sigma_gw / r0) / gas_t
    # the fiber sits at the standing osmotic equilibrium against the sap
    # (wall flux zero), so the run starts on the rest state rather than
    # with an artificial day-scale drain transient
    p_f0 = params.p_soil - params.C_s * params.Rgas * T_init
    p_f0 = max(p_f0, -1.8 * params.sigma_gw / s_g0)   # keep gas density positive
    rho_f0 = (p_f0 + 2.0 * params.sigma_gw / s_g0) / gas_t
    law = thermal.water_law(params)

    vessel_thawed = T_init > params.T_c_sap
    # sap frozen next to liquid fiber water cannot occur; freeze both
    fiber_liquid = vessel_thawed and \
        T_init > params.T_c - params.delta_i / params.c_i
    if fiber_liquid:
        s_g, s_iw = s_g0, s_g0
        rho_f = rho_f0
        tag = PhaseTag("thawed", "thawed")
    else:
        # freeze the initial water annulus: ice takes rho_w/rho_i times the
        # water volume, compressing the gas core; gas mass is conserved
        a0 = s_g0 ** 2
        a_frozen = params.R_f ** 2 - (params.rho_w / params.rho_i) \
            * (params.R_f ** 2 - a0)
        if a_frozen <= params.radius_floor ** 2:
            raise ValueError("initial fiber gas fraction too small to "
                             "absorb the freezing expansion")
        v_g0 = math.pi * params.L_f * a0
        v_w0 = math.pi * params.L_f * (params.R_f ** 2 - a0)
        mass = rho_f0 * (v_g0 + params.H * v_w0)
        s_g = math.sqrt(a_frozen)
        s_iw = params.R_f
        rho_f = mass / (math.pi * params.L_f * a_frozen)
        tag = PhaseTag("frozen", "thawed" if vessel_thawed else "frozen")

    profile = thermal.make_profile(s_iw if s_iw < params.R_gamma else params.R_f * 0.999,
                                   params.R_gamma, params.n_y, T_init, law)
    p_w_f = rho_f * gas_t - 2.0 * params.sigma_gw / s_g
    return CellState(
        s_g=s_g, s_iw=s_iw, r=r0, U=0.0, U_r=0.0,
        rho_g_f=rho_f, rho_g_v=rho_v0,
        p_w_f=p_w_f, p_w_v=params.p_soil,
        micro_y=profile.y, micro_E=profile.E,
        tag=tag,
    )


@dataclass
class StepControls:
    """Tolerances of the implicit micro substepper."""

    rtol: float = 1.0e-5
    newton_max: int = 12
    dt_min: float = 1.0e-7
    event_tol: float = 1.0e-3
    max_substeps: int = 20000


@dataclass
class BankAudit:
    """Running conservation residual maxima (relative, per step)."""

    fiber_volume: float = 0.0
    vessel_volume: float = 0.0
    gas_mass: float = 0.0
    substeps: int = 0
    newton_iters: int = 0
    events: int = 0
    forced_reversals: int = 0
    nesting_clamps: int = 0

    def absorb(self, other: "BankAudit") -> None:
        self.fiber_volume = max(self.fiber_volume, other.fiber_volume)
        self.vessel_volume = max(self.vessel_volume, other.vessel_volume)
        self.gas_mass = max(self.gas_mass, other.gas_mass)
        self.substeps += other.substeps
        self.newton_iters += other.newton_iters
        self.events += other.events
        self.forced_reversals += other.forced_reversals
        self.nesting_clamps += other.nesting_clamps


class CellBank:
    """All reference cells of one macro grid, advanced in lockstep.

    Struct-of-arrays layout; every rate and Newton solve is vectorized
    across cells.  Cells are independent given the frozen macroscale
    temperature, so lockstep substepping changes cost, not results.
    """

    def __init__(self, params: ModelParams, states):
        self.params = params
        n = len(states)
        self.n = n
        ny = params.n_y
        self.a = np.array([s.s_g ** 2 for s in states])
        self.b = np.array([s.s_iw ** 2 for s in states])
        self.q = np.array([s.r ** 2 for s in states])
        self.U = np.array([s.U for s in states])
        self.Ur = np.array([s.U_r for s in states])
        self.fiber = np.array([_FIBER_CODES[s.tag.fiber] for s in states], dtype=np.int8)
        self.vessel = np.array([_VESSEL_CODES[s.tag.vessel] for s in states], dtype=np.int8)
        law = thermal.water_law(params)
        self.mesh = np.array([s.micro_y for s in states], dtype=float)
        self.mT = np.array([thermal.liquid_temperature(s.micro_E, law)
                            for s in states], dtype=float)
        if self.mesh.shape != (n, ny):
            raise ValueError("micro profiles must have n_y nodes")
        piLf = math.pi * params.L_f
        piLv = math.pi * params.L_v
        v_g_f = piLf * self.a
        v_w_f = piLf * np.maximum(params.R_f ** 2 - self.b, 0.0)
        v_g_v = piLv * self.q
        v_w_v = piLv * np.maximum(params.R_v ** 2 - self.q, 0.0)
        rho_f = np.array([s.rho_g_f for s in states])
        rho_v = np.array([s.rho_g_v for s in states])
        self.m_gas_f = rho_f * (v_g_f + params.H * v_w_f)
        self.m_gas_v = rho_v * (v_g_v + params.H * v_w_v)
        self.audit = BankAudit()
        # cached constants
        self._piLf = piLf
        self._piLv = piLv
        self._wallK = params.Lw * params.A_fv / params.N
        self._rootK = params.Lr * params.A_r
        self._kappa = (params.k_w / params.rho_w) / (params.E_w - params.E_i)
        self._gas_t = params.Rgas * params.T_c / params.M_g
        self._csr = params.C_s * params.Rgas
        self._wfloor = WATER_FLOOR_FRAC * params.R_f ** 2
        self._wgate = GATE_FRAC * params.R_f ** 2
        self._scales = None
        self._jac_memory = None
        self._dt_sub_memory = math.inf
        self._paused = None
        self._pde_prev = None

    # -- conversions --------------------------------------------------

    @classmethod
    def from_states(cls, params, states):
        return cls(params, states)

    def state(self, i: int) -> CellState:
        p = self.params
        law = thermal.water_law(p)
        prof_E = np.asarray(thermal.liquid_enthalpy(self.mT[i], law))
        rho_f, p_f, rho_v, p_v = self._pressures_scalar(i)
        return CellState(
            s_g=math.sqrt(self.a[i]), s_iw=math.sqrt(self.b[i]),
            r=math.sqrt(self.q[i]), U=float(self.U[i]), U_r=float(self.Ur[i]),
            rho_g_f=rho_f, rho_g_v=rho_v, p_w_f=p_f, p_w_v=p_v,
            micro_y=self.mesh[i].copy(), micro_E=prof_E,
            tag=PhaseTag(_FIBER_NAMES[int(self.fiber[i])],
                         _VESSEL_NAMES[int(self.vessel[i])]),
        )

    def states(self):
        return [self.state(i) for i in range(self.n)]

    def _pressures_scalar(self, i):
        p = self.params
        v_g_f = self._piLf * self.a[i]
        v_w_f = self._piLf * max(p.R_f ** 2 - self.b[i], 0.0)
        rho_f = self.m_gas_f[i] / (v_g_f + p.H * v_w_f)
        p_f = rho_f * self._gas_t - 2.0 * p.sigma_gw / math.sqrt(self.a[i])
        v_g_v = self._piLv * self.q[i]
        v_w_v = self._piLv * max(p.R_v ** 2 - self.q[i], 0.0)
        rho_v = self.m_gas_v[i] / (v_g_v + p.H * v_w_v)
        p_v = rho_v * self._gas_t - 2.0 * p.sigma_gw / math.sqrt(self.q[i])
        return float(rho_f), float(p_f), float(rho_v), float(p_v)

    def vessel_pressures(self) -> np.ndarray:
        p = self.params
        v_g_v = self._piLv * self.q
        v_w_v = self._piLv * np.maximum(p.R_v ** 2 - self.q, 0.0)
        rho_v = self.m_gas_v / (v_g_v + p.H * v_w_v)
        return rho_v * self._gas_t - 2.0 * p.sigma_gw / np.sqrt(self.q)

    def snapshot(self):
        """Copy of the mutable state, for trial-step rollback."""
        return (self.a.copy(), self.b.copy(), self.q.copy(), self.U.copy(),
                self.Ur.copy(), self.fiber.copy(), self.vessel.copy(),
                self.mesh.copy(), self.mT.copy())

    def restore(self, snap) -> None:
        (self.a, self.b, self.q, self.U, self.Ur,
         self.fiber, self.vessel, self.mesh, self.mT) = \
            tuple(arr.copy() for arr in snap)

    # -- tag handling --------------------------------------------------

    def apply_fiber_onsets(self, T_macro: np.ndarray) -> None:
        """Switch fiber states whose onset temperature threshold is crossed.

        Thresholds sit at the mush corners of the pure-water law, giving a
        ~0.03 K hysteresis band around T_c that suppresses chatter.
        """
        p = self.params
        t_freeze_on = p.T_c - p.delta_i / p.c_i
        t_thaw_on = p.T_c + p.delta_w / p.c_w
        dry = (p.R_f ** 2 - self.b) <= self._wfloor
        no_ice = (self.b - self.a) <= self._wfloor

        # the 0.1 mK tolerance lets a flip stick when a step lands exactly
        # on its threshold; a freshly flipped cell sits at zero budget until
        # the macro energy balance actually crosses
        cold = T_macro < t_freeze_on + 1.0e-4
        hot = T_macro > t_thaw_on - 1.0e-4

        sel = (self.fiber == FIBER_THAWED) & cold
        if np.any(sel):
            self.fiber[sel & ~dry] = FIBER_FREEZING
            self.fiber[sel & dry] = FIBER_FROZEN
            self._jac_memory = None
        sel = (self.fiber == FIBER_FROZEN) & hot & (self.vessel == VESSEL_THAWED)
        if np.any(sel):
            self.fiber[sel & ~no_ice] = FIBER_THAWING
            self.fiber[sel & no_ice] = FIBER_THAWED
            self._jac_memory = None
        sel = (self.fiber == FIBER_FREEZING) & hot
        if np.any(sel):
            self.audit.forced_reversals += int(sel.sum())
            logger.debug("forced freezing->thawing reversal in %d cell(s)", sel.sum())
            self.fiber[sel] = FIBER_THAWING
            self._jac_memory = None
        sel = (self.fiber == FIBER_THAWING) & cold
        if np.any(sel):
            self.audit.forced_reversals += int(sel.sum())
            logger.debug("forced thawing->freezing reversal in %d cell(s)", sel.sum())
            self.fiber[sel] = FIBER_FREEZING
            self._jac_memory = None

    def set_vessel_states(self, thawed: np.ndarray) -> None:
        """Flip vessel states (driven by the macro enthalpy), keeping tags admissible."""
        newv = np.where(thawed, VESSEL_THAWED, VESSEL_FROZEN).astype(np.int8)
        froze = (self.vessel == VESSEL_THAWED) & (newv == VESSEL_FROZEN)
        bad = froze & ((self.fiber == FIBER_THAWING) | (self.fiber == FIBER_THAWED))
        if np.any(bad):
            # sap cannot freeze next to liquid fiber water; coerce and log
            self.audit.forced_reversals += int(bad.sum())
            logger.warning("vessel froze under %d thawing/thawed fiber(s); "
                           "coercing fiber to freezing/frozen", bad.sum())
            dry = (self.params.R_f ** 2 - self.b) <= self._wfloor
            self.fiber[bad & dry] = FIBER_FROZEN
            self.fiber[bad & ~dry] = FIBER_FREEZING
        if np.any(newv != self.vessel):
            self._jac_memory = None
        self.vessel = newv

    # -- implicit advance ----------------------------------------------

    def _scales_vec(self):
        if self._scales is None:
            p = self.params
            ny = p.n_y
            s = np.empty(5 + ny - 2)
            s[0] = p.R_f ** 2
            s[1] = p.R_f ** 2
            s[2] = p.R_v ** 2
            s[3] = math.pi * p.R_f ** 2 * p.L_f
            s[4] = math.pi * p.R_v ** 2 * p.L_v
            s[5:] = 1.0
            self._scales = s
        return self._scales

    def _project(self, Y):
        """Clamp iterates into the physically meaningful box."""
        p = self.params
        out = Y.copy()
        out[:, 0] = np.clip(out[:, 0], 0.0, p.R_f ** 2)
        out[:, 1] = np.clip(out[:, 1], 0.0, p.R_f ** 2)
        out[:, 2] = np.clip(out[:, 2], 0.0, p.R_v ** 2)
        return out

    def _pack(self):
        return np.concatenate(
            [self.a[:, None], self.b[:, None], self.q[:, None],
             self.U[:, None], self.Ur[:, None], self.mT[:, 1:-1]], axis=1)

    def _unpack(self, Y):
        self.a = Y[:, 0].copy()
        self.b = Y[:, 1].copy()
        self.q = Y[:, 2].copy()
        self.U = Y[:, 3].copy()
        self.Ur = Y[:, 4].copy()
        self.mT[:, 1:-1] = Y[:, 5:]

    def _context(self, T_macro):
        """Per-substep frozen quantities: mesh, operator coefficients, flags."""
        p = self.params
        ny = p.n_y
        pde_on = (self.fiber == FIBER_THAWING) | (self.fiber == FIBER_FREEZING)
        if self._paused is not None:
            pde_on = pde_on & ~self._paused
        vess_on = self.vessel == VESSEL_THAWED
        outer = np.where(vess_on, p.R_gamma, p.R_f)
        inner = np.sqrt(np.maximum(self.b, (10.0 * p.radius_floor) ** 2))
        inner = np.minimum(inner, outer * (1.0 - 1.0e-9))

        # move meshes to the current interfaces, carrying temperatures along
        new_mesh = np.exp(np.log(inner)[:, None]
                          + (np.log(outer) - np.log(inner))[:, None]
                          * np.linspace(0.0, 1.0, ny)[None, :])
        woke = pde_on & ~(self._pde_prev if self._pde_prev is not None
                          else np.zeros(self.n, dtype=bool))
        for i in np.flatnonzero(pde_on & ~woke):
            if abs(new_mesh[i, 0] - self.mesh[i, 0]) > 1e-9 * self.mesh[i, 0] \
                    or abs(new_mesh[i, -1] - self.mesh[i, -1]) > 1e-9 * self.mesh[i, -1]:
                self.mT[i] = np.interp(np.log(new_mesh[i]), np.log(self.mesh[i]),
                                       self.mT[i])
        self.mesh = new_mesh
        idle = ~pde_on
        self.mT[idle] = T_macro[idle, None]
        if np.any(woke):
            # freshly activated interfaces start on the quasi-steady profile
            # (linear in log-radius between the phase boundary and the
            # coupling circle); stale idle values would fake a transient
            lin = np.linspace(0.0, 1.0, ny)[None, :]
            self.mT[woke] = p.T_c + (T_macro[woke, None] - p.T_c) * lin
        self._pde_prev = pde_on.copy()
        self.mT[pde_on, 0] = p.T_c
        self.mT[pde_on, -1] = T_macro[pde_on]

        law = thermal.water_law(p)
        E_lag = thermal.liquid_enthalpy(self.mT, law)
        gcoef, vol = thermal.micro_face_coeffs(self.mesh, E_lag, p)
        dxi = (np.log(self.mesh[:, -1]) - np.log(self.mesh[:, 0])) / (ny - 1)

        # interpolation weights of the fiber-wall radius (osmotic temperature)
        xi_wall = (math.log(p.R_f) - np.log(self.mesh[:, 0])) / dxi
        j0 = np.clip(xi_wall.astype(int), 0, ny - 2)
        wgt = np.clip(xi_wall - j0, 0.0, 1.0)
        rows = np.arange(self.n)

        return {
            "T_macro": T_macro, "pde_on": pde_on, "vess_on": vess_on,
            "gcoef": gcoef, "vol": vol, "dxi": dxi, "y0": self.mesh[:, 0],
            "wall_lo": rows * ny + j0, "wall_hi": rows * ny + j0 + 1,
            "wall_w": wgt,
            # a budget-paused cell keeps its tag but suspends interface
            # motion, behaving like the frozen case until the next window
            "stefan_on": pde_on,
            "thawed_f": self.fiber == FIBER_THAWED,
            "frozen_f": self.fiber == FIBER_FROZEN,
        }

    def _rhs(self, Y, ctx):
        p = self.params
        n = self.n
        ny = p.n_y
        floor2 = (1e-2 * p.radius_floor) ** 2
        a = np.maximum(Y[:, 0], floor2)
        b = np.maximum(Y[:, 1], floor2)
        q = np.maximum(Y[:, 2], floor2)
        s_g = np.sqrt(a)
        s_iw = np.sqrt(b)
        r = np.sqrt(q)
        T_macro = ctx["T_macro"]
        pde_on = ctx["pde_on"]
        vess_on = ctx["vess_on"]
        frozen_f = ctx["frozen_f"]
        thawed_f = ctx["thawed_f"]

        # full temperature nodes with Dirichlet ends
        Tfull = np.empty((n, ny))
        Tfull[:, 1:-1] = Y[:, 5:]
        Tfull[:, 0] = np.where(pde_on, p.T_c, T_macro)
        Tfull[:, -1] = T_macro
        Tfull[~pde_on, 1:-1] = T_macro[~pde_on, None]

        # algebraic closures
        v_g_f = self._piLf * a
        v_w_f = self._piLf * np.maximum(p.R_f ** 2 - b, 0.0)
        rho_f = self.m_gas_f / (v_g_f + p.H * v_w_f)
        p_f = rho_f * self._gas_t - 2.0 * p.sigma_gw / s_g
        v_g_v = self._piLv * q
        v_w_v = self._piLv * np.maximum(p.R_v ** 2 - q, 0.0)
        rho_v = self.m_gas_v / (v_g_v + p.H * v_w_v)
        p_v = rho_v * self._gas_t - 2.0 * p.sigma_gw / r

        # osmotic temperature at the fiber wall
        flat = Tfull.ravel()
        w = ctx["wall_w"]
        t_wall = np.where(pde_on & vess_on,
                          (1.0 - w) * flat[ctx["wall_lo"]] + w * flat[ctx["wall_hi"]],
                          T_macro)

        # cryostatic suction: active only for a frozen fiber by a thawed vessel
        suck = frozen_f & vess_on
        if p.p_ice_model == "young-laplace":
            p_ice = suck * (2.0 * p.sigma_iw / s_iw)
        else:
            p_ice = suck * (p.rho_w * (p.E_w - p.E_i)
                            * np.maximum(p.T_c - T_macro, 0.0) / p.T_c)
            if p.p_ice_model == "melt-film":
                p_ice = p_ice + suck * (self._csr * t_wall)

        # wall flux, with physical guards: an emptied fiber stops outflow,
        # and a frozen fiber admits only inflow unless the melt-film closure
        # is active (its premelted film expels water by pressure melting).
        # Gates taper over a finite width and act on a smoothed positive
        # part, keeping the system differentiable through its equilibria.
        udot = -self._wallK * (p_v - p_f - self._csr * t_wall + p_ice)
        fill = np.clip((p.R_f ** 2 - a) / self._wgate, 0.0, 1.0)
        out_gate = fill * ~(frozen_f & (p.p_ice_model != "melt-film"))
        udot = vess_on * (udot - (1.0 - out_gate) * _smooth_pos(udot, 1e-20))

        c_r = np.where(p_v <= p.p_soil, p.Cr_in, p.Cr_out)
        urdot = vess_on * (-c_r * self._rootK * (p_v - p.p_soil))

        qdot = -(p.N * udot + urdot) / self._piLv

        # interface motion; growth needs liquid water and retreat needs ice
        grad = (Tfull[:, 1] - Tfull[:, 0]) / (ctx["dxi"] * ctx["y0"])
        bdot = ctx["stefan_on"] * (-2.0 * s_iw * self._kappa * grad
                                   + udot / self._piLf)
        water_gate = np.clip((p.R_f ** 2 - b) / self._wgate, 0.0, 1.0)
        ice_gate = np.clip((b - a) / self._wgate, 0.0, 1.0)
        bdot = bdot - (1.0 - water_gate) * _smooth_pos(bdot, 1e-14) \
            - (1.0 - ice_gate) * _smooth_pos(-bdot, 1e-14) * -1.0
        drho = (p.rho_w - p.rho_i) / p.rho_i
        adot_ice = -drho * bdot + p.rho_w * udot / (self._piLf * p.rho_i)
        adot = np.where(thawed_f, udot / self._piLf, adot_ice)
        bdot = np.where(thawed_f, adot, bdot)

        # micro temperature rates (interior nodes; idle cells stay pinned)
        g = ctx["gcoef"] * (Tfull[:, 1:] - Tfull[:, :-1])
        tdot = (g[:, 1:] - g[:, :-1]) / (p.c_w * ctx["vol"])
        tdot *= pde_on[:, None]

        out = np.empty_like(Y)
        out[:, 0] = adot
        out[:, 1] = bdot
        out[:, 2] = qdot
        out[:, 3] = udot
        out[:, 4] = urdot
        out[:, 5:] = tdot
        return out

    def _newton(self, Y0, dt, ctx, controls):
        """Backward-Euler solve of Y = Y0 + dt*F(Y) by damped modified Newton.

        Converges the scaled residual to ~1e-9 of each component's natural
        scale, which is what bounds the per-step conservation residuals.
        Returns (Y, F, converged, iteration_matrix) with the matrix
        I - dt*J available for stiffness-aware error filtering.
        """
        scales = self._scales_vec()
        eps = 1.0e-7 * scales
        m = Y0.shape[1]
        Y = Y0.copy()
        jac = self._jac_memory
        fresh_jac = False
        A = None
        F = self._rhs(Y, ctx)
        res_prev = math.inf
        dY = None
        backtracks = 0
        for it in range(controls.newton_max):
            R = Y - Y0 - dt * F
            tol = 1.0e-9 * scales + 1.0e-10 * np.abs(Y - Y0)
            if np.all(np.abs(R) <= tol):
                self.audit.newton_iters += it
                return Y, F, True, A
            res = float(np.max(np.abs(R) / scales))
            if res > res_prev and dY is not None and backtracks < 3:
                # residual grew: halve the last correction instead of
                # spending an extra function evaluation on a line search
                dY *= -0.5
                Y = Y + dY
                F = self._rhs(Y, ctx)
                backtracks += 1
                if not fresh_jac:
                    jac = None
                continue
            res_prev = res
            if jac is None or (it >= 4 and not fresh_jac) or it == 9:
                jac = np.empty((self.n, m, m))
                for k in range(m):
                    Yp = Y.copy()
                    Yp[:, k] += eps[k]
                    jac[:, :, k] = (self._rhs(Yp, ctx) - F) / eps[k]
                self._jac_memory = jac
                fresh_jac = True
                A = None
            if A is None:
                A = np.eye(m)[None, :, :] - dt * jac
            try:
                dY = np.linalg.solve(A, -R[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                return Y, F, False, A
            # per-cell trust region keeps iterates off the corners of the
            # physical box, where all rates vanish and Newton would stick
            cap = np.maximum(0.25 * scales[None, :], 0.5 * np.abs(Y))
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.min(np.minimum(1.0, cap / np.maximum(np.abs(dY), 1e-300)),
                             axis=1, keepdims=True)
            dY = fac * dY
            Y = self._project(Y + dY)
            F = self._rhs(Y, ctx)
        R = Y - Y0 - dt * F
        tol = 1.0e-9 * scales + 1.0e-10 * np.abs(Y - Y0)
        ok = bool(np.all(np.abs(R) <= 50.0 * tol))
        self.audit.newton_iters += controls.newton_max
        return Y, F, ok, A

    def _audit_substep(self, Y0, Y1):
        p = self.params
        da = Y1[:, 0] - Y0[:, 0]
        db = Y1[:, 1] - Y0[:, 1]
        dq = Y1[:, 2] - Y0[:, 2]
        dU = Y1[:, 3] - Y0[:, 3]
        dUr = Y1[:, 4] - Y0[:, 4]
        fib = np.abs(p.rho_i * (db - da) - p.rho_w * db + p.rho_w * dU / self._piLf) \
            / (p.rho_w * p.R_f ** 2)
        ves = np.abs(dq + (p.N * dU + dUr) / self._piLv) / p.R_v ** 2
        self.audit.fiber_volume = max(self.audit.fiber_volume, float(fib.max()))
        self.audit.vessel_volume = max(self.audit.vessel_volume, float(ves.max()))
        # gas densities are recomputed from the conserved masses; measure anyway
        v_g_f = self._piLf * Y1[:, 0]
        v_w_f = self._piLf * np.maximum(p.R_f ** 2 - Y1[:, 1], 0.0)
        rho_f = self.m_gas_f / (v_g_f + p.H * v_w_f)
        gres = np.abs(rho_f * (v_g_f + p.H * v_w_f) - self.m_gas_f) / self.m_gas_f
        self.audit.gas_mass = max(self.audit.gas_mass, float(gres.max()))

    def _gamma_inflow(self, ctx):
        """Heat flow into each micro region through its outer boundary (per depth)."""
        g_in = ctx["gcoef"][:, -1] * (self.mT[:, -1] - self.mT[:, -2])
        return np.where(ctx["pde_on"], g_in, 0.0)

    def _completion_events(self, a=None, b=None):
        """Normalized completion indicators (cross zero when an annulus empties)."""
        p = self.params
        a = self.a if a is None else a
        b = self.b if b is None else b
        g = np.full(self.n, -1.0)
        freezing = self.fiber == FIBER_FREEZING
        thawing = self.fiber == FIBER_THAWING
        g[freezing] = (b[freezing] - (p.R_f ** 2 - self._wfloor)) / p.R_f ** 2
        g[thawing] = ((a[thawing] + self._wfloor) - b[thawing]) / p.R_f ** 2
        return g

    def _apply_completions(self) -> int:
        """Switch states whose interface annulus has emptied; returns count."""
        p = self.params
        fired = 0
        done_freeze = (self.fiber == FIBER_FREEZING) & \
            (self.b >= p.R_f ** 2 - self._wfloor)
        if np.any(done_freeze):
            self.fiber[done_freeze] = FIBER_FROZEN
            self._jac_memory = None
            fired += int(done_freeze.sum())
        done_thaw = (self.fiber == FIBER_THAWING) & \
            (self.b - self.a <= self._wfloor)
        if np.any(done_thaw):
            self.fiber[done_thaw] = FIBER_THAWED
            self._jac_memory = None
            fired += int(done_thaw.sum())
        self.audit.events += fired
        # residual localization slip (at most one water-floor) is clamped so
        # layer nesting stays exact; counted for the diagnostics
        over = self.b < self.a
        if np.any(over):
            self.audit.nesting_clamps += int(over.sum())
            self.b[over] = self.a[over]
        cap = p.R_f ** 2
        over = self.b > cap
        if np.any(over):
            self.audit.nesting_clamps += int(over.sum())
            self.b[over] = cap
        return fired

    def _check_floors(self, t_now):
        p = self.params
        floor2 = p.radius_floor ** 2
        for name, arr in (("fiber gas bubble", self.a), ("vessel gas bubble", self.q)):
            if np.any(arr < floor2):
                i = int(np.argmin(arr))
                raise BubbleCollapseError(f"{name} collapsed to the singularity floor",
                                          cell_index=i, time=t_now)
        if np.any(self.q > p.R_v ** 2 * (1.0 - 1.0e-9)):
            i = int(np.argmax(self.q))
            raise CellIntegrationError("vessel water exhausted (gas fills vessel)",
                                       cell_index=i, time=t_now)

    def advance(self, T_macro: np.ndarray, dt_total: float,
                controls: StepControls | None = None, t0: float = 0.0,
                release_budget: np.ndarray = None,
                draw_budget: np.ndarray = None):
        """Advance all cells by dt_total holding the macro temperature fixed.

        Returns the per-cell macroscale source, J/kg/s, averaged over the
        window: the heat each reference cell drew from (negative) or
        released into (positive) the fast region across the coupling
        boundary, divided by the fast-region area.

        The optional budgets (J/kg of macro enthalpy) bound how much a cell
        may release while freezing or draw while melting within this window.
        Phase change across a micron-scale annulus discharges in
        milliseconds, far faster than the macro step, so without the bound a
        frozen-temperature half-step would overshoot the enthalpy room the
        macro cell actually has; a cell that exhausts its budget pauses
        until the next window, which makes the cell temperature ride the
        onset threshold while latent heat converts, as the coupled problem
        requires.
        """
        controls = controls or StepControls()
        T_macro = np.asarray(T_macro, dtype=float)
        if T_macro.shape != (self.n,):
            raise ValueError("T_macro must have one entry per cell")
        self.apply_fiber_onsets(T_macro)

        area = self.params.area_y1
        draw_lim = None if draw_budget is None else np.asarray(draw_budget) * area
        rel_lim = None if release_budget is None else np.asarray(release_budget) * area

        scales = self._scales_vec()
        heat_in = np.zeros(self.n)
        slack0 = 0.5 * area
        self._paused = np.zeros(self.n, dtype=bool)
        # cells already at their budget ride their onset threshold: idle
        # them up front instead of dribbling micro-substeps
        if rel_lim is not None:
            self._paused |= (self.fiber == FIBER_FREEZING) & (rel_lim <= slack0)
        if draw_lim is not None:
            self._paused |= (self.fiber == FIBER_THAWING) & (draw_lim <= slack0)
        t_loc = 0.0
        dt_sub = min(dt_total, getattr(self, "_dt_sub_memory", dt_total))
        substeps = 0
        while t_loc < dt_total * (1.0 - 1e-12):
            if substeps > controls.max_substeps:
                raise CellIntegrationError("micro substep budget exhausted",
                                           time=t0 + t_loc)
            dt_try = min(dt_sub, dt_total - t_loc)
            ctx = self._context(T_macro)
            Y0 = self._pack()
            F0 = self._rhs(Y0, ctx)
            # pre-cap the substep so no cell can blow far through its
            # remaining energy budget within one solve
            g_now = self._gamma_inflow(ctx)
            cap = np.inf
            if draw_lim is not None:
                pos = g_now > 1e-300
                if np.any(pos):
                    cap = min(cap, float(np.min(
                        (draw_lim[pos] - heat_in[pos]) / g_now[pos] + 1e-9)))
            if rel_lim is not None:
                neg = g_now < -1e-300
                if np.any(neg):
                    cap = min(cap, float(np.min(
                        (rel_lim[neg] + heat_in[neg]) / (-g_now[neg]) + 1e-9)))
            if cap < dt_try:
                dt_try = max(cap, controls.dt_min)
            Y1, F1, ok, A = self._newton(Y0, dt_try, ctx, controls)
            if not ok:
                dt_sub = dt_try / 4.0
                if dt_sub < controls.dt_min:
                    R = Y1 - Y0 - dt_try * F1
                    i = int(np.argmax(np.max(np.abs(R) / scales, axis=1)))
                    raise CellIntegrationError("micro Newton iteration stalled",
                                               cell_index=i, time=t0 + t_loc,
                                               residual=float(np.abs(R).max()))
                continue
            # local error: backward/forward Euler difference, filtered
            # through the iteration matrix so strongly damped stiff modes
            # (which backward Euler resolves stably) do not throttle dt
            est = 0.5 * dt_try * (F1 - F0)
            if A is not None:
                try:
                    est = np.linalg.solve(A, est[:, :, None])[:, :, 0]
                except np.linalg.LinAlgError:
                    pass
            # absolute floors sit at 5*rtol of each component's natural
            # scale, so tightening rtol tightens the whole control
            w = controls.rtol * (5.0 * scales + np.maximum(np.abs(Y0), np.abs(Y1)))
            err = float(np.sqrt(np.mean((est / w) ** 2)))
            if err > 1.0 and dt_try > controls.dt_min:
                dt_sub = dt_try * max(0.2, 0.8 / math.sqrt(err))
                continue

            # completion events: bisect the substep onto the earliest
            # crossing so interfaces land within one water-floor of their
            # bound (keeps the layer nesting invariant exact)
            g0 = self._completion_events(Y0[:, 0], Y0[:, 1])
            g1 = self._completion_events(Y1[:, 0], Y1[:, 1])
            crossed = (g0 < 0.0) & (g1 >= 0.0)
            band = WATER_FLOOR_FRAC
            if np.any(crossed) and float(np.max(g1[crossed])) > band:
                dt_lo, dt_hi = 0.0, dt_try
                for _ in range(80):
                    dt_mid = 0.5 * (dt_lo + dt_hi)
                    if dt_mid <= controls.dt_min or (dt_hi - dt_lo) < 1e-12 * dt_try:
                        break
                    Y_m, F_m, ok_m, _ = self._newton(Y0, dt_mid, ctx, controls)
                    if not ok_m:
                        dt_hi = dt_mid
                        continue
                    g_m = self._completion_events(Y_m[:, 0], Y_m[:, 1])
                    cr_m = (g0 < 0.0) & (g_m >= 0.0)
                    if np.any(cr_m):
                        dt_hi, Y1, F1, crossed = dt_mid, Y_m, F_m, cr_m
                        if float(np.max(g_m[cr_m])) <= band:
                            break
                    else:
                        dt_lo = dt_mid
                dt_try = dt_hi
            self._unpack(Y1)

            substeps += 1
            self.audit.substeps += 1
            self._audit_substep(Y0, Y1)
            heat_in += self._gamma_inflow(ctx) * dt_try
            t_loc += dt_try
            self._check_floors(t0 + t_loc)
            slack = 0.5 * area          # 0.5 J/kg of remaining room
            newly = np.zeros(self.n, dtype=bool)
            if draw_lim is not None:
                newly |= heat_in >= draw_lim - slack
            if rel_lim is not None:
                newly |= -heat_in >= rel_lim - slack
            newly &= ~self._paused
            if np.any(newly):
                self._paused |= newly
                self._jac_memory = None
            if self._apply_completions():
                dt_sub = max(dt_try / 4.0, controls.dt_min)
            elif err > 0.0:
                dt_sub = dt_try * min(4.0, max(0.3, 0.8 / math.sqrt(err + 1e-12)))
            else:
                dt_sub = dt_total
        self._dt_sub_memory = dt_sub
        self._paused = None
        # heat entering a micro region leaves the macro balance
        return -heat_in / (self.params.area_y1 * dt_total)


def step_cell(state: CellState, macro_T: float, dt: float,
              params: ModelParams) -> CellState:
    """Advance one cell by dt at fixed macroscale temperature.

    Integrates the interface, flux, and per-cell heat equations with the
    algebraic gas/pressure closures satisfied at the returned state, and
    applies any phase-tag transitions crossed during the step.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return state.copy()
    bank = CellBank(params, [state])
    bank.advance(np.array([macro_T]), dt)
    return bank.state(0)
