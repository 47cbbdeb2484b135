"""Two-scale freeze-thaw simulator of sap exudation pressure in maple stems.

The model couples a per-cell description of phase change, gas compression
and porous flow inside fiber/vessel pairs to a macroscale enthalpy heat
equation on the stem cross-section, with the coupling coefficients supplied
by a periodic cell problem.  Ambient temperature (synthetic or measured)
drives freeze-thaw cycles; the primary output is the area-averaged vessel
sap pressure and the cumulative root water uptake.
"""

from sapsim.params import ModelParams, build_params, fpd
from sapsim.harness import Scenario, RunOutput, run_scenario

__all__ = [
    "ModelParams",
    "build_params",
    "fpd",
    "Scenario",
    "RunOutput",
    "run_scenario",
]

__version__ = "0.1.0"
