"""Pseudospectral simulator and diagnostics laboratory for defocusing
coupled fourth-order Choquard / Hartree-Fock equations on a periodic box.
"""

__version__ = "0.1.0"

from .dynamics import (DriftGuardError, EvolveResult, EvolveSchedule,
                       IntegratorConfig, SystemState, evolve, nonlinearity,
                       rhs, step)
from .model import (AdmissibilityReport, ModelParams, PotentialSpec,
                    critical_exponents, is_biharmonic_admissible,
                    potential_admissibility, scattering_pairs,
                    validate_params)
from .spectral import (Field, Grid, apply_symbol, field_from_function,
                       band_limited_field, gaussian_field, gradient, lebesgue_norm,
                       linear_propagator, local_l2_sup, read_snapshot,
                       riesz_convolve, singular_weight, sobolev_h2_norm,
                       write_snapshot)

__all__ = [
    "AdmissibilityReport", "DriftGuardError", "EvolveResult",
    "EvolveSchedule", "Field", "Grid", "IntegratorConfig", "ModelParams",
    "PotentialSpec", "SystemState", "apply_symbol", "critical_exponents",
    "band_limited_field", "evolve", "field_from_function",
    "gaussian_field", "gradient",
    "is_biharmonic_admissible", "lebesgue_norm", "linear_propagator",
    "local_l2_sup", "nonlinearity", "potential_admissibility",
    "read_snapshot", "rhs", "riesz_convolve", "scattering_pairs",
    "singular_weight", "sobolev_h2_norm", "step", "validate_params",
    "write_snapshot",
]
