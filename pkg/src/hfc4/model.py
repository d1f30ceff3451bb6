"""Model parameters for the defocusing coupled fourth-order Choquard /
Hartree-Fock system, admissibility reporting, exact-rational space-time
pair arithmetic, and external potentials.

The classification into decay / scattering regimes is advisory: it gates
nothing by itself.  Operational validity (what the solver can actually run)
is a separate, smaller set of checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .spectral import Field, Grid, gradient, riesz_convolve

INF = math.inf


def _as_fraction(x) -> Fraction:
    """Exact rational image of the input (floats map to their exact binary
    value, so derived identities still hold exactly)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x)


@dataclass
class ModelParams:
    """Structural parameters of the N-component system.

    sigma1, sigma2 are 0/1 switches for the -Delta term and the external
    potential; p is the Choquard power; gamma1/gamma2 the kernel orders of
    the Choquard and Hartree-Fock convolutions; rho1/rho2 the singular
    weight exponents; b the Hartree-Fock coupling and b_jk the symmetric
    nonnegative Choquard coupling matrix.
    """

    d: int
    N: int
    p: float
    gamma1: float
    gamma2: float
    rho1: float = 0.0
    rho2: float = 0.0
    sigma1: int = 0
    sigma2: int = 0
    b: float = 0.0
    b_jk: np.ndarray = None

    def __post_init__(self):
        if not (isinstance(self.d, int) and self.d >= 1):
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.N, int) and self.N >= 1):
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if self.sigma1 not in (0, 1) or self.sigma2 not in (0, 1):
            raise ValueError("sigma1, sigma2 must be 0 or 1")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("rho1, rho2 must be >= 0")
        if self.b < 0:
            raise ValueError(f"b must be >= 0 (defocusing), got {self.b}")
        if self.b_jk is None:
            self.b_jk = np.zeros((self.N, self.N))
        self.b_jk = np.asarray(self.b_jk, dtype=float)
        if self.b_jk.shape != (self.N, self.N):
            raise ValueError(f"b_jk must be {self.N}x{self.N}, got {self.b_jk.shape}")
        if np.any(self.b_jk < 0):
            raise ValueError("b_jk must be entrywise >= 0 (defocusing)")
        if not np.allclose(self.b_jk, self.b_jk.T):
            raise ValueError("b_jk must be symmetric")
        for name in ("p", "gamma1", "gamma2", "rho1", "rho2", "b"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def has_choquard(self) -> bool:
        return bool(np.any(self.b_jk != 0))

    def has_hartree_fock(self) -> bool:
        return self.b != 0


def critical_exponents(d: int, gamma1, gamma2, rho1=0, rho2=0) -> dict:
    """Upper Choquard threshold p_star and the two lower thresholds
    p1_star, p2_star = (d + gamma_k + 4 + rho_k)/d."""
    if d >= 5:
        p_star = (d + gamma1 + rho1) / (d - 4)
    else:
        # the finite formula only makes sense for d >= 5
        p_star = INF
    return {
        "p_star": p_star,
        "p1_star": (d + gamma1 + 4 + rho1) / d,
        "p2_star": (d + gamma2 + 4 + rho2) / d,
    }


# ---------------------------------------------------------------------------
# Space-time pair arithmetic (exact rationals; INF is a first-class value)

def _recip(x):
    if x == INF:
        return Fraction(0)
    return 1 / _as_fraction(x)


def is_biharmonic_admissible(q, r, d: int) -> bool:
    """Scaling relation 4/q + d/r = d/2 with 2 <= q, r <= inf, excluding
    (q, r, d) = (2, inf, 4).  Exact rational arithmetic; inf allowed."""
    for v in (q, r):
        if v != INF and _as_fraction(v) < 2:
            return False
    if (q, r, d) == (2, INF, 4):
        return False
    return 4 * _recip(q) + d * _recip(r) == Fraction(d, 2)


@dataclass(frozen=True)
class PairInfo:
    name: str
    q: Fraction
    r: Fraction
    theta: Optional[Fraction]
    family: str  # 'choquard' (power p) or 'hartree' (power 2)
    theta_ok: bool


def _theta(q: Fraction, power: Fraction) -> Optional[Fraction]:
    """Interpolation exponent (q - q')/(2 power q' - 2 q'), q' conjugate."""
    if q in (0, 1):
        return None
    qp = q / (q - 1)
    denom = 2 * power * qp - 2 * qp
    if denom == 0:
        return None
    return (q - qp) / denom


def scattering_pairs(params: ModelParams) -> list:
    """The eight derived space-time pairs with interpolation exponents.

    All arithmetic is exact; each pair satisfies 4/q + d/r = d/2
    identically.  theta_ok records theta in (0, 1); a failure is reported,
    never raised.
    """
    d = Fraction(params.d)
    p = _as_fraction(params.p)
    g1 = _as_fraction(params.gamma1)
    g2 = _as_fraction(params.gamma2)
    r1 = _as_fraction(params.rho1)
    r2 = _as_fraction(params.rho2)

    def frac_pair(qn, qd, rn, rd):
        if qd == 0 or rd == 0:
            return None, None
        return Fraction(qn, 1) / qd, Fraction(rn, 1) / rd

    raw = [
        ("pair1", "choquard", frac_pair(8 * p, d * p - d - g1, 2 * d * p, d + g1)),
        ("pair2", "hartree", frac_pair(8, d - g1, 4 * d, d + g1)),
        ("pair3", "choquard",
         frac_pair(8 * p, d * p - d - g1 + 2 * r1, 2 * d * p, d + g1 - 2 * r1)),
        ("pair4", "choquard",
         frac_pair(8 * (2 * p - 1), d * (2 * p - 1) - (d + 4 + 2 * g1 - 4 * r1),
                   2 * d * (2 * p - 1), d + 4 + 2 * g1 - 4 * r1)),
        ("pair5", "choquard",
         frac_pair(8 * (2 * p - 1), d * (2 * p - 1) - (d + 6 + 2 * g1 - 4 * r1),
                   2 * d * (2 * p - 1), d + 6 + 2 * g1 - 4 * r1)),
        ("pair6", "hartree",
         frac_pair(16, d - g2 + 2 * r2, 4 * d, d + g2 - 2 * r2)),
        ("pair7", "hartree",
         frac_pair(24, 2 * d - (4 + 2 * g2 - 4 * r2), 6 * d, d + 4 + 2 * g2 - 4 * r2)),
        ("pair8", "hartree",
         frac_pair(24, 2 * d - (6 + 2 * g2 - 4 * r2), 6 * d, d + 6 + 2 * g2 - 4 * r2)),
    ]
    out = []
    for name, family, (q, r) in raw:
        if q is None or q <= 1 or r <= 0:
            out.append(PairInfo(name, q, r, None, family, False))
            continue
        power = p if family == "choquard" else Fraction(2)
        theta = _theta(q, power)
        ok = theta is not None and 0 < theta < 1
        out.append(PairInfo(name, q, r, theta, family, ok))
    return out


# ---------------------------------------------------------------------------
# Admissibility report

@dataclass
class ConditionResult:
    ok: bool
    detail: str


@dataclass
class AdmissibilityReport:
    conditions: dict
    decay_case: Optional[str]
    scattering_case: Optional[str]
    messages: list = field(default_factory=list)

    @property
    def admissible(self) -> bool:
        """Base well-posedness conditions (kernels, power range, weights,
        low-dimension balance) all hold."""
        base = ("kernel_range", "power_range", "weight_range", "low_dim_balance")
        return all(self.conditions[k].ok for k in base)

    def to_dict(self) -> dict:
        return {
            "conditions": {k: {"ok": v.ok, "detail": v.detail}
                           for k, v in self.conditions.items()},
            "admissible": self.admissible,
            "decay_case": self.decay_case,
            "scattering_case": self.scattering_case,
            "messages": list(self.messages),
        }


def validate_params(params: ModelParams) -> AdmissibilityReport:
    """Classify the parameters; reports, never raises, on inadmissibility."""
    d = params.d
    crit = critical_exponents(d, params.gamma1, params.gamma2,
                              params.rho1, params.rho2)
    conds = {}

    ok = True
    details = []
    for k, g in (("1", params.gamma1), ("2", params.gamma2)):
        lo = max(0, d - 8)
        good = lo < g < d
        ok = ok and good
        details.append(f"gamma{k}={g} in ({lo}, {d}): {good}")
    conds["kernel_range"] = ConditionResult(ok, "; ".join(details))

    good = 2 <= params.p < crit["p_star"]
    conds["power_range"] = ConditionResult(
        good, f"2 <= p={params.p} < p_star={crit['p_star']}: {good}")

    ok = True
    details = []
    for k, (g, rho) in (("1", (params.gamma1, params.rho1)),
                        ("2", (params.gamma2, params.rho2))):
        cap = min(d + g, 4 * (1 + g / d), 8 + g - d)
        good = 0 <= rho < cap
        ok = ok and good
        details.append(f"rho{k}={rho} in [0, {cap}): {good}")
    conds["weight_range"] = ConditionResult(ok, "; ".join(details))

    if 3 <= d <= 4:
        ok = True
        details = []
        for k, (g, rho) in (("1", (params.gamma1, params.rho1)),
                            ("2", (params.gamma2, params.rho2))):
            val = 2 * g - 4 * rho + d
            good = val > 0
            ok = ok and good
            details.append(f"2*gamma{k}-4*rho{k}+d={val} > 0: {good}")
        conds["low_dim_balance"] = ConditionResult(ok, "; ".join(details))
    else:
        conds["low_dim_balance"] = ConditionResult(True, "vacuous outside d in [3,4]")

    good = params.p > crit["p1_star"]
    conds["scattering_power_lower"] = ConditionResult(
        good, f"p={params.p} > p1_star={crit['p1_star']}: {good}")
    good = crit["p2_star"] <= 2
    conds["scattering_hartree_threshold"] = ConditionResult(
        good, f"p2_star={crit['p2_star']} <= 2: {good}")

    base = all(conds[k].ok for k in
               ("kernel_range", "power_range", "weight_range", "low_dim_balance"))

    diag_coupled = bool(np.all((np.diag(params.b_jk) != 0) | (params.sigma1 != 0)))
    weights_off = params.rho1 == 0 and params.rho2 == 0

    decay_case = None
    if base:
        if (d >= 3 and diag_coupled and weights_off and params.sigma2 == 0):
            decay_case = "Case1"
        elif d >= 5 and not (weights_off and params.sigma2 == 0):
            decay_case = "Case2"

    scat_base = base and conds["scattering_power_lower"].ok \
        and conds["scattering_hartree_threshold"].ok
    scattering_case = None
    if scat_base:
        if (d >= 3 and diag_coupled and params.p > 2 and params.b == 0
                and weights_off and params.sigma2 == 0):
            scattering_case = "Case1"
        elif d >= 5 and (params.p == 2 or not (weights_off and params.sigma2 == 0)):
            scattering_case = "Case2"

    messages = [f"{k}: {v.detail}" for k, v in conds.items() if not v.ok]
    return AdmissibilityReport(conds, decay_case, scattering_case, messages)


def operational_validity(params: ModelParams) -> list:
    """Conditions the solver itself needs (kernels integrable, weights
    integrable, power defined).  Returns a list of problems, empty if ok."""
    problems = []
    for k, g in (("gamma1", params.gamma1), ("gamma2", params.gamma2)):
        if not (0 < g < params.d):
            problems.append(f"{k}={g} outside (0, d): convolution kernel undefined")
    for k, rho in (("rho1", params.rho1), ("rho2", params.rho2)):
        if not (0 <= rho < params.d):
            problems.append(f"{k}={rho} outside [0, d): weight not integrable")
    if params.p < 2:
        problems.append(f"p={params.p} < 2: |u|^(p-2) undefined at zeros")
    return problems


# ---------------------------------------------------------------------------
# External potentials

@dataclass
class PotentialSpec:
    """Repulsive external potential; families: 'zero',
    'gaussian-bump' (V0 exp(-|x|^2/(2 s^2))), 'tabulated' (explicit samples).
    """

    family: str = "zero"
    V0: float = 0.0
    s: float = 1.0
    table: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in ("zero", "gaussian-bump", "tabulated"):
            raise ValueError(f"unknown potential family {self.family!r}")
        if self.family == "gaussian-bump":
            if self.V0 < 0:
                raise ValueError("V0 must be >= 0")
            if self.s <= 0:
                raise ValueError("s must be > 0")
        if self.family == "tabulated" and self.table is None:
            raise ValueError("tabulated potential needs samples")

    def sample(self, grid: Grid) -> np.ndarray:
        if self.family == "zero":
            return np.zeros(grid.shape)
        if self.family == "gaussian-bump":
            return self.V0 * np.exp(-grid.radius_sq() / (2 * self.s ** 2))
        table = np.asarray(self.table, dtype=float)
        if table.shape != grid.shape:
            raise ValueError(
                f"tabulated potential shape {table.shape} != grid {grid.shape}")
        return table


@dataclass
class PotentialReport:
    nonnegative: bool
    repulsive: bool
    lattice_ld4_norm: float
    kernel_weighted_sup: Optional[float]
    min_value: float
    max_radial_derivative: float

    @property
    def ok(self) -> bool:
        return self.nonnegative and self.repulsive


def potential_admissibility(potential: PotentialSpec, grid: Grid) -> PotentialReport:
    """Check V >= 0 and x . grad V <= 0 on the lattice, and report the
    L^{d/4} lattice norm plus (d >= 5) the kernel-weighted sup."""
    v = potential.sample(grid)
    vmin = float(np.min(v))
    nonneg = vmin >= 0.0
    scale = float(np.max(np.abs(v))) or 1.0

    fv = Field(grid, v.astype(np.complex128))
    grads = gradient(fv)
    xdotgrad = np.zeros(grid.shape)
    for xi, gi in zip(grid.coords(), grads):
        xdotgrad = xdotgrad + xi * gi.real
    max_rad = float(np.max(xdotgrad))
    # spectral-gradient ringing floor
    repulsive = max_rad <= 1e-8 * scale * (1 + grid.L)

    ld4 = float((grid.cell_volume * np.sum(np.abs(v) ** (grid.d / 4)))
                ** (4 / grid.d)) if scale > 0 else 0.0

    weighted = None
    if grid.d >= 5 and np.any(v != 0):
        conv = riesz_convolve(Field(grid, v.astype(np.complex128)), 4.0)
        weighted = float(np.max(conv.values.real))

    return PotentialReport(nonneg, repulsive, ld4, weighted, vmin, max_rad)
