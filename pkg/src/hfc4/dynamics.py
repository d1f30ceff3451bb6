"""Time evolution: the coupled convolution nonlinearity, a Strang splitting
step (exact linear half-steps around an RK4 substep for the potential and
nonlinear terms), and the `evolve` driver with mass drift guard and
boundary-confinement warning.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import spectral
from .model import ModelParams, PotentialSpec
from .spectral import Field, Grid

logger = logging.getLogger(__name__)


class DriftGuardError(RuntimeError):
    """Raised when relative mass drift exceeds the configured guard."""


@dataclass
class SystemState:
    """Time t plus the ordered component fields (common grid)."""

    t: float
    fields: list

    def __post_init__(self):
        if not self.fields:
            raise ValueError("state needs at least one component")
        g = self.fields[0].grid
        for f in self.fields:
            if f.grid != g:
                raise ValueError("all components must share one grid")

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    @property
    def N(self) -> int:
        return len(self.fields)

    def copy(self) -> "SystemState":
        return SystemState(self.t, [f.copy() for f in self.fields])


@dataclass
class IntegratorConfig:
    dt: float = 5e-3
    diagnostics_stride: int = 10
    drift_guard: float = 1e-4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.diagnostics_stride < 1:
            raise ValueError("diagnostics_stride must be >= 1")
        if self.drift_guard <= 0:
            raise ValueError("drift_guard must be positive")


# ---------------------------------------------------------------------------
# Nonlinearity

def hartree_fock_convolutions(grid: Grid, vals: list, params: ModelParams,
                              w2: np.ndarray):
    """Shared Hartree-Fock convolutions.

    Returns (direct, exchange) where direct[k] = K_{gamma2} * (w2 |u_k|^2)
    and exchange[(k, j)] = K_{gamma2} * (w2 conj(u_k) u_j) for k < j; the
    diagonal reuses direct and the transpose is the conjugate (real kernel).
    """
    n = len(vals)
    direct = list(spectral.riesz_convolve_raw_batch(
        grid, np.stack([w2 * np.abs(v) ** 2 for v in vals]), params.gamma2))
    exchange = {}
    for k in range(n):
        exchange[(k, k)] = direct[k]
        for j in range(k + 1, n):
            exchange[(k, j)] = spectral.riesz_convolve_complex_raw(
                grid, w2 * np.conj(vals[k]) * vals[j], params.gamma2)
            exchange[(j, k)] = np.conj(exchange[(k, j)])
    return direct, exchange


def choquard_convolutions(grid: Grid, vals: list, params: ModelParams,
                          w1: np.ndarray) -> list:
    """G_k = K_{gamma1} * (w1 |u_k|^p), batched."""
    p = params.p
    return list(spectral.riesz_convolve_raw_batch(
        grid, np.stack([w1 * np.abs(v) ** p for v in vals]), params.gamma1))


def nonlinearity(state: SystemState, params: ModelParams) -> list:
    """The coupled convolution terms F_j, one array per component.

    F_j = sum_k b_jk [K_{g1} * (w1 |u_k|^p)] w1 |u_j|^{p-2} u_j
        + b sum_k ( [K_{g2} * (w2 |u_k|^2)] w2 u_j
                  - [K_{g2} * (w2 conj(u_k) u_j)] w2 u_k ).
    """
    grid = state.grid
    vals = [f.values for f in state.fields]
    n = len(vals)
    if n != params.N:
        raise ValueError(f"state has {n} components, params expect {params.N}")
    out = [np.zeros(grid.shape, dtype=np.complex128) for _ in range(n)]
    if not params.has_choquard() and not params.has_hartree_fock():
        return out

    gk = direct = None
    if (params.has_choquard() and params.has_hartree_fock()
            and params.gamma1 == params.gamma2):
        # same kernel: one batched transform covers both operand families
        w1 = spectral.singular_weight(grid, params.rho1)
        w2 = spectral.singular_weight(grid, params.rho2)
        stack = np.stack([w1 * np.abs(v) ** params.p for v in vals]
                         + [w2 * np.abs(v) ** 2 for v in vals])
        both = spectral.riesz_convolve_raw_batch(grid, stack, params.gamma1)
        gk = list(both[:n])
        direct = list(both[n:])

    if params.has_choquard():
        if gk is None:
            w1 = spectral.singular_weight(grid, params.rho1)
            gk = choquard_convolutions(grid, vals, params, w1)
        pm2 = params.p - 2
        for j in range(n):
            acc = np.zeros(grid.shape)
            for k in range(n):
                if params.b_jk[j, k] != 0:
                    acc = acc + params.b_jk[j, k] * gk[k]
            if np.any(acc):
                if pm2 == 0:
                    local = w1 * vals[j]
                else:
                    local = w1 * np.abs(vals[j]) ** pm2 * vals[j]
                out[j] += acc * local

    if params.has_hartree_fock():
        w2 = spectral.singular_weight(grid, params.rho2)
        if direct is not None:
            exchange = {}
            for k in range(n):
                exchange[(k, k)] = direct[k]
                for j in range(k + 1, n):
                    exchange[(k, j)] = spectral.riesz_convolve_complex_raw(
                        grid, w2 * np.conj(vals[k]) * vals[j], params.gamma2)
                    exchange[(j, k)] = np.conj(exchange[(k, j)])
        else:
            direct, exchange = hartree_fock_convolutions(grid, vals, params, w2)
        total_direct = sum(direct)
        for j in range(n):
            acc = total_direct * vals[j]
            for k in range(n):
                acc = acc - exchange[(k, j)] * vals[k]
            out[j] += params.b * w2 * acc

    return out


def _potential_values(grid: Grid, params: ModelParams,
                      potential: Optional[PotentialSpec]) -> Optional[np.ndarray]:
    if params.sigma2 == 0:
        return None
    if potential is None:
        raise ValueError("sigma2 = 1 requires a potential")
    return potential.sample(grid)


def rhs(state: SystemState, params: ModelParams,
        potential: Optional[PotentialSpec] = None) -> list:
    """du_j/dt = i (Delta^2 u_j - sigma1 Delta u_j + sigma2 V u_j + F_j)."""
    grid = state.grid
    v = _potential_values(grid, params, potential)
    fterms = nonlinearity(state, params)
    out = []
    for f, fj in zip(state.fields, fterms):
        fh = spectral.fftn(f.values)
        k2 = grid.freq_sq()
        lin = spectral.ifftn((k2 ** 2 + params.sigma1 * k2) * fh)
        term = lin + fj
        if v is not None:
            term = term + v * f.values
        out.append(1j * term)
    return out


# ---------------------------------------------------------------------------
# Strang step

def _substep_derivative(grid: Grid, vals: list, params: ModelParams,
                        v: Optional[np.ndarray]) -> list:
    """i (sigma2 V u + F(u)) for the RK4 substep, on raw arrays."""
    # lightweight wrap (skip re-validation in the hot loop)
    wrapped = []
    for arr in vals:
        fobj = Field.__new__(Field)
        fobj.grid = grid
        fobj.values = arr
        wrapped.append(fobj)
    st = SystemState.__new__(SystemState)
    st.t = 0.0
    st.fields = wrapped
    fterms = nonlinearity(st, params)
    out = []
    for arr, fj in zip(vals, fterms):
        term = fj if v is None else fj + v * arr
        out.append(1j * term)
    return out


def step(state: SystemState, params: ModelParams,
         potential: Optional[PotentialSpec] = None,
         config: Optional[IntegratorConfig] = None) -> SystemState:
    """One Strang step: exact linear half-step, RK4 on the potential +
    nonlinear part (convolutions recomputed at every stage), linear half-step.
    """
    cfg = config or IntegratorConfig()
    dt = cfg.dt
    grid = state.grid
    v = _potential_values(grid, params, potential)

    half = spectral.linear_phase(grid, dt / 2, params.sigma1)
    vals = [spectral.ifftn(half * spectral.fftn(f.values)) for f in state.fields]

    if params.has_choquard() or params.has_hartree_fock() or v is not None:
        k1 = _substep_derivative(grid, vals, params, v)
        k2 = _substep_derivative(
            grid, [u + 0.5 * dt * k for u, k in zip(vals, k1)], params, v)
        k3 = _substep_derivative(
            grid, [u + 0.5 * dt * k for u, k in zip(vals, k2)], params, v)
        k4 = _substep_derivative(
            grid, [u + dt * k for u, k in zip(vals, k3)], params, v)
        vals = [u + dt / 6 * (a + 2 * b + 2 * c + e)
                for u, a, b, c, e in zip(vals, k1, k2, k3, k4)]

    vals = [spectral.ifftn(half * spectral.fftn(u)) for u in vals]
    return SystemState(state.t + dt, [Field(grid, u) for u in vals])


# ---------------------------------------------------------------------------
# Evolution driver

@dataclass
class EvolveSchedule:
    """What to collect along the way.

    snapshot_times: states to keep (matched to the nearest step); records
    are taken every diagnostics_stride steps via the record_fn callback
    (signature record_fn(state) -> object).
    """

    snapshot_times: tuple = ()
    record_fn: Optional[Callable] = None


@dataclass
class EvolveResult:
    final_state: SystemState
    records: list
    snapshots: dict  # time -> SystemState
    boundary_warning: bool
    steps_taken: int


BOUNDARY_MASS_THRESHOLD = 1e-6


def _mass_per_component(state: SystemState) -> np.ndarray:
    hv = state.grid.cell_volume
    return np.array([hv * float(np.sum(np.abs(f.values) ** 2))
                     for f in state.fields])


def evolve(state: SystemState, T: float, params: ModelParams,
           potential: Optional[PotentialSpec] = None,
           config: Optional[IntegratorConfig] = None,
           schedule: Optional[EvolveSchedule] = None) -> EvolveResult:
    """Advance to t + T with repeated Strang steps.

    Aborts with DriftGuardError when any component's relative mass drift
    exceeds config.drift_guard (checked at record times).  Emits a single
    warning when more than 1e-6 of the mass leaves the central half-box.
    When the substep is trivial (no couplings, sigma2 = 0) the exact linear
    propagator jumps directly between collection times; the splitting is
    exact there, so the trajectory is identical up to roundoff.
    """
    cfg = config or IntegratorConfig()
    sched = schedule or EvolveSchedule()
    if T < 0:
        raise ValueError("T must be >= 0")
    nsteps = int(round(T / cfg.dt))
    if abs(nsteps * cfg.dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not an integer multiple of dt={cfg.dt}")

    mass0 = _mass_per_component(state)
    snapshots: dict = {}
    records: list = []
    boundary_warned = False

    snap_steps = {}
    for ts in sched.snapshot_times:
        k = int(round((ts - state.t) / cfg.dt))
        if not (0 <= k <= nsteps):
            raise ValueError(f"snapshot time {ts} outside [{state.t}, {state.t + T}]")
        snap_steps.setdefault(k, ts)

    def collect(k: int, st: SystemState) -> bool:
        nonlocal boundary_warned
        if k in snap_steps:
            snapshots[snap_steps[k]] = st.copy()
        hit_record = (k % cfg.diagnostics_stride == 0) or k == nsteps
        if hit_record:
            mass = _mass_per_component(st)
            drift = np.max(np.abs(mass - mass0) / np.maximum(mass0, 1e-300))
            if drift > cfg.drift_guard:
                raise DriftGuardError(
                    f"relative mass drift {drift:.3e} exceeds guard "
                    f"{cfg.drift_guard:.3e} at t={st.t:.6g}")
            if not boundary_warned:
                frac = spectral.boundary_shell_mass_fraction(st.grid, st.fields)
                if frac > BOUNDARY_MASS_THRESHOLD:
                    boundary_warned = True
                    warnings.warn(
                        f"mass fraction {frac:.3e} outside the central half-box "
                        f"at t={st.t:.6g}; box-size artifacts likely",
                        RuntimeWarning)
            if sched.record_fn is not None:
                records.append(sched.record_fn(st))
        return hit_record

    collect(0, state)

    free_flow = (not params.has_choquard() and not params.has_hartree_fock()
                 and params.sigma2 == 0)
    if free_flow:
        # exact linear jumps between collection steps
        marks = sorted(set([0, nsteps]) | set(snap_steps)
                       | set(range(0, nsteps + 1, cfg.diagnostics_stride)))
        cur = state
        for prev, nxt in zip(marks, marks[1:]):
            dt_jump = (nxt - prev) * cfg.dt
            vals = [spectral.propagate_linear_raw(cur.grid, f.values, dt_jump,
                                                  params.sigma1)
                    for f in cur.fields]
            cur = SystemState(cur.t + dt_jump, [Field(cur.grid, v) for v in vals])
            collect(nxt, cur)
        return EvolveResult(cur, records, snapshots, boundary_warned, nsteps)

    cur = state
    for k in range(1, nsteps + 1):
        cur = step(cur, params, potential, cfg)
        collect(k, cur)
        if k % max(1, nsteps // 10) == 0:
            logger.info("t=%.4g (%d/%d steps)", cur.t, k, nsteps)
    return EvolveResult(cur, records, snapshots, boundary_warned, nsteps)
