"""Conserved quantities and the dispersive-decay diagnostics battery:
mass/energy, regularized Morawetz action and its time-derivative identity,
the two-component tensor action, localized interaction monitors, the
scattering pullback residual, and the pointwise/spectral inequality
monitors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import spectral
from .dynamics import SystemState, nonlinearity
from .model import ModelParams, PotentialSpec
from .spectral import Field, Grid


class BudgetError(RuntimeError):
    """Raised when a quadratic-cost diagnostic would exceed its budget."""


# ---------------------------------------------------------------------------
# Mass and energy

def mass(state: SystemState) -> np.ndarray:
    hv = state.grid.cell_volume
    return np.array([hv * float(np.sum(np.abs(f.values) ** 2))
                     for f in state.fields])


@dataclass
class EnergyBreakdown:
    total: float
    kin4: float       # sum_j ||Delta u_j||^2
    kin2: float       # sigma1 sum_j ||grad u_j||^2
    pot: float        # sigma2 sum_j int V |u_j|^2
    choquard: float   # (1/2p) sum_jk b_jk int [K*(w1|u_k|^p)] w1 |u_j|^p
    hf: float         # (b/2)(direct - exchange)
    hf_direct: float = 0.0
    hf_exchange: float = 0.0


def energy(state: SystemState, params: ModelParams,
           potential: Optional[PotentialSpec] = None) -> EnergyBreakdown:
    """Conserved energy, defocusing: every term is nonnegative and the
    Hartree-Fock direct part dominates the exchange part."""
    grid = state.grid
    hv = grid.cell_volume
    plancherel = hv / grid.size
    k2 = grid.freq_sq()
    kin4 = kin2 = 0.0
    for f in state.fields:
        fh2 = np.abs(spectral.fftn(f.values)) ** 2
        kin4 += plancherel * float(np.sum(k2 ** 2 * fh2))
        kin2 += plancherel * float(np.sum(k2 * fh2))
    kin2 *= params.sigma1

    pot = 0.0
    if params.sigma2 == 1:
        if potential is None:
            raise ValueError("sigma2 = 1 requires a potential")
        v = potential.sample(grid)
        for f in state.fields:
            pot += hv * float(np.sum(v * np.abs(f.values) ** 2))

    vals = [f.values for f in state.fields]
    choquard = 0.0
    if params.has_choquard():
        from .dynamics import choquard_convolutions
        w1 = spectral.singular_weight(grid, params.rho1)
        gk = choquard_convolutions(grid, vals, params, w1)
        dens_p = [w1 * np.abs(v) ** params.p for v in vals]
        for j in range(params.N):
            for k in range(params.N):
                if params.b_jk[j, k] != 0:
                    choquard += params.b_jk[j, k] * hv * float(
                        np.sum(gk[k] * dens_p[j]))
        choquard /= 2 * params.p

    hf = hf_direct = hf_exchange = 0.0
    if params.has_hartree_fock():
        from .dynamics import hartree_fock_convolutions
        w2 = spectral.singular_weight(grid, params.rho2)
        direct, exchange = hartree_fock_convolutions(grid, vals, params, w2)
        dens = [w2 * np.abs(v) ** 2 for v in vals]
        total_direct = sum(direct)
        hf_direct = hv * float(np.sum(total_direct * sum(dens)))
        exch = 0.0 + 0.0j
        for j in range(params.N):
            for k in range(params.N):
                exch += hv * complex(np.sum(exchange[(k, j)] * w2
                                            * vals[k] * np.conj(vals[j])))
        scale = abs(exch) + hf_direct + 1e-300
        if abs(exch.imag) > 1e-10 * scale:
            raise AssertionError(
                f"exchange energy acquired an imaginary part: {exch.imag:.3e}")
        hf_exchange = exch.real
        if hf_direct - hf_exchange < -1e-10 * scale:
            raise AssertionError("direct term fell below the exchange term")
        hf = params.b / 2 * (hf_direct - hf_exchange)

    total = kin4 + kin2 + pot + choquard + hf
    return EnergyBreakdown(total, kin4, kin2, pot, choquard, hf,
                           hf_direct, hf_exchange)


# ---------------------------------------------------------------------------
# Morawetz weights
#
# All weights are radial profiles a = phi(r); derivative combinations are
# expressed through two scalar coefficient fields so that
#   grad a = g(r) x,            D^2 a = c_iso I + c_xx x x^T.

class MorawetzWeight:
    """Radial weight interface; r2 is the squared-radius lattice array and
    d the ambient dimension of one space variable."""

    def grad_coeff(self, r2):
        raise NotImplementedError

    def lap(self, r2, d):
        raise NotImplementedError

    def hess_coeffs(self, r2):
        raise NotImplementedError

    def lap2(self, r2, d):
        raise NotImplementedError

    def lap3(self, r2, d):
        raise NotImplementedError

    def hess_lap_coeffs(self, r2, d):
        raise NotImplementedError


@dataclass(frozen=True)
class RegularizedAbsWeight(MorawetzWeight):
    """a(x) = sqrt(|x|^2 + eps^2); every derivative in closed form.

    With s = sqrt(r^2 + eps^2):
      grad a   = x / s
      Delta a  = (d-1)/s + eps^2/s^3
      D^2 a    = I/s - x x^T / s^3
      Delta^2 a = -(d-1)(d-3) s^-3 - 6(d-3) eps^2 s^-5 - 15 eps^4 s^-7
      Delta^3 a = 3(d-1)(d-3)(d-5) s^-5
                  + (15(d-1)(d-3) + 30(d-3)(d-7)) eps^2 s^-7
                  + (210(d-3) + 105(d-9)) eps^4 s^-9 + 945 eps^6 s^-11
    """

    eps: float

    def _s(self, r2):
        return np.sqrt(r2 + self.eps ** 2)

    def grad_coeff(self, r2):
        return 1.0 / self._s(r2)

    def lap(self, r2, d):
        s = self._s(r2)
        return (d - 1) / s + self.eps ** 2 / s ** 3

    def hess_coeffs(self, r2):
        s = self._s(r2)
        return 1.0 / s, -1.0 / s ** 3

    def lap2(self, r2, d):
        s = self._s(r2)
        e2 = self.eps ** 2
        return (-(d - 1) * (d - 3) / s ** 3 - 6 * (d - 3) * e2 / s ** 5
                - 15 * e2 ** 2 / s ** 7)

    def lap3(self, r2, d):
        s = self._s(r2)
        e2 = self.eps ** 2
        return (3 * (d - 1) * (d - 3) * (d - 5) / s ** 5
                + (15 * (d - 1) * (d - 3) + 30 * (d - 3) * (d - 7)) * e2 / s ** 7
                + (210 * (d - 3) + 105 * (d - 9)) * e2 ** 2 / s ** 9
                + 945 * e2 ** 3 / s ** 11)

    def hess_lap_coeffs(self, r2, d):
        # Delta a = h(s), h(s) = eps^2 s^-3 + (d-1) s^-1;
        # D^2 h(s(x)) = (h'/s) I + (h''/s^2 - h'/s^3) x x^T
        s = self._s(r2)
        e2 = self.eps ** 2
        hp = -3 * e2 / s ** 4 - (d - 1) / s ** 2
        hpp = 12 * e2 / s ** 5 + 2 * (d - 1) / s ** 3
        return hp / s, hpp / s ** 2 - hp / s ** 3


@dataclass(frozen=True)
class QuadraticWeight(MorawetzWeight):
    """a(x) = |x|^2 / 2 (the virial weight); grad a = x, D^2 a = I."""

    def grad_coeff(self, r2):
        return np.ones_like(r2)

    def lap(self, r2, d):
        return float(d) * np.ones_like(r2)

    def hess_coeffs(self, r2):
        return np.ones_like(r2), np.zeros_like(r2)

    def lap2(self, r2, d):
        return np.zeros_like(r2)

    def lap3(self, r2, d):
        return np.zeros_like(r2)

    def hess_lap_coeffs(self, r2, d):
        return np.zeros_like(r2), np.zeros_like(r2)


def default_weight(grid: Grid, eps: Optional[float] = None) -> RegularizedAbsWeight:
    """Regularized |x| weight with the default smoothing eps = 2h."""
    return RegularizedAbsWeight(2 * grid.h if eps is None else eps)


# ---------------------------------------------------------------------------
# Morawetz action and identity

def morawetz_action(state: SystemState,
                    weight: Optional[MorawetzWeight] = None) -> np.ndarray:
    """M_j = 2 Im h^d sum conj(u_j) grad u_j . grad a, one value per j."""
    grid = state.grid
    w = weight or default_weight(grid)
    g = w.grad_coeff(grid.radius_sq())
    xs = grid.coords()
    hv = grid.cell_volume
    out = []
    for f in state.fields:
        grads = spectral.gradient_arrays(grid, f.values)
        acc = np.zeros(grid.shape, dtype=np.complex128)
        for xi, gi in zip(xs, grads):
            acc += g * xi * np.conj(f.values) * gi
        out.append(2 * hv * float(np.sum(acc.imag)))
    return np.array(out)


@dataclass
class MorawetzIdentityResult:
    lhs: float
    rhs: float
    residual: float
    rhs_linear: float
    rhs_interaction: float


def morawetz_identity_residual(window, params: ModelParams,
                               potential: Optional[PotentialSpec] = None,
                               weight: Optional[MorawetzWeight] = None,
                               floor: float = 1e-12) -> MorawetzIdentityResult:
    """Check dM/dt against its closed form on a centered three-state window.

    window = (state at t - delta, state at t, state at t + delta); the left
    side is the component-summed central difference of the action, the right
    side is evaluated at the middle state:

      sum_j int (-Delta^3 a + sigma1 Delta^2 a) |u_j|^2
            + 2 Delta^2 a |grad u_j|^2
            + 4 Re grad u_j . D^2((Delta - sigma1) a) grad conj(u_j)
            - 8 Re tr(D^2 u_j D^2 a D^2 conj(u_j))
      - 2 sum_j Re int (sigma2 V u_j + F_j)(Delta a conj(u_j)
                                            + 2 grad a . grad conj(u_j)).

    The interaction/potential block is kept in pre-integration-by-parts
    form; it is equivalent to the rearranged single-weight expression but
    reuses the solver's own convolution assembly.  Returns the relative
    residual |lhs - rhs| / (|lhs| + |rhs| + floor).
    """
    sm, s0, sp = window
    delta_m = s0.t - sm.t
    delta_p = sp.t - s0.t
    if delta_m <= 0 or delta_p <= 0 or abs(delta_m - delta_p) > 1e-9 * delta_p:
        raise ValueError("window must be centered: t - delta, t, t + delta")
    grid = s0.grid
    w = weight or default_weight(grid)
    hv = grid.cell_volume
    r2 = grid.radius_sq()
    xs = grid.coords()
    d = grid.d

    lhs = float(np.sum(morawetz_action(sp, w)) - np.sum(morawetz_action(sm, w))) \
        / (delta_m + delta_p)

    g = w.grad_coeff(r2)
    lap_a = w.lap(r2, d)
    lap2_a = w.lap2(r2, d)
    lap3_a = w.lap3(r2, d)
    ciso, cxx = w.hess_coeffs(r2)
    liso, lxx = w.hess_lap_coeffs(r2, d)
    # D^2((Delta - sigma1) a)
    qiso = liso - params.sigma1 * ciso
    qxx = lxx - params.sigma1 * cxx

    rhs_linear = 0.0
    grads_all = []
    for f in s0.fields:
        u = f.values
        grads = spectral.gradient_arrays(grid, u)
        grads_all.append(grads)
        hess = spectral.hessian_arrays(grid, u)
        dens = np.abs(u) ** 2
        grad2 = np.zeros(grid.shape)
        for gi in grads:
            grad2 += np.abs(gi) ** 2

        t_mass = np.sum((-lap3_a + params.sigma1 * lap2_a) * dens)
        t_grad = 2 * np.sum(lap2_a * grad2)

        # 4 Re grad u . (q_iso I + q_xx x x^T) grad conj(u)
        xdotgrad = np.zeros(grid.shape, dtype=np.complex128)
        for xi, gi in zip(xs, grads):
            xdotgrad += xi * gi
        t_hessq = 4 * np.sum(qiso * grad2 + qxx * np.abs(xdotgrad) ** 2)

        # 8 Re tr(D^2 u (c_iso I + c_xx x x^T) D^2 conj(u))
        frob = np.zeros(grid.shape)
        for (i, j), hij in hess.items():
            frob += (1 if i == j else 2) * np.abs(hij) ** 2
        wvec = []
        for i in range(d):
            wi = np.zeros(grid.shape, dtype=np.complex128)
            for l in range(d):
                wi += xs[l] * hess[(min(i, l), max(i, l))]
            wvec.append(wi)
        wnorm = np.zeros(grid.shape)
        for wi in wvec:
            wnorm += np.abs(wi) ** 2
        t_hess = -8 * np.sum(ciso * frob + cxx * wnorm)

        rhs_linear += hv * float((t_mass + t_grad + t_hessq + t_hess).real)

    # interaction + potential block, pre-integration-by-parts
    fterms = nonlinearity(s0, params)
    v = None
    if params.sigma2 == 1:
        if potential is None:
            raise ValueError("sigma2 = 1 requires a potential")
        v = potential.sample(grid)
    rhs_inter = 0.0
    for f, fj, grads in zip(s0.fields, fterms, grads_all):
        u = f.values
        source = fj if v is None else fj + v * u
        if not np.any(source):
            continue
        pair = lap_a * np.conj(u)
        for xi, gi in zip(xs, grads):
            pair = pair + 2 * g * xi * np.conj(gi)
        rhs_inter += -2 * hv * float(np.sum((source * pair).real))

    rhs = rhs_linear + rhs_inter
    residual = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + floor)
    return MorawetzIdentityResult(lhs, rhs, residual, rhs_linear, rhs_inter)


# ---------------------------------------------------------------------------
# Two-point tensor action

TENSOR_PAIR_BUDGET = 32 ** 4


def tensor_action(state: SystemState, weight: Optional[MorawetzWeight] = None,
                  stride: Optional[int] = None) -> np.ndarray:
    """Pairwise action matrix M[j, l] over the product lattice.

    M[j, l] = 2 Im int int conj(z) (grad_x, grad_y) z . (grad_x, grad_y) a,
    z = u_j(x) u_l(y), a = phi(|x - y|); evaluated by direct double-lattice
    summation without materializing the tensor product:

      M[j, l] = 2 int int g(|x-y|) (x - y) . (Im P_j(x) |u_l(y)|^2
                                              + Im P_l(x) |u_j(y)|^2)

    with P_j = conj(u_j) grad u_j (the two gradient pairings coincide after
    relabeling the integration variables).  A stride sublattice (both variables)
    coarsens the sum in d >= 3; the pair count is budget-guarded.
    """
    grid = state.grid
    w = weight or default_weight(grid)
    if stride is None:
        stride = 1 if grid.d <= 2 else 4
    sub = tuple(slice(None, None, stride) for _ in range(grid.d))
    xs = np.meshgrid(*[grid.axis_coords()[::stride]] * grid.d, indexing="ij")
    m_sites = xs[0].size
    if m_sites ** 2 > TENSOR_PAIR_BUDGET:
        raise BudgetError(
            f"tensor action pair count {m_sites ** 2} exceeds {TENSOR_PAIR_BUDGET}")
    coords = np.stack([x.ravel() for x in xs], axis=1)  # (M, d)
    hv_sub = (grid.h * stride) ** grid.d

    dens = []
    imp = []
    for f in state.fields:
        grads = spectral.gradient_arrays(grid, f.values)
        dens.append((np.abs(f.values) ** 2)[sub].ravel())
        imp.append(np.stack(
            [(np.conj(f.values) * gi).imag[sub].ravel() for gi in grads], axis=1))

    diff = coords[:, None, :] - coords[None, :, :]            # (M, M, d)
    r2 = np.einsum("xyd,xyd->xy", diff, diff)
    gw = w.grad_coeff(r2)

    n = state.N
    a_mat = np.zeros((n, n))
    for j in range(n):
        # A[j, l] = sum_xy g(|x-y|) (x - y).Im P_j(x) dens_l(y)
        proj = gw * np.einsum("xyd,xd->xy", diff, imp[j])      # (M, M)
        col = proj.sum(axis=0)
        for l in range(n):
            a_mat[j, l] = float(col @ dens[l])
    # the y-variable half of the gradient pairing equals +A[l, j] after
    # relabeling the integration variables (both g and the displacement
    # vector flip), so the matrix is symmetric
    return 2 * hv_sub ** 2 * (a_mat + a_mat.T)


def tensor_action_total(state: SystemState,
                        weight: Optional[MorawetzWeight] = None,
                        stride: Optional[int] = None) -> float:
    return float(np.sum(tensor_action(state, weight, stride)))


# ---------------------------------------------------------------------------
# Localized interaction monitor

@dataclass
class LocalizedMonitorResult:
    times: np.ndarray
    integrand: np.ndarray
    cumulative: np.ndarray   # Q(t), trapezoid
    c_box: float             # sum_j ||u_j(0)||_{H^2}^4


def localized_interaction(snapshots: list, params: ModelParams,
                          radius: float = 2.0,
                          stride: int = 4) -> LocalizedMonitorResult:
    """Time series of the localized interaction functional.

    Per state, with B the radius ball around a center c ranging over a
    stride sublattice:
      A(t) = sum_jkl bt_jk sup_c [ int_B |u_j|^p |u_l|^2 * int_B |u_k|^p ]
           + sigma1 * sum_jl sup_c (quartic term),
    bt_jk = 4 b_jk (p - 2)/p; the quartic term is the same-point ball
    integral int_B |u_j|^2 |u_l|^2 for d <= 4 and the product of the two
    single-ball masses for d >= 5.  Q(t) is the cumulative trapezoid of A.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    grid = snapshots[0].grid
    sub = tuple(slice(None, None, stride) for _ in range(grid.d))
    times = np.array([s.t for s in snapshots])
    if np.any(np.diff(times) <= 0):
        raise ValueError("snapshot times must increase")
    bt = 4 * params.b_jk * (params.p - 2) / params.p

    integrand = np.zeros(len(snapshots))
    for it, st in enumerate(snapshots):
        dens = [np.abs(f.values) ** 2 for f in st.fields]
        total = 0.0
        if np.any(bt != 0):
            pw = [np.abs(f.values) ** params.p for f in st.fields]
            ball_p = [spectral.ball_local_integrals(grid, q, radius)[sub]
                      for q in pw]
            for j in range(params.N):
                for l in range(params.N):
                    mixed = spectral.ball_local_integrals(
                        grid, pw[j] * dens[l], radius)[sub]
                    for k in range(params.N):
                        if bt[j, k] != 0:
                            total += bt[j, k] * float(np.max(mixed * ball_p[k]))
        if params.sigma1 == 1:
            if grid.d <= 4:
                for j in range(params.N):
                    for l in range(params.N):
                        q = spectral.ball_local_integrals(
                            grid, dens[j] * dens[l], radius)[sub]
                        total += float(np.max(q))
            else:
                ball_m = [spectral.ball_local_integrals(grid, q, radius)[sub]
                          for q in dens]
                for j in range(params.N):
                    for l in range(params.N):
                        total += float(np.max(ball_m[j] * ball_m[l]))
        integrand[it] = total

    cum = np.concatenate([[0.0], cumulative_trapezoid(integrand, times)]) \
        if len(times) > 1 else np.zeros(1)
    c_box = float(sum(spectral.sobolev_h2_norm(f) ** 4
                      for f in snapshots[0].fields))
    return LocalizedMonitorResult(times, integrand, cum, c_box)


# ---------------------------------------------------------------------------
# Scattering pullback residual

def scattering_residual(state_a: SystemState, state_b: SystemState,
                        params: ModelParams) -> float:
    """max_j H^2 distance of the linear pullbacks e^{-i t L} u_j(t) at the
    two times; refuses to run with an external potential (the free flow is
    no longer the reference dynamics there)."""
    if params.sigma2 != 0:
        raise ValueError("scattering residual undefined with sigma2 = 1")
    if state_a.grid != state_b.grid or state_a.N != state_b.N:
        raise ValueError("states must share grid and component count")
    pulled_a = spectral.linear_propagator(state_a.fields, state_a.t,
                                          params.sigma1, "backward")
    pulled_b = spectral.linear_propagator(state_b.fields, state_b.t,
                                          params.sigma1, "backward")
    best = 0.0
    for fa, fb in zip(pulled_a, pulled_b):
        diff = Field(state_a.grid, fa.values - fb.values)
        best = max(best, spectral.sobolev_h2_norm(diff))
    return best


# ---------------------------------------------------------------------------
# Inequality monitors

def triple_inequality_monitor(d: int, num_samples: int = 100000,
                              seed: int = 0) -> dict:
    """(x - z).((x - y)/|x - y| - (z - y)/|z - y|) >= 0 on random triples.

    Returns the minimum of the |x - z|-normalized value (scale-free, so a
    -1e-12 floor is meaningful) along with the raw minimum.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((num_samples, d))
    y = rng.standard_normal((num_samples, d))
    z = rng.standard_normal((num_samples, d))
    u = x - y
    v = z - y
    un = u / np.linalg.norm(u, axis=1, keepdims=True)
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    xz = x - z
    raw = np.einsum("id,id->i", xz, un - vn)
    norm = np.linalg.norm(xz, axis=1)
    good = norm > 0
    normalized = raw[good] / norm[good]
    return {
        "min_raw": float(np.min(raw)),
        "min_normalized": float(np.min(normalized)),
        "num_samples": int(num_samples),
    }


def kernel_positivity_monitor(f: Field, num_pairs: int = 200,
                              seed: int = 0) -> dict:
    """Lattice kernel K(x, z) = (x - z) . int |u(y)|^2 ((x-y)/|x-y| -
    (z-y)/|z-y|) dy at random site pairs; the cells y = x and y = z are
    excluded from the sum.  Nonnegative up to roundoff."""
    grid = f.grid
    rng = np.random.default_rng(seed)
    coords = np.stack([x.ravel() for x in np.meshgrid(
        *[grid.axis_coords()] * grid.d, indexing="ij")], axis=1)  # (M, d)
    dens = (np.abs(f.values) ** 2).ravel() * grid.cell_volume
    m = coords.shape[0]
    idx = rng.integers(0, m, size=(num_pairs, 2))
    idx = idx[idx[:, 0] != idx[:, 1]]
    values = []
    total_mass = float(np.sum(dens))
    for ix, iz in idx:
        x = coords[ix]
        z = coords[iz]
        ux = coords - x[None, :]
        uz = coords - z[None, :]
        nx = np.linalg.norm(ux, axis=1)
        nz = np.linalg.norm(uz, axis=1)
        ok = (nx > 0) & (nz > 0)
        term = (-(ux[ok] / nx[ok, None]) + uz[ok] / nz[ok, None])
        # (x - z).( (x-y)/|x-y| - (z-y)/|z-y| ) with x-y = -ux etc.
        kval = float(np.sum(dens[ok] * ((x - z)[None, :] * term).sum(axis=1)))
        values.append(kval / (np.linalg.norm(x - z) * total_mass + 1e-300))
    values = np.array(values)
    return {
        "min_normalized": float(np.min(values)),
        "num_pairs": int(len(values)),
    }


def gn_ratio(f: Field, radius: float = 1.0, stride: int = 4) -> float:
    """Localized Gagliardo-Nirenberg ratio
    ||u||_q^q / (sup-ball L2 ^ {4/d} * ||u||_{H^2}^2), q = (2d+4)/d."""
    d = f.grid.d
    q = (2 * d + 4) / d
    num = spectral.lebesgue_norm(f, q) ** q
    sup_l2 = spectral.local_l2_sup(f, radius, stride)
    h2 = spectral.sobolev_h2_norm(f)
    den = sup_l2 ** (4 / d) * h2 ** 2
    if den == 0:
        return 0.0
    return num / den


def gn_reference_constant(grid: Grid, radius: float = 1.0, stride: int = 4,
                          margin: float = 1.5) -> float:
    """Calibrate the localized Gagliardo-Nirenberg constant on a fixed
    family of Gaussian bumps (several widths, centers, boosts); the margin
    covers states away from the calibration family."""
    best = 0.0
    shift = np.zeros(grid.d)
    shift[0] = grid.L / 8
    for width in (0.5, 1.0, 2.0, 4.0):
        for center in (None, shift):
            for boost in (None, np.full(grid.d, 1.0)):
                f = spectral.gaussian_field(grid, width=width, center=center,
                                            velocity=boost)
                best = max(best, gn_ratio(f, radius, stride))
    return margin * best


def spectral_negativity(state: SystemState) -> float:
    """-sum_{xi != 0} |xi|^{5-d} |rho_hat(xi)|^2 (Plancherel-weighted),
    rho = sum_j |u_j|^2; trivially <= 0, reported for completeness."""
    grid = state.grid
    rho = np.zeros(grid.shape)
    for f in state.fields:
        rho += np.abs(f.values) ** 2
    rh = spectral.fftn(rho)
    k2 = grid.freq_sq()
    w = np.zeros(grid.shape)
    nz = k2 > 0
    w[nz] = k2[nz] ** ((5 - grid.d) / 2.0)
    return -float(grid.cell_volume / grid.size * np.sum(w * np.abs(rh) ** 2))


# ---------------------------------------------------------------------------
# Product-lattice identity for pairs of components

APPENDIX_SITE_BUDGET = 4096


@dataclass
class PairIdentityResult:
    lhs: float
    rhs: float
    residual: float
    cross_term: float  # Im-Im coupling, reported separately


def pair_identity_check(f_j: Field, f_l: Field,
                        weight: Optional[MorawetzWeight] = None,
                        floor: float = 1e-12) -> PairIdentityResult:
    """Double-lattice check of the two-field commutator identity behind the
    tensor action, for z = u_j(x) u_l(y) and a = phi(|x - y|):

      2 Re II Delta_{x,y} z Delta_{x,y} a conj(z)
      + 4 Re II Delta_{x,y} z (grad_{x,y} a . grad_{x,y} conj(z))
      = 2 II Delta_x^2 a |u_j(x)|^2 |u_l(y)|^2
        - 4 Re II grad_x u_j D^2 phi grad_x conj(u_j) |u_l(y)|^2
        - 4 Re II grad_y u_l D^2 phi grad_y conj(u_l) |u_j(x)|^2
        + 8 II Im P_j(x) . D^2 phi . Im P_l(y)

    (the mixed-variable Hessian of phi(|x-y|) is -D^2 phi, which flips the
    sign of the last term relative to the diagonal blocks).  Also returns
    the Im-Im coupling scalar II Im P_j . D^2_{xy} a . Im P_l on its own;
    its smallness is measured, not assumed.  Direct summation; site count
    budget-guarded.
    """
    grid = f_j.grid
    if f_l.grid != grid:
        raise ValueError("both fields must share one grid")
    if grid.size > APPENDIX_SITE_BUDGET:
        raise BudgetError(
            f"site count {grid.size} exceeds {APPENDIX_SITE_BUDGET}")
    w = weight or default_weight(grid)
    d = grid.d
    hv = grid.cell_volume

    def derivs(f):
        u = f.values.ravel()
        lap = spectral.ifftn(-grid.freq_sq()
                             * spectral.fftn(f.values)).ravel()
        grads = np.stack([gi.ravel()
                          for gi in spectral.gradient_arrays(grid, f.values)],
                         axis=1)
        return u, lap, grads

    uj, lap_j, grad_j = derivs(f_j)
    ul, lap_l, grad_l = derivs(f_l)
    coords = np.stack([x.ravel() for x in np.meshgrid(
        *[grid.axis_coords()] * grid.d, indexing="ij")], axis=1)

    diff = coords[:, None, :] - coords[None, :, :]     # (M, M, d)
    r2 = np.einsum("xyd,xyd->xy", diff, diff)
    g = w.grad_coeff(r2)
    lap_phi = w.lap(r2, d)
    lap2_phi = w.lap2(r2, d)
    ciso, cxx = w.hess_coeffs(r2)

    # z and its derivatives over the product lattice
    z = uj[:, None] * ul[None, :]
    lap_z = lap_j[:, None] * ul[None, :] + uj[:, None] * lap_l[None, :]
    lap_a = 2 * lap_phi
    # grad_{x,y} a . grad_{x,y} conj(z) = g (x-y).(grad conj(u_j) conj(u_l)
    #                                              - conj(u_j) grad conj(u_l))
    adv = (np.einsum("xyd,xd->xy", diff, np.conj(grad_j)) * np.conj(ul)[None, :]
           - np.einsum("xyd,yd->xy", diff, np.conj(grad_l)) * np.conj(uj)[:, None])
    lhs = hv ** 2 * float(np.sum(
        2 * (lap_z * lap_a * np.conj(z)).real + 4 * (lap_z * g * adv).real))

    dens_j = np.abs(uj) ** 2
    dens_l = np.abs(ul) ** 2
    term_mass = 2 * np.sum(lap2_phi * dens_j[:, None] * dens_l[None, :])

    gj2 = np.einsum("xd,xd->x", grad_j, np.conj(grad_j)).real
    gl2 = np.einsum("yd,yd->y", grad_l, np.conj(grad_l)).real
    wj = np.abs(np.einsum("xyd,xd->xy", diff, grad_j)) ** 2
    wl = np.abs(np.einsum("xyd,yd->xy", diff, grad_l)) ** 2
    term_x = -4 * np.sum((ciso * gj2[:, None] + cxx * wj) * dens_l[None, :])
    term_y = -4 * np.sum((ciso * gl2[None, :] + cxx * wl) * dens_j[:, None])

    imp_j = (np.conj(uj)[:, None] * grad_j).imag
    imp_l = (np.conj(ul)[:, None] * grad_l).imag
    iso_dot = imp_j @ imp_l.T                            # (M, M)
    proj_j = np.einsum("xyd,xd->xy", diff, imp_j)
    proj_l = np.einsum("xyd,yd->xy", diff, imp_l)
    dxy_dot = -(ciso * iso_dot + cxx * proj_j * proj_l)  # ImP_j D2_xy a ImP_l
    term_cross = -8 * np.sum(dxy_dot)

    rhs = hv ** 2 * float(term_mass + term_x + term_y + term_cross)
    cross = hv ** 2 * float(np.sum(dxy_dot))
    residual = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + floor)
    return PairIdentityResult(lhs, rhs, residual, cross)


# ---------------------------------------------------------------------------
# Record plumbing

@dataclass
class DiagnosticsRecord:
    t: float
    mass: np.ndarray
    energy: EnergyBreakdown
    norms: dict                   # label -> per-component array
    morawetz: np.ndarray
    tensor_total: Optional[float] = None
    residual_morawetz: Optional[float] = None
    q_localized: Optional[float] = None
    scattering_residual: Optional[float] = None


def make_record_fn(params: ModelParams,
                   potential: Optional[PotentialSpec] = None,
                   norm_exponents: tuple = (),
                   weight: Optional[MorawetzWeight] = None,
                   tensor_stride: Optional[int] = None,
                   with_tensor: bool = False) -> Callable:
    """Build the per-step diagnostics callback used by evolve schedules."""

    def record(state: SystemState) -> DiagnosticsRecord:
        nrm = {}
        for label, r in norm_exponents:
            nrm[label] = np.array(
                [spectral.lebesgue_norm(f, r) for f in state.fields])
        rec = DiagnosticsRecord(
            t=state.t,
            mass=mass(state),
            energy=energy(state, params, potential),
            norms=nrm,
            morawetz=morawetz_action(state, weight),
        )
        if with_tensor:
            rec.tensor_total = tensor_action_total(state, weight, tensor_stride)
        return rec

    return record
