"""Periodic-lattice spectral calculus: grids, fields, Fourier multipliers,
free-space Riesz convolutions, singular weights, norms, and the exact
linear propagator.

Conventions (used everywhere in this package):
  * forward transform unscaled, inverse carries 1/n^d,
  * every lattice integral carries the quadrature weight h^d,
  * box is [-L/2, L/2)^d, site x_i = (i - n//2) h, frequency lattice
    xi = 2*pi*fftfreq(n, h).
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _sfft

#: Number of FFT worker threads; the only environment knob of the package.
FFT_WORKERS = int(os.environ.get("HFC4_FFT_WORKERS", "0")) or (os.cpu_count() or 1)

SNAPSHOT_VERSION = 1


def fftn(a: np.ndarray, axes=None) -> np.ndarray:
    return _sfft.fftn(a, axes=axes, workers=FFT_WORKERS)


def ifftn(a: np.ndarray, axes=None) -> np.ndarray:
    return _sfft.ifftn(a, axes=axes, workers=FFT_WORKERS)


def rfftn(a: np.ndarray, axes=None) -> np.ndarray:
    return _sfft.rfftn(a, axes=axes, workers=FFT_WORKERS)


def irfftn(a: np.ndarray, s, axes=None) -> np.ndarray:
    return _sfft.irfftn(a, s=s, axes=axes, workers=FFT_WORKERS)


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


@dataclass(frozen=True)
class Grid:
    """Cubic periodic lattice with n points per axis on [-L/2, L/2)^d."""

    d: int
    n: int
    L: float

    # rough per-process ceiling on a single field, sites
    MAX_POINTS = 64 ** 3 * 8

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"points per axis must be even and >= 8, got {self.n}")
        if self.L <= 0:
            raise ValueError(f"box length must be positive, got {self.L}")
        if self.n ** self.d > self.MAX_POINTS:
            raise ValueError(
                f"n^d = {self.n ** self.d} exceeds the memory budget {self.MAX_POINTS}"
            )

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n ** self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    def axis_coords(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.h

    def coords(self) -> list:
        """Sparse broadcastable coordinate arrays, one per axis."""
        x = self.axis_coords()
        return [
            x.reshape((1,) * i + (self.n,) + (1,) * (self.d - 1 - i))
            for i in range(self.d)
        ]

    def radius_sq(self) -> np.ndarray:
        r2 = np.zeros(self.shape)
        for xi in self.coords():
            r2 = r2 + xi ** 2
        return r2

    def axis_freqs(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    def freqs(self) -> list:
        k = self.axis_freqs()
        return [
            k.reshape((1,) * i + (self.n,) + (1,) * (self.d - 1 - i))
            for i in range(self.d)
        ]

    def freq_sq(self) -> np.ndarray:
        k2 = np.zeros(self.shape)
        for ki in self.freqs():
            k2 = k2 + ki ** 2
        return k2


@dataclass
class Field:
    """One complex component sampled on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"value shape {self.values.shape} != grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values.view(np.float64))):
            raise ValueError("field contains non-finite values")

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def field_from_function(grid: Grid, fn) -> Field:
    """Sample fn(*coords) on the grid."""
    return Field(grid, np.asarray(fn(*np.meshgrid(
        *[grid.axis_coords()] * grid.d, indexing="ij", sparse=True))))


def gaussian_field(grid: Grid, width: float = 1.0, center=None,
                   velocity=None, amplitude: float = 1.0) -> Field:
    """amplitude * exp(-|x-c|^2/(2 width^2)) * exp(i v.x)."""
    c = np.zeros(grid.d) if center is None else np.asarray(center, dtype=float)
    v = np.zeros(grid.d) if velocity is None else np.asarray(velocity, dtype=float)
    r2 = np.zeros(grid.shape)
    phase = np.zeros(grid.shape)
    for i, xi in enumerate(grid.coords()):
        r2 = r2 + (xi - c[i]) ** 2
        phase = phase + v[i] * xi
    return Field(grid, amplitude * np.exp(-r2 / (2 * width ** 2)) * np.exp(1j * phase))


def band_limited_field(grid: Grid, cutoff: float, sharpness: int = 8,
                       amplitude: float = 1.0) -> Field:
    """Centered field with super-Gaussian spectrum exp(-(|xi|/cutoff)^sharpness).

    The spectrum is effectively supported in |xi| <= cutoff, so the group
    velocity of every appreciable mode is bounded by 4*cutoff^3.  This keeps
    dispersing mass inside a finite box for a predictable time, which a
    Gaussian profile (with its unbounded spectral tail) cannot do.  The field
    is normalized so its peak modulus equals ``amplitude``.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if sharpness < 2 or sharpness % 2:
        raise ValueError("sharpness must be a positive even integer")
    spectrum = np.exp(-(np.sqrt(grid.freq_sq()) / cutoff) ** sharpness)
    values = np.roll(ifftn(spectrum.astype(complex)), grid.n // 2,
                     axis=tuple(range(grid.d)))
    values *= amplitude / np.max(np.abs(values))
    return Field(grid, values)


# ---------------------------------------------------------------------------
# Fourier multipliers

_MULTIPLIER_CACHE: dict = {}


def _multiplier(grid: Grid, name: str, param=None) -> np.ndarray:
    key = (grid, name, param)
    m = _MULTIPLIER_CACHE.get(key)
    if m is not None:
        return m
    k2 = grid.freq_sq()
    if name == "laplacian":
        m = -k2
    elif name == "bilaplacian":
        m = k2 ** 2
    elif name == "gradient":
        m = 1j * grid.freqs()[param] * np.ones(grid.shape)
    elif name == "h2_weight":
        m = 1.0 + k2
    elif name == "fractional":
        s = param
        with np.errstate(divide="ignore"):
            m = k2 ** (s / 2.0)
        if s < 0:
            m[(0,) * grid.d] = 0.0  # undefined zero mode dropped
    else:
        raise ValueError(f"unknown symbol {name!r}")
    _MULTIPLIER_CACHE[key] = m
    return m


def apply_symbol(f: Field, name: str, *, axis: int | None = None,
                 s: float | None = None) -> Field:
    """Apply a Fourier multiplier.

    name is one of 'laplacian' (-|xi|^2), 'bilaplacian' (|xi|^4),
    'gradient' (i xi_axis), 'fractional' (|xi|^s, zero mode -> 0 for s < 0),
    'h2_weight' (1 + |xi|^2).
    """
    param = axis if name == "gradient" else (s if name == "fractional" else None)
    if name == "gradient" and axis is None:
        raise ValueError("gradient symbol needs an axis")
    if name == "fractional" and s is None:
        raise ValueError("fractional symbol needs an exponent")
    m = _multiplier(f.grid, name, param)
    return Field(f.grid, ifftn(m * fftn(f.values)))


def gradient(f: Field) -> list:
    """All d spectral partial derivatives, from one forward transform."""
    fh = fftn(f.values)
    return [ifftn(1j * ki * fh) for ki in f.grid.freqs()]


def gradient_arrays(grid: Grid, values: np.ndarray) -> list:
    vh = fftn(values)
    return [ifftn(1j * ki * vh) for ki in grid.freqs()]


def hessian_arrays(grid: Grid, values: np.ndarray) -> dict:
    """Spectral second derivatives; keys (i, j) with i <= j."""
    vh = fftn(values)
    ks = grid.freqs()
    out = {}
    for i in range(grid.d):
        for j in range(i, grid.d):
            out[(i, j)] = ifftn(-ks[i] * ks[j] * vh)
    return out


# ---------------------------------------------------------------------------
# Free-space Riesz convolution

def riesz_kernel_origin_average(d: int, gamma: float, h: float) -> float:
    """Average of |x|^{-(d-gamma)} over a ball with the volume of one cell."""
    alpha = d - gamma
    r_c = h * unit_ball_volume(d) ** (-1.0 / d)
    return (d / (d - alpha)) * r_c ** (-alpha)


def riesz_kernel_samples(grid: Grid, gamma: float, padded: bool = True) -> np.ndarray:
    """Real-space samples of the truncated kernel |x|^{-(d-gamma)}.

    Laid out in circulant (fft) order on the 2n lattice when padded, so that
    index offsets up to n-1 resolve to signed distances.  Truncated at radius
    L (the padded half-width); the origin cell carries the analytic cell
    average.
    """
    if not (0 < gamma < grid.d):
        raise ValueError(f"gamma must lie in (0, d), got {gamma}")
    m = 2 * grid.n if padded else grid.n
    idx = np.fft.fftfreq(m, d=1.0 / m)  # signed integer offsets
    x = idx * grid.h
    r2 = np.zeros((m,) * grid.d)
    for i in range(grid.d):
        r2 = r2 + x.reshape((1,) * i + (m,) + (1,) * (grid.d - 1 - i)) ** 2
    r = np.sqrt(r2)
    alpha = grid.d - gamma
    with np.errstate(divide="ignore"):
        k = np.where(r > 0, r, 1.0) ** (-alpha)
    k[(0,) * grid.d] = riesz_kernel_origin_average(grid.d, gamma, grid.h)
    k[r > grid.L] = 0.0
    return k


_KERNEL_CACHE: dict = {}


def _kernel_ffts(grid: Grid, gamma: float):
    """(rfft, full fft) of the padded truncated kernel, cached."""
    key = (grid, gamma)
    got = _KERNEL_CACHE.get(key)
    if got is None:
        k = riesz_kernel_samples(grid, gamma)
        got = (rfftn(k), None, k.shape)
        _KERNEL_CACHE[key] = got
    return got


def _kernel_full_fft(grid: Grid, gamma: float) -> np.ndarray:
    key = (grid, gamma, "full")
    got = _KERNEL_CACHE.get(key)
    if got is None:
        k = riesz_kernel_samples(grid, gamma)
        got = fftn(k)
        _KERNEL_CACHE[key] = got
    return got


def riesz_convolve_raw(grid: Grid, values: np.ndarray, gamma: float) -> np.ndarray:
    """Free-space convolution of a real array with |x|^{-(d-gamma)}.

    Zero-pads to (2n)^d, multiplies by the transform of the truncated
    real-space kernel, crops back.
    """
    khat, _, pshape = _kernel_ffts(grid, gamma)
    pad = np.zeros(pshape)
    pad[tuple(slice(0, grid.n) for _ in range(grid.d))] = values
    out = irfftn(rfftn(pad) * khat, s=pshape)
    crop = tuple(slice(0, grid.n) for _ in range(grid.d))
    return out[crop] * grid.cell_volume


def riesz_convolve_raw_batch(grid: Grid, stack: np.ndarray, gamma: float) -> np.ndarray:
    """Batched riesz_convolve_raw over the leading axis of a real stack."""
    khat, _, pshape = _kernel_ffts(grid, gamma)
    m = stack.shape[0]
    pad = np.zeros((m,) + pshape)
    pad[(slice(None),) + tuple(slice(0, grid.n) for _ in range(grid.d))] = stack
    axes = tuple(range(1, grid.d + 1))
    out = irfftn(rfftn(pad, axes=axes) * khat, s=pshape, axes=axes)
    crop = (slice(None),) + tuple(slice(0, grid.n) for _ in range(grid.d))
    return out[crop] * grid.cell_volume


def riesz_convolve_complex_raw(grid: Grid, values: np.ndarray, gamma: float) -> np.ndarray:
    """Free-space convolution of a complex array (kernel transform is real)."""
    khat = _kernel_full_fft(grid, gamma)
    pshape = khat.shape
    pad = np.zeros(pshape, dtype=np.complex128)
    pad[tuple(slice(0, grid.n) for _ in range(grid.d))] = values
    out = ifftn(fftn(pad) * khat)
    crop = tuple(slice(0, grid.n) for _ in range(grid.d))
    return out[crop] * grid.cell_volume


def riesz_convolve(f: Field, gamma: float) -> Field:
    """Free-space Riesz convolution of a real-valued field.

    The imaginary part of the input must vanish; the real output is asserted
    against the |Im| <= 1e-10 * ||f|| contract before it is discarded.
    """
    scale = float(np.max(np.abs(f.values))) or 1.0
    if np.max(np.abs(f.values.imag)) > 1e-10 * scale:
        raise ValueError("riesz_convolve expects a real-valued field")
    out = riesz_convolve_raw(f.grid, f.values.real, gamma)
    return Field(f.grid, out.astype(np.complex128))


# ---------------------------------------------------------------------------
# Singular weights

_WEIGHT_CACHE: dict = {}


def singular_weight(grid: Grid, rho: float) -> np.ndarray:
    """Lattice samples of |x|^{-rho}; origin cell = analytic ball-average."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    if rho >= grid.d:
        raise ValueError(f"rho must be < d for an integrable origin cell, got {rho}")
    key = (grid, rho)
    w = _WEIGHT_CACHE.get(key)
    if w is not None:
        return w
    if rho == 0:
        w = np.ones(grid.shape)
    else:
        r = np.sqrt(grid.radius_sq())
        with np.errstate(divide="ignore"):
            w = np.where(r > 0, r, 1.0) ** (-rho)
        r_c = grid.h * unit_ball_volume(grid.d) ** (-1.0 / grid.d)
        w[(grid.n // 2,) * grid.d] = (grid.d / (grid.d - rho)) * r_c ** (-rho)
    _WEIGHT_CACHE[key] = w
    return w


# ---------------------------------------------------------------------------
# Norms

def lebesgue_norm(f: Field, r: float) -> float:
    """(h^d sum |f|^r)^{1/r}; max |f| for r = inf."""
    if r == math.inf:
        return float(np.max(np.abs(f.values)))
    if r < 1:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {r}")
    a = np.abs(f.values)
    return float((f.grid.cell_volume * np.sum(a ** r)) ** (1.0 / r))


def sobolev_h2_norm(f: Field) -> float:
    """|| (1+|xi|^2) fhat ||_{L^2} via Plancherel with h^d weighting."""
    g = f.grid
    fh = fftn(f.values)
    w = _multiplier(g, "h2_weight")
    return float(np.sqrt(g.cell_volume / g.size * np.sum((w * np.abs(fh)) ** 2)))


_BALL_CACHE: dict = {}


def _ball_indicator_fft(grid: Grid, radius: float) -> np.ndarray:
    key = (grid, radius)
    got = _BALL_CACHE.get(key)
    if got is None:
        idx = np.fft.fftfreq(grid.n, d=1.0 / grid.n) * grid.h
        r2 = np.zeros(grid.shape)
        for i in range(grid.d):
            r2 = r2 + idx.reshape((1,) * i + (grid.n,) + (1,) * (grid.d - 1 - i)) ** 2
        got = rfftn((r2 <= radius ** 2).astype(float))
        _BALL_CACHE[key] = got
    return got


def ball_local_integrals(grid: Grid, values: np.ndarray, radius: float) -> np.ndarray:
    """h^d integral of a real array over the ball around each lattice site
    (periodic wrap), via FFT convolution with the ball indicator."""
    bhat = _ball_indicator_fft(grid, radius)
    out = irfftn(rfftn(values) * bhat, s=grid.shape)
    return out * grid.cell_volume


def local_l2_sup(f: Field, radius: float, stride: int = 4) -> float:
    """Max over a stride-sublattice of centers of the ball-restricted L^2 norm."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    mass = ball_local_integrals(f.grid, np.abs(f.values) ** 2, radius)
    sub = mass[tuple(slice(None, None, stride) for _ in range(f.grid.d))]
    return float(np.sqrt(max(np.max(sub), 0.0)))


def norms(f: Field, spec) -> float:
    """Dispatch: ('lebesgue', r) | ('sobolev', 2) | ('local_l2_sup', radius, stride)."""
    kind = spec[0]
    if kind == "lebesgue":
        return lebesgue_norm(f, spec[1])
    if kind == "sobolev":
        if spec[1] != 2:
            raise ValueError("only the H^2 norm is provided")
        return sobolev_h2_norm(f)
    if kind == "local_l2_sup":
        return local_l2_sup(f, *spec[1:])
    raise ValueError(f"unknown norm spec {spec!r}")


# ---------------------------------------------------------------------------
# Linear propagator

_PHASE_CACHE: dict = {}


def linear_phase(grid: Grid, t: float, sigma1: int) -> np.ndarray:
    key = (grid, t, sigma1)
    ph = _PHASE_CACHE.get(key)
    if ph is None:
        k2 = grid.freq_sq()
        ph = np.exp(1j * t * (k2 ** 2 + sigma1 * k2))
        if len(_PHASE_CACHE) > 64:
            _PHASE_CACHE.clear()
        _PHASE_CACHE[key] = ph
    return ph


def propagate_linear_raw(grid: Grid, values: np.ndarray, t: float,
                         sigma1: int) -> np.ndarray:
    return ifftn(linear_phase(grid, t, sigma1) * fftn(values))


def linear_propagator(fields: list, t: float, sigma1: int = 0,
                      direction: str = "forward") -> list:
    """Exact flow of i d/dt u = -(Delta^2 - sigma1 Delta) u ... i.e. the
    sigma2 = 0 linear part; multiplies each component's transform by
    exp(+-i t (|xi|^4 + sigma1 |xi|^2)).
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward|backward, got {direction!r}")
    s = t if direction == "forward" else -t
    return [Field(f.grid, propagate_linear_raw(f.grid, f.values, s, sigma1))
            for f in fields]


# ---------------------------------------------------------------------------
# Snapshot format

def write_snapshot(stream: io.BufferedIOBase, grid: Grid, t: float,
                   components: list) -> None:
    """Header line (JSON) then N * n^d little-endian complex128 values,
    components concatenated, x-fastest site order."""
    header = json.dumps({"version": SNAPSHOT_VERSION, "d": grid.d, "n": grid.n,
                         "L": grid.L, "N": len(components), "t": t})
    stream.write((header + "\n").encode("utf-8"))
    for c in components:
        v = np.ascontiguousarray(c.values.ravel(order="F"), dtype="<c16")
        stream.write(v.tobytes())


def read_snapshot(stream: io.BufferedIOBase):
    """Inverse of write_snapshot; returns (grid, t, [Field, ...])."""
    header = json.loads(stream.readline().decode("utf-8"))
    if header["version"] != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {header['version']}")
    grid = Grid(header["d"], header["n"], header["L"])
    fields = []
    for _ in range(header["N"]):
        raw = stream.read(grid.size * 16)
        v = np.frombuffer(raw, dtype="<c16").reshape(grid.shape, order="F")
        fields.append(Field(grid, v.copy()))
    return grid, header["t"], fields


# ---------------------------------------------------------------------------
# Box confinement check

def boundary_shell_mass_fraction(grid: Grid, components: list) -> float:
    """Fraction of total mass outside the central half-box [-L/4, L/4)^d."""
    inside = np.ones(grid.shape, dtype=bool)
    for xi in grid.coords():
        inside = inside & (np.abs(xi) < grid.L / 4)
    total = 0.0
    shell = 0.0
    for f in components:
        dens = np.abs(f.values) ** 2
        total += float(np.sum(dens))
        shell += float(np.sum(dens[~inside]))
    if total == 0.0:
        return 0.0
    return shell / total
