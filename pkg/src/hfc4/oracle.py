"""Slow, independent reference implementations used to freeze expected
values in the tests: O(M^2) direct-sum Riesz convolution, centered finite
differences, and plain Riemann quadrature.

The direct convolution shares the kernel regularization constants (origin
cell average, truncation radius) with the spectral implementation so the
two paths differ only in algorithm.
"""

from __future__ import annotations

import math

import numpy as np

from .spectral import Field, Grid, riesz_kernel_origin_average

#: Largest site count accepted by the direct-sum convolution.
DIRECT_BUDGET = 32 ** 3


def _kernel_offset_table(grid: Grid, gamma: float) -> np.ndarray:
    """Truncated, origin-regularized kernel over all index offsets
    -(n-1) .. n-1 per axis (shape (2n-1,)*d)."""
    if not (0 < gamma < grid.d):
        raise ValueError(f"gamma must lie in (0, d), got {gamma}")
    off = np.arange(-(grid.n - 1), grid.n) * grid.h
    r2 = np.zeros((2 * grid.n - 1,) * grid.d)
    for i in range(grid.d):
        r2 = r2 + off.reshape((1,) * i + (-1,) + (1,) * (grid.d - 1 - i)) ** 2
    r = np.sqrt(r2)
    alpha = grid.d - gamma
    k = np.where(r > 0, r, 1.0) ** (-alpha)
    k[(grid.n - 1,) * grid.d] = riesz_kernel_origin_average(grid.d, gamma, grid.h)
    k[r > grid.L] = 0.0
    return k


def convolve_direct_batch(grid: Grid, stack: np.ndarray, gamma: float,
                          chunk: int = 1024) -> np.ndarray:
    """Direct-sum convolution of several real arrays with the same kernel.

    out[x] = sum_y K(x - y) f(y) h^d, all pairs, no transforms.  stack has
    shape (m,) + grid.shape; the kernel matrix is built chunk-by-chunk and
    applied to all m arrays at once.
    """
    if grid.size > DIRECT_BUDGET:
        raise ValueError(
            f"direct convolution budget exceeded: {grid.size} > {DIRECT_BUDGET}")
    ktab = _kernel_offset_table(grid, gamma)
    m = stack.shape[0]
    fmat = stack.reshape(m, grid.size).T  # (M, m)
    idx = np.indices(grid.shape).reshape(grid.d, grid.size)
    out = np.empty((grid.size, m))
    for start in range(0, grid.size, chunk):
        sl = slice(start, min(start + chunk, grid.size))
        # offset index per axis, shifted into the table range
        flat = np.zeros((sl.stop - sl.start, grid.size), dtype=np.intp)
        for a in range(grid.d):
            flat = flat * (2 * grid.n - 1) + (
                idx[a, sl, None] - idx[a, None, :] + grid.n - 1)
        kchunk = ktab.ravel()[flat]
        out[sl] = kchunk @ fmat
    return out.T.reshape(stack.shape) * grid.cell_volume


def convolve_direct(f: Field, gamma: float) -> Field:
    """O(M^2) direct-sum Riesz convolution of one real field."""
    scale = float(np.max(np.abs(f.values))) or 1.0
    if np.max(np.abs(f.values.imag)) > 1e-10 * scale:
        raise ValueError("convolve_direct expects a real-valued field")
    out = convolve_direct_batch(f.grid, f.values.real[None], gamma)[0]
    return Field(f.grid, out.astype(np.complex128))


# ---------------------------------------------------------------------------
# Finite differences (periodic)

def fd_second_derivative(grid: Grid, values: np.ndarray, axis: int) -> np.ndarray:
    """Centered 2nd-order stencil for the second derivative along one axis."""
    h = grid.h
    return (np.roll(values, -1, axis=axis) - 2 * values
            + np.roll(values, 1, axis=axis)) / h ** 2


def fd_laplacian(grid: Grid, values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(np.asarray(values, dtype=np.complex128))
    for a in range(grid.d):
        out += fd_second_derivative(grid, values, a)
    return out


def fd_derivative(f: Field, order: int, axis: int = 0) -> Field:
    """order 2: second derivative along axis; order 4: iterated-Laplacian
    bilaplacian (axis ignored)."""
    if order == 2:
        return Field(f.grid, fd_second_derivative(f.grid, f.values, axis))
    if order == 4:
        return Field(f.grid, fd_laplacian(f.grid, fd_laplacian(f.grid, f.values)))
    raise ValueError(f"order must be 2 or 4, got {order}")


# ---------------------------------------------------------------------------
# Quadrature

def quadrature(f: Field, region=("all",)) -> complex:
    """Riemann sum h^d * sum f over 'all' or ('ball', center, radius)."""
    g = f.grid
    if region[0] == "all":
        total = np.sum(f.values)
    elif region[0] == "ball":
        _, center, radius = region
        c = np.asarray(center, dtype=float)
        r2 = np.zeros(g.shape)
        for i, xi in enumerate(g.coords()):
            r2 = r2 + (xi - c[i]) ** 2
        total = np.sum(f.values[r2 <= radius ** 2])
    else:
        raise ValueError(f"unknown region {region!r}")
    val = complex(total) * g.cell_volume
    if abs(val.imag) <= 1e-12 * (abs(val.real) + 1.0):
        return val.real
    return val


def gaussian_l2_sq_exact(d: int, width: float = 1.0, amplitude: float = 1.0) -> float:
    """Closed form of int |A exp(-|x|^2/(2 w^2))|^2 dx."""
    return amplitude ** 2 * (math.pi * width ** 2) ** (d / 2)
