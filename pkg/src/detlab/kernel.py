"""The logarithmic kernel ln|z-w|^2 on a grid, with cell-smeared diagonal.

On area grids each node mass is read as a uniform disk of radius
``cell_radius``.  Disks of distinct nodes do not overlap, so by the
mean-value property the off-diagonal entries ln|z_a - z_b|^2 are exact for
the smeared measure, and the diagonal is the disk self-energy
2 ln(rho) - 1/2.  Curve nodes spread their mass along a chord instead.
Square lattices make the kernel translation invariant, so products go through FFT convolution.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft

_DENSE_LIMIT = 4000


def self_energy(rho):
    """Mean of ln|z-w|^2 for z, w independent and uniform on a disk of radius rho."""
    return 2.0 * np.log(rho) - 0.5


def segment_self_energy(rho):
    """Mean of ln|z-w|^2 for z, w independent and uniform on a segment of length 2 rho."""
    return 2.0 * np.log(2.0 * rho) - 3.0


def smeared_log(d2, rho):
    """Potential ln|z-w|^2 of a unit disk charge of radius rho at squared distance d2."""
    d2 = np.asarray(d2, dtype=float)
    with np.errstate(divide="ignore"):
        outside = np.log(d2)
    inside = 2.0 * np.log(rho) - 1.0 + d2 / rho**2
    return np.where(d2 >= rho**2, outside, inside)


class LatticeConvolver:
    """FFT convolution of node values with a translation-invariant kernel.

    ``kernel(dx, dy)`` receives integer offset arrays and returns kernel
    values; the output field covers the lattice extended by ``pad`` cells on
    every side.
    """

    def __init__(self, lattice, kernel, pad=0):
        self.lat = lattice
        self.pad = pad
        nx, ny = lattice.nx, lattice.ny
        mx, my = nx - 1 + pad, ny - 1 + pad
        dx, dy = np.meshgrid(np.arange(-mx, mx + 1), np.arange(-my, my + 1), indexing="ij")
        self._kern = np.asarray(kernel(dx, dy))
        self.shape = (sfft.next_fast_len(nx + 2 * mx), sfft.next_fast_len(ny + 2 * my))
        self._mx, self._my = mx, my
        self._rf = None if np.iscomplexobj(self._kern) else sfft.rfft2(self._kern, self.shape)
        self._cf = None

    def __call__(self, values):
        lat = self.lat
        is_complex = self._rf is None or np.iscomplexobj(values)
        arr = np.zeros((lat.nx, lat.ny), dtype=complex if is_complex else float)
        np.add.at(arr, (lat.ix, lat.iy), values)
        if is_complex:
            if self._cf is None:
                self._cf = sfft.fft2(self._kern, self.shape)
            full = sfft.ifft2(sfft.fft2(arr, self.shape) * self._cf)
        else:
            full = sfft.irfft2(sfft.rfft2(arr, self.shape) * self._rf, self.shape)
        p = self.pad
        # output index i (lattice coordinate) sits at i + mx in the full convolution
        return full[self._mx - p: self._mx + lat.nx + p, self._my - p: self._my + lat.ny + p]


def lattice_log_kernel(h):
    """ln|z-w|^2 as a function of integer lattice offsets, smeared on the diagonal."""
    diag = self_energy(0.5 * h)

    def kern(dx, dy):
        r2 = (dx * dx + dy * dy).astype(float)
        with np.errstate(divide="ignore"):
            out = np.log(h * h * r2)
        out[r2 == 0] = diag
        return out

    return kern


def padded_log_field(grid, mu, pad):
    """Field sum_w ln|z-w|^2 mu(w) on the lattice of ``grid`` extended by ``pad`` cells."""
    lat = grid.lattice
    conv = LatticeConvolver(lat, lattice_log_kernel(lat.h), pad)
    return conv(np.asarray(mu, dtype=float))


class LogKernel:
    """Matrix K_ab = ln|z_a - z_b|^2 (a != b) with a smeared diagonal.

    Area grids smear each node over a disk of radius cell_radius; curve grids
    smear it over the chord of length 2 cell_radius.
    """

    def __init__(self, grid):
        self.grid = grid
        self._conv = None
        self._dense = None
        lat = grid.lattice
        if lat is not None and np.allclose(grid.cell_radius, 0.5 * lat.h):
            self._conv = LatticeConvolver(lat, lattice_log_kernel(lat.h))
        elif len(grid) <= _DENSE_LIMIT:
            self._dense = self.submatrix(np.arange(len(grid)))

    def submatrix(self, rows, cols=None):
        z = self.grid.nodes
        cols = rows if cols is None else cols
        d2 = np.abs(z[rows][:, None] - z[cols][None, :]) ** 2
        with np.errstate(divide="ignore"):
            k = np.log(d2)
        same = rows[:, None] == cols[None, :]
        diag = segment_self_energy if self.grid.is_curve else self_energy
        k[same] = np.broadcast_to(diag(self.grid.cell_radius[rows])[:, None], same.shape)[same]
        return k

    def matvec(self, mu):
        """(K mu)_a for every node a."""
        mu = np.asarray(mu, dtype=float)
        if self._conv is not None:
            field = self._conv(mu)
            lat = self.grid.lattice
            return field[lat.ix, lat.iy]
        if self._dense is not None:
            return self._dense @ mu
        out = np.empty(len(mu))
        nz = np.flatnonzero(mu)
        for start in range(0, len(mu), 1024):
            rows = np.arange(start, min(start + 1024, len(mu)))
            out[rows] = self.submatrix(rows, nz) @ mu[nz]
        return out

    def quadratic(self, mu) -> float:
        """mu^T K mu."""
        return float(np.dot(mu, self.matvec(mu)))


def kernel_for(grid) -> LogKernel:
    """Cached LogKernel of a grid."""
    k = grid.__dict__.get("_log_kernel")
    if k is None:
        k = LogKernel(grid)
        object.__setattr__(grid, "_log_kernel", k)
    return k
