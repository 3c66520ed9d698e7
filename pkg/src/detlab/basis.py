"""Orthonormal bases of H^0(P^1, O(k)) = polynomials of degree <= k.

Sections are stored as coefficient columns against *scaled* monomials
m_j(z) = z^j exp(-sigma_j); the scales sigma_j are chosen on the defining grid
so that every weighted monomial column has unit maximum.  All evaluation
goes through the log domain so that k up to a few hundred neither overflows
nor underflows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import LabError
from .weights import MeasureGrid, WeightSpec, eval_weight

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class SectionBasis:
    """Sections s_i = sum_j coeffs[j, i] m_j, orthonormal in L^2(nu, k phi) of ``grid``."""

    k: int
    N: int
    coeffs: np.ndarray
    log_scale: np.ndarray
    weight: WeightSpec
    grid: MeasureGrid = field(repr=False)

    def weighted_monomials(self, z, weight=None):
        """Matrix m_j(z) exp(-k phi(z)/2), shape (len(z), N)."""
        w = self.weight if weight is None else weight
        return weighted_monomials(np.atleast_1d(z), self.k, w, self.log_scale)

    def weighted_sections(self, z, weight=None):
        """Matrix s_i(z) exp(-k phi(z)/2), shape (len(z), N)."""
        return self.weighted_monomials(z, weight) @ self.coeffs

    def log_abs_det_coeffs(self) -> float:
        """ln|det| of the coefficient matrix against *raw* monomials z^j."""
        _, ld = np.linalg.slogdet(self.coeffs)
        return float(ld - self.log_scale.sum())

    def with_coeffs(self, coeffs) -> "SectionBasis":
        return SectionBasis(self.k, self.N, np.asarray(coeffs), self.log_scale, self.weight, self.grid)


def _log_monomials(z, k, w):
    """ln|z^j| and phases for j = 0..k, plus -k phi(z)/2."""
    z = np.asarray(z, dtype=complex)
    j = np.arange(k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.log(np.abs(z))
        logmag = j[None, :] * logr[:, None]
    logmag[:, 0] = 0.0
    phase = np.exp(1j * j[None, :] * np.angle(z)[:, None])
    half_weight = -0.5 * k * eval_weight(w, z) if k else np.zeros(len(z))
    return logmag, phase, np.atleast_1d(half_weight)


def weighted_monomials(z, k, w, log_scale):
    logmag, phase, hw = _log_monomials(z, k, w)
    return np.exp(logmag + hw[:, None] - log_scale[None, :]) * phase


def _weighted_vandermonde(grid: MeasureGrid, k: int, w: WeightSpec, log_scale=None):
    """Rows sqrt(nu_n) m_j(z_n) exp(-k phi(z_n)/2) over masked nodes, column-scaled.

    Returns the matrix and the per-column log scales actually applied.
    """
    idx = grid.masked
    z = grid.nodes[idx]
    logmag, phase, hw = _log_monomials(z, k, w)
    loga = logmag + hw[:, None] + 0.5 * np.log(grid.weights[idx])[:, None]
    if log_scale is None:
        log_scale = loga.max(axis=0)
    extra = loga.max(axis=0) - log_scale
    # extra column rescaling keeps exp() in range even for a foreign grid
    a = np.exp(loga - (log_scale + extra)[None, :]) * phase
    return a, log_scale, extra


def _check_conditioning(r: np.ndarray, name: str):
    d = np.abs(np.diag(r))
    if np.any(d == 0) or not np.all(np.isfinite(r)):
        raise LabError(name, "Gram matrix is singular on this grid")
    col = np.linalg.norm(r, axis=0)
    s = np.linalg.svd(r / col[None, :], compute_uv=False)
    cond = (s[0] / s[-1]) ** 2
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise LabError(name, f"equilibrated Gram condition number {cond:.3g} exceeds {COND_LIMIT:g}", cond=cond)
    return cond


def orthonormalize(grid: MeasureGrid, w: WeightSpec, k: int) -> SectionBasis:
    """Orthonormal basis of degree-<=k polynomials in L^2(nu, k phi).

    Householder QR of the weighted, column-scaled Vandermonde matrix gives the
    triangular factor of the Gram matrix without squaring its condition
    number; the coefficients are the inverse of that factor.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    N = k + 1
    if grid.e_mask.sum() < 4 * N:
        raise LabError("degenerate-inner-product", f"{grid.e_mask.sum()} nodes cannot carry degree {k}")
    a, log_scale, extra = _weighted_vandermonde(grid, k, w)
    log_scale = log_scale + extra
    r = linalg.qr(a, mode="r")[0][:N]
    _check_conditioning(r, "degenerate-inner-product")
    # fix the gauge so that every leading coefficient is real positive
    r = r * np.where(np.diag(r).real < 0, -1.0, 1.0)[:, None]
    coeffs = linalg.solve_triangular(r, np.eye(N), lower=False)
    return SectionBasis(k, N, coeffs, log_scale, w, grid)


def gram_matrix(b: SectionBasis, grid: MeasureGrid = None, weight: WeightSpec = None) -> np.ndarray:
    """G_ij = sum_n nu_n s_i(z_n) conj(s_j(z_n)) exp(-k phi(z_n)) over masked nodes."""
    grid = b.grid if grid is None else grid
    idx = grid.masked
    s = b.weighted_sections(grid.nodes[idx], weight)
    sw = s * np.sqrt(grid.weights[idx])[:, None]
    return sw.T @ sw.conj()


def log_det_gram(b: SectionBasis, grid: MeasureGrid, weight: WeightSpec) -> float:
    """ln det of the Gram matrix of ``b`` under (grid, k*weight), computed stably."""
    if grid.e_mask.sum() < b.N:
        raise LabError("singular-gram", f"{grid.e_mask.sum()} nodes cannot carry degree {b.k}")
    a, _, extra = _weighted_vandermonde(grid, b.k, weight, b.log_scale)
    r = linalg.qr(a, mode="r")[0][: b.N]
    _check_conditioning(r, "singular-gram")
    _, ldc = np.linalg.slogdet(b.coeffs)
    return float(2 * np.sum(np.log(np.abs(np.diag(r)))) + 2 * extra.sum() + 2 * ldc)


def orthonormal_frame(grid: MeasureGrid, w: WeightSpec, k: int):
    """Node-indexed orthonormal frame Phi (masked nodes x N).

    Row n is sqrt(nu_n) exp(-k phi/2) (s_0, ..., s_k)(z_n) for a basis that is
    orthonormal on ``grid`` itself; Phi Phi^* is the discrete projection kernel.
    """
    if grid.e_mask.sum() < k + 1:
        raise LabError("kernel-rank", f"{grid.e_mask.sum()} nodes cannot carry degree {k}")
    a, _, _ = _weighted_vandermonde(grid, k, w)
    q, r = linalg.qr(a, mode="economic")
    try:
        _check_conditioning(r, "kernel-rank")
    except LabError as exc:
        raise LabError("kernel-rank", str(exc)) from None
    return q


def bergman_density(b: SectionBasis, z):
    """rho_k(z) = sum_i |s_i(z)|^2 exp(-k phi(z)); scalar in, scalar out."""
    s = b.weighted_sections(z)
    rho = np.sum(np.abs(s) ** 2, axis=1)
    return float(rho[0]) if np.ndim(z) == 0 else rho


def bm_ratio(b: SectionBasis) -> float:
    """Largest Bergman density over the masked nodes.

    By reproducing-kernel extremality this is the best constant C with
    sup_E |s|^2 exp(-k phi) <= C ||s||^2 over the grid.
    """
    return float(np.max(bergman_density(b, b.grid.nodes[b.grid.masked])))


def save_basis(b: SectionBasis, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# detlab-basis 1\n{b.k} {b.N} {b.weight.label}\n")
        fh.write(" ".join(f"{v:.17g}" for v in b.log_scale) + "\n")
        for row in b.coeffs:
            fh.write(" ".join(f"{v.real:.17g} {v.imag:.17g}" for v in row) + "\n")


def load_basis_matrix(path):
    """(k, N, label, log_scale, coeffs) from a basis export."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    k, N, label = lines[0].split(maxsplit=2)
    k, N = int(k), int(N)
    log_scale = np.array([float(v) for v in lines[1].split()])
    rows = [np.array([float(v) for v in ln.split()]) for ln in lines[2: 2 + N]]
    coeffs = np.array([r[0::2] + 1j * r[1::2] for r in rows])
    return k, N, label.strip(), log_scale, coeffs
