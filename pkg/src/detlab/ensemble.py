"""The N-point determinantal ensemble gamma_{k phi} and its samplers.

The joint density with respect to nu^N is
    |det s_i(x_j)|^2 exp(-k sum phi(x_j)) / Z,   Z = N! det G,
where (s_i) is orthonormal for the reference inner product and G is its Gram
matrix for the target (nu, k phi).  Two samplers are provided: an exact
projection-DPP sampler on the grid nodes, and a single-site Metropolis chain
in the continuous support.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import gammaln

from .basis import SectionBasis, log_det_gram, orthonormal_frame, orthonormalize
from .errors import ColdChainWarning, LabError
from .weights import MeasureGrid, WeightSpec, reference, reference_grid

SAMPLE_SCHEMA = "detlab-samples 1"


@dataclass(frozen=True)
class Configuration:
    points: np.ndarray
    k: int
    nodes: Optional[np.ndarray] = None  # grid node indices when sampled on a grid

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=complex))
        if len(self.points) != self.k + 1:
            raise ValueError(f"a configuration at k={self.k} has {self.k + 1} points, got {len(self.points)}")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """A reference-orthonormal basis together with the target (phi, nu, E)."""

    basis: SectionBasis
    target_weight: WeightSpec
    target_grid: MeasureGrid
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.basis.k

    @property
    def N(self) -> int:
        return self.basis.N


def make_ensemble(grid: MeasureGrid, w: WeightSpec, k: int, ref="fs", ref_grid: MeasureGrid = None) -> EnsembleSpec:
    """Ensemble whose basis is orthonormal for the reference (nu_0, k phi_0)."""
    ref = reference(ref)
    ref_grid = reference_grid(ref) if ref_grid is None else ref_grid
    return EnsembleSpec(orthonormalize(ref_grid, ref, k), w, grid)


@dataclass(frozen=True)
class EmpiricalMeasure:
    points: np.ndarray
    mass: float

    def pair(self, u) -> float:
        """<j_N, u> = (1/N) sum u(x_i)."""
        return float(np.sum(np.real(u(self.points))) * self.mass)

    @property
    def total(self) -> float:
        return self.mass * len(self.points)


def empirical(c: Configuration) -> EmpiricalMeasure:
    return EmpiricalMeasure(c.points, 1.0 / len(c.points))


# ----------------------------------------------------------------------------
# Densities
# ----------------------------------------------------------------------------


def _log_abs_det2(m) -> float:
    sign, ld = np.linalg.slogdet(m)
    return -math.inf if sign == 0 else 2.0 * float(ld)


def log_joint_density(e: EnsembleSpec, c: Configuration) -> float:
    """ln|det s_i(x_j)|^2 - k sum phi(x_j); -inf when two points coincide."""
    if len(c) != e.N:
        raise ValueError("configuration size does not match the basis dimension")
    if len(np.unique(c.points)) < len(c.points):
        return -math.inf
    m = e.basis.weighted_sections(c.points, e.target_weight)
    return _log_abs_det2(m)


def hamiltonian(e: EnsembleSpec, c: Configuration) -> float:
    """H = -k^{-2} ln|det S|^2 + k^{-1} sum phi, so that log density = -k^2 H."""
    if e.k == 0:
        raise ValueError("the Hamiltonian is scaled by 1/k and needs k >= 1")
    return -log_joint_density(e, c) / e.k**2


def log_factorial(n: int) -> float:
    return float(gammaln(n + 1))


def partition_function_exact(e: EnsembleSpec) -> float:
    """ln Z = ln N! + ln det G (Andreief identity)."""
    return log_factorial(e.N) + log_det_gram(e.basis, e.target_grid, e.target_weight)


def log_density(e: EnsembleSpec, c: Configuration, log_z: float = None) -> float:
    """ln of the normalized density of gamma_{k phi} w.r.t. nu^N."""
    log_z = partition_function_exact(e) if log_z is None else log_z
    return log_joint_density(e, c) - log_z


# ----------------------------------------------------------------------------
# Exact sampler on the grid
# ----------------------------------------------------------------------------


def _frame(e: EnsembleSpec):
    q = e._cache.get("frame")
    if q is None:
        q = orthonormal_frame(e.target_grid, e.target_weight, e.k)
        e._cache["frame"] = q
    return q


def _sample_projection(q: np.ndarray, rng) -> np.ndarray:
    """One draw of the projection DPP with kernel q q^* (rows = items).

    Sequential conditional sampling: the conditional first intensity after
    picking y_1..y_t is the squared norm of the row residuals after projecting
    out the span of the rows already chosen.
    """
    n, N = q.shape
    d = np.sum(np.abs(q) ** 2, axis=1)
    basis = np.empty((N, N), dtype=q.dtype)
    out = np.empty(N, dtype=int)
    for t in range(N):
        p = np.clip(d, 0.0, None)
        tot = p.sum()
        if not np.isfinite(tot) or tot < 0.5:
            raise LabError("kernel-rank", f"residual mass {tot:.3g} at step {t} of {N}")
        i = int(np.searchsorted(np.cumsum(p), rng.random() * tot, side="right"))
        i = min(i, n - 1)
        out[t] = i
        v = q[i].conj().copy()
        for s in range(t):
            v -= basis[s] * np.vdot(basis[s], v)
        nv = np.linalg.norm(v)
        if nv < 1e-10:
            raise LabError("kernel-rank", f"selected row is numerically dependent at step {t}")
        v /= nv
        basis[t] = v
        d = d - np.abs(q @ v) ** 2
        d[out[: t + 1]] = 0.0
    return out


def sample_exact(e: EnsembleSpec, seed) -> Configuration:
    """Exact draw of N distinct grid nodes from the discrete determinantal law."""
    rng = np.random.default_rng(seed)
    q = _frame(e)
    idx = e.target_grid.masked[_sample_projection(q, rng)]
    return Configuration(e.target_grid.nodes[idx], e.k, idx)


def sample_exact_many(e: EnsembleSpec, n: int, seed) -> List[Configuration]:
    rng = np.random.default_rng(seed)
    q = _frame(e)
    masked = e.target_grid.masked
    out = []
    for _ in range(n):
        idx = masked[_sample_projection(q, rng)]
        out.append(Configuration(e.target_grid.nodes[idx], e.k, idx))
    return out


# ----------------------------------------------------------------------------
# Metropolis chain in continuous E
# ----------------------------------------------------------------------------


@dataclass
class MCMCResult:
    config: Configuration
    acceptance: float
    step_scale: float
    samples: list = field(default_factory=list)
    n_steps: int = 0


def _site_logdensity(e, z):
    """ln of the density of nu at proposals; -inf outside E."""
    g = e.target_grid
    ld = g.log_density(np.atleast_1d(z))
    inside = np.isfinite(ld)
    out = np.full(ld.shape, -np.inf)
    if inside.any():
        out[inside] = ld[inside]
    return out


def sample_mcmc(e: EnsembleSpec, n_steps: int, step_scale: float, seed, burn_in: int = None,
                record_every: int = 0, init: Configuration = None) -> MCMCResult:
    """Single-site Metropolis chain targeting the continuous-E density.

    The step scale is tuned during burn-in towards acceptance 0.3-0.5, then
    frozen so that the recorded part is an honest reversible chain.  The
    determinant ratio of a single-row update is read off the maintained
    inverse of the section matrix.
    """
    N = e.N
    if n_steps < 100 * N:
        raise ValueError(f"n_steps must be at least 100 N = {100 * N}")
    g = e.target_grid
    if g.is_curve:
        raise ValueError("the continuous sampler needs a two-dimensional support")
    rng = np.random.default_rng(seed)
    burn_in = n_steps // 2 if burn_in is None else burn_in

    if init is None:
        c0 = sample_exact(e, rng.integers(2**63))
        x = c0.points.copy()
    else:
        x = init.points.copy()
    basis, w = e.basis, e.target_weight

    def rows(z):
        return basis.weighted_monomials(z, w)

    mono = rows(x)
    a = mono @ basis.coeffs
    ainv = np.linalg.inv(a)
    site = _site_logdensity(e, x)

    step = float(step_scale)
    accepted = 0
    window_acc = window_n = 0
    samples = []
    for it in range(n_steps):
        j = it % N
        z = x[j] + step * (rng.standard_normal() + 1j * rng.standard_normal()) / math.sqrt(2)
        s_new = _site_logdensity(e, z)[0]
        ok = False
        if np.isfinite(s_new):
            row = rows(np.array([z]))[0] @ basis.coeffs
            ratio = row @ ainv[:, j]
            log_acc = 2 * math.log(abs(ratio)) + s_new - site[j] if ratio != 0 else -math.inf
            if math.log(rng.random() + 1e-300) < log_acc:
                # Sherman-Morrison update for replacing row j
                delta = row - a[j]
                col = ainv[:, j]
                ainv = ainv - np.outer(col, delta @ ainv) / ratio
                a[j] = row
                x[j] = z
                site[j] = s_new
                ok = True
        accepted += ok
        window_acc += ok
        window_n += 1
        if it < burn_in and window_n == 20 * N:
            rate = window_acc / window_n
            if rate < 0.3:
                step *= 0.7
            elif rate > 0.5:
                step *= 1.3
            window_acc = window_n = 0
        if it % (50 * N) == 0:
            ainv = np.linalg.inv(a)  # refresh against drift
        if record_every and it >= burn_in and (it - burn_in) % record_every == 0:
            samples.append(Configuration(x.copy(), e.k))
    acc = accepted / n_steps
    if acc < 0.01:
        warnings.warn(f"cold-chain: acceptance {acc:.4f} below 0.01", ColdChainWarning, stacklevel=2)
    return MCMCResult(Configuration(x.copy(), e.k), acc, step, samples, n_steps)


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor for scalar chains of equal length."""
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    means = chains.mean(axis=1)
    b = n * means.var(ddof=1)
    wv = chains.var(axis=1, ddof=1).mean()
    var_hat = (n - 1) / n * wv + b / n
    return float(math.sqrt(var_hat / wv))


# ----------------------------------------------------------------------------
# Sample dumps
# ----------------------------------------------------------------------------


def save_samples(path, configs, k: int, weight_label: str, seed, sampler: str) -> None:
    header = {"schema": SAMPLE_SCHEMA, "k": k, "weight": weight_label, "seed": seed, "sampler": sampler}
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for c in configs:
            fh.write(json.dumps([[float(p.real), float(p.imag)] for p in c.points]) + "\n")


def load_samples(path):
    with open(path) as fh:
        header = json.loads(fh.readline()[2:])
        configs = [Configuration(np.array([complex(a, b) for a, b in json.loads(ln)]), header["k"])
                   for ln in fh if ln.strip()]
    return header, configs
