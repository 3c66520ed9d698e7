"""Experiment harness for the large-deviation statements at desk scale.

Deviation probabilities are estimated by exact sampling, predicted by the
constrained minimum of the rate functional, and compared through the fitted
speed-k^2 decay.  Also here: exact free-energy curves, Fekete ascent and the
localization diagnostic.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.stats import binomtest

from .basis import SectionBasis, log_det_gram, orthonormalize
from .ensemble import (Configuration, EnsembleSpec, _frame, _sample_projection, log_factorial,
                       partition_function_exact, sample_mcmc)
from .equilibrium import (GridMeasure, _weight_values, energy_value, envelope_energy_radial,
                          equilibrium_qp, minimize_log_energy)
from .errors import LabError
from .weights import MeasureGrid, WeightSpec, reference, reference_grid

TEST_FUNCTIONS = {
    "re": lambda z: np.real(z),
    "im": lambda z: np.imag(z),
    "abs2": lambda z: np.abs(z) ** 2,
}


def test_function(u) -> Callable:
    if callable(u):
        return u
    try:
        return TEST_FUNCTIONS[u]
    except KeyError:
        raise ValueError(f"unknown test function {u!r}; use one of {sorted(TEST_FUNCTIONS)} or a callable") from None


def thread_count() -> int:
    env = os.environ.get("DETLAB_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


# ----------------------------------------------------------------------------
# Deviation probabilities
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationExperiment:
    test_function: Union[str, Callable]
    epsilon: float
    k_list: Sequence[int]
    n_samples: int
    sampler: str = "exact"
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if len(self.k_list) == 0:
            raise ValueError("k_list must not be empty")
        if self.sampler not in ("exact", "mcmc"):
            raise ValueError("sampler must be 'exact' or 'mcmc'")


@dataclass
class DeviationEstimate:
    k: int
    hits: int
    n: int
    estimate: float
    lower: float
    upper: float


def _chunks(n, size):
    return [(i, min(size, n - i * size)) for i in range((n + size - 1) // size)]


def _cell_stats(ensemble: EnsembleSpec, u, sampler, n, seed_seq):
    """Linear-statistic means (1/N) sum u(x_i) for ``n`` independent draws."""
    rng = np.random.default_rng(seed_seq)
    g = ensemble.target_grid
    N = ensemble.N
    if sampler == "exact":
        q = _frame(ensemble)
        uvals = np.real(u(g.nodes[g.masked]))
        return np.array([uvals[_sample_projection(q, rng)].mean() for _ in range(n)])
    thin = 20 * N
    res = sample_mcmc(ensemble, max(100 * N, (n + 1) * thin), 0.2, rng.integers(2**63),
                      burn_in=100 * N, record_every=thin)
    return np.array([np.real(u(c.points)).mean() for c in res.samples[:n]])


def deviation_probability(x: DeviationExperiment, grid: MeasureGrid, w: WeightSpec, eq_mean: float = None,
                          ref="fs", workers: int = None, chunk: int = 500) -> List[DeviationEstimate]:
    """Fraction of draws with |N^-1 sum u(x_i) - int u dmu_eq| > epsilon, per k.

    Each (k, chunk) cell has its own seed derived from (seed, k, chunk), so
    the result does not depend on the number of worker threads.
    """
    if x.n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    u = test_function(x.test_function)
    if eq_mean is None:
        eq_mean = equilibrium_qp(grid, w, ref).measure.pair(u)
    cells = []
    for k in x.k_list:
        ens = EnsembleSpec(orthonormalize(grid, w, k), w, grid)
        for ci, size in _chunks(x.n_samples, chunk):
            cells.append((k, ci, size, ens))
    workers = thread_count() if workers is None else workers

    def run(cell):
        k, ci, size, ens = cell
        return (k, ci), _cell_stats(ens, u, x.sampler, size, np.random.SeedSequence([x.seed, k, ci]))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = dict(pool.map(run, cells))
    out = []
    for k in x.k_list:
        stats = np.concatenate([results[(k, ci)] for ci, _ in _chunks(x.n_samples, chunk)])
        hits = int(np.sum(np.abs(stats - eq_mean) > x.epsilon))
        n = len(stats)
        ci = binomtest(hits, n).proportion_ci(0.95, method="wilson")
        out.append(DeviationEstimate(k, hits, n, hits / n, float(ci.low), float(ci.high)))
    return out


# ----------------------------------------------------------------------------
# Rate predictions and fits
# ----------------------------------------------------------------------------


@dataclass
class RatePrediction:
    inf_value: float
    side: str
    minimizing_measure: Optional[GridMeasure]
    eq_mean: float = 0.0
    one_sided: dict = field(default_factory=dict)


def rate_prediction(grid: MeasureGrid, w, ref, u, epsilon: float, side: str = "two-sided",
                    eq=None, tol=1e-8) -> RatePrediction:
    """inf of I over {+-(int u dmu - int u dmu_eq) >= epsilon} on the grid.

    Each one-sided problem is convex with the linear constraint active at the
    optimum, so it is solved as the weighted-energy problem with the extra
    equality int u dmu = mean +- epsilon.
    """
    ref = reference(ref)
    u = test_function(u)
    eq = equilibrium_qp(grid, w, ref, tol=tol) if eq is None else eq
    phi = _weight_values(grid, w)
    uu = np.real(u(grid.nodes))
    m = float(uu @ eq.measure.density)
    f_eq = energy_value(grid, eq.measure.density, phi)
    if epsilon == 0:
        return RatePrediction(0.0, side, eq.measure, m, {"upper": 0.0, "lower": 0.0})
    umask = uu[grid.masked]
    sides = {"upper": 1.0, "lower": -1.0}
    if side != "two-sided":
        sides = {side: sides[side]}
    results = {}
    for name, sgn in sides.items():
        target = m + sgn * epsilon
        if not umask.min() - 1e-12 <= target <= umask.max() + 1e-12:
            continue
        mu, gap, it, lam = minimize_log_energy(grid, phi, A=uu[None, :], b=[target], tol=tol)
        results[name] = (max(energy_value(grid, mu, phi) - f_eq, 0.0), mu)
    if not results:
        raise LabError("infeasible-deviation", f"epsilon {epsilon} exceeds the range of u on E")
    best = min(results, key=lambda s: results[s][0])
    return RatePrediction(results[best][0], best, GridMeasure(grid, results[best][1]), m,
                          {s: v[0] for s, v in results.items()})


@dataclass
class RateFit:
    k: List[int]
    r_hat: List[float]
    limit: float
    slope: float
    nondecreasing: bool
    residual: float


def rate_fit(probabilities, k_list) -> RateFit:
    """r_k = -k^-2 ln p_k and the least-squares limit of r_k = a + b / k."""
    p = np.asarray([getattr(v, "estimate", v) for v in probabilities], dtype=float)
    ks = np.asarray(k_list, dtype=float)
    use = p > 0
    if use.sum() < 3:
        raise LabError("insufficient-decay-data", f"only {int(use.sum())} k values with nonzero estimates")
    ks, p = ks[use], p[use]
    r = -np.log(p) / ks**2
    A = np.column_stack([np.ones_like(ks), 1 / ks])
    coef, res, *_ = np.linalg.lstsq(A, r, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - r) ** 2)))
    return RateFit([int(k) for k in ks], [float(v) for v in r], float(coef[0]), float(coef[1]),
                   bool(np.all(np.diff(r) >= -1e-12)), resid)


# ----------------------------------------------------------------------------
# Free energy
# ----------------------------------------------------------------------------


@dataclass
class FreeEnergyCurve:
    k: List[int]
    log_z: List[float]
    free_energy: List[float]     # -k^-2 ln Z
    gram_curve: List[float]      # k^-2 ln det G
    limit: float                 # extrapolated limit of k^-2 ln det G
    residual: float


def richardson(ks, values, last=3):
    """Fit a + b/k to the last ``last`` points; returns (a, b, rms residual)."""
    ks = np.asarray(ks[-last:], dtype=float)
    v = np.asarray(values[-last:], dtype=float)
    A = np.column_stack([np.ones_like(ks), 1 / ks])
    coef = np.linalg.lstsq(A, v, rcond=None)[0]
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean((A @ coef - v) ** 2)))


def free_energy_curve(grid: MeasureGrid, w: WeightSpec, ref="fs", k_list=(8, 16, 32, 64),
                      ref_grid: MeasureGrid = None) -> FreeEnergyCurve:
    """Exact ln Z = ln N! + ln det G along k, with the basis orthonormal for
    the reference; since ln N! / k^2 -> 0 both curves share their limit, and
    the Gram part is the one extrapolated."""
    ref = reference(ref)
    ref_grid = reference_grid(ref) if ref_grid is None else ref_grid
    log_z, fe, gc = [], [], []
    for k in k_list:
        b = orthonormalize(ref_grid, ref, k)
        ld = log_det_gram(b, grid, w)
        lz = log_factorial(k + 1) + ld
        log_z.append(lz)
        fe.append(-lz / k**2)
        gc.append(ld / k**2)
    a, _, resid = richardson(list(k_list), gc)
    return FreeEnergyCurve(list(k_list), log_z, fe, gc, a, resid)


def reference_interval(ref, ref_grid: MeasureGrid = None):
    """Log-radial interval of the reference support E_0 used by ``reference_grid``."""
    ref = reference(ref)
    g = reference_grid(ref) if ref_grid is None else ref_grid
    return g.region.log_radial_interval()


def predicted_free_energy(grid: MeasureGrid, w: WeightSpec, ref="fs", ref_grid: MeasureGrid = None) -> float:
    """-E[P_E phi, P_{E_0} phi_0] by the radial route (radial w, centred E)."""
    if not w.radial or grid.region is None or grid.region.log_radial_interval() is None:
        raise ValueError("the radial route needs a radial weight and a centred radial support")
    return -envelope_energy_radial(w, grid.region.log_radial_interval(), ref, reference_interval(ref, ref_grid))


# ----------------------------------------------------------------------------
# Fekete ascent
# ----------------------------------------------------------------------------


@dataclass
class FeketeResult:
    config: Configuration
    objective: float
    trace: List[float]
    restart_objectives: List[float]


def _ascend(V, sel, max_sweeps):
    N = V.shape[1]
    A = V[sel]
    ainv = np.linalg.inv(A)
    sign, ld = np.linalg.slogdet(A)
    obj = 2 * ld
    trace = [obj]
    for _ in range(max_sweeps):
        moved = False
        for j in range(N):
            r = V @ ainv[:, j]
            best = int(np.argmax(np.abs(r)))
            ratio = r[best]
            if abs(ratio) > 1 + 1e-12:
                delta = V[best] - A[j]
                col = ainv[:, j]
                ainv = ainv - np.outer(col, delta @ ainv) / ratio
                A[j] = V[best]
                sel[j] = best
                obj += 2 * math.log(abs(ratio))
                trace.append(obj)
                moved = True
        ainv = np.linalg.inv(A)
        if not moved:
            break
    _, ld = np.linalg.slogdet(V[sel])
    return sel, 2 * ld, trace


def fekete_ascent(grid: MeasureGrid, w: WeightSpec, k: int, restarts: int = 3, seed=0, ref="fs",
                  basis: SectionBasis = None, max_sweeps: int = 100) -> FeketeResult:
    """Cyclic single-point maximization of ln|det s_i(x_j)|^2 e^{-k sum phi} over grid nodes.

    The first start is the greedy (column-pivoted QR) selection, the others
    are random; the best local maximum is returned.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ref = reference(ref)
    basis = orthonormalize(reference_grid(ref), ref, k) if basis is None else basis
    idx = grid.masked
    V = basis.weighted_sections(grid.nodes[idx], w)
    N = k + 1
    rng = np.random.default_rng(seed)
    best = None
    objs = []
    for r in range(max(1, restarts)):
        if r == 0:
            sel = linalg.qr(V.T, pivoting=True, mode="r")[1][:N].copy()
        else:
            for _ in range(100):
                sel = rng.choice(len(idx), N, replace=False)
                if np.linalg.slogdet(V[sel])[0] != 0:
                    break
        sel, obj, trace = _ascend(V, sel, max_sweeps)
        objs.append(obj)
        if best is None or obj > best[1]:
            best = (sel.copy(), obj, trace)
    sel, obj, trace = best
    nodes = idx[sel]
    return FeketeResult(Configuration(grid.nodes[nodes], k, nodes), obj, trace, objs)


# ----------------------------------------------------------------------------
# Localization and smoothing
# ----------------------------------------------------------------------------


def localization_mass(e: EnsembleSpec, n_samples: int, seed, log_z: float = None) -> float:
    """gamma-mass of A = {c : k^-2 ln gamma(c) >= -1/k}, estimated from exact draws.

    gamma(c) is the normalized density w.r.t. nu^N, evaluated with the exact ln Z.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    log_z = partition_function_exact(e) if log_z is None else log_z
    rng = np.random.default_rng(seed)
    q = _frame(e)
    g = e.target_grid
    masked = g.masked
    V = e.basis.weighted_sections(g.nodes[masked], e.target_weight)
    k = e.k
    hits = 0
    for _ in range(n_samples):
        sel = _sample_projection(q, rng)
        sign, ld = np.linalg.slogdet(V[sel])
        lg = 2 * ld - log_z
        hits += lg / k**2 >= -1.0 / k
    return hits / n_samples


def smooth_to_grid(configs, grid: MeasureGrid) -> GridMeasure:
    """Average empirical measure of ``configs`` moved onto ``grid``.

    Each point's mass goes to its nearest masked node; one mass-preserving
    nearest-neighbour averaging step then spreads every node's mass evenly
    over itself and its masked neighbours.
    """
    configs = [configs] if isinstance(configs, Configuration) else list(configs)
    pts = np.concatenate([c.points for c in configs])
    mass = np.concatenate([np.full(len(c.points), 1.0 / (len(c.points) * len(configs))) for c in configs])
    m = np.zeros(len(grid))
    np.add.at(m, grid.nearest_node(pts), mass)
    return GridMeasure(grid, _average(m, grid))


def _average(m, grid):
    nb = grid.neighbours()
    out = np.zeros_like(m)
    for i in np.flatnonzero(m):
        group = [i] + [j for j in nb[i] if grid.e_mask[j]]
        out[group] += m[i] / len(group)
    return out


def transfer_measure(mu: GridMeasure, grid: MeasureGrid) -> GridMeasure:
    """Aggregate the masses of ``mu`` onto the nearest masked nodes of ``grid``."""
    m = np.zeros(len(grid))
    nz = np.flatnonzero(mu.density)
    np.add.at(m, grid.nearest_node(mu.grid.nodes[nz]), mu.density[nz])
    return GridMeasure(grid, m)
