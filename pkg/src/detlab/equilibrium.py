"""Envelopes, equilibrium measures, potentials and the energy bifunctional (n = 1).

Two independent routes to the equilibrium measure are implemented.  For
radial data the envelope is a one-dimensional convex minorant problem in
t = ln|z|^2 and its Monge-Ampere measure is f''(t) dt times the uniform
angular measure.  For arbitrary supports the measure is the minimizer of the
weighted logarithmic energy over the probability simplex of a grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from .errors import LabError
from .kernel import kernel_for, padded_log_field, smeared_log
from .weights import MeasureGrid, ReferenceWeight, WeightSpec, eval_weight, reference

# ----------------------------------------------------------------------------
# Measures on a grid
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Masses per node of a MeasureGrid; zero off the support mask."""

    grid: MeasureGrid
    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.shape != (len(self.grid),):
            raise ValueError("density must have one entry per grid node")
        if np.any(d < -1e-12):
            raise ValueError("a grid measure must be nonnegative")
        if np.any(d[~self.grid.e_mask] != 0):
            raise ValueError("a grid measure must vanish off the support mask")
        d = np.clip(d, 0.0, None)
        d.setflags(write=False)
        object.__setattr__(self, "density", d)

    @property
    def total(self) -> float:
        return float(self.density.sum())

    def is_probability(self, tol=1e-10) -> bool:
        return abs(self.total - 1.0) <= tol

    def pair(self, u) -> float:
        """int u dmu for u given as a callable of z or as node values."""
        vals = u(self.grid.nodes) if callable(u) else np.asarray(u)
        return float(np.sum(np.real(vals) * self.density))

    def l1(self, other: "GridMeasure") -> float:
        if other.grid is not self.grid and len(other.grid) != len(self.grid):
            raise ValueError("L1 distance needs measures on the same grid")
        return float(np.abs(self.density - other.density).sum())

    def normalized(self) -> "GridMeasure":
        return GridMeasure(self.grid, self.density / self.total)


def uniform_measure(grid: MeasureGrid, where=None) -> GridMeasure:
    """Normalized restriction of nu to the masked nodes (optionally to ``where``)."""
    d = np.where(grid.e_mask, grid.weights, 0.0)
    if where is not None:
        d = np.where(where(grid.nodes), d, 0.0)
    return GridMeasure(grid, d / d.sum())


def save_measure(mu: GridMeasure, path) -> None:
    np.savetxt(path, mu.density, fmt="%.17g", header="detlab-measure 1\ncolumns mass")


# ----------------------------------------------------------------------------
# Radial profiles and envelopes
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """A radial weight f(t) = psi(e^{t/2}) sampled on increasing t nodes.

    Outside [t_0, t_M] the profile is read as extended with slope 0 to the
    left and slope 1 to the right, i.e. as a weight on O(1) whose curvature
    has total mass one.
    """

    t_nodes: np.ndarray
    f_values: np.ndarray
    slope_bounds: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        f = np.asarray(self.f_values, dtype=float)
        if t.shape != f.shape or t.ndim != 1 or len(t) < 2:
            raise ValueError("t_nodes and f_values must be matching 1-d arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError("t_nodes must be strictly increasing")
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "f_values", f)

    def slopes(self) -> np.ndarray:
        return np.diff(self.f_values) / np.diff(self.t_nodes)

    def masses(self) -> np.ndarray:
        """Curvature masses at the nodes, including the atoms created by the
        slope-0 / slope-1 extensions at the two ends (total mass 1)."""
        s = self.slopes()
        m = np.empty(len(self.t_nodes))
        m[0] = s[0]
        m[1:-1] = np.diff(s)
        m[-1] = 1.0 - s[-1]
        return m

    def is_admissible(self, tol=1e-9) -> bool:
        s = self.slopes()
        return bool(s.min() >= -tol and s.max() <= 1 + tol and np.all(np.diff(s) >= -tol))

    def __call__(self, t):
        """Value of the extended profile at arbitrary t."""
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.t_nodes, self.f_values)
        return np.where(t > self.t_nodes[-1], self.f_values[-1] + (t - self.t_nodes[-1]), out)

    def shifted(self, c) -> "RadialProfile":
        return RadialProfile(self.t_nodes, self.f_values + c, self.slope_bounds)


def radial_profile(w, t_min=-30.0, t_max=8.0, n=8001, breakpoints: Sequence[float] = ()) -> RadialProfile:
    """Sample a radial weight (WeightSpec or callable of |z|) at t = ln|z|^2."""
    t = np.linspace(t_min, t_max, n)
    extra = [b for b in breakpoints if np.isfinite(b) and t_min < b < t_max]
    if extra:
        t = np.unique(np.concatenate([t, extra]))
    r = np.exp(0.5 * t)
    f = eval_weight(w, r.astype(complex)) if isinstance(w, WeightSpec) else np.asarray(w(r), dtype=float)
    return RadialProfile(t, f)


def _lower_hull(t, f):
    """Indices of the lower convex hull of the points (t_i, f_i), t increasing."""
    hull = []
    for i in range(len(t)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or above the chord a -> i
            if (f[b] - f[a]) * (t[i] - t[a]) >= (f[i] - f[a]) * (t[b] - t[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.array(hull)


def envelope_radial(p: RadialProfile, e_interval) -> RadialProfile:
    """Largest convex g with slopes in [0, 1] and g <= f on the nodes of E.

    g(t) = max over admissible slopes a of (a t - f*(a)), where
    f*(a) = max_{t_i in E} (a t_i - f_i).  The maximum over a is attained at
    0, 1 or a clipped slope of the lower hull of the obstacle, so only those
    are tried; both transforms reduce to sorted searches.
    """
    lo, hi = e_interval
    if not lo <= hi:
        raise LabError("empty-support", f"empty interval [{lo}, {hi}]")
    t, f = p.t_nodes, p.f_values
    tol = 1e-12 * max(1.0, abs(lo) if np.isfinite(lo) else 1.0, abs(hi) if np.isfinite(hi) else 1.0)
    inside = (t >= lo - tol) & (t <= hi + tol)
    if not inside.any():
        raise LabError("empty-support", "no profile node lies in the support interval")
    te, fe = t[inside], f[inside]
    smin, smax = p.slope_bounds
    h = _lower_hull(te, fe)
    th, fh = te[h], fe[h]
    hs = np.diff(fh) / np.diff(th)  # increasing hull slopes
    cand = np.unique(np.concatenate([np.clip(hs, smin, smax), [smin, smax]]))
    # f*(a) is attained at the hull vertex where the slope passes a
    j = np.searchsorted(hs, cand, side="left")
    fstar = cand * th[j] - fh[j]
    # a t - f*(a) is concave in a; its maximizer over the sorted candidates
    # switches at the increasing dual breakpoints tau
    if len(cand) > 1:
        tau = np.diff(fstar) / np.diff(cand)
        i = np.searchsorted(tau, t, side="left")
    else:
        i = np.zeros(len(t), int)
    g = cand[i] * t - fstar[i]
    return RadialProfile(t, g, p.slope_bounds)


def ma_radial(p: RadialProfile, grid: MeasureGrid, n_sub: int = 8) -> GridMeasure:
    """Curvature measure f''(t) dt x (uniform angle) of a convex profile, on ``grid``.

    Only the mass in [t_0, t_M] is transported (the extension atoms are not);
    the cumulative mass inside radius r is the slope of f at t = 2 ln r.
    """
    s = p.slopes()
    tmid = 0.5 * (p.t_nodes[1:] + p.t_nodes[:-1])

    def F(r):
        with np.errstate(divide="ignore"):
            tt = 2 * np.log(r)
        return np.interp(tt, tmid, s, left=s[0], right=s[-1])

    if grid.is_curve:
        c = grid.region
        jump = float(F(c.radius * (1 + 1e-9)) - F(c.radius * (1 - 1e-9)))
        d = np.where(grid.e_mask, jump * grid.weights / grid.weights[grid.e_mask].sum(), 0.0)
        return GridMeasure(grid, d)
    lat = grid.lattice
    if lat is None:
        raise ValueError("ma_radial needs a lattice or circle grid")
    h = lat.h
    off = (np.arange(n_sub) + 0.5) / n_sub - 0.5
    ox, oy = np.meshgrid(off * h, off * h, indexing="ij")
    sub = grid.nodes[:, None] + (ox + 1j * oy).ravel()[None, :]
    r = np.abs(sub)
    width = 2 * h / n_sub
    nb = int(math.ceil(r.max() / width)) + 1
    edges = np.arange(nb + 1) * width
    binned = np.minimum((r / width).astype(int), nb - 1)
    bin_mass = np.diff(F(np.maximum(edges, 1e-300)))
    bin_mass[0] += F(1e-300) - s[0]  # mass below the first edge (t -> -inf)
    counts = np.bincount(binned.ravel(), minlength=nb)
    per_sub = np.where(counts > 0, bin_mass / np.maximum(counts, 1), 0.0)
    d = per_sub[binned].sum(axis=1)
    d = np.where(grid.e_mask, d, 0.0)
    return GridMeasure(grid, np.clip(d, 0.0, None))


def envelope_monotone_check(psi_sequence, e_interval, panel=None) -> dict:
    """Check that P_E of a decreasing sequence decreases and its MA pairings settle.

    ``panel`` holds functions of t; the default is |z|^2 = e^t.
    """
    panel = panel or {"abs2": np.exp}
    for a, b in zip(psi_sequence, psi_sequence[1:]):
        if not np.array_equal(a.t_nodes, b.t_nodes):
            raise ValueError("profiles must share their t nodes")
        if np.any(b.f_values > a.f_values + 1e-12):
            raise LabError("not-monotone", "input sequence is not pointwise decreasing")
    envs = [envelope_radial(p, e_interval) for p in psi_sequence]
    viol = 0.0
    for a, b in zip(envs, envs[1:]):
        viol = max(viol, float(np.max(b.f_values - a.f_values)))
    pairings = {name: [float(np.sum(u(e.t_nodes) * e.masses())) for e in envs] for name, u in panel.items()}
    return {"max_violation": max(viol, 0.0), "pairings": pairings, "n": len(envs)}


# ----------------------------------------------------------------------------
# Energy bifunctional
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PotentialField:
    """u = psi - phi_0 on the nodes of a grid, with the measure MA(psi) when known."""

    grid: MeasureGrid
    u_values: np.ndarray
    ref: ReferenceWeight
    measure: Optional[GridMeasure] = None

    def curvature(self) -> np.ndarray:
        """MA(psi) per node: the exact measure when known, else a 5-point Laplacian."""
        if self.measure is not None:
            return self.measure.density
        return discrete_curvature(self.grid, self.u_values + eval_weight(self.ref, self.grid.nodes))


def discrete_curvature(grid: MeasureGrid, psi_nodes) -> np.ndarray:
    """dd^c psi per lattice cell from node values; nodes missing a neighbour get 0."""
    lat = grid.lattice
    if lat is None:
        raise ValueError("discrete curvature needs a lattice grid")
    arr = np.full((lat.nx + 2, lat.ny + 2), np.nan)
    arr[lat.ix + 1, lat.iy + 1] = psi_nodes
    lap = (arr[2:, 1:-1] + arr[:-2, 1:-1] + arr[1:-1, 2:] + arr[1:-1, :-2] - 4 * arr[1:-1, 1:-1]) / (4 * math.pi)
    out = lap[lat.ix, lat.iy]
    return np.where(np.isfinite(out), out, 0.0)


def energy_bifunctional(psi1, psi2, tol=1e-9) -> float:
    """E[psi1, psi2] = 1/2 int (psi1 - psi2)(MA(psi1) + MA(psi2))."""
    if isinstance(psi1, RadialProfile) and isinstance(psi2, RadialProfile):
        if not np.array_equal(psi1.t_nodes, psi2.t_nodes):
            raise ValueError("profiles must share their t nodes")
        for p in (psi1, psi2):
            if not p.is_admissible(tol):
                raise LabError("not-psh", "profile is not convex with slopes in [0, 1]")
        return 0.5 * float(np.sum((psi1.f_values - psi2.f_values) * (psi1.masses() + psi2.masses())))
    if isinstance(psi1, PotentialField) and isinstance(psi2, PotentialField):
        m1, m2 = psi1.curvature(), psi2.curvature()
        cell = psi1.grid.weights
        for m in (m1, m2):
            if np.any(m < -1e-6 * np.maximum(cell, 1.0 / len(cell))):
                raise LabError("not-psh", "negative discrete curvature")
        return 0.5 * float(np.sum((psi1.u_values - psi2.u_values) * (m1 + m2)))
    raise TypeError("energy_bifunctional needs two RadialProfiles or two PotentialFields")


def envelope_energy_radial(w, e_interval, ref="fs", ref_interval=None, t_min=-30.0, n=20001) -> float:
    """E[P_E phi, P_{E_0} phi_0] for a radial weight and a centred radial support.

    ``ref_interval`` is the log-radial interval of E_0; None means E_0 = C,
    where P phi_0 = phi_0 because both references are psh.
    """
    ref = reference(ref)
    ends = [x for x in (*e_interval, *(ref_interval or ())) if np.isfinite(x)]
    t_max = max(ends + [0.0]) + 4.0
    bps = ends + [0.0]
    p = radial_profile(w, t_min, t_max, n, bps)
    p0 = radial_profile(ref, t_min, t_max, n, bps)
    env = envelope_radial(p, e_interval)
    env0 = envelope_radial(p0, ref_interval) if ref_interval is not None else p0
    return energy_bifunctional(env, env0)


# ----------------------------------------------------------------------------
# Potentials
# ----------------------------------------------------------------------------


def potential_of_measure(mu: GridMeasure, ref="fs") -> PotentialField:
    """u_mu(z) = sum_w g_0(z, w) mu(w), g_0 = ln|z-w|^2 - phi_0(z) - phi_0(w) + C'."""
    ref = reference(ref)
    g = mu.grid
    phi0 = eval_weight(ref, g.nodes)
    u = kernel_for(g).matvec(mu.density) - phi0 - float(np.dot(phi0, mu.density)) + ref.green_constant
    return PotentialField(g, u, ref, mu)


def green_function(z, w, ref="fs", rho=0.0):
    """g_0(z, w); with rho > 0 the log term is smeared over a disk of that radius."""
    ref = reference(ref)
    z, w = np.asarray(z), np.asarray(w)
    d2 = np.abs(z - w) ** 2
    if rho > 0:
        lg = smeared_log(d2, rho)
    else:
        with np.errstate(divide="ignore"):
            lg = np.log(d2)
    return lg - eval_weight(ref, z) - eval_weight(ref, w) + ref.green_constant


def potential_at(mu: GridMeasure, z, ref="fs") -> np.ndarray:
    """u_mu at arbitrary points, node masses read as smeared disks."""
    ref = reference(ref)
    g = mu.grid
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    nz = np.flatnonzero(mu.density)
    d2 = np.abs(z[:, None] - g.nodes[nz][None, :]) ** 2
    lg = smeared_log(d2, g.cell_radius[nz][None, :]) @ mu.density[nz]
    phi0 = eval_weight(ref, g.nodes[nz])
    return lg - eval_weight(ref, z) - float(phi0 @ mu.density[nz]) + ref.green_constant


def curvature_of_potential(mu: GridMeasure) -> np.ndarray:
    """5-point discrete dd^c of psi_mu = sum ln|z-w|^2 mu(w) at the grid nodes.

    The field is computed on the lattice padded by one cell so that boundary
    nodes have all four neighbours.
    """
    g = mu.grid
    lat = g.lattice
    if lat is None:
        raise ValueError("curvature_of_potential needs a lattice grid")
    f = padded_log_field(g, mu.density, 1)
    lap = (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4 * f[1:-1, 1:-1]) / (4 * math.pi)
    return lap[lat.ix, lat.iy]


# ----------------------------------------------------------------------------
# Weighted energy minimization
# ----------------------------------------------------------------------------


@dataclass
class QPResult:
    measure: GridMeasure
    J: float
    gap: float
    iterations: int
    support_size: int
    multipliers: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> str:
        return json.dumps({"J": self.J, "gap": self.gap, "iterations": self.iterations,
                           "support_size": self.support_size}, sort_keys=True)


def _weight_values(grid, w):
    if isinstance(w, WeightSpec):
        return eval_weight(w, grid.nodes)
    vals = np.asarray(w, dtype=float)
    if vals.shape != (len(grid),):
        raise ValueError("weight values must have one entry per grid node")
    return vals


def _feasible_start(phi, idx, A, b):
    """A vertex of {mu >= 0 on idx, sum mu = 1, A mu = b} via a linear program."""
    if A is None:
        j = idx[np.argmin(phi[idx])]
        mu = np.zeros(len(phi))
        mu[j] = 1.0
        return mu
    Aeq = np.vstack([np.ones(len(idx)), A[:, idx]])
    beq = np.concatenate([[1.0], b])
    res = linprog(phi[idx], A_eq=Aeq, b_eq=beq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise LabError("infeasible-deviation", "linear constraints admit no probability measure on E")
    mu = np.zeros(len(phi))
    mu[idx] = np.clip(res.x, 0, None)
    return mu


def _fw_gap(grad, mu, idx, A, b):
    """<grad, mu> - min over the feasible polytope of <grad, nu>."""
    if A is None:
        return float(grad @ mu - grad[idx].min())
    Aeq = np.vstack([np.ones(len(idx)), A[:, idx]])
    beq = np.concatenate([[1.0], b])
    res = linprog(grad[idx], A_eq=Aeq, b_eq=beq, bounds=(0, None), method="highs")
    return float(grad @ mu - res.fun)


def minimize_log_energy(grid: MeasureGrid, phi, A=None, b=None, tol=1e-6, max_iter=200, batch=64):
    """Minimize F(mu) = -1/2 mu^T K mu + phi^T mu over probability vectors on E
    subject to the extra equalities A mu = b.

    Active-set method: on the current support the KKT system is solved exactly
    (a fully corrective step); components that turn negative are removed by a
    Lawson-Hanson style ratio step; nodes with negative reduced cost are then
    added in batches.  Returns (mu, gap, iterations, multipliers).
    """
    kern = kernel_for(grid)
    idx = grid.masked
    m = 0 if A is None else A.shape[0]
    B = np.ones((1, len(phi))) if A is None else np.vstack([np.ones(len(phi)), A])
    c = np.concatenate([[1.0], np.zeros(0) if b is None else np.asarray(b, float)])
    mu = _feasible_start(phi, idx, A, b)
    support = list(np.flatnonzero(mu))
    in_mask = np.zeros(len(phi), bool)
    in_mask[idx] = True
    lam = np.zeros(1 + m)
    gap = last_gap = math.inf
    for it in range(1, max_iter + 1):
        S = np.array(sorted(support))
        K_SS = kern.submatrix(S)
        while True:
            n = len(S)
            kkt = np.zeros((n + 1 + m, n + 1 + m))
            kkt[:n, :n] = -K_SS
            kkt[:n, n:] = -B[:, S].T
            kkt[n:, :n] = B[:, S]
            rhs = np.concatenate([-phi[S], c])
            try:
                sol = linalg.solve(kkt, rhs, assume_a="gen")
            except linalg.LinAlgError:
                sol = linalg.lstsq(kkt, rhs)[0]
            z, lam = sol[:n], sol[n:]
            if z.min() >= -1e-14:
                mu = np.zeros(len(phi))
                mu[S] = np.clip(z, 0.0, None)
                break
            cur = mu[S]
            neg = z < 0
            alpha = np.min(cur[neg] / (cur[neg] - z[neg]))
            new = cur + alpha * (z - cur)
            keep = (new > 1e-15) | (z > 0)  # blocking components leave the support
            mu = np.zeros(len(phi))
            mu[S[keep]] = new[keep]
            sel = np.flatnonzero(keep)
            S = S[sel]
            K_SS = K_SS[np.ix_(sel, sel)]
        support = list(S)
        grad = -kern.matvec(mu) + phi
        gap = _fw_gap(grad, mu, idx, A, b)
        if gap <= tol:
            return mu, gap, it, lam
        reduced = grad - B.T @ lam
        reduced[~in_mask] = np.inf
        reduced[S] = np.inf
        cand = np.flatnonzero(reduced < 0)
        if cand.size == 0:
            return mu, gap, it, lam
        # fall back to single additions when a batch made no progress
        stalled = gap >= last_gap * (1 - 1e-9)
        last_gap = gap
        size = 1 if stalled else max(batch, len(S))
        add = cand[np.argsort(reduced[cand])[:size]]
        support = list(S) + list(add)
    raise LabError("qp-stall", f"no convergence in {max_iter} iterations, gap {gap:.3g}", gap=gap)


def energy_value(grid, mu, phi) -> float:
    """-1/2 mu^T K mu + phi^T mu."""
    return float(-0.5 * kernel_for(grid).quadratic(mu) + phi @ mu)


def equilibrium_qp(grid: MeasureGrid, w, ref="fs", tol=1e-6, max_iter=200) -> QPResult:
    """Equilibrium measure on ``grid`` and the attained value J* of
    J[mu] = -1/2 iint ln|z-w|^2 dmu dmu + int phi dmu + C''(phi_0)."""
    ref = reference(ref)
    phi = _weight_values(grid, w)
    mu, gap, it, lam = minimize_log_energy(grid, phi, tol=tol, max_iter=max_iter)
    J = energy_value(grid, mu, phi) + ref.energy_constant
    return QPResult(GridMeasure(grid, mu), J, gap, it, int(np.count_nonzero(mu)), lam)
