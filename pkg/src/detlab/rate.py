"""Entropy, total energy J and the rate functional I on grid measures.

With u_mu the normalized potential of mu and g_0 the Green function of the
reference,

    S[mu] = 1/2 iint g_0 dmu dmu = -1/2 int du ^ d^c u,
    J[mu] = -S[mu] + int (phi - phi_0) dmu,
    I[mu] = J[mu] - E[P_E phi].

The envelope energy is obtained by duality as the minimum of J over P(E),
i.e. the attained value of the weighted energy problem on the same grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .equilibrium import GridMeasure, QPResult, _weight_values, equilibrium_qp
from .errors import LabError
from .kernel import kernel_for, padded_log_field
from .weights import MeasureGrid, eval_weight, reference

NEG_INF_CUTOFF = -1e6

ROUTES = ("green-double-integral", "dirichlet-form", "legendre-inf")


@dataclass
class EnergyReport:
    entropy: float
    linear_term: float
    envelope_energy: float
    J: float
    I: float
    route: str = "green-double-integral"

    def to_json(self) -> str:
        def enc(v):
            return v if not (isinstance(v, float) and math.isinf(v)) else ("-inf" if v < 0 else "inf")
        return json.dumps({k: enc(v) for k, v in asdict(self).items()}, sort_keys=True)


def _extended(value: float) -> float:
    return -math.inf if value < NEG_INF_CUTOFF else float(value)


def entropy_green(mu: GridMeasure, ref="fs") -> float:
    """1/2 iint g_0 dmu dmu with the smeared log kernel (C_{phi_0} = 0)."""
    ref = reference(ref)
    g = mu.grid
    d = mu.density
    phi0 = eval_weight(ref, g.nodes)
    m = d.sum()
    val = 0.5 * (kernel_for(g).quadratic(d) - 2 * m * float(phi0 @ d) + ref.green_constant * m * m)
    return _extended(val + ref.entropy_constant)


def dirichlet_field(mu: GridMeasure, ref="fs", extent: float = 16.0):
    """Potential u_mu on the lattice of ``mu.grid`` padded out to half-width ``extent``.

    Returns (u, x, y) arrays over the padded lattice.
    """
    ref = reference(ref)
    g = mu.grid
    lat = g.lattice
    if lat is None:
        raise ValueError("the Dirichlet route needs a lattice grid")
    half = 0.5 * max(lat.nx, lat.ny) * lat.h
    pad = max(1, int(math.ceil((extent - half) / lat.h)))
    psi = padded_log_field(g, mu.density, pad)
    xs = lat.x0 + (np.arange(-pad, lat.nx + pad)) * lat.h
    ys = lat.y0 + (np.arange(-pad, lat.ny + pad)) * lat.h
    x, y = np.meshgrid(xs, ys, indexing="ij")
    z = x + 1j * y
    phi0 = eval_weight(ref, g.nodes)
    u = psi - eval_weight(ref, z) - float(phi0 @ mu.density) + ref.green_constant
    return u, x, y


def entropy_dirichlet(mu: GridMeasure, ref="fs", extent: float = 16.0) -> float:
    """-1/2 int du ^ d^c u, with int du ^ d^c u = (1/4 pi) int |grad u|^2.

    The gradient energy is summed over lattice edges inside the largest disk
    contained in the padded box; beyond it u is harmonic up to the reference
    term and the leading dipole and reference contributions are added in
    closed form.

    The quadrature is carried out for the smooth FS reference; for LOGPLUS,
    whose potential has a gradient jump across the unit circle, the value is
    moved over with the exact change-of-reference identity
    S_1 - S_0 = -int (phi_1 - phi_0) dmu + (C'_1 - C'_0) / 2.
    """
    ref = reference(ref)
    if ref.label != "fs":
        fs = reference("fs")
        s_fs = entropy_dirichlet(mu, fs, extent)
        shift = float((eval_weight(ref, mu.grid.nodes) - eval_weight(fs, mu.grid.nodes)) @ mu.density)
        return _extended(s_fs - shift + 0.5 * (ref.green_constant - fs.green_constant))
    u, x, y = dirichlet_field(mu, ref, extent)
    g = mu.grid
    cx = 0.5 * (x[0, 0] + x[-1, 0])
    cy = 0.5 * (y[0, 0] + y[0, -1])
    R = min(x[-1, 0] - cx, y[0, -1] - cy) - g.lattice.h
    ex = (u[1:, :] - u[:-1, :]) ** 2
    mx = np.hypot(0.5 * (x[1:, :] + x[:-1, :]) - cx, y[1:, :] - cy) <= R
    ey = (u[:, 1:] - u[:, :-1]) ** 2
    my = np.hypot(x[:, 1:] - cx, 0.5 * (y[:, 1:] + y[:, :-1]) - cy) <= R
    grad2 = float(ex[mx].sum() + ey[my].sum())
    # outside radius R: u ~ const - 2 Re(m1 / z) (+ -1/|z|^2 for the FS reference)
    m1 = complex(np.sum(mu.density * (g.nodes - complex(cx, cy))))
    tail = 4 * math.pi * abs(m1) ** 2 / R**2
    if ref.label == "fs":
        tail += 2 * math.pi / R**4
    dform = (grad2 + tail) / (4 * math.pi)
    return _extended(-0.5 * dform + ref.entropy_constant)


def entropy_legendre(mu: GridMeasure, psi_panel, ref="fs", tol=1e-9) -> float:
    """min over the panel of int (psi - phi_0) dmu - E[P_E psi].

    Each panel entry is a WeightSpec or an array of node values; E[P_E psi]
    is the minimum of the weighted energy for psi on the grid of ``mu``.
    """
    ref = reference(ref)
    if len(psi_panel) == 0:
        raise ValueError("the panel must not be empty")
    g = mu.grid
    phi0 = eval_weight(ref, g.nodes)
    best = math.inf
    for psi in psi_panel:
        vals = _weight_values(g, psi)
        env = equilibrium_qp(g, vals, ref, tol=tol).J
        best = min(best, float((vals - phi0) @ mu.density) - env)
    return best


def _density_on(mu, grid: MeasureGrid) -> np.ndarray:
    d = np.asarray(mu.density if isinstance(mu, GridMeasure) else mu, dtype=float)
    if d.shape != (len(grid),):
        raise ValueError("measure and grid have different node counts")
    if np.any(d[~grid.e_mask] > 1e-14):
        raise LabError("support-off-E", "measure charges nodes outside E")
    return d


def rate_functional(mu, w, grid: MeasureGrid, ref="fs", qp: QPResult = None,
                    route: str = "green-double-integral", tol=1e-9) -> EnergyReport:
    """Full EnergyReport for mu; the envelope energy is the attained minimum
    of J over P(E) on ``grid`` (pass ``qp`` to reuse a solved problem)."""
    ref = reference(ref)
    d = _density_on(mu, grid)
    m = GridMeasure(grid, np.where(grid.e_mask, d, 0.0))
    if qp is None:
        qp = equilibrium_qp(grid, w, ref, tol=tol)
    phi = _weight_values(grid, w)
    phi0 = eval_weight(ref, grid.nodes)
    if route == "green-double-integral":
        S = entropy_green(m, ref)
    elif route == "dirichlet-form":
        S = entropy_dirichlet(m, ref)
    else:
        raise ValueError(f"unsupported route {route!r}")
    lin = float((phi - phi0) @ m.density)
    J = -S + lin
    return EnergyReport(S, lin, qp.J, J, J - qp.J, route)
