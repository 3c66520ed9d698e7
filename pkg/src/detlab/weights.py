"""Weights on O(1), supports E in the affine chart, and grid discretizations of nu.

Everything lives in the affine chart C of the projective line; the point at
infinity is never part of a support.  A weight is a real function phi on C
whose metric on O(1) is exp(-phi); on O(k) the weight is k*phi.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import LabError

GRID_SCHEMA = "detlab-grid 1"

FUBINI_STUDY_EQUIVALENT = "fubini-study-equivalent"
SUPERLOGARITHMIC = "superlogarithmic"


# ----------------------------------------------------------------------------
# Weights
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightSpec:
    """A weight phi on the affine chart.

    ``evaluator`` must accept complex scalars or arrays and broadcast.
    ``radial`` marks weights depending on |z| only; those admit the exact
    log-radial reduction used by :mod:`detlab.equilibrium`.
    """

    evaluator: Callable
    growth_class: str
    label: str
    radial: bool = False

    def __call__(self, z):
        return self.evaluator(z)

    def shifted(self, c: float) -> "WeightSpec":
        """The weight phi + c (same growth class)."""
        f = self.evaluator
        return WeightSpec(lambda z: f(z) + c, self.growth_class, f"{self.label}+{c:g}", self.radial)


@dataclass(frozen=True)
class ReferenceWeight(WeightSpec):
    """One of the two built-in reference weights phi_0.

    green_constant is C' in g_0(z,w) = ln|z-w|^2 - phi_0(z) - phi_0(w) + C',
    fixed by requiring int g_0(z, w) omega_0(w) = 0.  energy_constant is C''
    in the chart form of the total energy J.  Both references are psh on the
    whole projective line, so the envelope constant C_{phi_0} is zero.
    """

    green_constant: float = 0.0
    energy_constant: float = 0.0

    @property
    def entropy_constant(self) -> float:
        return 0.0


def _fs(z):
    return np.log1p(np.abs(z) ** 2)


def _logplus(z):
    return np.maximum(np.log(np.maximum(np.abs(z), 1e-300) ** 2), 0.0)


# int_C ln(1+|w|^2) omega_FS(w) = int_0^inf ln(1+s)/(1+s)^2 ds = 1, and the log
# potential of omega_FS is phi_FS itself, hence C' = 1 and C'' = -1/2.
FS = ReferenceWeight(_fs, FUBINI_STUDY_EQUIVALENT, "fs", True, green_constant=1.0, energy_constant=-0.5)
# omega_0 is arclength on |z| = 1 where phi_0 vanishes: C' = C'' = 0.
LOGPLUS = ReferenceWeight(_logplus, FUBINI_STUDY_EQUIVALENT, "logplus", True, green_constant=0.0, energy_constant=0.0)

REFERENCES = {"fs": FS, "logplus": LOGPLUS}

GINIBRE = WeightSpec(lambda z: np.abs(z) ** 2, SUPERLOGARITHMIC, "ginibre", True)
QUARTIC = WeightSpec(lambda z: 0.5 * np.abs(z) ** 4, SUPERLOGARITHMIC, "quartic", True)
# Vanishes on the unit circle; off the circle it is ln+|z|^2 so that it is a
# genuine continuous weight on O(1).  Only its values on E ever enter.
ZERO_ON_CIRCLE = WeightSpec(_logplus, FUBINI_STUDY_EQUIVALENT, "zero-on-circle", True)

BUILTIN_WEIGHTS = {"ginibre": GINIBRE, "quartic": QUARTIC, "zero-on-circle": ZERO_ON_CIRCLE}


def reference(name) -> ReferenceWeight:
    if isinstance(name, ReferenceWeight):
        return name
    try:
        return REFERENCES[name]
    except KeyError:
        raise ValueError(f"unknown reference weight {name!r}; only 'fs' and 'logplus' are supported") from None


def eval_weight(w: WeightSpec, z):
    """phi(z); raises ``weight-overflow`` on any non-finite value."""
    val = w.evaluator(z)
    if not np.all(np.isfinite(val)):
        raise LabError("weight-overflow", f"weight {w.label!r} is not finite at some point")
    if np.ndim(val) == 0:
        return float(np.real(val))
    return np.asarray(val, dtype=float)


def check_growth(w: WeightSpec, radius: float, samples: int = 64) -> bool:
    """Sampled growth check on |z| in [R, 4R].

    Superlogarithmic weights must dominate 1.01 ln(1+|z|^2); FS-equivalent
    ones must stay within a bounded distance of ln(1+|z|^2).
    """
    r = np.linspace(radius, 4 * radius, samples)
    theta = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    z = (r[:, None] * np.exp(1j * theta[None, :])).ravel()
    phi = eval_weight(w, z)
    fs = np.log1p(np.abs(z) ** 2)
    if w.growth_class == SUPERLOGARITHMIC:
        return bool(np.all(phi >= 1.01 * fs))
    return bool(np.ptp(phi - fs) < 10.0)


# ----------------------------------------------------------------------------
# Regions
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Disk:
    center: complex
    radius: float
    kind = "disk"

    def contains(self, z, tol=0.0):
        return np.abs(np.asarray(z) - self.center) <= self.radius + tol

    def bbox(self):
        c, r = self.center, self.radius
        return c.real - r, c.real + r, c.imag - r, c.imag + r

    def measure_size(self):
        return math.pi * self.radius**2

    def log_radial_interval(self):
        if self.center != 0:
            return None
        return (-math.inf, 2 * math.log(self.radius))


@dataclass(frozen=True)
class Annulus:
    center: complex
    r_inner: float
    r_outer: float
    kind = "annulus"

    def contains(self, z, tol=0.0):
        d = np.abs(np.asarray(z) - self.center)
        return (d >= self.r_inner - tol) & (d <= self.r_outer + tol)

    def bbox(self):
        c, r = self.center, self.r_outer
        return c.real - r, c.real + r, c.imag - r, c.imag + r

    def measure_size(self):
        return math.pi * (self.r_outer**2 - max(self.r_inner, 0.0) ** 2)

    def log_radial_interval(self):
        if self.center != 0 or self.r_inner <= 0:
            return None
        return (2 * math.log(self.r_inner), 2 * math.log(self.r_outer))


@dataclass(frozen=True)
class Rectangle:
    x0: float
    x1: float
    y0: float
    y1: float
    kind = "rectangle"

    def contains(self, z, tol=0.0):
        z = np.asarray(z)
        inx = (z.real >= self.x0 - tol) & (z.real <= self.x1 + tol)
        return inx & (z.imag >= self.y0 - tol) & (z.imag <= self.y1 + tol)

    def bbox(self):
        return self.x0, self.x1, self.y0, self.y1

    def measure_size(self):
        return max(self.x1 - self.x0, 0.0) * max(self.y1 - self.y0, 0.0)

    def log_radial_interval(self):
        return None


@dataclass(frozen=True)
class Circle:
    center: complex
    radius: float
    kind = "circle"

    def contains(self, z, tol=1e-9):
        return np.abs(np.abs(np.asarray(z) - self.center) - self.radius) <= tol

    def bbox(self):
        c, r = self.center, self.radius
        return c.real - r, c.real + r, c.imag - r, c.imag + r

    def measure_size(self):
        return 2 * math.pi * self.radius

    def log_radial_interval(self):
        if self.center != 0:
            return None
        t = 2 * math.log(self.radius)
        return (t, t)


REGION_TYPES = {"disk": Disk, "annulus": Annulus, "rectangle": Rectangle, "circle": Circle}


def region_to_dict(region) -> dict:
    d = {"kind": region.kind}
    for name, val in region.__dict__.items():
        d[name] = [val.real, val.imag] if isinstance(val, complex) else val
    return d


def region_from_dict(d: dict):
    d = dict(d)
    cls = REGION_TYPES[d.pop("kind")]
    if "center" in d:
        c = d["center"]
        d["center"] = complex(*c) if isinstance(c, (list, tuple)) else complex(c)
    return cls(**d)


# ----------------------------------------------------------------------------
# Grids
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Lattice:
    """Square-lattice metadata: node j sits at (x0 + ix[j] h, y0 + iy[j] h)."""

    x0: float
    y0: float
    h: float
    nx: int
    ny: int
    ix: np.ndarray = field(repr=False)
    iy: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"x0": self.x0, "y0": self.y0, "h": self.h, "nx": self.nx, "ny": self.ny}


@dataclass(frozen=True, eq=False)
class MeasureGrid:
    """Discrete probability measure nu on nodes, with the support mask for E.

    ``cell_radius`` is half the nearest-neighbour distance; each node mass is
    treated as smeared uniformly over a disk of that radius wherever a
    logarithmic kernel has to be evaluated on the diagonal.
    """

    nodes: np.ndarray
    weights: np.ndarray
    e_mask: np.ndarray
    cell_radius: np.ndarray
    region: object = None
    lattice: Optional[Lattice] = None
    measure: str = "custom"
    density: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("nodes", "weights", "e_mask", "cell_radius"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("grid weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("grid weights must be positive")
        if not self.e_mask.any():
            raise LabError("empty-support", "e_mask selects no node")

    def __len__(self):
        return len(self.nodes)

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.e_mask)

    @property
    def is_curve(self) -> bool:
        return isinstance(self.region, Circle)

    def integrate(self, values) -> float:
        return float(np.sum(self.weights * values))

    def log_density(self, z):
        """ln of the continuous density of nu w.r.t. the region's base measure
        (area or arclength), up to a constant; -inf outside the region."""
        z = np.asarray(z)
        inside = self.region.contains(z) if self.region is not None else np.ones(z.shape, bool)
        if self.density is None:
            out = np.zeros(z.shape)
        else:
            with np.errstate(divide="ignore"):
                out = np.log(np.asarray(self.density(z), dtype=float))
        return np.where(inside, out, -np.inf)

    def nearest_node(self, z, masked_only=True) -> np.ndarray:
        idx = self.masked if masked_only else np.arange(len(self))
        tree = self._tree(masked_only)
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        _, j = tree.query(np.column_stack([z.real, z.imag]))
        return idx[j]

    def _tree(self, masked_only=True):
        key = "_tree_m" if masked_only else "_tree_a"
        tree = self.__dict__.get(key)
        if tree is None:
            pts = self.nodes[self.masked] if masked_only else self.nodes
            tree = cKDTree(np.column_stack([pts.real, pts.imag]))
            object.__setattr__(self, key, tree)
        return tree

    def neighbours(self):
        """Lists of nearest-neighbour node indices (distance <= 1.01 * spacing)."""
        nb = self.__dict__.get("_neighbours")
        if nb is None:
            tree = self._tree(masked_only=False)
            pts = np.column_stack([self.nodes.real, self.nodes.imag])
            nb = [[j for j in tree.query_ball_point(p, 2.02 * r) if j != i]
                  for i, (p, r) in enumerate(zip(pts, self.cell_radius))]
            object.__setattr__(self, "_neighbours", nb)
        return nb


def _half_nn_distance(nodes: np.ndarray) -> np.ndarray:
    if len(nodes) == 1:
        return np.array([0.5])
    tree = cKDTree(np.column_stack([nodes.real, nodes.imag]))
    d, _ = tree.query(np.column_stack([nodes.real, nodes.imag]), k=2)
    return 0.5 * d[:, 1]


def _density_values(density, z):
    if density is None:
        return np.ones(len(z))
    vals = np.asarray(density(z), dtype=float) * np.ones(len(z))
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("custom density must be finite and nonnegative")
    return vals


def build_grid(region, resolution: int, measure="area") -> MeasureGrid:
    """Discretize a probability measure nu supported on ``region``.

    Two-dimensional regions are sampled at the cell centres of a square
    lattice with ``resolution`` cells across the longer side of the bounding
    box; a circle gets ``resolution`` equispaced nodes.  ``measure`` is
    ``"area"``, ``"arclength"`` or a callable density with respect to the
    region's natural measure.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    density = measure if callable(measure) else None
    label = "custom" if callable(measure) else measure
    if label not in ("area", "arclength", "custom"):
        raise ValueError(f"unknown measure {measure!r}")
    if region.measure_size() <= 0:
        raise LabError("empty-support", f"{region.kind} has zero size")

    if isinstance(region, Circle):
        if label == "area":
            raise LabError("empty-support", "a circle carries no area")
        theta = 2 * np.pi * np.arange(resolution) / resolution
        nodes = region.center + region.radius * np.exp(1j * theta)
        # snap to the exact circle
        nodes = region.center + region.radius * (nodes - region.center) / np.abs(nodes - region.center)
        w = _density_values(density, nodes)
        if w.sum() <= 0:
            raise LabError("empty-support", "density vanishes on the circle")
        radius = np.full(resolution, region.radius * math.sin(math.pi / resolution))
        return MeasureGrid(nodes, w / w.sum(), np.ones(resolution, bool), radius, region, None, label, density)

    if label == "arclength":
        raise LabError("empty-support", f"a {region.kind} carries no arclength measure")
    x0, x1, y0, y1 = region.bbox()
    h = max(x1 - x0, y1 - y0) / resolution
    nx = max(1, int(round((x1 - x0) / h)))
    ny = max(1, int(round((y1 - y0) / h)))
    ax = 0.5 * (x0 + x1) - 0.5 * (nx - 1) * h
    ay = 0.5 * (y0 + y1) - 0.5 * (ny - 1) * h
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    z = (ax + ix * h) + 1j * (ay + iy * h)
    keep = region.contains(z)
    z, ix, iy = z[keep], ix[keep], iy[keep]
    if len(z) == 0:
        raise LabError("empty-support", "no lattice node falls inside the region")
    w = _density_values(density, z)
    keep = w > 0
    if not keep.any():
        raise LabError("empty-support", "density vanishes on the region")
    z, ix, iy, w = z[keep], ix[keep], iy[keep], w[keep]
    lat = Lattice(ax, ay, h, nx, ny, ix, iy)
    return MeasureGrid(z, w / w.sum(), np.ones(len(z), bool), np.full(len(z), 0.5 * h), region, lat, label, density)


def fs_reference_grid(radius: float = 4.0, resolution: int = 128) -> MeasureGrid:
    """Default reference measure nu_0: Fubini-Study area density on a disk."""
    return build_grid(Disk(0j, radius), resolution, lambda z: 1.0 / (np.pi * (1 + np.abs(z) ** 2) ** 2))


def logplus_reference_grid(resolution: int = 1024) -> MeasureGrid:
    """nu_0 = arclength on the unit circle, the curvature measure of ln+|z|^2."""
    return build_grid(Circle(0j, 1.0), resolution, "arclength")


def reference_grid(ref, resolution=None) -> MeasureGrid:
    ref = reference(ref)
    if ref.label == "fs":
        return fs_reference_grid(resolution=resolution or 128)
    return logplus_reference_grid(resolution=resolution or 1024)


# ----------------------------------------------------------------------------
# Columnar text I/O
# ----------------------------------------------------------------------------


def save_grid(grid: MeasureGrid, path) -> None:
    """One row per node: re(z) im(z) weight e_mask cell_radius."""
    header = [GRID_SCHEMA, "measure " + grid.measure]
    if grid.region is not None:
        header.append("region " + json.dumps(region_to_dict(grid.region)))
    if grid.lattice is not None:
        header.append("lattice " + json.dumps(grid.lattice.to_dict()))
    header.append("columns re im weight e_mask cell_radius")
    data = np.column_stack([grid.nodes.real, grid.nodes.imag, grid.weights,
                            grid.e_mask.astype(float), grid.cell_radius])
    np.savetxt(path, data, fmt=["%.17g", "%.17g", "%.17g", "%d", "%.17g"], header="\n".join(header))


def load_grid(path) -> MeasureGrid:
    meta = {}
    with open(path) as fh:
        first = fh.readline().lstrip("# ").strip()
        if first != GRID_SCHEMA:
            raise ValueError(f"unsupported grid schema {first!r}")
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, rest = line.lstrip("# ").strip().partition(" ")
            meta[key] = rest
    data = np.loadtxt(path, comments="#", ndmin=2)
    nodes = data[:, 0] + 1j * data[:, 1]
    region = region_from_dict(json.loads(meta["region"])) if "region" in meta else None
    lat = None
    if "lattice" in meta:
        ld = json.loads(meta["lattice"])
        ix = np.rint((nodes.real - ld["x0"]) / ld["h"]).astype(int)
        iy = np.rint((nodes.imag - ld["y0"]) / ld["h"]).astype(int)
        lat = Lattice(ld["x0"], ld["y0"], ld["h"], ld["nx"], ld["ny"], ix, iy)
    weights = data[:, 2] / data[:, 2].sum()
    return MeasureGrid(nodes, weights, data[:, 3] > 0.5, data[:, 4], region, lat, meta.get("measure", "custom"))
