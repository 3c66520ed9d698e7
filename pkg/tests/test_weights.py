import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detlab.errors import LabError
from detlab.weights import (FS, GINIBRE, LOGPLUS, QUARTIC, ZERO_ON_CIRCLE, Annulus, Circle, Disk, Rectangle,
                            WeightSpec, build_grid, check_growth, eval_weight, fs_reference_grid, load_grid,
                            reference, save_grid)


def test_disk_grid_normalized():
    g = build_grid(Disk(0, 1.0), 64, "area")
    assert abs(g.weights.sum() - 1) < 1e-12


def test_circle_nodes_on_circle():
    g = build_grid(Circle(0, 1.0), 256, "arclength")
    assert np.max(np.abs(np.abs(g.nodes) - 1)) < 1e-12
    assert len(g) == 256


def test_disk2_node_count_between_inscribed_and_square():
    g = build_grid(Disk(0, 2.0), 128, "area")
    assert math.pi / 4 * 128**2 <= len(g) <= 128**2


@pytest.mark.parametrize("region,measure", [
    (Disk(0, 1.0), "area"), (Annulus(0, 0.5, 1.5), "area"), (Rectangle(-1, 2, -0.5, 0.5), "area"),
    (Circle(1 + 1j, 0.3), "arclength"), (Disk(0, 1.0), lambda z: 1 + np.abs(z) ** 2),
])
def test_every_construction_path_normalized(region, measure):
    g = build_grid(region, 32, measure)
    assert abs(g.weights.sum() - 1) < 1e-12
    assert g.e_mask.any()
    assert np.all(region.contains(g.nodes[g.masked], 1e-9))
    assert np.all(g.weights > 0)


def test_cell_radius_is_half_spacing():
    g = build_grid(Rectangle(0, 1, 0, 1), 16, "area")
    assert np.allclose(g.cell_radius, 0.5 / 16)
    c = build_grid(Circle(0, 1.0), 64, "arclength")
    chord = abs(c.nodes[1] - c.nodes[0])
    assert np.allclose(c.cell_radius, chord / 2)


@pytest.mark.parametrize("region", [Disk(0, 0.0), Annulus(0, 1.0, 1.0), Rectangle(0, 0, 0, 1), Circle(0, 0.0)])
def test_degenerate_region_raises_empty_support(region):
    measure = "arclength" if isinstance(region, Circle) else "area"
    with pytest.raises(LabError) as ei:
        build_grid(region, 16, measure)
    assert ei.value.name == "empty-support"


def test_resolution_floor():
    with pytest.raises(ValueError):
        build_grid(Disk(0, 1.0), 4)


def test_weight_values():
    assert eval_weight(GINIBRE, 0) == 0
    assert eval_weight(FS, 0) == 0
    assert eval_weight(FS, 2) == pytest.approx(math.log(5), abs=1e-15)
    assert eval_weight(QUARTIC, 2) == pytest.approx(8.0)
    assert eval_weight(LOGPLUS, 0.5) == 0
    assert eval_weight(ZERO_ON_CIRCLE, 1j) == 0


def test_weight_overflow():
    bad = WeightSpec(lambda z: np.where(np.abs(z) > 1, np.inf, 0.0), "superlogarithmic", "bad")
    with pytest.raises(LabError) as ei:
        eval_weight(bad, np.array([0.0, 2.0]))
    assert ei.value.name == "weight-overflow"


def test_growth_classes():
    assert check_growth(GINIBRE, 3.0)
    assert check_growth(QUARTIC, 3.0)
    assert check_growth(FS, 3.0)
    slow = WeightSpec(lambda z: np.log1p(np.abs(z) ** 2), "superlogarithmic", "fake")
    assert not check_growth(slow, 3.0)


def test_quadrature_second_moment_converges():
    # int |z|^2 dnu on the unit disk is 1/2; observed order in h should be >= 1
    errs, hs = [], []
    for res in (16, 32, 64, 128):
        g = build_grid(Disk(0, 1.0), res, "area")
        errs.append(abs(g.integrate(np.abs(g.nodes) ** 2) - 0.5))
        hs.append(2.0 / res)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 1.0
    assert errs[-1] < errs[0]


def test_fs_curvature_total_mass():
    # dd^c ln(1+|z|^2) = dA / (pi (1+|z|^2)^2); total mass 1 over C
    from scipy.integrate import quad
    val, _ = quad(lambda r: 2 * r / (1 + r * r) ** 2, 0, np.inf)
    assert abs(val - 1) < 1e-6
    # the reference grid on disk(4) carries the truncated FS density, renormalized
    g = fs_reference_grid(4.0, 128)
    assert abs(g.weights.sum() - 1) < 1e-12


def test_reference_lookup():
    assert reference("fs") is FS
    assert reference(LOGPLUS) is LOGPLUS
    assert LOGPLUS.green_constant == 0 and LOGPLUS.energy_constant == 0
    with pytest.raises(ValueError):
        reference("ginibre")


def test_grid_roundtrip(tmp_path):
    g = build_grid(Annulus(0, 0.5, 1.0), 24, "area")
    save_grid(g, tmp_path / "g.txt")
    h = load_grid(tmp_path / "g.txt")
    assert np.array_equal(g.nodes, h.nodes)
    assert np.allclose(g.weights, h.weights, rtol=1e-14, atol=0)
    assert np.array_equal(g.e_mask, h.e_mask)
    assert h.lattice is not None and h.lattice.nx == g.lattice.nx


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-5, 5), y=st.floats(-5, 5), r=st.floats(0.2, 3.0), res=st.integers(8, 40))
def test_disk_grid_mass_property(x, y, r, res):
    g = build_grid(Disk(complex(x, y), r), res, "area")
    assert abs(g.weights.sum() - 1) < 1e-12
    assert np.all(np.abs(g.nodes - complex(x, y)) <= r + 1e-12)
