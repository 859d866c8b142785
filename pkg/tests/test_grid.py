from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aronsson_lab import grid as gd
from aronsson_lab.errors import DataIOError, DomainError, ValidationError


def test_grid_geometry():
    g = gd.Grid2D(5, 9, 0.0, 2.0, -1.0, 3.0)
    assert (g.hx, g.hy) == (0.5, 0.5)
    assert g.shape == (5, 9) and g.points().reshape(-1, 2).shape == (45, 2)
    assert g.boundary_mask().sum() == 2 * 5 + 2 * 9 - 4
    assert g.interior_mask().sum() == 3 * 7
    assert g.trapezoid_weights().sum() == pytest.approx(8.0)


@pytest.mark.parametrize("args", [(2, 5), (5, 2), (4.5, 5)])
def test_grid_rejects_small_or_fractional(args):
    with pytest.raises(ValidationError):
        gd.Grid2D(*args)


def test_grid_rejects_reversed_extent():
    with pytest.raises(ValidationError):
        gd.Grid2D(5, 5, 1.0, -1.0)


@pytest.mark.parametrize("coef", [(1.0, -2.0, 0.5, 3.0, -1.0, 0.25), (0.0, 0.0, 0.0, 1.0, 1.0, 1.0)])
def test_stencils_exact_on_quadratics(coef):
    a, b, c, d, e, f = coef
    g = gd.Grid2D.square(11)
    u = g.sample(lambda x, y: a * x * x + b * x * y + c * y * y + d * x + e * y + f)
    X, Y = g.mesh()
    ux, uy = gd.gradient(u)
    np.testing.assert_allclose(ux.values, 2 * a * X + b * Y + d, atol=1e-12)
    np.testing.assert_allclose(uy.values, b * X + 2 * c * Y + e, atol=1e-12)
    uxx, uxy, uyy = gd.hessian(u)
    np.testing.assert_allclose(uxx.values, 2 * a, atol=1e-10)
    np.testing.assert_allclose(uxy.values, b, atol=1e-10)
    np.testing.assert_allclose(uyy.values, 2 * c, atol=1e-10)
    np.testing.assert_allclose(gd.divergence(ux, uy).values, 2 * a + 2 * c, atol=1e-10)


def test_hessian_second_order_convergence():
    errs = []
    for n in (17, 33, 65):
        g = gd.Grid2D.square(n)
        u = g.sample(lambda x, y: np.sin(2 * x) * np.exp(y))
        X, Y = g.mesh()
        uxx, uxy, _ = gd.hessian(u)
        errs.append(max(np.abs(uxx.values + 4 * np.sin(2 * X) * np.exp(Y)).max(),
                        np.abs(uxy.values - 2 * np.cos(2 * X) * np.exp(Y)).max()))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_trapezoid_against_closed_form():
    # int_{[-1,1]^2} e^{x+2y} = (e - 1/e)(e^2 - e^-2)/2
    exact = (np.e - 1 / np.e) * (np.e**2 - np.e**-2) / 2
    errs = []
    for n in (17, 33, 65):
        g = gd.Grid2D.square(n)
        errs.append(abs(gd.integrate(g.sample(lambda x, y: np.exp(x + 2 * y))) - exact))
    assert errs[-1] < 1e-2
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_box_weights_area_and_errors():
    g = gd.Grid2D.square(9)
    assert gd.box_weights(g, (-0.5, 0.5, -0.25, 0.75)).sum() == pytest.approx(1.0)
    with pytest.raises(DomainError):
        gd.box_weights(g, (-2, 0, 0, 1))
    with pytest.raises(DomainError):
        gd.box_weights(g, (0.01, 0.02, 0.01, 0.02))
    mask = np.zeros(g.shape, bool)
    mask[2:4, 2:4] = True
    assert gd.region_weights(g, mask).sum() == pytest.approx(4 * g.hx * g.hy)
    with pytest.raises(DomainError):
        gd.region_weights(g, np.zeros((3, 3), bool))


def test_w12_seminorm_linear():
    g = gd.Grid2D.square(21)
    u = g.sample(lambda x, y: 3 * x - 4 * y)
    # |Du| = 5 on a box of area 1
    assert gd.w12_seminorm(u, (-0.5, 0.5, -0.5, 0.5)) == pytest.approx(5.0, rel=1e-12)


def test_cutoff_and_bump_properties():
    g = gd.Grid2D.square(65)
    phi = gd.cutoff(g, (-0.5, 0.5, -0.5, 0.5), (-0.8, 0.8, -0.8, 0.8))
    inside = g.region_mask((-0.5, 0.5, -0.5, 0.5))
    assert np.all(phi.values[inside] == 1.0)
    assert np.all(phi.values[~g.region_mask((-0.8, 0.8, -0.8, 0.8))] == 0.0)
    assert phi.width == pytest.approx(0.3)
    # quintic smoothstep: max slope 15/8 per unit width, sampled at nodes
    assert 1.75 < phi.c_grad <= 15 / 8
    b = gd.bump(g, (0.1, -0.2), 0.3)
    assert 0.99 < b.values.max() <= 1.0
    assert b.kind == "bump" and b.c_hess > 0
    with pytest.raises(DomainError):
        gd.cutoff(g, (-0.9, 0.9, -0.5, 0.5), (-0.8, 0.8, -0.8, 0.8))


def test_test_function_must_vanish_on_rings():
    g = gd.Grid2D.square(9)
    with pytest.raises(ValidationError):
        gd.TestFunction(g, np.ones(g.shape), 1.0, "bad")


def test_gridfunction_arithmetic():
    g = gd.Grid2D.square(5)
    u = g.sample(lambda x, y: x + y)
    v = (2 * u - u + 1.0) * u
    np.testing.assert_allclose(v.values, (u.values + 1) * u.values)
    assert (-u).sup_norm() == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        u + gd.GridFunction(gd.Grid2D.square(7), np.zeros((7, 7)))


@given(vals=st.lists(st.floats(-1e6, 1e6, allow_subnormal=False), min_size=25, max_size=25))
@settings(max_examples=25, deadline=None)
def test_csv_roundtrip_bit_exact(vals, tmp_path_factory):
    g = gd.Grid2D(5, 5, -0.3, 1.7, 2.0, 2.1)
    f = gd.GridFunction(g, np.array(vals).reshape(5, 5))
    path = tmp_path_factory.mktemp("csv") / "f.csv"
    gd.write_csv(f, path)
    back = gd.read_csv(path)
    assert back.grid == g
    assert np.array_equal(back.values, f.values)
    assert np.array_equal(gd.read_csv(path, g).values, f.values)


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n")
    with pytest.raises(DataIOError):
        gd.read_csv(bad)
    with pytest.raises(DataIOError):
        gd.read_csv(tmp_path / "missing.csv")
    with pytest.raises(DataIOError):
        gd.write_csv(gd.Grid2D.square(3).sample(lambda x, y: x), tmp_path / "no" / "dir" / "f.csv")
