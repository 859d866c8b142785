from __future__ import annotations

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from aronsson_lab import grid as gd
from aronsson_lab import hamiltonian as hm
from aronsson_lab import identities as ids
from aronsson_lab.errors import ValidationError

X, Y, P1, P2 = sp.symbols("x y p1 p2", real=True)
S = P1**2 + P2**2
H_SYM = {"quadratic": ((2 * P1**2 + 0.6 * P1 * P2 + P2**2) / 2, hm.quadratic(2.0, 0.3, 1.0)),
         "quartic": (S**2 / 4 + S / 2, hm.quartic()),
         "aniso_quartic": (S / 2 + (P1**4 + 3 * P2**4) / 4, hm.aniso_quartic())}
V_SYM = {"trig": (sp.sin(X) * sp.cos(2 * Y), ids.trig(1.0, 2.0, 0.0, np.pi / 2)),
         "xy": (X * Y, ids.product()),
         "saddle": (X**2 - Y**2, ids.saddle())}
POINTS = np.array([[0.3, -0.7], [1.1, 0.4], [-0.6, 0.9]])


def _oracle(hexpr, vexpr):
    """Both sides of every identity as sympy expressions in (x, y)."""
    Dv = [sp.diff(vexpr, X), sp.diff(vexpr, Y)]
    sub = {P1: Dv[0], P2: Dv[1]}
    g = sp.Matrix([sp.diff(hexpr, P1).subs(sub), sp.diff(hexpr, P2).subs(sub)])
    Hpp = sp.hessian(hexpr, (P1, P2)).subs(sub)
    M = sp.hessian(vexpr, (X, Y))
    HofDv = hexpr.subs(sub)
    DH = sp.Matrix([sp.diff(HofDv, X), sp.diff(HofDv, Y)])
    divg = sp.diff(g[0], X) + sp.diff(g[1], Y)
    A = (g.T * M * g)[0, 0]
    negdet = -M.det()
    lap = M[0, 0] + M[1, 1]
    F = Hpp * DH - divg * g
    F6 = DH - lap * g
    return {
        "structure": ((DH.T * Hpp * DH)[0, 0] - divg * A, negdet * (g.T * Hpp.adjugate() * g)[0, 0]),
        "divergence_form": (2 * negdet * Hpp.det(), sp.diff(F[0], X) + sp.diff(F[1], Y)),
        "planar_h_gradient": ((DH.T * DH)[0, 0] - lap * A, negdet * (g.T * g)[0, 0]),
        "planar_h_divergence": (negdet * Hpp.trace(), sp.diff(F6[0], X) + sp.diff(F6[1], Y)),
    }


@pytest.mark.parametrize("hname", list(H_SYM))
@pytest.mark.parametrize("vname", list(V_SYM))
def test_closed_form_sides_match_sympy(hname, vname):
    hexpr, H = H_SYM[hname]
    vexpr, v = V_SYM[vname]
    oracle = _oracle(hexpr, vexpr)
    reps = {r.identity_id: r for r in [ids.check_structure(H, v, POINTS), ids.check_divergence_form(H, v, POINTS),
                                       *ids.check_planar_h_pair(H, v, POINTS)]}
    for key, (lhs, rhs) in oracle.items():
        fl, fr = sp.lambdify((X, Y), lhs, "numpy"), sp.lambdify((X, Y), rhs, "numpy")
        want_l = np.broadcast_to(fl(POINTS[:, 0], POINTS[:, 1]), (3,))
        want_r = np.broadcast_to(fr(POINTS[:, 0], POINTS[:, 1]), (3,))
        scale = 1 + np.abs(want_l).max()
        np.testing.assert_allclose(reps[key].lhs, want_l, atol=1e-11 * scale)
        np.testing.assert_allclose(reps[key].rhs, want_r, atol=1e-11 * scale)
        # the identity itself: both symbolic sides agree
        np.testing.assert_allclose(want_l, want_r, atol=1e-11 * scale)


def test_planar_pair_frozen_values():
    # v = x^2 y - y^2 at (1, 2): Dv = (4, -3), D2v = [[4, 2], [2, -2]], -det = 12, |Dv|^2 = 25
    v = ids.polynomial({(2, 1): 1.0, (0, 2): -1.0})
    r1, r2 = ids.check_planar_pair(v, np.array([[1.0, 2.0]]))
    assert r1.lhs[0] == pytest.approx(300.0) and r1.rhs[0] == pytest.approx(300.0)
    assert r2.lhs[0] == pytest.approx(24.0) and r2.rhs[0] == pytest.approx(24.0)


@pytest.mark.parametrize("name", ["poly", "trig", "aronsson", "sinsin", "xy", "saddle", "linear", "quadratic"])
def test_registry_jets_against_sympy(name):
    make = ids.TEST_FUNCTIONS[name]
    if name == "poly":
        v, expr = make({(2, 1): 0.5, (0, 3): -1.0, (1, 0): 2.0}), 0.5 * X**2 * Y - Y**3 + 2 * X
    elif name == "trig":
        v, expr = make(1.5, 0.5, 0.2, 0.1), sp.sin(1.5 * X + 0.2) * sp.sin(0.5 * Y + 0.1)
    elif name == "sinsin":
        v, expr = make(), sp.sin(X) * sp.sin(Y)
    elif name == "aronsson":
        # first quadrant only, where the absolute values drop out
        v, expr = make(), X ** sp.Rational(4, 3) - Y ** sp.Rational(4, 3)
    elif name == "xy":
        v, expr = make(), X * Y
    elif name == "saddle":
        v, expr = make(), X**2 - Y**2
    elif name == "linear":
        v, expr = make(2.0, -1.0, 0.5), 2 * X - Y + 0.5
    else:
        v, expr = make(1.0, 0.4, -2.0, 0.3, 0.0), (X**2 + 0.8 * X * Y - 2 * Y**2) / 2 + 0.3 * X
    pts = np.abs(POINTS) if name == "aronsson" else POINTS
    val, D, M, N = v.jet(pts)
    derivs = [expr, [sp.diff(expr, s) for s in (X, Y)],
              [[sp.diff(expr, a, b) for b in (X, Y)] for a in (X, Y)],
              [[[sp.diff(expr, a, b, c) for c in (X, Y)] for b in (X, Y)] for a in (X, Y)]]
    for got, want in zip((val, D, M, N), derivs):
        f = sp.lambdify((X, Y), want, "numpy")
        ref = np.stack([np.array(f(px, py), dtype=float) for px, py in pts])
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_unknown_identity_and_missing_points():
    with pytest.raises(ValidationError):
        ids.run_closed_form("determinant", hm.quartic(), ids.saddle(), POINTS)
    assert [r.identity_id for r in ids.run_closed_form("planar_divergence", hm.quartic(), ids.saddle(), POINTS)] \
        == ["planar_divergence"]


def test_grid_mode_second_order():
    rep = ids.refinement_study(ids.check_divergence_form, hm.quartic(), lambda x, y: np.sin(x) * np.cos(y),
                               (-1, 1, -1, 1), [33, 65])
    assert 1.8 < rep.order_estimate < 2.3
    assert rep.extra["sizes"] == [33, 65]


def test_grid_mode_structure_is_algebraic():
    # the pointwise identity holds for any stencil jet, so only round-off remains
    g = gd.Grid2D.square(33)
    rep = ids.check_structure(hm.aniso_quartic(), g.sample(lambda x, y: np.sin(x) * np.cos(y)))
    assert rep.relative_residual < 1e-13


def test_refinement_needs_two_grids():
    with pytest.raises(ValidationError):
        ids.refinement_study(ids.check_structure, hm.quartic(), lambda x, y: x, (-1, 1, -1, 1), [33])


def test_determinant_identity_on_solution(aronsson65):
    H, res = aronsson65
    rep = ids.check_determinant_identity(H, res[0], 0.5)
    assert rep.extra["rhs_min"] >= 0
    assert rep.extra["percentile_relative"] < 0.05
    assert 0 <= rep.masked_fraction < 0.01
    with pytest.raises(ValidationError):
        ids.check_determinant_identity(H, res[0], 0.0)
    with pytest.raises(ValidationError):
        ids.check_determinant_identity(H, np.zeros((3, 3)), 0.1)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_random_registry_identities_hold(seed):
    rng = np.random.default_rng(seed)
    H = [hm.quadratic(1.5, -0.2, 0.7), hm.quartic(), hm.aniso_quartic(0.5, 2.0)][rng.integers(3)]
    v = ids.random_test_function(rng)
    p = rng.uniform(0.2, 1.2, size=(4, 2)) * rng.choice([-1.0, 1.0], size=(4, 2))
    for r in [ids.check_structure(H, v, p), ids.check_divergence_form(H, v, p), *ids.check_planar_pair(v, p),
              *ids.check_planar_h_pair(H, v, p)]:
        assert r.relative_residual <= 1e-10, (r.identity_id, v.name)


def test_report_summary_keys():
    r = ids.check_structure(hm.quartic(), gd.Grid2D.square(9).sample(lambda x, y: x * y))
    assert set(r.summary()) >= {"identity_id", "max_abs_residual", "relative_residual"}
