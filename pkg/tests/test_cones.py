from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from aronsson_lab import cones as cn
from aronsson_lab import grid as gd
from aronsson_lab import hamiltonian as hm
from aronsson_lab import solver as sv
from aronsson_lab.errors import DataIOError, ValidationError


def _brute_cone(H, a, x, n=720):
    """sup of p.x over the level curve: Brent radii, coarse angle scan, bounded Brent refinement."""
    def radius(t):
        return optimize.brentq(lambda s: float(H.eval(np.array([s * np.cos(t), s * np.sin(t)]))) - a,
                               0.0, 50.0, xtol=1e-15)

    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = np.array([radius(t) for t in th])
    out = []
    for xv in np.asarray(x):
        vals = r * (np.cos(th) * xv[0] + np.sin(th) * xv[1])
        t0 = th[np.argmax(vals)]
        res = optimize.minimize_scalar(lambda t: -radius(t) * (np.cos(t) * xv[0] + np.sin(t) * xv[1]),
                                       bounds=(t0 - 2 * np.pi / n, t0 + 2 * np.pi / n), method="bounded",
                                       options={"xatol": 1e-12})
        out.append(max(-res.fun, vals.max()))
    return np.array(out)


def test_quartic_cone_closed_form():
    # radial level set: rho^2 = sqrt(1 + 4a) - 1
    H = hm.quartic()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    for a in (0.05, 1.0, 12.0):
        rho = np.sqrt(np.sqrt(1 + 4 * a) - 1)
        np.testing.assert_allclose(cn.ConeFunction(H, a).value(x), rho * np.linalg.norm(x, axis=1), rtol=1e-9)


@pytest.mark.parametrize("H", [hm.aniso_quartic(), hm.maxquad()], ids=["aniso_quartic", "maxquad"])
def test_cone_against_brute_force(H):
    x = np.array([[1.0, 0.0], [0.3, -0.8], [-1.2, 0.5], [1.0, 1.0]])
    for a in (0.3, 2.0):
        want = _brute_cone(H, a, x)
        np.testing.assert_allclose(cn.ConeFunction(H, a).value(x), want, rtol=1e-7)
        np.testing.assert_allclose(cn.cone_values(H, np.full(4, a), x), want, rtol=1e-7)


def test_ellipse_cone_fast_path():
    A = np.array([[2.0, 0.5], [0.5, 3.0]])
    H = hm.quadratic(2.0, 0.5, 3.0)
    x = np.random.default_rng(1).normal(size=(500, 2))
    ref = np.sqrt(2 * 0.7) * np.sqrt(np.einsum("ki,ij,kj->k", x, np.linalg.inv(A), x))
    c = cn.ConeFunction(H, 0.7)
    np.testing.assert_allclose(c.fast(x), ref, rtol=1e-8)
    assert c(x[0]) == pytest.approx(ref[0], rel=1e-9)
    assert cn.cone_value(H, 0.7, x[0]) == pytest.approx(ref[0], rel=1e-9)
    assert cn.cone_value(H, 0.7, x[:3].reshape(3, 2)).shape == (3,)


def test_zero_level_and_argument_checks():
    H = hm.quartic()
    assert np.all(cn.ConeFunction(H, 0.0).value(np.ones((3, 2))) == 0)
    assert np.all(cn.ConeFunction(H, 0.0).fast(np.ones((3, 2))) == 0)
    assert np.all(cn.cone_values(H, np.zeros(2), np.ones((2, 2))) == 0)
    with pytest.raises(ValidationError):
        cn.ConeFunction(H, -1.0)
    with pytest.raises(ValidationError):
        cn.cone_values(H, np.ones(3), np.ones((2, 2)))
    with pytest.raises(ValidationError):
        cn.cone_value(H, -0.1, [1.0, 0.0])


PT = st.tuples(st.floats(-5, 5), st.floats(-5, 5))


@given(x=PT, y=PT, a=st.floats(0.01, 10), s=st.floats(0.0, 20))
@settings(max_examples=60, deadline=None)
def test_cone_invariants(x, y, a, s):
    H = hm.aniso_quartic()
    c = cn.ConeFunction(H, a, n_angles=128)
    x, y = np.array(x), np.array(y)
    cx, cy = c.value(x[None])[0], c.value(y[None])[0]
    assert cx >= 0
    assert c.value((s * x)[None])[0] == pytest.approx(s * cx, rel=1e-12, abs=1e-12)
    assert c.value((x + y)[None])[0] <= cx + cy + 1e-9 * (1 + cx + cy)
    assert cn.ConeFunction(H, 1.5 * a, n_angles=128).value(x[None])[0] >= cx - 1e-12


@given(a=st.floats(0.05, 5), seed=st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_cone_dominates_every_feasible_momentum(a, seed):
    H = hm.aniso_quartic()
    rng = np.random.default_rng(seed)
    th = rng.uniform(0, 2 * np.pi, 64)
    p = (hm.level_radius(H, th, a) * rng.uniform(0, 1, 64))[:, None] * np.stack([np.cos(th), np.sin(th)], -1)
    x = rng.normal(size=(16, 2))
    cx = cn.ConeFunction(H, a).value(x)
    assert np.all((p @ x.T).max(axis=0) <= cx + 1e-10)


def test_table_csv_roundtrip(tmp_path):
    c = cn.ConeFunction(hm.maxquad(), 1.0, n_angles=64)
    path = c.write_table(tmp_path / "cone.csv")
    th, r = cn.read_table(path)
    assert np.array_equal(th, c.theta) and np.array_equal(r, c.radius)
    (tmp_path / "bad.csv").write_text("x,y\n")
    with pytest.raises(DataIOError):
        cn.read_table(tmp_path / "bad.csv")
    with pytest.raises(DataIOError):
        c.write_table(tmp_path / "missing" / "cone.csv")


def test_lipschitz_characterisation():
    g = gd.Grid2D.square(33)
    H = hm.quadratic(1.0, 0.0, 1.0)
    w = g.sample(sv.aronsson_function)
    top = sv.linf_H_on(H, w)
    # the gradient maximum sits at the corners; a = max H(Dw) covers every chord
    assert cn.lipschitz_characterization(w, H, 1.05 * top, n_segments=2000).passed
    rep = cn.lipschitz_characterization(w, H, 0.5 * top, n_segments=2000)
    assert not rep.passed and rep.max_violation > 0
    assert set(rep.summary()) >= {"passed", "max_violation", "worst_pair", "level"}


def test_comparison_linear_passes_without_slack():
    g = gd.Grid2D.square(33)
    u = g.sample(lambda x, y: 0.6 * x - 0.3 * y)
    rep = cn.comparison_with_cones(u, hm.aniso_quartic(), n_trials=200, seed=3, eps_slack=0.0, keep_trials=True)
    assert rep.passed and rep.n_violations == 0 and len(rep.trials) == 200
    assert rep.summary()["n_trials"] == 200


def test_comparison_rejects_bad_inputs():
    g = gd.Grid2D.square(17)
    u = g.sample(lambda x, y: x)
    with pytest.raises(ValidationError):
        cn.comparison_with_cones(u, hm.quartic(), n_trials=1, level_range=(1.0, 0.5))
    with pytest.raises(ValidationError):
        cn.comparison_with_cones(u, hm.quartic(), n_trials=1, contain=(-1.0, 1.0, -1.0, 1.0))


def test_mcshane_extension():
    g = gd.Grid2D.square(33)
    w = g.sample(sv.aronsson_function)
    L = 4 / 3 * np.sqrt(2)  # max |Dw| on the square
    ext = cn.mcshane_extend(w, L)
    ring = g.boundary_mask()
    assert np.array_equal(ext.values[ring], w.values[ring])
    # largest L-Lipschitz extension: w itself lies below it
    assert np.all(w.values <= ext.values + 1e-12)
    rng = np.random.default_rng(4)
    pts = g.points().reshape(-1, 2)
    i, j = rng.integers(0, len(pts), (2, 3000))
    du = np.abs(ext.values.ravel()[i] - ext.values.ravel()[j])
    assert np.all(du <= L * np.linalg.norm(pts[i] - pts[j], axis=1) + 1e-12)
    # two-point probe against the formula
    z, uz = pts[ring.ravel()], w.values[ring]
    for k in (100, 545):
        assert ext.values.ravel()[k] == pytest.approx(np.min(uz + L * np.linalg.norm(z - pts[k], axis=1)))
    assert np.array_equal(cn.mcshane_extend(sv.aronsson_function, L, g).values, ext.values)


def test_mcshane_names_offending_pair():
    g = gd.Grid2D.square(9)
    with pytest.raises(ValidationError, match=r"not 0\.5-Lipschitz: \|u\("):
        cn.mcshane_extend(g.sample(lambda x, y: 2 * x), 0.5)
    with pytest.raises(ValidationError):
        cn.mcshane_extend(lambda x, y: x, 1.0)
    with pytest.raises(ValidationError):
        cn.mcshane_extend(g.sample(lambda x, y: x), -1.0)


def test_lipschitz_bound_check():
    H = hm.quartic()
    g = gd.Grid2D.square(17)
    u = g.sample(lambda x, y: 0.6 * x + 0.8 * y)
    rep = cn.lipschitz_bound_check(u, H, 1.0)
    assert rep.satisfied
    assert rep.lhs == pytest.approx(0.75, rel=1e-12) and rep.rhs == pytest.approx(0.75, rel=1e-12)
    assert not cn.lipschitz_bound_check(u, H, 0.9).satisfied
    assert cn.disk_sup(hm.quadratic(2.0, 0.0, 8.0), 0.5) == pytest.approx(1.0)


def test_cone_approx_quadratic_is_exact():
    out = cn.cone_approx_check(hm.quadratic(1.0, 0.2, 2.0), [0.2], 1.0, n_levels=2, n_dirs=8)
    assert out["rows"][0]["eps"] < 1e-8 and out["rows"][0]["verified"]


def test_cone_approx_quartic_decreasing():
    out = cn.cone_approx_check(hm.quartic(), [0.4, 0.2], 1.0, n_levels=3, n_dirs=8, n_quad=16)
    assert out["decreasing"]
    assert all(r["verified"] for r in out["rows"])
    assert out["rows"][0]["eps"] > out["rows"][1]["eps"] > 0
    with pytest.raises(ValidationError):
        cn.cone_approx_check(hm.quartic(), [0.1], 0.0)
