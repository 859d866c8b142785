from __future__ import annotations

import warnings

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy import integrate

from aronsson_lab import hamiltonian as hm
from aronsson_lab.errors import (ApproximateDerivativeWarning, DataIOError, DomainError, HypothesisViolation,
                                 SingularHessianError, ValidationError)

P1, P2 = sp.symbols("p1 p2", real=True)


def _symbolic(name):
    s = P1**2 + P2**2
    if name == "quartic":
        return s**2 / 4 + s / 2, hm.quartic()
    if name == "aniso_quartic":
        return s / 2 + (P1**4 + 3 * P2**4) / 4, hm.aniso_quartic()
    if name == "quadratic":
        return (2 * P1**2 + 2 * 0.5 * P1 * P2 + 3 * P2**2) / 2, hm.quadratic(2, 0.5, 3)
    raise KeyError(name)


@pytest.mark.parametrize("name", ["quadratic", "quartic", "aniso_quartic"])
def test_derivatives_match_sympy(name):
    expr, H = _symbolic(name)
    grad = [sp.diff(expr, v) for v in (P1, P2)]
    hess = [[sp.diff(g, v) for v in (P1, P2)] for g in grad]
    third = [[[sp.diff(h, v) for v in (P1, P2)] for h in row] for row in hess]
    rng = np.random.default_rng(1)
    for p in rng.normal(size=(5, 2)):
        sub = {P1: p[0], P2: p[1]}
        np.testing.assert_allclose(H.eval(p), float(expr.subs(sub)), rtol=1e-13)
        np.testing.assert_allclose(H.grad(p), [float(g.subs(sub)) for g in grad], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(H.hess(p), [[float(h.subs(sub)) for h in r] for r in hess], rtol=1e-12,
                                   atol=1e-14)
        np.testing.assert_allclose(H.third(p), [[[float(t.subs(sub)) for t in r] for r in m] for m in third],
                                   rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("name", ["quartic", "aniso_quartic"])
def test_tau_tilde_matches_sympy(name):
    expr, H = _symbolic(name)
    g = sp.Matrix([sp.diff(expr, v) for v in (P1, P2)])
    Hs = sp.hessian(expr, (P1, P2))
    tt = expr / (g.T * Hs.inv() * g)[0, 0]
    rng = np.random.default_rng(2)
    for p in rng.normal(size=(6, 2)) * 1.5:
        want = float(tt.subs({P1: p[0], P2: p[1]}))
        np.testing.assert_allclose(hm.tau_tilde(H, p), want, rtol=1e-12)


def test_tau_tilde_quartic_frozen_values():
    H = hm.quartic()
    # (s+2)(3s+1)/(4(s+1)^2) with s = |p|^2, derived symbolically
    assert hm.tau_tilde(H, [1.0, 0.0]) == pytest.approx(0.75, rel=1e-14)
    assert hm.tau_tilde(H, [0.0, 0.0]) == 0.5
    s = np.linspace(0.01, 50, 40)
    p = np.stack([np.sqrt(s), np.zeros_like(s)], -1)
    np.testing.assert_allclose(hm.tau_tilde(H, p), (s + 2) * (3 * s + 1) / (4 * (s + 1) ** 2), rtol=1e-13)


@given(a11=st.floats(0.2, 5), a22=st.floats(0.2, 5), t=st.floats(-0.9, 0.9),
       px=st.floats(-3, 3), py=st.floats(-3, 3))
@settings(max_examples=60, deadline=None)
def test_tau_tilde_quadratic_is_half(a11, a22, t, px, py):
    H = hm.quadratic(a11, t * np.sqrt(a11 * a22), a22)
    if px == 0 and py == 0:
        px = 1.0
    assert hm.tau_tilde(H, [px, py]) == pytest.approx(0.5, abs=1e-12)


def test_tau_tilde_singular_hessian():
    H = hm.Hamiltonian(
        name="degenerate", kind="custom", smoothness=2,
        value_fn=lambda p: 0.5 * p[..., 0] ** 2 + 0.25 * p[..., 1] ** 4,
        grad_fn=lambda p: np.stack([p[..., 0], p[..., 1] ** 3], -1),
        hess_fn=lambda p: np.stack([np.stack([np.ones(p.shape[:-1]), np.zeros(p.shape[:-1])], -1),
                                    np.stack([np.zeros(p.shape[:-1]), 3 * p[..., 1] ** 2], -1)], -2),
    )
    with pytest.raises(SingularHessianError):
        hm.tau_tilde(H, [1.0, 0.0])


def test_level_radius_quadratic_closed_form():
    A = np.array([[2.0, 0.5], [0.5, 3.0]])
    H = hm.quadratic(2, 0.5, 3)
    th = np.linspace(0, 2 * np.pi, 50)
    e = np.stack([np.cos(th), np.sin(th)], -1)
    for a in (0.01, 1.0, 40.0):
        want = np.sqrt(2 * a / np.einsum("ki,ij,kj->k", e, A, e))
        np.testing.assert_allclose(hm.level_radius(H, th, a), want, rtol=1e-9)


def test_level_radius_non_coercive():
    H = hm.Hamiltonian(name="flat", kind="custom", smoothness=2,
                       value_fn=lambda p: 1.0 - np.exp(-(p[..., 0] ** 2 + p[..., 1] ** 2)))
    with pytest.raises(HypothesisViolation):
        hm.level_radius(H, np.array([0.3]), 2.0)


def test_quadratic_profile_exact():
    prof = hm.tau_profile(hm.quadratic(2, 0, 8), 5.0, 8)
    assert np.all(prof.lambda_of_R == 2.0)
    assert np.all(prof.Lambda_of_R == 8.0)
    np.testing.assert_allclose(prof.tau_of_R, 0.5, atol=1e-12)


def test_profile_monotone_and_at():
    prof = hm.tau_profile(hm.aniso_quartic(), 3.0, 6, n_angles=64, n_radii=32, include_infinity=True)
    assert np.all(np.diff(prof.lambda_of_R) <= 0)
    assert np.all(np.diff(prof.Lambda_of_R) >= 0)
    assert np.all(np.diff(prof.tau_of_R) <= 0)
    assert prof.last_is_infinity and not prof.infinity_exact
    got = prof.at(1.0)
    assert got["R"] >= 1.0 and got["lambda"] <= 1.0
    with pytest.raises(DomainError):
        hm.tau_profile(hm.quartic(), 1.0, 3).at(2.0)


def test_quartic_sandwich():
    prof = hm.tau_profile(hm.quartic(), 4.0, 32, n_angles=64, n_radii=32)
    lower = 0.5 * (prof.lambda_of_R / prof.Lambda_of_R) ** 2
    assert np.all(lower <= prof.tau_of_R + 1e-14)
    assert np.all(prof.tau_of_R <= 0.5)


def test_validate_accepts_and_rejects():
    assert hm.validate(hm.quartic(), n_pairs=2000)["H0"] == 0.0
    shifted = hm.Hamiltonian(name="shifted", kind="custom", smoothness=2,
                             value_fn=lambda p: 0.5 * (p[..., 0] ** 2 + p[..., 1] ** 2) + 1.0)
    with pytest.raises(HypothesisViolation, match="H\\(0\\)"):
        hm.validate(shifted)
    wavy = hm.Hamiltonian(name="wavy", kind="custom", smoothness=2,
                          value_fn=lambda p: (p[..., 0] ** 2 + p[..., 1] ** 2) * (1.2 + np.cos(3 * p[..., 0])))
    with pytest.raises(HypothesisViolation, match="midpoint"):
        hm.validate(wavy)


def test_maxquad_finite_difference_warning():
    H = hm.maxquad()
    assert H.smoothness == 0 and not H.exact_derivatives
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        g = H.grad(np.array([1.0, 0.2]))
    assert any(issubclass(w.category, ApproximateDerivativeWarning) for w in rec)
    # branch p1^2 + 3 p2^2 vs 3 p1^2 + p2^2: the second is active at (1, 0.2)
    np.testing.assert_allclose(g, [3.0, 0.2], rtol=1e-6)


def _bump_second_moment():
    """int y1^2 eta / int eta for eta = exp(-1/(1-|y|^2)) on the unit disc (polar quadrature)."""
    eta = lambda r: np.exp(-1.0 / (1.0 - r * r)) if r < 1 else 0.0  # noqa: E731
    num = integrate.quad(lambda r: r**3 * eta(r), 0, 1, epsabs=0, epsrel=1e-13)[0]
    den = integrate.quad(lambda r: r * eta(r), 0, 1, epsabs=0, epsrel=1e-13)[0]
    return 0.5 * num / den


@pytest.mark.parametrize("delta", [0.2, 0.1, 0.05])
def test_mollify_quadratic_is_exact_after_shift(delta):
    A = np.array([[2.0, 0.5], [0.5, 3.0]])
    H = hm.quadratic(2, 0.5, 3)
    Hd = hm.mollify(H, delta)
    rng = np.random.default_rng(3)
    p = rng.uniform(-2, 2, size=(200, 2))
    np.testing.assert_allclose(Hd.eval(p), H.eval(p), atol=1e-12)
    np.testing.assert_allclose(Hd.hess(p), np.broadcast_to(A, (200, 2, 2)), atol=1e-12)
    # the unshifted convolution sits 1/2 delta^2 tr(A) m2 above H
    want = 0.5 * delta**2 * np.trace(A) * _bump_second_moment()
    assert Hd.params["shift"] == pytest.approx(want, rel=1e-5)
    fine = hm.mollify(H, delta, n_quad=128).params["shift"]
    assert fine == pytest.approx(want, rel=1e-9)


def test_mollify_quartic_normalised_and_convex():
    Hd = hm.mollify(hm.quartic(), 0.2)
    assert Hd.eval(np.zeros(2)) == pytest.approx(0.0, abs=1e-13)
    assert np.linalg.norm(Hd.grad(np.zeros(2))) < 1e-9
    hm.validate(Hd, radius=2.0, n_pairs=2000)
    p = np.random.default_rng(4).uniform(-1.5, 1.5, size=(100, 2))
    np.testing.assert_allclose(Hd.eval(p), hm.quartic().eval(p), atol=0.2)


def test_mollify_maxquad_is_smooth():
    Hd = hm.mollify(hm.maxquad(), 0.1, n_quad=24)
    assert Hd.smoothness == 2 and Hd.exact_derivatives
    lo, _ = hm._eig2(Hd.hess(np.array([[1.0, 1.0], [0.5, -0.5]])))
    assert np.all(lo >= 1.0 - 1e-9)


def test_mollify_rejects_bad_delta():
    with pytest.raises(ValidationError):
        hm.mollify(hm.quartic(), 0.0)


def test_strongify_agrees_inside_and_is_globally_convex():
    H = hm.quartic()
    Ht = hm.strongify(H, 1.0)
    rng = np.random.default_rng(5)
    th = rng.uniform(0, 2 * np.pi, 300)
    r = hm.level_radius(H, th, 1.0) * np.sqrt(rng.uniform(0, 1, 300))
    p = r[:, None] * np.stack([np.cos(th), np.sin(th)], -1)
    np.testing.assert_allclose(Ht.eval(p), H.eval(p), rtol=1e-13)
    np.testing.assert_allclose(Ht.hess(p), H.hess(p), rtol=1e-12)
    lam, Lam = Ht.global_moduli
    assert 0 < lam <= Lam < np.inf
    far = rng.normal(size=(500, 2)) * 30
    lo, hi = hm._eig2(Ht.hess(far))
    assert lo.min() >= lam * (1 - 1e-6) and hi.max() <= Lam * (1 + 1e-6)


def test_sampled_from_csv(tmp_path):
    g = np.linspace(-3, 3, 41)
    X, Y = np.meshgrid(g, g, indexing="ij")
    Hval = 0.5 * (X**2 + 2 * Y**2)
    path = tmp_path / "h.csv"
    rows = "\n".join(f"{x:.17g},{y:.17g},{h:.17g}" for x, y, h in zip(X.ravel(), Y.ravel(), Hval.ravel()))
    path.write_text("p_x,p_y,H\n" + rows + "\n")
    H = hm.sampled(path)
    assert H.domain_radius == pytest.approx(3.0)
    p = np.array([[0.31, -0.77], [1.2, 1.3]])
    np.testing.assert_allclose(H.eval(p), 0.5 * (p[:, 0] ** 2 + 2 * p[:, 1] ** 2), atol=5e-3)
    with pytest.raises(DomainError):
        H.eval(np.array([3.5, 0.0]))
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DataIOError):
        hm.sampled(bad)
