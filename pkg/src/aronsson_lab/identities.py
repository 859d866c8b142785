"""Pointwise and divergence-form identities for the Aronsson operator.

Every check evaluates a left and a right hand side either from closed-form
derivatives (up to third order) of a registered test function, or from
finite-difference stencils on a grid function, and reports the residual.
Notation: ``g = DpH(Dv)``, ``Hpp = D^2H(Dv)``, ``A_H[v] = <D^2v g, g>``.

Identities
----------
structure
    ``<Hpp D[H(Dv)], D[H(Dv)]> - div[g] A_H[v] = (-det D^2v) <adj(Hpp) g, g>``
divergence_form
    ``2 (-det D^2v) det Hpp = div{Hpp D[H(Dv)] - div[g] g}``
planar_gradient, planar_divergence (``H = |p|^2/2``)
    ``|D^2v Dv|^2 - Dv.D^2v Dv Laplace(v) = (-det D^2v)|Dv|^2`` and
    ``div(D^2v Dv - Laplace(v) Dv) = -2 det D^2v``
planar_h_gradient, planar_h_divergence
    ``|D[H(Dv)]|^2 - Laplace(v) A_H[v] = (-det D^2v)|g|^2`` and
    ``div(D[H(Dv)] - Laplace(v) g) = (-det D^2v) tr(Hpp)``
determinant (on solutions of ``A_H[u] + eps div g = 0``)
    ``(-det D^2u) det Hpp = 4 tt <Hpp D[H^(1/2)], D[H^(1/2)]> + tt eps (div g)^2 / H``
    with ``tt = tau_tilde(Du)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, ValidationError
from .grid import GridFunction, divergence, gradient, hessian
from .hamiltonian import Hamiltonian, quadratic

IDENTITY_IDS = ("structure", "divergence_form", "planar_gradient", "planar_divergence",
                "planar_h_gradient", "planar_h_divergence", "determinant")


@dataclass
class IdentityReport:
    identity_id: str
    residual_field: np.ndarray
    max_abs_residual: float
    relative_residual: float
    lhs: np.ndarray | None = None
    rhs: np.ndarray | None = None
    order_estimate: float | None = None
    refinement_ratio: float | None = None
    masked_fraction: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"identity_id": self.identity_id, "max_abs_residual": self.max_abs_residual,
               "relative_residual": self.relative_residual}
        for k in ("order_estimate", "refinement_ratio", "masked_fraction"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        out.update(self.extra)
        return out


def _report(identity_id, lhs, rhs, **kw) -> IdentityReport:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    res = lhs - rhs
    scale = max(float(np.max(np.abs(lhs), initial=0.0)), float(np.max(np.abs(rhs), initial=0.0)))
    mx = float(np.max(np.abs(res), initial=0.0))
    rel = mx / scale if scale > 0 else 0.0
    return IdentityReport(identity_id, res, mx, rel, lhs, rhs, **kw)


# ---------------------------------------------------------------------------
# closed-form test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClosedForm:
    """Test function with derivatives up to third order.

    ``jet(P)`` returns ``(v, Dv, D2v, D3v)`` with shapes ``(...)``,
    ``(..., 2)``, ``(..., 2, 2)``, ``(..., 2, 2, 2)``.
    """

    name: str
    jet: Callable[[np.ndarray], tuple]
    params: dict = field(default_factory=dict)

    def __call__(self, x, y):
        P = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), axis=-1)
        return self.jet(P)[0]


def polynomial(coeffs: dict) -> ClosedForm:
    """``sum c[(i, j)] x^i y^j`` with ``i + j <= 3``."""
    coeffs = {tuple(k): float(c) for k, c in coeffs.items()}
    if any(i < 0 or j < 0 or i + j > 3 for i, j in coeffs):
        raise ValidationError("polynomial test functions are limited to degree 3")

    def mono(x, i):
        return x**i if i >= 0 else np.zeros_like(x)

    def falling(i, k):
        out = 1.0
        for t in range(k):
            out *= i - t
        return out

    def deriv(P, a, b):
        x, y = P[..., 0], P[..., 1]
        out = np.zeros(P.shape[:-1])
        for (i, j), c in coeffs.items():
            if i >= a and j >= b:
                out = out + c * falling(i, a) * falling(j, b) * mono(x, i - a) * mono(y, j - b)
        return out

    def jet(P):
        v = deriv(P, 0, 0)
        D = np.stack([deriv(P, 1, 0), deriv(P, 0, 1)], -1)
        D2 = np.empty(P.shape + (2,))
        D3 = np.empty(P.shape + (2, 2))
        for a in range(2):
            for b in range(2):
                D2[..., a, b] = deriv(P, (a == 0) + (b == 0), (a == 1) + (b == 1))
                for c in range(2):
                    nx = (a == 0) + (b == 0) + (c == 0)
                    D3[..., a, b, c] = deriv(P, nx, 3 - nx)
        return v, D, D2, D3

    label = "+".join(f"{c:g}x^{i}y^{j}" for (i, j), c in sorted(coeffs.items()))
    return ClosedForm(f"poly({label})", jet, {"coeffs": {f"{i},{j}": c for (i, j), c in coeffs.items()}})


def linear(a: float = 1.0, b: float = 0.0, c: float = 0.0) -> ClosedForm:
    return polynomial({(1, 0): a, (0, 1): b, (0, 0): c})


def quadratic_fn(q11: float, q12: float, q22: float, a: float = 0.0, b: float = 0.0) -> ClosedForm:
    """``(q11 x^2 + 2 q12 xy + q22 y^2)/2 + a x + b y``."""
    return polynomial({(2, 0): 0.5 * q11, (1, 1): q12, (0, 2): 0.5 * q22, (1, 0): a, (0, 1): b})


def saddle() -> ClosedForm:
    return polynomial({(2, 0): 1.0, (0, 2): -1.0})


def product() -> ClosedForm:
    return polynomial({(1, 1): 1.0})


def aronsson() -> ClosedForm:
    """``|x|^{4/3} - |y|^{4/3}``; derivatives only off the coordinate axes."""

    def jet(P):
        x, y = P[..., 0], P[..., 1]
        if np.any(x == 0) or np.any(y == 0):
            raise DomainError("derivatives of |x|^(4/3) - |y|^(4/3) are singular on the axes")
        ax, ay, sx, sy = np.abs(x), np.abs(y), np.sign(x), np.sign(y)
        v = ax ** (4 / 3) - ay ** (4 / 3)
        D = np.stack([4 / 3 * sx * ax ** (1 / 3), -4 / 3 * sy * ay ** (1 / 3)], -1)
        D2 = np.zeros(P.shape + (2,))
        D2[..., 0, 0] = 4 / 9 * ax ** (-2 / 3)
        D2[..., 1, 1] = -4 / 9 * ay ** (-2 / 3)
        D3 = np.zeros(P.shape + (2, 2))
        D3[..., 0, 0, 0] = -8 / 27 * sx * ax ** (-5 / 3)
        D3[..., 1, 1, 1] = 8 / 27 * sy * ay ** (-5 / 3)
        return v, D, D2, D3

    return ClosedForm("aronsson", jet)


def trig(a: float = 1.0, b: float = 1.0, c1: float = 0.0, c2: float = 0.0) -> ClosedForm:
    """``sin(a x + c1) sin(b y + c2)``."""

    def jet(P):
        x, y = P[..., 0], P[..., 1]
        s1, k1 = np.sin(a * x + c1), np.cos(a * x + c1)
        s2, k2 = np.sin(b * y + c2), np.cos(b * y + c2)
        v = s1 * s2
        D = np.stack([a * k1 * s2, b * s1 * k2], -1)
        D2 = np.empty(P.shape + (2,))
        D2[..., 0, 0] = -a * a * v
        D2[..., 1, 1] = -b * b * v
        D2[..., 0, 1] = D2[..., 1, 0] = a * b * k1 * k2
        D3 = np.empty(P.shape + (2, 2))
        D3[..., 0, 0, 0] = -a**3 * k1 * s2
        D3[..., 1, 1, 1] = -b**3 * s1 * k2
        xxy = -a * a * b * s1 * k2
        xyy = -a * b * b * k1 * s2
        for i, j, k in ((0, 0, 1), (0, 1, 0), (1, 0, 0)):
            D3[..., i, j, k] = xxy
        for i, j, k in ((0, 1, 1), (1, 0, 1), (1, 1, 0)):
            D3[..., i, j, k] = xyy
        return v, D, D2, D3

    return ClosedForm(f"trig({a:g},{b:g},{c1:g},{c2:g})", jet, {"a": a, "b": b, "c1": c1, "c2": c2})


TEST_FUNCTIONS: dict[str, Callable[..., ClosedForm]] = {
    "linear": linear,
    "quadratic": quadratic_fn,
    "saddle": saddle,
    "xy": product,
    "aronsson": aronsson,
    "trig": trig,
    "sinsin": lambda: trig(1.0, 1.0),
    "poly": polynomial,
}


def random_test_function(rng: np.random.Generator) -> ClosedForm:
    """Draw from the registry with random parameters (used by property tests)."""
    kind = rng.integers(0, 6)
    if kind == 0:
        q = rng.normal(size=3)
        return quadratic_fn(q[0], q[1], q[2], *rng.normal(size=2))
    if kind == 1:
        return saddle()
    if kind == 2:
        return product()
    if kind == 3:
        return aronsson()
    if kind == 4:
        return trig(*rng.uniform(0.5, 2.0, 2), *rng.uniform(0, np.pi, 2))
    c = {(i, j): rng.normal() for i in range(4) for j in range(4 - i)}
    return polynomial(c)


# ---------------------------------------------------------------------------
# shared pointwise algebra
# ---------------------------------------------------------------------------

def _det(M):
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def _adj(M):
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 1, 0]
    out[..., 1, 0] = -M[..., 0, 1]
    return out


def _quad(M, a, b=None):
    b = a if b is None else b
    return np.einsum("...i,...ij,...j->...", a, M, b)


def _matvec(M, a):
    return np.einsum("...ij,...j->...i", M, a)


def _points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.shape[-1] != 2:
        raise ValidationError("sample points must have trailing dimension 2")
    return P


def _grid_jet(v: GridFunction):
    gx, gy = gradient(v)
    xx, xy, yy = hessian(v)
    D = np.stack([gx.values, gy.values], -1)
    D2 = np.stack([np.stack([xx.values, xy.values], -1), np.stack([xy.values, yy.values], -1)], -2)
    return D, D2


def _region(v: GridFunction, region):
    """Interior mask, optionally intersected with a rectangle."""
    m = v.grid.interior_mask()
    if region is not None:
        m &= v.grid.region_mask(region)
    return m


def _vec_field(grid, F):
    return GridFunction(grid, F[..., 0]), GridFunction(grid, F[..., 1])


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_structure(H: Hamiltonian, v, points=None, *, region=None) -> IdentityReport:
    """Adjoint identity for the Aronsson operator, pointwise."""
    if isinstance(v, GridFunction):
        D, M = _grid_jet(v)
        mask = _region(v, region)
        D, M = D[mask], M[mask]
    else:
        _, D, M, _ = v.jet(_points(points))
    g, Hm = H.grad(D), H.hess(D)
    DH = _matvec(M, g)
    divg = np.einsum("...ij,...ji->...", Hm, M)
    A = _quad(M, g)
    lhs = _quad(Hm, DH) - divg * A
    rhs = -_det(M) * _quad(_adj(Hm), g)
    return _report("structure", lhs, rhs)


def _divergence_form_closed(H, D, M, N):
    g, Hm, T = H.grad(D), H.hess(D), H.third(D)
    DH = _matvec(M, g)
    divg = np.einsum("...jl,...lj->...", Hm, M)
    # d_i Hpp_im = T_iml M_li ;  d_i DH_m = N_mji g_j + M_mj Hm_jl M_li
    dHm = np.einsum("...iml,...li->...m", T, M)
    dDH = np.einsum("...mji,...j->...mi", N, g) + np.einsum("...mj,...jl,...li->...mi", M, Hm, M)
    ddivg = np.einsum("...jlk,...ki,...lj->...i", T, M, M) + np.einsum("...jl,...lji->...i", Hm, N)
    rhs = (np.einsum("...m,...m->...", dHm, DH) + np.einsum("...im,...mi->...", Hm, dDH)
           - np.einsum("...i,...i->...", ddivg, g) - divg**2)
    lhs = -2.0 * _det(M) * _det(Hm)
    return lhs, rhs


def check_divergence_form(H: Hamiltonian, v, points=None, *, region=None) -> IdentityReport:
    """Divergence identity ``2(-det D^2v) det Hpp = div{...}``.

    Closed-form mode expands the divergence with third derivatives of ``H``
    and ``v``.  Grid mode assembles ``Hpp D[H(Dv)] - div[g] g`` from stencils
    and takes its stencil divergence.
    """
    if isinstance(v, GridFunction):
        grid = v.grid
        D, M = _grid_jet(v)
        g, Hm = H.grad(D), H.hess(D)
        hx, hy = gradient(GridFunction(grid, H.eval(D)))
        DH = np.stack([hx.values, hy.values], -1)
        divg = divergence(*_vec_field(grid, g)).values
        F = _matvec(Hm, DH) - divg[..., None] * g
        rhs = divergence(*_vec_field(grid, F)).values
        lhs = -2.0 * _det(M) * _det(Hm)
        mask = _region(v, region)
        return _report("divergence_form", lhs[mask], rhs[mask], extra={"h": grid.h})
    _, D, M, N = v.jet(_points(points))
    lhs, rhs = _divergence_form_closed(H, D, M, N)
    return _report("divergence_form", lhs, rhs)


_UNIT = quadratic(1.0, 0.0, 1.0)


def check_planar_pair(v, points=None, *, region=None) -> list[IdentityReport]:
    """The two identities specialised to ``H = |p|^2/2``."""
    if isinstance(v, GridFunction):
        grid = v.grid
        D, M = _grid_jet(v)
        lap = M[..., 0, 0] + M[..., 1, 1]
        F = _matvec(M, D) - lap[..., None] * D
        rhs2 = divergence(*_vec_field(grid, F)).values
        mask = _region(v, region)
        D, M, lap, rhs2 = D[mask], M[mask], lap[mask], rhs2[mask]
    else:
        _, D, M, N = v.jet(_points(points))
        lap = M[..., 0, 0] + M[..., 1, 1]
        # div(M Dv) = N_iij v_j + M_ij M_ij ; div(lap Dv) = D(lap).Dv + lap^2
        dlap = N[..., 0, 0, :] + N[..., 1, 1, :]
        rhs2 = (np.einsum("...iij,...j->...", N, D) + np.einsum("...ij,...ij->...", M, M)
                - np.einsum("...i,...i->...", dlap, D) - lap**2)
    MD = _matvec(M, D)
    negdet = -_det(M)
    r1 = _report("planar_gradient", np.einsum("...i,...i->...", MD, MD) - lap * _quad(M, D),
                 negdet * np.einsum("...i,...i->...", D, D))
    r2 = _report("planar_divergence", 2.0 * negdet, rhs2)
    return [r1, r2]


def check_planar_h_pair(H: Hamiltonian, v, points=None, *, region=None) -> list[IdentityReport]:
    if isinstance(v, GridFunction):
        grid = v.grid
        D, M = _grid_jet(v)
        g, Hm = H.grad(D), H.hess(D)
        lap = M[..., 0, 0] + M[..., 1, 1]
        hx, hy = gradient(GridFunction(grid, H.eval(D)))
        F = np.stack([hx.values, hy.values], -1) - lap[..., None] * g
        rhs6 = divergence(*_vec_field(grid, F)).values
        mask = _region(v, region)
        D, M, g, Hm, lap, rhs6 = D[mask], M[mask], g[mask], Hm[mask], lap[mask], rhs6[mask]
    else:
        _, D, M, N = v.jet(_points(points))
        g, Hm = H.grad(D), H.hess(D)
        lap = M[..., 0, 0] + M[..., 1, 1]
        dlap = N[..., 0, 0, :] + N[..., 1, 1, :]
        divg = np.einsum("...jl,...lj->...", Hm, M)
        # div(M g) = N_iij g_j + M_ij Hm_jl M_li
        rhs6 = (np.einsum("...iij,...j->...", N, g) + np.einsum("...ij,...jl,...li->...", M, Hm, M)
                - np.einsum("...i,...i->...", dlap, g) - lap * divg)
    DH = _matvec(M, g)
    negdet = -_det(M)
    r5 = _report("planar_h_gradient", np.einsum("...i,...i->...", DH, DH) - lap * _quad(M, g),
                 negdet * np.einsum("...i,...i->...", g, g))
    r6 = _report("planar_h_divergence", negdet * (Hm[..., 0, 0] + Hm[..., 1, 1]), rhs6)
    return [r5, r6]


def check_determinant_identity(H: Hamiltonian, u, eps: float, *, mask_tol: float = 1e-10, region=None,
                percentile: float = 90.0) -> IdentityReport:
    """Determinant identity for solutions of the regularised equation.

    ``u`` is a :class:`GridFunction` (or anything with a ``.u`` attribute,
    e.g. a solve result).  Nodes with ``H(Du) < mask_tol`` are excluded and
    counted in ``masked_fraction``.  ``extra["percentile_relative"]`` is the
    requested percentile of ``|lhs - rhs| / max(|lhs|, |rhs|)`` with the
    maximum taken over the whole unmasked field.
    """
    from .hamiltonian import tau_tilde

    u = getattr(u, "u", u)
    if not isinstance(u, GridFunction):
        raise ValidationError("the determinant identity needs a grid function or a solve result")
    if not eps > 0:
        raise ValidationError("eps must be positive")
    D, M = _grid_jet(u)
    mask = _region(u, region)
    D, M = D[mask], M[mask]
    hv = H.eval(D)
    keep = hv >= mask_tol
    masked_fraction = float(1.0 - keep.mean()) if keep.size else 1.0
    D, M, hv = D[keep], M[keep], hv[keep]
    g, Hm = H.grad(D), H.hess(D)
    tt = tau_tilde(H, D)
    DH = _matvec(M, g)
    q = DH / (2.0 * np.sqrt(hv))[..., None]
    divg = np.einsum("...jl,...lj->...", Hm, M)
    lhs = -_det(M) * _det(Hm)
    rhs = 4.0 * tt * _quad(Hm, q) + tt * eps * divg**2 / hv
    rep = _report("determinant", lhs, rhs, masked_fraction=masked_fraction)
    scale = max(float(np.max(np.abs(lhs), initial=0.0)), float(np.max(np.abs(rhs), initial=0.0)))
    relfield = np.abs(lhs - rhs) / scale if scale > 0 else np.zeros_like(lhs)
    rep.extra["percentile"] = percentile
    rep.extra["percentile_relative"] = float(np.percentile(relfield, percentile)) if relfield.size else 0.0
    rep.extra["rhs_min"] = float(rhs.min()) if rhs.size else 0.0
    return rep


def refinement_study(check: Callable[..., IdentityReport], H: Hamiltonian, f: Callable, box, sizes,
                     region=None) -> IdentityReport:
    """Run a grid-mode check on successively refined grids.

    ``f(X, Y)`` is sampled on square node grids of the given sizes over
    ``box``.  Residuals are compared on ``region``, by default ``box``
    shrunk by three cells of the coarsest grid.  The report of the finest grid gets ``refinement_ratio`` (ratio
    of consecutive max residuals, last pair) and ``order_estimate``
    (its base-2 log for halved spacing).
    """
    from .grid import Grid2D

    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValidationError("refinement needs at least two grid sizes")
    if region is None:
        # grid-mode divergences nest three stencils; keep to nodes where all of
        # them are central on the coarsest grid
        coarse = Grid2D(min(sizes), min(sizes), *box)
        region = (box[0] + 3 * coarse.hx, box[1] - 3 * coarse.hx, box[2] + 3 * coarse.hy, box[3] - 3 * coarse.hy)
    reps = []
    for n in sizes:
        G = Grid2D(n, n, *box)
        reps.append(check(H, G.sample(f), region=region))
    last, prev = reps[-1], reps[-2]
    ratio = prev.max_abs_residual / last.max_abs_residual if last.max_abs_residual > 0 else np.inf
    h_ratio = (sizes[-1] - 1) / (sizes[-2] - 1)
    last.refinement_ratio = float(ratio)
    last.order_estimate = float(np.log(ratio) / np.log(h_ratio))
    last.extra["max_residuals"] = [r.max_abs_residual for r in reps]
    last.extra["sizes"] = sizes
    return last


def run_closed_form(identity_id: str, H: Hamiltonian, v: ClosedForm, points) -> list[IdentityReport]:
    """Dispatch helper used by the command line front end."""
    if identity_id == "structure":
        return [check_structure(H, v, points)]
    if identity_id == "divergence_form":
        return [check_divergence_form(H, v, points)]
    if identity_id in ("planar_gradient", "planar_divergence"):
        reps = check_planar_pair(v, points)
        return [r for r in reps if r.identity_id == identity_id]
    if identity_id in ("planar_h_gradient", "planar_h_divergence"):
        reps = check_planar_h_pair(H, v, points)
        return [r for r in reps if r.identity_id == identity_id]
    raise ValidationError(f"identity {identity_id!r} has no closed-form mode")
