"""Integral estimates evaluated on grid functions and solve results.

Every estimate returns an :class:`EstimateReport` comparing a computed left
hand side with a right hand side.  ``satisfied`` means
``lhs <= rhs * (1 + rel_slack) + abs_slack``.  Where the right hand side
carries an unspecified constant, the smallest constant that makes the
inequality hold is recorded in ``constant``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate as spint

from .errors import DomainError, ValidationError
from .grid import GridFunction, box_weights, gradient, hessian, integrate, w12_seminorm
from .hamiltonian import Hamiltonian, lambda_profile, tau_profile


@dataclass
class EstimateReport:
    estimate_id: str
    lhs: float
    rhs: float
    satisfied: bool
    slack_used: tuple[float, float]
    inputs_echo: dict = field(default_factory=dict)
    constant: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"estimate_id": self.estimate_id, "lhs": self.lhs, "rhs": self.rhs,
               "satisfied": self.satisfied, "slack_used": list(self.slack_used),
               "inputs": self.inputs_echo}
        if self.constant is not None:
            out["constant"] = self.constant
        out.update(self.extra)
        return out


def _estimate(eid, lhs, rhs, slack=(0.0, 0.0), echo=None, constant=None, **extra) -> EstimateReport:
    rel, ab = slack
    ok = bool(lhs <= rhs * (1.0 + rel) + ab)
    return EstimateReport(eid, float(lhs), float(rhs), ok, (float(rel), float(ab)), echo or {},
                          None if constant is None else float(constant), extra)


@dataclass(frozen=True)
class LinearFunction:
    """``F(x, y) = a x + b y + c``."""

    a: float
    b: float
    c: float = 0.0

    def __call__(self, x, y):
        return self.a * np.asarray(x) + self.b * np.asarray(y) + self.c

    @property
    def gradient(self) -> np.ndarray:
        return np.array([self.a, self.b], dtype=float)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _u(u) -> GridFunction:
    u = getattr(u, "u", u)
    if not isinstance(u, GridFunction):
        raise ValidationError("expected a grid function or a solve result")
    return u


def _jet(u: GridFunction):
    gx, gy = gradient(u)
    xx, xy, yy = hessian(u)
    D = np.stack([gx.values, gy.values], -1)
    M = np.stack([np.stack([xx.values, xy.values], -1), np.stack([xy.values, yy.values], -1)], -2)
    return D, M


def _box(box) -> tuple[float, float, float, float]:
    b = tuple(float(t) for t in box)
    if len(b) != 4 or not (b[0] < b[1] and b[2] < b[3]):
        raise ValidationError(f"bad rectangle {box}")
    return b


def box_distance(V, U) -> float:
    """Distance from the rectangle ``V`` to the boundary of the rectangle ``U``."""
    V, U = _box(V), _box(U)
    d = min(V[0] - U[0], U[1] - V[1], V[2] - U[2], U[3] - V[3])
    if d <= 0:
        raise DomainError(f"{V} is not compactly contained in {U}")
    return float(d)


def _moduli(H: Hamiltonian, level: float, n_angles=64, n_radii=32) -> dict:
    """lambda, Lambda and tau on ``{H <= level}``."""
    prof = tau_profile(H, max(level, 1e-12), 2, n_angles=n_angles, n_radii=n_radii)
    return {"lambda": float(prof.lambda_of_R[-1]), "Lambda": float(prof.Lambda_of_R[-1]),
            "tau": float(prof.tau_of_R[-1])}


def _global_moduli(H: Hamiltonian, level: float) -> tuple[float, float]:
    if H.global_moduli is not None:
        return H.global_moduli
    prof = lambda_profile(H, max(level, 1e-12), 2, n_angles=64, n_radii=32, include_infinity=True)
    return float(prof.lambda_of_R[-1]), float(prof.Lambda_of_R[-1])


def _admissible_sigma(alpha: float, sigma: float | None) -> float:
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if sigma is None:
        sigma = 0.0 if alpha >= 0.5 else 1e-6
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if alpha < 0.5 and sigma == 0:
        raise ValidationError("alpha < 1/2 needs sigma > 0 ([H + sigma]^alpha is not Lipschitz at H = 0)")
    return float(sigma)


# ---------------------------------------------------------------------------
# Sobolev regularity of powers of H(Du)
# ---------------------------------------------------------------------------

def sobolev_alpha(u, H: Hamiltonian, alpha: float, sigma: float | None = None, V=None) -> float:
    """``int_V |D[H(Du) + sigma]^alpha|^2`` with stencil derivatives.

    ``V`` is a rectangle or a boolean node mask (all nodes by default).
    """
    u = _u(u)
    sigma = _admissible_sigma(alpha, sigma)
    D, _ = _jet(u)
    f = GridFunction(u.grid, (H.eval(D) + sigma) ** alpha)
    if V is None:
        V = u.grid.box
    return w12_seminorm(f, V) ** 2


def check_sobolev_bound(u, H: Hamiltonian, alpha: float, V, U=None, C: float = 100.0,
                sigma: float | None = None) -> EstimateReport:
    """Caccioppoli-type bound for ``[H(Du)]^alpha`` in ``W^{1,2}(V)``.

    ``rhs = C alpha^2 (alpha+1) / (alpha + tau - 1/2)^2 (Lambda/lambda)^2
    dist(V, dU)^-2 int_U [H(Du) + sigma]^{2 alpha}`` with the moduli taken on
    ``{H <= max_U H(Du)}``.
    """
    u = _u(u)
    U = _box(U if U is not None else u.grid.box)
    V = _box(V)
    sigma = _admissible_sigma(alpha, sigma)
    dist = box_distance(V, U)
    D, _ = _jet(u)
    hv = H.eval(D)
    mU = u.grid.region_mask(U)
    level = float(hv[mU].max())
    mod = _moduli(H, level)
    tau = mod["tau"]
    if not alpha > 0.5 - tau:
        raise ValidationError(f"alpha = {alpha} not admissible: need alpha > 1/2 - tau = {0.5 - tau:.6g}")
    lhs = sobolev_alpha(u, H, alpha, sigma, V)
    integral = float(np.sum((hv + sigma) ** (2 * alpha) * box_weights(u.grid, U)))
    shape = alpha**2 * (alpha + 1) / (alpha + tau - 0.5) ** 2 * (mod["Lambda"] / mod["lambda"]) ** 2
    rhs_unit = shape * integral / dist**2
    c_min = lhs / rhs_unit if rhs_unit > 0 else np.inf
    echo = {"alpha": alpha, "sigma": sigma, "V": list(V), "U": list(U), "C": C, "level": level, **mod}
    return _estimate("sobolev_bound", lhs, C * rhs_unit, echo=echo, constant=c_min)


# ---------------------------------------------------------------------------
# determinant
# ---------------------------------------------------------------------------

def _det_measure_parts(u: GridFunction, phi: GridFunction) -> tuple[float, float]:
    if phi.grid != u.grid:
        raise ValidationError("phi and u live on different grids")
    if np.any(phi.values[u.grid.boundary_mask(2)] != 0):
        raise ValidationError("phi must vanish on the two outermost rings")
    gx, gy = gradient(u)
    pxx, pxy, pyy = hessian(phi)
    ux, uy = gx.values, gy.values
    integrand = 0.5 * (-(ux * ux * pxx.values + 2 * ux * uy * pxy.values + uy * uy * pyy.values)
                       + (ux**2 + uy**2) * (pxx.values + pyy.values))
    size = (ux**2 + uy**2) * (np.abs(pxx.values) + 2 * np.abs(pxy.values) + np.abs(pyy.values))
    ring = u.grid.boundary_mask()
    integrand[ring] = 0.0
    size[ring] = 0.0
    w = u.grid.trapezoid_weights()
    return float(np.sum(integrand * w)), float(np.sum(size * w))


def det_measure(u, phi: GridFunction) -> float:
    """Weak form of ``-int det(D^2u) phi``: ``1/2 int (-u_i u_j phi_ij + |Du|^2 Laplace(phi))``.

    Only first derivatives of ``u`` enter.  ``phi`` must vanish on the two
    outermost node rings; the outermost ring is excluded from the sum.
    """
    return _det_measure_parts(_u(u), phi)[0]


def check_determinant_bounds(u, H: Hamiltonian, phis: Iterable[GridFunction], V, U=None,
                       C_upper: float = 100.0, rel_slack: float = 1e-2) -> list[EstimateReport]:
    """Lower and upper bounds for the determinant measure.

    Lower: for every ``phi >= 0``,
    ``4 tau / Lambda int |D[H(Du)]^(1/2)|^2 phi <= det_measure(u, phi)``.
    Upper: ``int_V (-det D^2u) <= C dist(V, dU)^-2 int_U |Du|^2``.
    """
    u = _u(u)
    U = _box(U if U is not None else u.grid.box)
    V = _box(V)
    D, M = _jet(u)
    hv = H.eval(D)
    level = float(hv[u.grid.region_mask(U)].max())
    mod = _moduli(H, level)
    sq = GridFunction(u.grid, np.sqrt(np.maximum(hv, 0.0)))
    sx, sy = gradient(sq)
    dens = sx.values**2 + sy.values**2
    worst = None
    rows = []
    for phi in phis:
        lower = 4 * mod["tau"] / mod["Lambda"] * integrate(GridFunction(u.grid, dens), phi)
        meas, size = _det_measure_parts(u, phi)
        rows.append({"lower": lower, "det_measure": meas})
        # round-off of the weak form is relative to the size of its terms
        gap = lower - meas * (1 + rel_slack) - 1e-12 * size
        if worst is None or gap > worst[0]:
            worst = (gap, lower, meas, 1e-12 * size)
    if worst is None:
        raise ValidationError("need at least one test function")
    lower_rep = _estimate("det_lower", worst[1], worst[2], (rel_slack, worst[3]),
                          echo={"n_phi": len(rows), **mod}, rows=rows)
    negdet = -(M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] ** 2)
    lhs = float(np.sum(negdet * box_weights(u.grid, V)))
    dist = box_distance(V, U)
    energy = float(np.sum((D**2).sum(-1) * box_weights(u.grid, U)))
    unit = energy / dist**2
    upper_rep = _estimate("det_upper", lhs, C_upper * unit,
                          echo={"V": list(V), "U": list(U), "C": C_upper},
                          constant=lhs / unit if unit > 0 else np.inf)
    return [lower_rep, upper_rep]


# ---------------------------------------------------------------------------
# orthogonality, flatness, L-infinity
# ---------------------------------------------------------------------------

def orthogonality_defect(u, H: Hamiltonian, alpha: float, sigma: float | None, phi: GridFunction) -> float:
    """``|int <D[H(Du) + sigma]^alpha, DpH(Du)> phi|`` (chain rule with stencil ``D^2u``)."""
    u = _u(u)
    sigma = _admissible_sigma(alpha, sigma)
    D, M = _jet(u)
    hv = H.eval(D)
    thr = 0.5 - _moduli(H, float(hv.max()))["tau"]
    if not alpha > thr:
        raise ValidationError(f"alpha = {alpha} not admissible: need alpha > 1/2 - tau = {thr:.6g}")
    g = H.grad(D)
    A = np.einsum("...i,...ij,...j->...", g, M, g)
    field_ = alpha * (hv + sigma) ** (alpha - 1) * A
    return abs(integrate(GridFunction(u.grid, field_), phi))


def orthogonality_cross_check(u, H: Hamiltonian, alpha: float, sigma: float | None, phi: GridFunction,
                              eps: float) -> dict:
    """Compare the defect with ``eps |int alpha [H+sigma]^(alpha-1) div[DpH(Du)] phi|``.

    Along solutions ``A_H[u] = -eps div[DpH(Du)] + r`` with the discrete
    residual ``r``, so the two numbers differ by at most
    ``int alpha [H+sigma]^(alpha-1) |r| phi`` (returned as ``bound``).
    """
    u = _u(u)
    sigma = _admissible_sigma(alpha, sigma)
    D, M = _jet(u)
    g, Hm = H.grad(D), H.hess(D)
    A = np.einsum("...i,...ij,...j->...", g, M, g)
    div = np.einsum("...ij,...ji->...", Hm, M)
    wgt = alpha * (H.eval(D) + sigma) ** (alpha - 1)
    defect = orthogonality_defect(u, H, alpha, sigma, phi)
    predicted = abs(eps * integrate(GridFunction(u.grid, wgt * div), phi))
    resid = A + eps * div
    resid[u.grid.boundary_mask()] = 0.0
    bound = integrate(GridFunction(u.grid, wgt * np.abs(resid)), phi)
    return {"defect": defect, "predicted": predicted, "difference": abs(defect - predicted), "bound": bound,
            "residual_sup_on_support": float(np.max(np.abs(resid)[phi.values > 0], initial=0.0)),
            "phi_integral": integrate(phi)}


def flatness_check(u, H: Hamiltonian, center, r: float, F: LinearFunction, C: float = 1.0) -> EstimateReport:
    """Mean-square flatness of ``u`` against an affine ``F`` on nested squares.

    ``lhs`` is the average over the half square of ``<DpH(Du), Du - DF>^2``;
    ``rhs = C Lambda^2 / lambda ||H(Du)||_{L^inf(B)} [avg_B ((|Du|+|DF|)^2
    (u-F)^2 / r^2 + (u-F)^4 / r^4)]^(1/2)`` with whole-plane moduli, ``B``
    the square of half-width ``r`` about ``center``.
    """
    u = _u(u)
    cx, cy = map(float, center)
    B = (cx - r, cx + r, cy - r, cy + r)
    half = (cx - r / 2, cx + r / 2, cy - r / 2, cy + r / 2)
    wB = box_weights(u.grid, B)
    wH = box_weights(u.grid, half)
    D, _ = _jet(u)
    X, Y = u.grid.mesh()
    diff = u.values - F(X, Y)
    DF = F.gradient
    gH = H.grad(D)
    proj = np.einsum("...i,...i->...", gH, D - DF)
    lhs = float(np.sum(proj**2 * wH) / np.sum(wH))
    # round-off floor of proj^2, relative to the size of its terms
    size = float(np.max((np.linalg.norm(gH, axis=-1) * (np.linalg.norm(D, axis=-1) + np.linalg.norm(DF)))[wH > 0]))
    floor = (1e-12 * size) ** 2
    hv = H.eval(D)
    linf = float(hv[wB > 0].max())
    lam, Lam = _global_moduli(H, linf)
    nrm = np.linalg.norm(D, axis=-1) + np.linalg.norm(DF)
    avg = float(np.sum((nrm**2 * diff**2 / r**2 + diff**4 / r**4) * wB) / np.sum(wB))
    unit = Lam**2 / lam * linf * np.sqrt(avg)
    return _estimate("flatness", lhs, C * unit, (0.0, floor),
                     echo={"center": [cx, cy], "r": r, "F": [F.a, F.b, F.c], "C": C, "lambda": lam, "Lambda": Lam},
                     constant=lhs / unit if unit > 0 else (0.0 if lhs == 0 else np.inf))


def check_linf_bound(results: Sequence, H: Hamiltonian, V, ref_linf: float | None = None,
                     U=None) -> EstimateReport:
    """Fit the smallest ``C >= 0`` with ``L_eps <= C sqrt(eps) + (1 + C eps) M`` along a ladder.

    ``L_eps = max_V H(Du^eps)``; ``M`` is ``ref_linf`` when given, otherwise
    ``max_U H(Du)`` of the finest-eps solution (``U`` defaults to the grid).
    """
    results = list(results)
    if len(results) < 2:
        raise ValidationError("the L-infinity fit needs an eps ladder of length >= 2")
    from .solver import linf_H_on

    order = sorted(results, key=lambda r: r.eps)
    finest = order[0]
    M = float(ref_linf) if ref_linf is not None else linf_H_on(H, finest.u, U)
    rows = []
    c_fit = 0.0
    for r in results:
        L = linf_H_on(H, r.u, V)
        need = float((L - M) / (np.sqrt(r.eps) + r.eps * M))
        rows.append({"eps": r.eps, "linf_V": L, "needed_C": need})
        c_fit = max(c_fit, need)
    for row in rows:
        row["margin"] = float(c_fit * np.sqrt(row["eps"]) + (1 + c_fit * row["eps"]) * M - row["linf_V"])
    worst = max(rows, key=lambda row: row["linf_V"] - M)
    rhs = c_fit * np.sqrt(worst["eps"]) + (1 + c_fit * worst["eps"]) * M
    return _estimate("linf_bound", worst["linf_V"], rhs, (0.0, 1e-12),
                     echo={"V": list(_box(V)), "reference_linf": M}, constant=c_fit, rows=rows)


# ---------------------------------------------------------------------------
# dyadic annuli around the origin for |x|^{4/3} - |y|^{4/3}
# ---------------------------------------------------------------------------

def _annulus_density(alpha):
    """``|D f|^2`` for ``f = |Dw|^alpha`` (or ``log|Dw|`` when alpha is ``"log"``)."""

    def dens(x, y):
        ax, ay = abs(x), abs(y)
        s = ax ** (2 / 3) + ay ** (2 / 3)
        tail = ax ** (-2 / 3) + ay ** (-2 / 3)
        if alpha == "log":
            return tail / (9.0 * s**2)
        return (16 / 9) ** alpha * alpha**2 / 9.0 * s ** (alpha - 2) * tail

    return dens


def square_annulus_integral(alpha, r_in: float, r_out: float) -> float:
    """Integral of the density over ``{r_in <= max(|x|,|y|) <= r_out}``.

    Square polar coordinates ``x = t (1, z^3)`` on one eighth of the annulus
    (the density is even in ``x`` and ``y`` and symmetric under swapping
    them); the substitution ``z^3`` removes the integrable ``|y|^(-2/3)``
    singularity on the axis.
    """
    if not 0 < r_in < r_out:
        raise ValidationError("need 0 < r_in < r_out")
    dens = _annulus_density(alpha)

    def inner(z, t):
        return t * dens(t, t * z**3) * 3 * z**2 if z > 0 else t * 3 * _axis_limit(alpha, t)

    val, _ = spint.dblquad(inner, r_in, r_out, 0.0, 1.0, epsabs=0.0, epsrel=1e-11)
    return 8.0 * val


def annulus_integral(alpha, k: int) -> float:
    """Contribution of the dyadic annulus ``{2^(-k-1) <= max(|x|,|y|) <= 2^(-k)}``."""
    return square_annulus_integral(alpha, 2.0 ** (-k - 1), 2.0**-k)


def _axis_limit(alpha, t):
    # lim_{z->0} z^2 dens(t, t z^3) = t^(-2/3) * coefficient of |y|^(-2/3) at y = 0
    s = t ** (2 / 3)
    if alpha == "log":
        return t ** (-2 / 3) / (9.0 * s**2)
    return (16 / 9) ** alpha * alpha**2 / 9.0 * s ** (alpha - 2) * t ** (-2 / 3)


def log_divergence_experiment(alpha_list=(0.25, 0.5, 1.0, "log"), k_max: int = 12) -> list[dict]:
    """Per-annulus contributions and partial sums for ``k = 0..k_max``."""
    rows = []
    for a in alpha_list:
        if a != "log" and not float(a) > 0:
            raise ValidationError("alpha must be positive or 'log'")
        total = 0.0
        for k in range(k_max + 1):
            inc = annulus_integral(a if a == "log" else float(a), k)
            total += inc
            rows.append({"alpha": a, "k": k, "increment": inc, "partial_sum": total})
    return rows


def cauchy_ratio(rows: list[dict], alpha) -> float:
    """Last increment divided by the last partial sum for one alpha."""
    sel = [r for r in rows if r["alpha"] == alpha]
    return sel[-1]["increment"] / sel[-1]["partial_sum"]


def linear_growth_fit(rows: list[dict], alpha="log", k_range=(4, 12)) -> dict:
    """Least-squares line through the partial sums over ``k_range``."""
    sel = [r for r in rows if r["alpha"] == alpha and k_range[0] <= r["k"] <= k_range[1]]
    k = np.array([r["k"] for r in sel], dtype=float)
    s = np.array([r["partial_sum"] for r in sel])
    slope, icpt = np.polyfit(k, s, 1)
    pred = slope * k + icpt
    ss_res = float(np.sum((s - pred) ** 2))
    ss_tot = float(np.sum((s - s.mean()) ** 2))
    return {"slope": float(slope), "intercept": float(icpt), "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
            "min_increment": float(min(r["increment"] for r in sel))}
