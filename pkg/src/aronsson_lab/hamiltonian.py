"""Convex Hamiltonians on the plane and their curvature moduli.

A :class:`Hamiltonian` wraps vectorised callables for the value, gradient,
Hessian and (when available) third derivative tensor.  Points are arrays of
shape ``(..., 2)``; derivatives come back with trailing axes ``(2,)``,
``(2, 2)`` and ``(2, 2, 2)``.

Besides the concrete families (quadratic, quartic, anisotropic quartic,
max of two quadratics, tabulated samples) the module provides

* ``tau_tilde``: the ratio ``H / <(D^2 H)^{-1} DH, DH>``, set to 1/2 at 0;
* ``lambda_profile`` / ``tau_profile``: extreme Hessian eigenvalues and the
  infimum of ``tau_tilde`` over sublevel sets ``{H <= R}``;
* ``mollify``: convolution with a rescaled smooth bump, recentred so the
  minimum sits at the origin with value 0;
* ``strongify``: a globally strongly convex and concave modification that
  agrees with ``H`` on a prescribed sublevel set.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import interpolate, optimize

from .errors import (
    ApproximateDerivativeWarning,
    DataIOError,
    DomainError,
    HypothesisViolation,
    SingularHessianError,
    ValidationError,
)

logger = logging.getLogger(__name__)

N_ANGLES = 256
N_RADII = 128
BISECTION_TOL = 1e-10
SINGULAR_RATIO = 1e-12
# points x quadrature nodes processed at once by the mollified evaluators
_CHUNK = 2_000_000


def _as_points(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape == () or p.shape[-1] != 2:
        raise ValidationError(f"points must have trailing dimension 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise DomainError("non-finite momentum")
    return p


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Vectorised convex Hamiltonian with optional closed-form derivatives.

    Attributes
    ----------
    name : str
        Human readable label, also used in metadata.
    kind : str
        Family tag (``quad``, ``quartic``, ``aniso-quartic``, ``maxquad``,
        ``sampled``, ``mollified``, ``strongified``).
    smoothness : int
        0, 1 or 2; 2 means at least twice continuously differentiable.
    global_moduli : tuple of float, optional
        ``(lambda, Lambda)`` over the whole plane when known.
    """

    name: str
    kind: str
    smoothness: int
    value_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None
    hess_fn: Callable[[np.ndarray], np.ndarray] | None = None
    third_fn: Callable[[np.ndarray], np.ndarray] | None = None
    params: dict = field(default_factory=dict)
    domain_radius: float = np.inf
    global_moduli: tuple[float, float] | None = None
    global_moduli_exact: bool = False

    # -- evaluation -------------------------------------------------------
    def _check_domain(self, p: np.ndarray) -> None:
        if np.isfinite(self.domain_radius):
            r = np.hypot(p[..., 0], p[..., 1])
            if np.any(r > self.domain_radius * (1 + 1e-12)):
                raise DomainError(
                    f"{self.name}: momentum of norm {r.max():.6g} outside tabulated "
                    f"disc of radius {self.domain_radius:.6g}"
                )

    def __call__(self, p) -> np.ndarray:
        return self.eval(p)

    def eval(self, p) -> np.ndarray:
        p = _as_points(p)
        self._check_domain(p)
        return self.value_fn(p)

    @property
    def exact_derivatives(self) -> bool:
        return self.grad_fn is not None and self.hess_fn is not None

    def _fd_step(self, p: np.ndarray) -> np.ndarray:
        return 1e-4 * (1.0 + np.hypot(p[..., 0], p[..., 1]))

    def grad(self, p) -> np.ndarray:
        p = _as_points(p)
        self._check_domain(p)
        if self.grad_fn is not None:
            return self.grad_fn(p)
        warnings.warn(
            f"{self.name}: gradient from central differences (approximate)",
            ApproximateDerivativeWarning,
            stacklevel=2,
        )
        h = self._fd_step(p)[..., None]
        out = np.empty(p.shape)
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1.0
            out[..., i] = (self.value_fn(p + h * e) - self.value_fn(p - h * e)) / (2 * h[..., 0])
        return out

    def hess(self, p) -> np.ndarray:
        p = _as_points(p)
        self._check_domain(p)
        if self.hess_fn is not None:
            return self.hess_fn(p)
        warnings.warn(
            f"{self.name}: Hessian from finite differences (approximate)",
            ApproximateDerivativeWarning,
            stacklevel=2,
        )
        h = self._fd_step(p)
        f = self.value_fn
        ex = np.array([1.0, 0.0])
        ey = np.array([0.0, 1.0])
        hh = h[..., None]
        f0 = f(p)
        out = np.empty(p.shape + (2,))
        out[..., 0, 0] = (f(p + hh * ex) - 2 * f0 + f(p - hh * ex)) / h**2
        out[..., 1, 1] = (f(p + hh * ey) - 2 * f0 + f(p - hh * ey)) / h**2
        out[..., 0, 1] = (
            f(p + hh * (ex + ey)) - f(p + hh * (ex - ey)) - f(p - hh * (ex - ey)) + f(p - hh * (ex + ey))
        ) / (4 * h**2)
        out[..., 1, 0] = out[..., 0, 1]
        return out

    def third(self, p) -> np.ndarray:
        p = _as_points(p)
        self._check_domain(p)
        if self.third_fn is not None:
            return self.third_fn(p)
        warnings.warn(
            f"{self.name}: third derivatives from finite differences (approximate)",
            ApproximateDerivativeWarning,
            stacklevel=2,
        )
        h = self._fd_step(p)[..., None, None]
        out = np.empty(p.shape + (2, 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ApproximateDerivativeWarning)
            for k in range(2):
                e = np.zeros(2)
                e[k] = 1.0
                hk = h[..., 0, :] * e
                out[..., k] = (self.hess(p + hk) - self.hess(p - hk)) / (2 * h)
        return out

    def describe(self) -> dict:
        return {"name": self.name, "kind": self.kind, "smoothness": self.smoothness,
                "params": {k: v for k, v in self.params.items() if _jsonable(v)}}


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, tuple)) or v is None


# module level aliases mirroring the method names
def evaluate(H: Hamiltonian, p) -> np.ndarray:
    return H.eval(p)


def grad(H: Hamiltonian, p) -> np.ndarray:
    return H.grad(p)


def hess(H: Hamiltonian, p) -> np.ndarray:
    return H.hess(p)


# ---------------------------------------------------------------------------
# concrete families
# ---------------------------------------------------------------------------

def quadratic(a11: float = 1.0, a12: float = 0.0, a22: float = 1.0) -> Hamiltonian:
    """``H(p) = <A p, p> / 2`` for a symmetric positive definite ``A``."""
    A = np.array([[a11, a12], [a12, a22]], dtype=float)
    eig = np.linalg.eigvalsh(A)
    if not np.all(np.isfinite(A)) or eig[0] <= 0:
        raise HypothesisViolation(f"quadratic Hamiltonian needs A > 0, eigenvalues {eig}")

    def value(p):
        return 0.5 * np.einsum("...i,ij,...j->...", p, A, p)

    def gradient(p):
        return p @ A.T

    def hessian(p):
        return np.broadcast_to(A, p.shape[:-1] + (2, 2)).copy()

    def third(p):
        return np.zeros(p.shape[:-1] + (2, 2, 2))

    return Hamiltonian(
        name=f"quad({a11:g},{a12:g},{a22:g})", kind="quad", smoothness=2,
        value_fn=value, grad_fn=gradient, hess_fn=hessian, third_fn=third,
        params={"a11": float(a11), "a12": float(a12), "a22": float(a22), "A": A},
        global_moduli=(float(eig[0]), float(eig[1])), global_moduli_exact=True,
    )


def quartic() -> Hamiltonian:
    """``H(p) = |p|^4 / 4 + |p|^2 / 2``."""
    I2 = np.eye(2)

    def value(p):
        s = np.einsum("...i,...i->...", p, p)
        return 0.25 * s**2 + 0.5 * s

    def gradient(p):
        s = np.einsum("...i,...i->...", p, p)
        return (s + 1.0)[..., None] * p

    def hessian(p):
        s = np.einsum("...i,...i->...", p, p)
        return (s + 1.0)[..., None, None] * I2 + 2.0 * p[..., :, None] * p[..., None, :]

    def third(p):
        d = I2
        return 2.0 * (
            d[:, :, None] * p[..., None, None, :]
            + d[:, None, :] * p[..., None, :, None]
            + d[None, :, :] * p[..., :, None, None]
        )

    return Hamiltonian(name="quartic", kind="quartic", smoothness=2, value_fn=value,
                       grad_fn=gradient, hess_fn=hessian, third_fn=third)


def aniso_quartic(b1: float = 1.0, b2: float = 3.0) -> Hamiltonian:
    """``H(p) = |p|^2 / 2 + (b1 p1^4 + b2 p2^4) / 4``."""
    if b1 < 0 or b2 < 0:
        raise HypothesisViolation("aniso-quartic weights must be non-negative")
    b = np.array([b1, b2], dtype=float)

    def value(p):
        return 0.5 * np.einsum("...i,...i->...", p, p) + 0.25 * np.einsum("i,...i->...", b, p**4)

    def gradient(p):
        return p + b * p**3

    def hessian(p):
        out = np.zeros(p.shape + (2,))
        out[..., 0, 0] = 1.0 + 3.0 * b[0] * p[..., 0] ** 2
        out[..., 1, 1] = 1.0 + 3.0 * b[1] * p[..., 1] ** 2
        return out

    def third(p):
        out = np.zeros(p.shape + (2, 2))
        out[..., 0, 0, 0] = 6.0 * b[0] * p[..., 0]
        out[..., 1, 1, 1] = 6.0 * b[1] * p[..., 1]
        return out

    return Hamiltonian(name=f"aniso-quartic({b1:g},{b2:g})", kind="aniso-quartic", smoothness=2,
                       value_fn=value, grad_fn=gradient, hess_fn=hessian, third_fn=third,
                       params={"b1": float(b1), "b2": float(b2)})


def maxquad(A1=((1.0, 0.0), (0.0, 3.0)), A2=((3.0, 0.0), (0.0, 1.0))) -> Hamiltonian:
    """Pointwise maximum of two positive definite quadratics (a convex kink)."""
    A1 = np.asarray(A1, dtype=float)
    A2 = np.asarray(A2, dtype=float)
    for A in (A1, A2):
        if not np.allclose(A, A.T) or np.linalg.eigvalsh(A)[0] <= 0:
            raise HypothesisViolation("maxquad needs two symmetric positive definite matrices")

    def value(p):
        q1 = 0.5 * np.einsum("...i,ij,...j->...", p, A1, p)
        q2 = 0.5 * np.einsum("...i,ij,...j->...", p, A2, p)
        return np.maximum(q1, q2)

    return Hamiltonian(name="maxquad", kind="maxquad", smoothness=0, value_fn=value,
                       params={"A1": A1.tolist(), "A2": A2.tolist()})


def sampled(source, name: str | None = None) -> Hamiltonian:
    """Hamiltonian interpolated (C^1 Clough-Tocher) from scattered samples.

    ``source`` is either a CSV path with columns ``p_x,p_y,H`` or an array of
    shape ``(n, 3)``.  Evaluation is restricted to the largest disc about the
    origin contained in the convex hull of the samples.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            with path.open(newline="") as fh:
                rows = list(csv.DictReader(fh))
            data = np.array([[float(r["p_x"]), float(r["p_y"]), float(r["H"])] for r in rows])
        except (OSError, KeyError, ValueError) as exc:
            raise DataIOError(f"cannot read Hamiltonian table {path}: {exc}") from exc
        name = name or f"sampled({path.name})"
    else:
        data = np.asarray(source, dtype=float)
        name = name or "sampled"
    if data.ndim != 2 or data.shape[1] != 3 or len(data) < 3:
        raise ValidationError("sampled Hamiltonian needs an (n, 3) table")
    pts, vals = data[:, :2], data[:, 2]
    interp = interpolate.CloughTocher2DInterpolator(pts, vals)
    # inscribed radius of the convex hull around the origin
    from scipy.spatial import ConvexHull

    hull = ConvexHull(pts)
    offsets = hull.equations[:, 2]
    if np.any(offsets >= 0):
        raise DomainError("sample hull does not contain the origin in its interior")
    radius = float(np.min(-offsets / np.linalg.norm(hull.equations[:, :2], axis=1)))

    def value(p):
        flat = p.reshape(-1, 2)
        out = interp(flat)
        if np.any(np.isnan(out)):
            raise DomainError(f"{name}: evaluation outside the sampled hull")
        return out.reshape(p.shape[:-1])

    return Hamiltonian(name=name, kind="sampled", smoothness=1, value_fn=value,
                       params={"n_samples": int(len(data))}, domain_radius=radius * (1 - 1e-9))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(H: Hamiltonian, radius: float = 2.0, n_pairs: int = 10_000, seed: int = 0,
             tol: float = 1e-10) -> dict:
    """Check normalisation, coercive growth and midpoint convexity.

    Raises
    ------
    HypothesisViolation
        With a witness when ``H(0) != 0``, ``H`` takes negative values or a
        sampled pair violates midpoint convexity.
    """
    rng = np.random.default_rng(seed)
    radius = min(radius, H.domain_radius)
    h0 = float(H.eval(np.zeros(2)))
    if abs(h0) > tol:
        raise HypothesisViolation(f"{H.name}: H(0) = {h0:.3e}, expected 0")
    ang = rng.uniform(0, 2 * np.pi, (n_pairs, 2))
    rad = radius * np.sqrt(rng.uniform(0, 1, (n_pairs, 2)))
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
    p, q = pts[:, 0], pts[:, 1]
    hp, hq, hm = H.eval(p), H.eval(q), H.eval(0.5 * (p + q))
    if np.min(hp) < -tol:
        i = int(np.argmin(hp))
        raise HypothesisViolation(f"{H.name}: negative value {hp[i]:.3e} at {p[i].tolist()}")
    gap = hm - 0.5 * (hp + hq)
    scale = tol * (1.0 + np.abs(hp) + np.abs(hq))
    bad = gap > scale
    if np.any(bad):
        i = int(np.argmax(gap - scale))
        raise HypothesisViolation(
            f"{H.name}: midpoint convexity fails for p={p[i].tolist()}, q={q[i].tolist()} "
            f"(excess {gap[i]:.3e})"
        )
    return {"H0": h0, "pairs": int(n_pairs), "max_midpoint_gap": float(gap.max())}


# ---------------------------------------------------------------------------
# tau tilde and sublevel profiles
# ---------------------------------------------------------------------------

def _inverse_quadratic_form(Hm: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``<Hm^{-1} g, g>`` for stacks of symmetric 2x2 matrices."""
    a, b, c = Hm[..., 0, 0], Hm[..., 0, 1], Hm[..., 1, 1]
    det = a * c - b * b
    num = c * g[..., 0] ** 2 - 2 * b * g[..., 0] * g[..., 1] + a * g[..., 1] ** 2
    return num / det


def _eig2(Hm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = Hm[..., 0, 0], 0.5 * (Hm[..., 0, 1] + Hm[..., 1, 0]), Hm[..., 1, 1]
    m = 0.5 * (a + c)
    d = np.hypot(0.5 * (a - c), b)
    return m - d, m + d


def tau_tilde(H: Hamiltonian, p) -> np.ndarray:
    """``H(p) / <(D^2 H(p))^{-1} DH(p), DH(p)>`` with the value 1/2 at ``p = 0``.

    Raises
    ------
    SingularHessianError
        If the Hessian is (numerically) singular at a non-zero point.
    """
    p = _as_points(p)
    zero = np.all(p == 0.0, axis=-1)
    safe = np.where(zero[..., None], 1.0, p)
    Hm = H.hess(safe)
    lo, hi = _eig2(Hm)
    bad = (~zero) & (lo <= SINGULAR_RATIO * np.abs(hi))
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise SingularHessianError(
            f"{H.name}: Hessian singular or indefinite at p={safe[tuple(idx)].tolist()}"
        )
    denom = _inverse_quadratic_form(Hm, H.grad(safe))
    val = H.eval(safe)
    # H and the form vanish together quadratically; on underflow use the p -> 0 limit
    under = zero | (denom <= 0.0) | (val <= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = val / np.where(under, 1.0, denom)
    return np.where(under, 0.5, out)


def level_radius(H: Hamiltonian, theta, level, tol: float = BISECTION_TOL) -> np.ndarray:
    """Radius ``r(theta)`` with ``H(r e_theta) = level``, by vectorised bisection."""
    theta = np.asarray(theta, dtype=float)
    level = np.broadcast_to(np.asarray(level, dtype=float), theta.shape)
    e = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    lo = np.zeros(theta.shape)
    hi = np.ones(theta.shape)
    cap = H.domain_radius
    if np.isfinite(cap):
        hi = np.minimum(hi, cap)
    for _ in range(200):
        over = H.eval(hi[..., None] * e) > level
        if over.all():
            break
        if np.isfinite(cap) and np.any(~over & (hi >= cap)):
            raise DomainError(f"{H.name}: sublevel set {{H <= {level.max():g}}} leaves the tabulated disc")
        lo = np.where(over, lo, hi)
        hi = np.where(over, hi, np.minimum(2 * hi, cap))
    else:
        raise HypothesisViolation(f"{H.name}: sublevel set appears unbounded (H not coercive)")
    scale = np.maximum(1.0, hi)
    while np.any(hi - lo > tol * scale):
        mid = 0.5 * (lo + hi)
        over = H.eval(mid[..., None] * e) > level
        hi = np.where(over, mid, hi)
        lo = np.where(over, lo, mid)
    return 0.5 * (lo + hi)


@dataclass
class AuxiliaryProfile:
    """Curvature moduli on the nested sublevel sets ``{H <= R}``.

    When ``last_is_infinity`` is set, the final entry of each array refers to
    the whole plane (``R_samples[-1] == inf``); ``infinity_exact`` tells
    whether that entry is known in closed form or estimated.
    """

    R_samples: np.ndarray
    lambda_of_R: np.ndarray
    Lambda_of_R: np.ndarray
    tau_of_R: np.ndarray | None = None
    last_is_infinity: bool = False
    infinity_exact: bool = False
    limit_estimate: bool = False
    non_monotone: bool = False
    ladder: list[dict] = field(default_factory=list)

    def at(self, R: float) -> dict:
        """Conservative moduli at level ``R``: smallest sample level ``>= R``."""
        idx = np.searchsorted(self.R_samples, R - 1e-14, side="left")
        if idx >= len(self.R_samples):
            raise DomainError(f"level {R} beyond the profiled range {self.R_samples[-1]}")
        out = {"R": float(self.R_samples[idx]), "lambda": float(self.lambda_of_R[idx]),
               "Lambda": float(self.Lambda_of_R[idx])}
        if self.tau_of_R is not None:
            out["tau"] = float(self.tau_of_R[idx])
        return out

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(x) for x in a]

        return {
            "R_samples": arr(self.R_samples), "lambda_of_R": arr(self.lambda_of_R),
            "Lambda_of_R": arr(self.Lambda_of_R), "tau_of_R": arr(self.tau_of_R),
            "last_is_infinity": self.last_is_infinity, "infinity_exact": self.infinity_exact,
            "limit_estimate": self.limit_estimate, "non_monotone": self.non_monotone,
            "ladder": self.ladder,
        }


def _sublevel_points(H: Hamiltonian, R: float, n_angles: int, n_radii: int) -> np.ndarray:
    theta = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    r = level_radius(H, theta, R)
    t = np.linspace(0.0, 1.0, n_radii)
    pts = (t[None, :, None] * r[:, None, None]) * np.stack([np.cos(theta), np.sin(theta)], -1)[:, None, :]
    return pts.reshape(-1, 2)


def _raw_profile(H, R_samples, n_angles, n_radii, want_tau):
    lam, Lam, tau = [], [], []
    for R in R_samples:
        pts = _sublevel_points(H, R, n_angles, n_radii)
        lo, hi = _eig2(H.hess(pts))
        lam.append(lo.min())
        Lam.append(hi.max())
        if want_tau:
            tau.append(min(0.5, float(tau_tilde(H, pts).min())))
    lam = np.minimum.accumulate(np.array(lam))
    Lam = np.maximum.accumulate(np.array(Lam))
    tau_arr = np.minimum.accumulate(np.array(tau)) if want_tau else None
    return lam, Lam, tau_arr


def _profile(H, R_max, n_samples, n_angles, n_radii, include_infinity, want_tau,
             delta_ladder, eps_shift, far_factor=100.0):
    if R_max <= 0 or n_samples < 1:
        raise ValidationError("R_max must be positive and n_samples >= 1")
    R = np.linspace(0.0, R_max, n_samples) if n_samples > 1 else np.array([R_max])
    if H.smoothness >= 2:
        lam, Lam, tau = _raw_profile(H, R, n_angles, n_radii, want_tau)
        prof = AuxiliaryProfile(R, lam, Lam, tau)
    else:
        prof = _ladder_profile(H, R, n_angles, n_radii, want_tau, delta_ladder, eps_shift)
    if include_infinity:
        far = None
        if H.global_moduli is not None:
            lam_inf, Lam_inf = H.global_moduli
            exact = H.global_moduli_exact
        else:
            far = _sublevel_points(H, far_factor * max(R_max, 1.0), n_angles, n_radii)
            lo, hi = _eig2(H.hess(far))
            lam_inf, Lam_inf, exact = float(lo.min()), float(hi.max()), False
        lam_inf = min(lam_inf, float(prof.lambda_of_R[-1]))
        Lam_inf = max(Lam_inf, float(prof.Lambda_of_R[-1]))
        prof.R_samples = np.append(prof.R_samples, np.inf)
        prof.lambda_of_R = np.append(prof.lambda_of_R, lam_inf)
        prof.Lambda_of_R = np.append(prof.Lambda_of_R, Lam_inf)
        if want_tau:
            if H.kind == "quad":
                tau_inf = 0.5
            else:
                if far is None:
                    far = _sublevel_points(H, far_factor * max(R_max, 1.0), n_angles, n_radii)
                tau_inf = min(float(prof.tau_of_R[-1]), float(tau_tilde(H, far).min()))
                exact = False
            prof.tau_of_R = np.append(prof.tau_of_R, tau_inf)
        prof.last_is_infinity = True
        prof.infinity_exact = bool(exact)
    return prof


def _ladder_profile(H, R, n_angles, n_radii, want_tau, delta_ladder, eps_shift):
    if delta_ladder is None:
        delta_ladder = [2.0**-j for j in range(1, 5)]
    rows = []
    for d in delta_ladder:
        Hd = mollify(H, d)
        lam, Lam, tau = _raw_profile(Hd, R + eps_shift, n_angles, n_radii, want_tau)
        rows.append((d, lam, Lam, tau))
    lam_stack = np.array([r[1] for r in rows])
    non_mono = False
    for series in [lam_stack] + ([np.array([r[3] for r in rows])] if want_tau else []):
        diffs = np.diff(series, axis=0)
        if len(diffs) and not (np.all(diffs <= 1e-12) or np.all(diffs >= -1e-12)):
            non_mono = True
    ladder = [{"delta": float(d), "lambda": lam.tolist(), "Lambda": Lam.tolist(),
               "tau": None if tau is None else tau.tolist()} for d, lam, Lam, tau in rows]
    if non_mono:
        logger.warning("%s: profile along the mollification ladder is not monotone", H.name)
    _, lam, Lam, tau = rows[-1]
    return AuxiliaryProfile(R, lam, Lam, tau, limit_estimate=True, non_monotone=non_mono, ladder=ladder)


def lambda_profile(H: Hamiltonian, R_max: float, n_samples: int = 32, *, n_angles: int = N_ANGLES,
                   n_radii: int = N_RADII, include_infinity: bool = False,
                   delta_ladder=None, eps_shift: float = 1e-3) -> AuxiliaryProfile:
    """Smallest and largest Hessian eigenvalue over ``{H <= R}``.

    ``R`` runs over ``n_samples`` equispaced levels in ``[0, R_max]``; each
    sublevel set is sampled on ``n_angles`` rays with ``n_radii`` points up
    to the boundary radius found by bisection.  Running extrema make the
    profile monotone, as it must be for nested sets.  Non-smooth ``H`` are
    handled through mollified approximations along ``delta_ladder``.
    """
    return _profile(H, R_max, n_samples, n_angles, n_radii, include_infinity, False,
                    delta_ladder, eps_shift)


def tau_profile(H: Hamiltonian, R_max: float, n_samples: int = 32, *, n_angles: int = N_ANGLES,
                n_radii: int = N_RADII, include_infinity: bool = False,
                delta_ladder=None, eps_shift: float = 1e-3) -> AuxiliaryProfile:
    """Like :func:`lambda_profile` but also fills ``tau_of_R = inf tau_tilde``."""
    return _profile(H, R_max, n_samples, n_angles, n_radii, include_infinity, True,
                    delta_ladder, eps_shift)


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def _bump_rule(n: int):
    """Tensor Gauss-Legendre nodes on [-1,1]^2 with the standard bump and its derivatives."""
    x, w = np.polynomial.legendre.leggauss(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    xi = np.stack([X.ravel(), Y.ravel()], axis=-1)
    W = W.ravel()
    s = np.einsum("ki,ki->k", xi, xi)
    inside = s < 1.0
    xi, W, s = xi[inside], W[inside], s[inside]
    q = 1.0 / (1.0 - s)
    eta = np.exp(-q)
    mass = np.sum(W * eta)
    d_eta = eta[:, None] * (-2.0 * q[:, None] ** 2 * xi)
    outer = xi[:, :, None] * xi[:, None, :]
    dd_eta = eta[:, None, None] * (
        4.0 * q[:, None, None] ** 4 * outer
        - 2.0 * q[:, None, None] ** 2 * np.eye(2)
        - 8.0 * q[:, None, None] ** 3 * outer
    )
    wn = W / mass
    return xi, wn * eta, wn[:, None] * d_eta, wn[:, None, None] * dd_eta


def _chunked(fn, p: np.ndarray, n_nodes: int, out_tail: tuple) -> np.ndarray:
    flat = p.reshape(-1, 2)
    out = np.empty((len(flat),) + out_tail)
    step = max(1, _CHUNK // max(n_nodes, 1))
    for s in range(0, len(flat), step):
        out[s:s + step] = fn(flat[s:s + step])
    return out.reshape(p.shape[:-1] + out_tail)


def mollify(H: Hamiltonian, delta: float, n_quad: int = 32, grad_tol: float = 1e-10,
            max_sweeps: int = 200) -> Hamiltonian:
    """Smooth approximation ``H^delta(p) = Hc(p + p_d) - Hc(p_d)``.

    ``Hc`` is the convolution of ``H`` with the bump ``exp(-1/(1-|x|^2))``
    rescaled to radius ``delta`` (normalised on an ``n_quad`` squared
    Gauss-Legendre rule), and ``p_d`` is its minimiser, located by
    coordinate descent with golden-section line searches.  Derivatives are
    convolutions as well: of the derivatives of ``H`` when those are exact,
    otherwise of the derivatives of the bump.
    """
    if not delta > 0:
        raise ValidationError("mollification radius must be positive")
    xi, w0, w1, w2 = _bump_rule(n_quad)
    shifts = delta * xi
    n_nodes = len(xi)
    base = H

    def conv_value(p):
        q = p[:, None, :] - shifts[None]
        return base.value_fn(q) @ w0

    def conv_grad(p):
        q = p[:, None, :] - shifts[None]
        if base.grad_fn is not None:
            return np.einsum("k,nki->ni", w0, base.grad_fn(q))
        return np.einsum("ki,nk->ni", w1, base.value_fn(q)) / delta

    def conv_hess(p):
        q = p[:, None, :] - shifts[None]
        if base.hess_fn is not None:
            return np.einsum("k,nkij->nij", w0, base.hess_fn(q))
        if base.grad_fn is not None:
            return np.einsum("kj,nki->nij", w1, base.grad_fn(q)) / delta
        return np.einsum("kij,nk->nij", w2, base.value_fn(q)) / delta**2

    def Hc(p):
        return _chunked(conv_value, p, n_nodes, ())

    def Hc_grad(p):
        return _chunked(conv_grad, p, n_nodes, (2,))

    def Hc_hess(p):
        out = _chunked(conv_hess, p, n_nodes, (2, 2))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    if np.isfinite(H.domain_radius) and delta >= H.domain_radius:
        raise DomainError("mollification radius exceeds the tabulated disc")

    # minimiser of the convolution
    pd = np.zeros(2)
    g = Hc_grad(pd)
    sweeps = 0
    while np.linalg.norm(g) > grad_tol and sweeps < max_sweeps:
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1.0
            step = max(delta, abs(g[i]))
            res = optimize.minimize_scalar(lambda t: float(Hc(pd + t * e)), bracket=(0.0, -np.sign(g[i]) * step),
                                           method="golden", tol=1e-12)
            pd = pd + res.x * e
        g = Hc_grad(pd)
        sweeps += 1
    if np.linalg.norm(g) > grad_tol:
        logger.warning("%s: minimiser search stopped at |grad| = %.2e", H.name, np.linalg.norm(g))
    h_at_pd = float(Hc(pd))

    def value(p):
        return Hc(p + pd) - h_at_pd

    def gradient(p):
        return Hc_grad(p + pd)

    def hessian(p):
        return Hc_hess(p + pd)

    dom = H.domain_radius - delta - np.linalg.norm(pd) if np.isfinite(H.domain_radius) else np.inf
    return Hamiltonian(
        name=f"{H.name}*bump({delta:g})", kind="mollified", smoothness=2,
        value_fn=value, grad_fn=gradient, hess_fn=hessian,
        params={"delta": float(delta), "base": H.name, "minimizer": pd.tolist(),
                "minimizer_grad": float(np.linalg.norm(g)), "shift": h_at_pd, "n_quad": int(n_quad)},
        domain_radius=dom,
    )


# ---------------------------------------------------------------------------
# global strong convexity / concavity
# ---------------------------------------------------------------------------

def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


def _smoothstep_d1(t):
    t = np.clip(t, 0.0, 1.0)
    return 30 * t**2 * (1 - t) ** 2


def _smoothstep_d2(t):
    t = np.clip(t, 0.0, 1.0)
    return 60 * t * (1 - t) * (1 - 2 * t)


def _radial_derivs(p, f, f1, f2):
    """Value, gradient and Hessian of ``x -> f(|x|)`` given ``f, f', f''`` at ``|x|``."""
    r = np.hypot(p[..., 0], p[..., 1])
    safe = np.where(r > 0, r, 1.0)
    e = p / safe[..., None]
    ee = e[..., :, None] * e[..., None, :]
    g = f1[..., None] * e
    ratio = np.where(r > 0, f1 / safe, f2)
    Hm = f2[..., None, None] * ee + ratio[..., None, None] * (np.eye(2) - ee)
    return f, g, Hm


def strongify(H: Hamiltonian, R: float, n_angles: int = N_ANGLES) -> Hamiltonian:
    """Globally strongly convex and strongly concave ``H~`` equal to ``H`` on ``{H <= R + 1}``.

    With ``rho`` the outer radius of ``{H <= R + 1}``, the construction is
    ``H~ = chi * H + k * psi`` where ``chi`` is a radial quintic cutoff (1 on
    ``|p| <= 3 rho``, 0 beyond ``4 rho``) and ``psi`` is a radial convex
    function vanishing on ``|p| <= 2 rho`` and quadratic beyond ``3 rho``.
    The stiffness ``k = 1 + 8 max |D^2 (chi H)|`` over the cutoff annulus
    makes the sum convex there because ``D^2 psi >= 1/3`` on it.
    """
    if not R >= 0:
        raise ValidationError("level R must be non-negative")
    theta = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    rho = float(level_radius(H, theta, R + 1.0).max()) * (1 + 1e-6)
    if np.isfinite(H.domain_radius) and 4 * rho > H.domain_radius:
        raise DomainError("strongify needs H on a disc four times the sublevel radius")

    def chi_parts(r):
        t = (r - 3 * rho) / rho
        return 1 - _smoothstep(t), -_smoothstep_d1(t) / rho, -_smoothstep_d2(t) / rho**2

    def psi_parts(r):
        t = (r - 2 * rho) / rho
        tc = np.clip(t, 0.0, 1.0)
        S1 = tc**6 - 3 * tc**5 + 2.5 * tc**4
        S2 = tc**7 / 7 - tc**6 / 2 + tc**5 / 2
        ex = np.maximum(r - 3 * rho, 0.0)
        f = 2 * rho**2 * S2 + rho * ex + ex**2
        f1 = 2 * rho * S1 + 2 * ex
        f2 = 2 * _smoothstep(t)
        return f, f1, f2

    def cut_parts(p):
        r = np.hypot(p[..., 0], p[..., 1])
        c, c1, c2 = chi_parts(r)
        cv, cg, ch = _radial_derivs(p, c, c1, c2)
        hv = H.eval(p)
        hg = H.grad(p)
        hh = H.hess(p)
        val = cv * hv
        gr = cv[..., None] * hg + hv[..., None] * cg
        he = (cv[..., None, None] * hh + hg[..., :, None] * cg[..., None, :]
              + cg[..., :, None] * hg[..., None, :] + hv[..., None, None] * ch)
        return val, gr, he

    # stiffness from the cutoff annulus
    rr = np.linspace(3 * rho, 4 * rho, 33)
    ring = (rr[None, :, None] * np.stack([np.cos(theta), np.sin(theta)], -1)[:, None, :]).reshape(-1, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ApproximateDerivativeWarning)
        _, _, hh = cut_parts(ring)
    lo, hi = _eig2(hh)
    k = 1.0 + 8.0 * float(np.max(np.maximum(np.abs(lo), np.abs(hi))))

    def parts(p):
        r = np.hypot(p[..., 0], p[..., 1])
        pv, pg, ph = _radial_derivs(p, *psi_parts(r))
        val = k * pv
        gr = k * pg
        he = k * ph
        if np.any(r < 4 * rho):
            sel = r < 4 * rho
            cv, cg, ch = cut_parts(p[sel])
            val = val.copy()
            val[sel] += cv
            gr[sel] += cg
            he[sel] += ch
        return val, gr, he

    def value(p):
        r = np.hypot(p[..., 0], p[..., 1])
        pv = _radial_derivs(p, *psi_parts(r))[0]
        out = k * pv
        sel = r < 4 * rho
        if np.any(sel):
            c = chi_parts(r[sel])[0]
            out = out.copy()
            out[sel] += c * H.eval(p[sel])
        return out

    def gradient(p):
        return parts(p)[1]

    def hessian(p):
        return parts(p)[2]

    # whole-plane moduli: beyond 4 rho the Hessian is k * psi'' which increases to 2k
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ApproximateDerivativeWarning)
        rs = np.linspace(0, 4 * rho, 129)
        disc = (rs[None, :, None] * np.stack([np.cos(theta), np.sin(theta)], -1)[:, None, :]).reshape(-1, 2)
        lo, hi = _eig2(hessian(disc))
    # sampled extremes, padded outward by 1% so they bound the eigenvalues between samples
    moduli = (0.99 * float(lo.min()), 1.01 * float(max(hi.max(), 2 * k)))

    return Hamiltonian(
        name=f"strong({H.name},R={R:g})", kind="strongified",
        smoothness=min(H.smoothness, 2), value_fn=value, grad_fn=gradient, hess_fn=hessian,
        params={"R": float(R), "rho": rho, "k": k, "base": H.name},
        global_moduli=moduli,
    )
