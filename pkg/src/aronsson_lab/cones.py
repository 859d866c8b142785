"""Cone functions, Lipschitz tests and comparison with cones.

The cone of level ``a`` is the support function of the sublevel set,
``C_a(x) = sup {p.x : H(p) <= a}``.  The sublevel boundary is tabulated as
``r(theta)`` on a uniform angle table; the supremum is located on the table
and refined by golden-section search in the angle.  For bulk evaluation a
periodic cubic spline of the exact support values ``s(phi) = C_a(e_phi)`` is
used, with ``C_a(x) = |x| s(arg x)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .diagnostics import EstimateReport, _estimate
from .errors import DataIOError, ValidationError
from .grid import Grid2D, GridFunction, gradient
from .hamiltonian import Hamiltonian, level_radius

N_TABLE = 512
N_SPLINE = 2048
GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


def _golden_max(f, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Vectorised golden-section search for the maximiser of a unimodal ``f`` on ``[lo, hi]``."""
    a, b = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while np.max(b - a) > tol:
        left = fc > fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        keep = np.where(left, c, d)
        fkeep = np.where(left, fc, fd)
        new = np.where(left, b - GOLDEN * (b - a), a + GOLDEN * (b - a))
        fnew = f(new)
        c = np.where(left, new, keep)
        d = np.where(left, keep, new)
        fc = np.where(left, fnew, fkeep)
        fd = np.where(left, fkeep, fnew)
    return 0.5 * (a + b)


@dataclass
class ConeFunction:
    """Cone ``C_a`` of a Hamiltonian with its boundary table ``theta -> r(theta)``."""

    H: Hamiltonian
    a: float
    n_angles: int = N_TABLE
    theta: np.ndarray = field(init=False, repr=False)
    radius: np.ndarray = field(init=False, repr=False)
    _spline: CubicSpline | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        if not self.a >= 0:
            raise ValidationError(f"cone level must be >= 0, got {self.a}")
        self.a = float(self.a)
        self.theta = np.linspace(0.0, 2 * np.pi, self.n_angles, endpoint=False)
        self.radius = (level_radius(self.H, self.theta, self.a) if self.a > 0
                       else np.zeros(self.n_angles))

    @property
    def max_radius(self) -> float:
        """``max {|p| : H(p) <= a}`` on the table; the Lipschitz constant of the cone."""
        return float(self.radius.max())

    def _r(self, theta):
        return level_radius(self.H, theta, self.a)

    def support(self, phi) -> np.ndarray:
        """Exact ``C_a(e_phi)`` by table search plus golden refinement."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        if self.a == 0:
            return np.zeros(phi.shape)
        table = self.radius[None, :] * np.cos(self.theta[None, :] - phi[:, None])
        i = np.argmax(table, axis=1)
        step = 2 * np.pi / self.n_angles
        lo, hi = self.theta[i] - step, self.theta[i] + step
        best = _golden_max(lambda t: self._r(t) * np.cos(t - phi), lo, hi)
        return np.maximum(self._r(best) * np.cos(best - phi), table[np.arange(len(phi)), i])

    def value(self, x) -> np.ndarray:
        """Exact ``C_a(x)`` for points ``x`` of shape ``(..., 2)``."""
        x = np.asarray(x, dtype=float)
        norm = np.hypot(x[..., 0], x[..., 1])
        out = np.zeros(norm.shape)
        nz = norm > 0
        if np.any(nz) and self.a > 0:
            out[nz] = norm[nz] * self.support(np.arctan2(x[..., 1][nz], x[..., 0][nz]))
        return out

    def fast(self, x) -> np.ndarray:
        """Spline approximation of ``C_a(x)`` for bulk evaluation."""
        x = np.asarray(x, dtype=float)
        if self.a == 0:
            return np.zeros(x.shape[:-1])
        if self._spline is None:
            phi = np.linspace(0.0, 2 * np.pi, N_SPLINE + 1)
            s = self.support(phi[:-1])
            self._spline = CubicSpline(phi, np.append(s, s[0]), bc_type="periodic")
        norm = np.hypot(x[..., 0], x[..., 1])
        ang = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
        return norm * self._spline(ang)

    __call__ = value

    def write_table(self, path) -> Path:
        """Write the boundary table as CSV rows ``theta,r``."""
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                fh.write("theta,r\n")
                for t, r in zip(self.theta, self.radius):
                    fh.write(f"{t:.17g},{r:.17g}\n")
        except OSError as exc:
            raise DataIOError(f"cannot write {path}: {exc}") from exc
        return path


def read_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``theta,r`` table written by :meth:`ConeFunction.write_table`."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["theta", "r"]:
        raise DataIOError(f"{path}: expected header theta,r")
    data = np.array([[float(c) for c in r] for r in rows[1:] if r])
    return data[:, 0], data[:, 1]


def cone_values(H: Hamiltonian, a, x, n_angles: int = N_TABLE) -> np.ndarray:
    """``C_{a_k}(x_k)`` for paired levels ``a`` of shape ``(n,)`` and points ``x`` of shape ``(n, 2)``.

    Same algorithm as :meth:`ConeFunction.value`, vectorised over levels.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[0] != x.shape[0]:
        raise ValidationError("levels and points must pair up")
    if np.any(~(a >= 0)):
        raise ValidationError("cone levels must be >= 0")
    norm = np.hypot(x[:, 0], x[:, 1])
    out = np.zeros(len(a))
    live = (norm > 0) & (a > 0)
    if not np.any(live):
        return out
    lv, nv = a[live], norm[live]
    phi = np.arctan2(x[live, 1], x[live, 0])
    theta = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    radius = level_radius(H, np.broadcast_to(theta, (len(lv), n_angles)), lv[:, None])
    table = radius * np.cos(theta[None, :] - phi[:, None])
    i = np.argmax(table, axis=1)
    step = 2 * np.pi / n_angles
    best = _golden_max(lambda t: level_radius(H, t, lv) * np.cos(t - phi), theta[i] - step, theta[i] + step)
    sup = np.maximum(level_radius(H, best, lv) * np.cos(best - phi), table[np.arange(len(lv)), i])
    out[live] = nv * sup
    return out


def cone_value(H: Hamiltonian, a: float, x) -> np.ndarray | float:
    """``C_a(x) = sup {p.x : H(p) <= a}``; scalar in, scalar out."""
    x = np.asarray(x, dtype=float)
    if not a >= 0:
        raise ValidationError(f"cone level must be >= 0, got {a}")
    pts = x.reshape(-1, 2)
    out = cone_values(H, np.full(len(pts), float(a)), pts)
    return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])


# ---------------------------------------------------------------------------
# Lipschitz characterisation
# ---------------------------------------------------------------------------

@dataclass
class LipschitzReport:
    passed: bool
    max_violation: float
    worst_pair: tuple
    n_segments: int
    level: float
    slack: float
    seed: int

    def summary(self) -> dict:
        return {"passed": self.passed, "max_violation": self.max_violation,
                "worst_pair": [list(map(float, p)) for p in self.worst_pair], "n_segments": self.n_segments,
                "level": self.level, "slack": self.slack, "seed": self.seed}


def lipschitz_characterization(u, H: Hamiltonian, a: float, n_segments: int = 10_000, seed: int = 0,
                               slack: float = 1e-8) -> LipschitzReport:
    """Test ``u(x) - u(y) <= C_a(x - y)`` on random node pairs.

    The grid rectangle is convex, so every segment between nodes lies in
    it.  Each segment is used in both orientations.  ``max_violation`` is
    the largest ``u(x) - u(y) - C_a(x - y)``; the test passes when it is at
    most ``slack * (1 + |u(x) - u(y)|)``.
    """
    u = getattr(u, "u", u)
    g = u.grid
    rng = np.random.default_rng(seed)
    n = g.nx * g.ny
    i = rng.integers(0, n, n_segments)
    j = rng.integers(0, n, n_segments)
    pts = g.points().reshape(-1, 2)
    vals = u.values.ravel()
    cone = ConeFunction(H, a)
    x = np.concatenate([pts[i], pts[j]])
    y = np.concatenate([pts[j], pts[i]])
    du = np.concatenate([vals[i] - vals[j], vals[j] - vals[i]])
    viol = du - cone.value(x - y)
    scaled = viol - slack * (1 + np.abs(du))
    k = int(np.argmax(scaled))
    return LipschitzReport(bool(scaled[k] <= 0), float(viol[k]), (x[k], y[k]), n_segments, float(a),
                           float(slack), int(seed))


# ---------------------------------------------------------------------------
# comparison with cones
# ---------------------------------------------------------------------------

@dataclass
class ConeComparisonReport:
    passed: bool
    worst_excess: float
    worst_trial: dict
    n_trials: int
    n_violations: int
    seed: int
    eps_slack: float
    trials: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"passed": self.passed, "worst_excess": self.worst_excess, "worst_trial": self.worst_trial,
                "n_trials": self.n_trials, "n_violations": self.n_violations, "seed": self.seed,
                "eps_slack": self.eps_slack,
                "note": "finite-resolution evidence; slack = 2 h L_local + eps_slack"}


def _cone_levels(level_range, n_levels):
    lo, hi = level_range
    if not 0 < lo <= hi:
        raise ValidationError(f"bad cone level range {level_range}")
    return np.geomspace(lo, hi, n_levels) if hi > lo else np.array([lo])


def _random_subrectangle(rng, g: Grid2D, contain, min_cells: int):
    """Node-aligned index box ``(i0, i1, j0, j1)`` inside the grid interior."""
    lo_i, hi_i = 1, g.nx - 2
    lo_j, hi_j = 1, g.ny - 2
    if contain is None:
        i0 = rng.integers(lo_i, hi_i - min_cells + 1)
        i1 = rng.integers(i0 + min_cells, hi_i + 1)
        j0 = rng.integers(lo_j, hi_j - min_cells + 1)
        j1 = rng.integers(j0 + min_cells, hi_j + 1)
        return i0, i1, j0, j1
    x0, x1, y0, y1 = contain
    ci0 = int(np.floor((x0 - g.x_min) / g.hx)) - 1
    ci1 = int(np.ceil((x1 - g.x_min) / g.hx)) + 1
    cj0 = int(np.floor((y0 - g.y_min) / g.hy)) - 1
    cj1 = int(np.ceil((y1 - g.y_min) / g.hy)) + 1
    if ci0 < lo_i or cj0 < lo_j or ci1 > hi_i or cj1 > hi_j:
        raise ValidationError("the region to contain does not fit inside the grid interior")
    return (rng.integers(lo_i, ci0 + 1), rng.integers(ci1, hi_i + 1),
            rng.integers(lo_j, cj0 + 1), rng.integers(cj1, hi_j + 1))


def _excess(vals, box):
    """Interior maximum minus boundary maximum of ``vals`` on the index box."""
    i0, i1, j0, j1 = box
    sub = vals[i0:i1 + 1, j0:j1 + 1]
    inner = sub[1:-1, 1:-1]
    edge = np.concatenate([sub[0], sub[-1], sub[1:-1, 0], sub[1:-1, -1]])
    return float(inner.max() - edge.max()), np.unravel_index(np.argmax(inner), inner.shape)


def comparison_with_cones(u, H: Hamiltonian, n_trials: int = 1000, seed: int = 0, eps_slack: float | None = None,
                          level_range=None, n_levels: int = 8, contain=None, min_cells: int = 4,
                          keep_trials: bool = False) -> ConeComparisonReport:
    """Random comparison-with-cones test from above and from below.

    Each trial draws a node-aligned rectangle ``V``, a vertex ``x0`` outside
    ``V`` (half the trials from the outer node ring, half from any node not
    in ``V``), and a level ``a``.  From above, ``u - C_a(. - x0)`` must attain
    its maximum over ``V`` on the boundary of ``V``; from below,
    ``u + C_a(x0 - .)`` must attain its minimum there.  The interior excess
    is compared with ``2 h L_local + eps_slack`` where ``L_local`` bounds the
    Lipschitz constant of the compared function on ``V``.

    ``eps_slack`` defaults to the regularisation parameter when ``u`` is a
    solve result, else 0.  ``level_range`` defaults to
    ``(max H(Du) / 100, 2 max H(Du))``.  With ``contain`` every ``V`` covers
    that rectangle (used to aim trials at a known feature).
    """
    res = u
    u = getattr(u, "u", u)
    if eps_slack is None:
        eps_slack = float(getattr(res, "eps", 0.0))
    g = u.grid
    gx, gy = gradient(u)
    D = np.stack([gx.values, gy.values], -1)
    speed = np.hypot(gx.values, gy.values)
    if level_range is None:
        top = float(H.eval(D).max())
        top = top if top > 0 else 1.0
        level_range = (top / 100, 2 * top)
    cones = [ConeFunction(H, a) for a in _cone_levels(level_range, n_levels)]
    rng = np.random.default_rng(seed)
    pts = g.points()
    ring = np.argwhere(g.boundary_mask())
    vals = u.values
    worst, n_bad, trials = None, 0, []
    for t in range(n_trials):
        box = _random_subrectangle(rng, g, contain, min_cells)
        i0, i1, j0, j1 = box
        if t % 2 == 0:
            vi, vj = ring[rng.integers(len(ring))]
        else:
            while True:
                vi, vj = rng.integers(g.nx), rng.integers(g.ny)
                if not (i0 <= vi <= i1 and j0 <= vj <= j1):
                    break
        cone = cones[rng.integers(len(cones))]
        x0 = pts[vi, vj]
        sub_pts = pts[i0:i1 + 1, j0:j1 + 1]
        L_local = float(speed[i0:i1 + 1, j0:j1 + 1].max()) + cone.max_radius
        slack = 2 * g.h * L_local + eps_slack
        full = np.zeros(g.shape)
        full[i0:i1 + 1, j0:j1 + 1] = vals[i0:i1 + 1, j0:j1 + 1] - cone.fast(sub_pts - x0)
        above, where_a = _excess(full, box)
        full[i0:i1 + 1, j0:j1 + 1] = -(vals[i0:i1 + 1, j0:j1 + 1] + cone.fast(x0 - sub_pts))
        below, where_b = _excess(full, box)
        excess = max(above, below)
        rec = {"trial": t, "V": [float(pts[i0, 0, 0]), float(pts[i1, 0, 0]), float(pts[0, j0, 1]),
                                 float(pts[0, j1, 1])],
               "x0": [float(x0[0]), float(x0[1])], "a": cone.a, "excess_above": above, "excess_below": below,
               "slack": slack, "violated": bool(excess > slack)}
        n_bad += rec["violated"]
        if keep_trials:
            trials.append(rec)
        if worst is None or excess - slack > worst["excess"] - worst["slack"]:
            worst = dict(rec, excess=excess)
    return ConeComparisonReport(n_bad == 0, float(worst["excess"] - worst["slack"]), worst, n_trials, int(n_bad),
                                int(seed), float(eps_slack), trials)


# ---------------------------------------------------------------------------
# McShane extension and the global Lipschitz bound
# ---------------------------------------------------------------------------

def mcshane_extend(boundary, L: float, grid: Grid2D | None = None, rtol: float = 1e-12) -> GridFunction:
    """McShane extension ``min_z [u(z) + L |x - z|]`` of boundary-ring data.

    It is the lower envelope of the upward cones at the ring nodes and hence
    the largest ``L``-Lipschitz extension: every other one lies below it.

    ``boundary`` is a grid function (only its outer ring is read) or a
    callable ``f(x, y)`` together with ``grid``.  The data must be
    ``L``-Lipschitz on the ring; otherwise the error names the worst pair.
    """
    if not L >= 0:
        raise ValidationError("Lipschitz constant must be >= 0")
    if callable(boundary) and not isinstance(boundary, GridFunction):
        if grid is None:
            raise ValidationError("a callable boundary needs a grid")
        boundary = grid.sample(boundary)
    g = boundary.grid
    ring = g.boundary_mask()
    z = g.points()[ring]
    uz = boundary.values[ring]
    dist = np.hypot(z[:, None, 0] - z[None, :, 0], z[:, None, 1] - z[None, :, 1])
    gap = np.abs(uz[:, None] - uz[None, :]) - L * dist
    tol = rtol * (1 + np.abs(uz[:, None]) + np.abs(uz[None, :]))
    k = np.argmax(gap - tol)
    a, b = np.unravel_index(k, gap.shape)
    if gap[a, b] > tol[a, b]:
        raise ValidationError(
            f"boundary data is not {L:g}-Lipschitz: |u({z[a][0]:.6g},{z[a][1]:.6g}) - u({z[b][0]:.6g},{z[b][1]:.6g})|"
            f" = {abs(uz[a] - uz[b]):.6g} > {L * dist[a, b]:.6g}")
    pts = g.points().reshape(-1, 2)
    out = np.empty(len(pts))
    for s in range(0, len(pts), 4096):
        p = pts[s:s + 4096]
        d = np.hypot(p[:, None, 0] - z[None, :, 0], p[:, None, 1] - z[None, :, 1])
        out[s:s + 4096] = np.min(uz[None, :] + L * d, axis=1)
    out = out.reshape(g.shape)
    out[ring] = uz
    return GridFunction(g, out)


def disk_sup(H: Hamiltonian, L: float, n_angles: int = 2048, n_radii: int = 64) -> float:
    """``sup {H(p) : |p| <= L}`` by polar sampling (boundary circle plus radial lines)."""
    th = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    r = np.linspace(0, L, n_radii)
    P = r[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]
    return float(H.eval(P).max())


def lipschitz_bound_check(u, H: Hamiltonian, L: float, rel_slack: float = 1e-6) -> EstimateReport:
    """``max over cells of H(D_cell u) <= sup_{|p| <= L} H(p)``.

    ``D_cell`` is the cell-centre gradient of the bilinear interpolant.
    """
    from .solver import cell_gradients

    u = getattr(u, "u", u)
    lhs = float(H.eval(cell_gradients(u)).max())
    rhs = disk_sup(H, L)
    return _estimate("lipschitz_bound", lhs, rhs, (rel_slack, 0.0), echo={"L": float(L)},
                     margin=rhs - lhs)


# ---------------------------------------------------------------------------
# cone approximation under mollification
# ---------------------------------------------------------------------------

def cone_approx_check(H: Hamiltonian, delta_ladder, a: float, n_levels: int = 5, n_dirs: int = 16,
                      n_quad: int = 24) -> dict:
    """Smallest ``eps`` with ``C^H_{b/(1+eps)} <= C^{H_delta}_b <= C^H_{(1+eps) b}``.

    Support functions of convex sets containing the origin are ordered
    exactly when the sets are nested, so the sandwich holds iff every
    boundary point ``p`` of ``{H_delta <= b}`` has
    ``b/(1+eps) <= H(p) <= (1+eps) b``.  The smallest ``eps`` is read off the
    boundary table for levels ``b`` in ``[a/2, 2a]``; the sandwich is then
    verified on cone values in ``n_dirs`` directions (cones are positively
    homogeneous, so one ring suffices).
    """
    from .hamiltonian import mollify

    if not a > 0:
        raise ValidationError("cone level must be positive")
    levels = np.geomspace(a / 2, 2 * a, n_levels)
    phi = np.linspace(0, 2 * np.pi, n_dirs, endpoint=False)
    x = np.stack([np.cos(phi), np.sin(phi)], -1)
    rows = []
    for delta in delta_ladder:
        Hd = mollify(H, float(delta), n_quad=n_quad)
        worst, verified = 0.0, True
        for b in levels:
            cd = ConeFunction(Hd, b)
            P = cd.radius[:, None] * np.stack([np.cos(cd.theta), np.sin(cd.theta)], -1)
            hv = H.eval(P)
            e = float(max(np.max(hv / b) - 1.0, np.max(b / hv) - 1.0, 0.0))
            worst = max(worst, e)
            mid = cd.value(x)
            lo = ConeFunction(H, b / (1 + e)).value(x)
            hi = ConeFunction(H, b * (1 + e)).value(x)
            tol = 1e-9 * (1 + mid)
            verified &= bool(np.all(lo <= mid + tol) and np.all(mid <= hi + tol))
        rows.append({"delta": float(delta), "eps": worst, "verified": verified})
    return {"a": float(a), "levels": levels.tolist(), "rows": rows,
            "decreasing": all(r1["eps"] >= r2["eps"] - 1e-8 for r1, r2 in zip(rows, rows[1:]))}
