"""Minimisers of the discrete exponential energy ``int exp(H(Dv)/eps)``.

Gradients are those of the bilinear interpolant, evaluated at the 2x2 Gauss
points of every cell (or at the cell centre on request).  The energy is minimised over the interior node values by a
damped Newton method (Armijo backtracking) with a preconditioned gradient
step as fallback.  All arithmetic is done on the shifted energy
``exp((H - M)/eps)`` with ``M = max H``, so large ``H/eps`` never overflows;
the reported energy switches to ``eps * log(energy)`` when ``max H/eps``
exceeds :data:`LOG_DOMAIN_THRESHOLD`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EnergyOverflowError, NumericalError, ValidationError
from .grid import Grid2D, GridFunction, gradient, hessian
from .hamiltonian import Hamiltonian, mollify

logger = logging.getLogger(__name__)

LOG_DOMAIN_THRESHOLD = 500.0
_EXP_CAP = 700.0


@dataclass(frozen=True)
class SolveConfig:
    eps: float = 0.1
    max_iters: int = 200
    grad_tol: float = 1e-9
    damping: float = 1.0
    continuation_ladder: tuple[float, ...] = ()
    linear_solver: str = "direct"
    quadrature: str = "gauss2"
    log_domain: bool | str = "auto"
    armijo: float = 1e-4
    max_backtracks: int = 60
    step_tol: float = 1e-11

    def __post_init__(self):
        if not self.eps > 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")
        if not (0 < self.damping <= 1):
            raise ValidationError("damping must lie in (0, 1]")
        if self.max_iters < 0 or not self.grad_tol > 0:
            raise ValidationError("max_iters must be >= 0 and grad_tol > 0")
        if self.linear_solver not in ("direct", "cg"):
            raise ValidationError(f"unknown linear solver {self.linear_solver!r}")
        if self.quadrature not in ("gauss2", "center"):
            raise ValidationError(f"unknown quadrature {self.quadrature!r}")
        lad = tuple(float(e) for e in self.continuation_ladder)
        if any(e <= 0 for e in lad) or any(b >= a for a, b in zip(lad, lad[1:])):
            raise ValidationError("continuation ladder must be positive and strictly decreasing")
        object.__setattr__(self, "continuation_ladder", lad)


@dataclass
class SolveResult:
    u: GridFunction
    energy: float
    residual: float
    iters: int
    converged: bool
    trace: list[dict] = field(default_factory=list)
    eps: float = float("nan")
    log_energy: bool = False
    grad_norm: float = float("nan")
    prev_sup_diff: float | None = None

    def meta(self) -> dict:
        return {"eps": self.eps, "energy": self.energy, "log_energy": self.log_energy,
                "residual": self.residual, "iters": self.iters, "converged": self.converged,
                "grad_norm": self.grad_norm, "prev_sup_diff": self.prev_sup_diff}


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------

def aronsson_function(x, y):
    """``|x|^{4/3} - |y|^{4/3}``."""
    return np.abs(x) ** (4.0 / 3.0) - np.abs(y) ** (4.0 / 3.0)


def linear_function(a: float, b: float, c: float = 0.0) -> Callable:
    return lambda x, y: a * x + b * y + c


def boundary_values(grid: Grid2D, data) -> GridFunction:
    """Normalise boundary data to a grid function (interior values are a placeholder).

    ``data`` may be a :class:`GridFunction`, an array of node values or a
    callable ``f(X, Y)``.
    """
    if isinstance(data, GridFunction):
        if data.grid != grid:
            raise ValidationError("boundary data lives on a different grid")
        return data
    if callable(data):
        return grid.sample(data)
    arr = np.asarray(data, dtype=float)
    return GridFunction(grid, arr)


# ---------------------------------------------------------------------------
# discretisation
# ---------------------------------------------------------------------------

_GAUSS = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class _Discretisation:
    """Sparse maps from node values to gradients at the quadrature points.

    ``quadrature="gauss2"`` evaluates the bilinear gradient at the 2x2 Gauss
    points of each cell; ``"center"`` uses the cell centre only.  The
    centre rule cannot see the checkerboard mode ``(-1)^(i+j)`` and lets it
    grow at small eps, so it is kept for comparison only.
    """

    def __init__(self, grid: Grid2D, quadrature: str = "gauss2"):
        self.grid = grid
        nx, ny = grid.shape
        ncell = (nx - 1) * (ny - 1)
        idx = np.arange(nx * ny).reshape(nx, ny)
        c00, c10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        c01, c11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
        cols = np.concatenate([c00, c10, c01, c11])
        if quadrature == "center":
            pts = [(0.5, 0.5)]
        elif quadrature == "gauss2":
            pts = [(a, b) for a in _GAUSS for b in _GAUSS]
        else:
            raise ValidationError(f"unknown quadrature {quadrature!r}")
        bx, by, rows = [], [], []
        for q, (xi, eta) in enumerate(pts):
            r = np.tile(np.arange(ncell) + q * ncell, 4)
            # d/dx and d/dy of the bilinear interpolant at (xi, eta) for corners 00, 10, 01, 11
            wx = np.array([-(1 - eta), (1 - eta), -eta, eta]) / grid.hx
            wy = np.array([-(1 - xi), -xi, (1 - xi), xi]) / grid.hy
            bx.append(np.repeat(wx, ncell))
            by.append(np.repeat(wy, ncell))
            rows.append(r)
        nq = len(pts) * ncell
        n = nx * ny
        rows = np.concatenate(rows)
        allcols = np.tile(cols, len(pts))
        self.Bx = sp.csr_matrix((np.concatenate(bx), (rows, allcols)), shape=(nq, n))
        self.By = sp.csr_matrix((np.concatenate(by), (rows, allcols)), shape=(nq, n))
        self.interior = np.nonzero(grid.interior_mask().ravel())[0]
        self.BxI = self.Bx[:, self.interior].tocsc()
        self.ByI = self.By[:, self.interior].tocsc()
        self.area = grid.hx * grid.hy / len(pts)
        self.quadrature = quadrature

    def cell_gradients(self, v: np.ndarray) -> np.ndarray:
        flat = v.ravel()
        return np.stack([self.Bx @ flat, self.By @ flat], axis=-1)


def cell_gradients(u: GridFunction) -> np.ndarray:
    """Bilinear cell-centre gradients, shape ``(nx-1, ny-1, 2)``."""
    g = u.grid
    v = u.values
    gx = (v[1:, 1:] + v[1:, :-1] - v[:-1, 1:] - v[:-1, :-1]) / (2 * g.hx)
    gy = (v[1:, 1:] + v[:-1, 1:] - v[1:, :-1] - v[:-1, :-1]) / (2 * g.hy)
    return np.stack([gx, gy], axis=-1)


class _Energy:
    """Shifted exponential energy and its derivatives in the interior unknowns."""

    def __init__(self, H: Hamiltonian, disc: _Discretisation, eps: float):
        self.H, self.disc, self.eps = H, disc, eps

    def hvals(self, v):
        g = self.disc.cell_gradients(v)
        return g, self.H.eval(g)

    def shifted(self, hv, M):
        z = (hv - M) / self.eps
        if np.max(z) > _EXP_CAP:
            return np.inf
        return float(np.sum(np.exp(z)) * self.disc.area)

    def derivatives(self, v, M, want_hessian=True):
        d, eps = self.disc, self.eps
        g, hv = self.hvals(v)
        w = np.exp((hv - M) / eps) * d.area
        S = float(np.sum(w))
        dp = self.H.grad(g)
        q = (w / eps)[:, None] * dp
        grad = d.BxI.T @ q[:, 0] + d.ByI.T @ q[:, 1]
        if not want_hessian:
            return S, grad, None
        Hm = self.H.hess(g)
        coef = (w / eps)[:, None, None] * (Hm + dp[:, :, None] * dp[:, None, :] / eps)
        kxx = sp.diags(coef[:, 0, 0])
        kxy = sp.diags(0.5 * (coef[:, 0, 1] + coef[:, 1, 0]))
        kyy = sp.diags(coef[:, 1, 1])
        K = (d.BxI.T @ kxx @ d.BxI + d.BxI.T @ kxy @ d.ByI + d.ByI.T @ kxy @ d.BxI + d.ByI.T @ kyy @ d.ByI)
        return S, grad, K.tocsc()


def harmonic_extension(grid: Grid2D, boundary: GridFunction) -> GridFunction:
    """Five-point discrete harmonic function with the given boundary ring."""
    nx, ny = grid.shape
    Lx = sp.diags([1, -2, 1], [-1, 0, 1], shape=(nx, nx)) / grid.hx**2
    Ly = sp.diags([1, -2, 1], [-1, 0, 1], shape=(ny, ny)) / grid.hy**2
    L = (sp.kron(Lx, sp.identity(ny)) + sp.kron(sp.identity(nx), Ly)).tocsr()
    inner = np.nonzero(grid.interior_mask().ravel())[0]
    outer = np.nonzero(grid.boundary_mask().ravel())[0]
    b = boundary.values.ravel()
    rhs = -(L[inner][:, outer] @ b[outer])
    sol = spla.spsolve(L[inner][:, inner].tocsc(), rhs)
    v = b.copy()
    v[inner] = sol
    return GridFunction(grid, v.reshape(grid.shape))


def _linear_solve(K, rhs, how: str, tol: float):
    # symmetric Jacobi scaling: exp(H/eps) weights span hundreds of orders of magnitude
    dinv = 1.0 / np.sqrt(K.diagonal())
    D = sp.diags(dinv)
    Ks = (D @ K @ D).tocsc()
    bs = dinv * rhs
    if how == "cg":
        y, info = spla.cg(Ks, bs, rtol=tol, maxiter=10 * K.shape[0])
        if info != 0:
            return None
    else:
        try:
            y = spla.spsolve(Ks, bs)
        except RuntimeError:
            return None
    x = dinv * y
    if not np.all(np.isfinite(x)):
        return None
    return x


def _newton(H, grid, bvals, v0, eps, cfg: SolveConfig, trace: list, disc=None):
    disc = disc or _Discretisation(grid, cfg.quadrature)
    E = _Energy(H, disc, eps)
    v = v0.values.copy()
    b = bvals.values
    bm = grid.boundary_mask()
    v[bm] = b[bm]
    inner = disc.interior
    converged = False
    it = 0
    rel = np.inf
    last_step = np.inf
    for it in range(cfg.max_iters + 1):
        _, hv = E.hvals(v)
        M = float(np.max(hv))
        S, g, K = E.derivatives(v, M, want_hessian=True)
        floor = np.exp(-M / eps) if M / eps < _EXP_CAP else 0.0
        rel = float(np.max(np.abs(g)) / (floor + S)) if g.size else 0.0
        log_e = M + eps * np.log(S)
        if rel <= cfg.grad_tol and last_step <= cfg.step_tol:
            converged = True
            trace.append({"eps": eps, "iter": it, "log_energy": log_e, "grad_rel": rel, "step": 0.0,
                          "method": "done"})
            break
        if it == cfg.max_iters:
            trace.append({"eps": eps, "iter": it, "log_energy": log_e, "grad_rel": rel, "step": 0.0,
                          "method": "stop"})
            break
        method = "newton"
        d = _linear_solve(K, -g, cfg.linear_solver, 1e-2 * cfg.grad_tol)
        if d is None or float(g @ d) >= 0:
            method = "gradient"
            d = -g / K.diagonal()
        slope = float(g @ d)
        t = cfg.damping
        flat = v.ravel()
        accepted = False
        if abs(slope) > 1e-12 * S:
            for _ in range(cfg.max_backtracks):
                trial = flat.copy()
                trial[inner] += t * d
                S_new = E.shifted(E.hvals(trial)[1], M)
                if S_new <= S + cfg.armijo * t * slope:
                    accepted = True
                    break
                t *= 0.5
        else:
            # the energy no longer resolves the decrease (regions where exp((H-M)/eps)
            # is tiny); backtrack on the Jacobi-scaled gradient instead
            method += "/scaled"
            diag = K.diagonal()
            merit = np.linalg.norm(g / diag)
            for _ in range(cfg.max_backtracks):
                trial = flat.copy()
                trial[inner] += t * d
                _, g_new, _ = E.derivatives(trial.reshape(grid.shape), M, want_hessian=False)
                if np.linalg.norm(g_new / diag) <= (1 - cfg.armijo * t) * merit:
                    accepted = True
                    break
                t *= 0.5
        if not accepted:
            trace.append({"eps": eps, "iter": it, "log_energy": log_e, "grad_rel": rel, "step": 0.0,
                          "method": "linesearch-failed"})
            break
        v = trial.reshape(grid.shape)
        last_step = float(t * np.max(np.abs(d))) if d.size else 0.0
        trace.append({"eps": eps, "iter": it, "log_energy": log_e, "grad_rel": rel, "step": t, "method": method})
    _, hv = E.hvals(v)
    M = float(np.max(hv))
    S = E.shifted(hv, M)
    return GridFunction(grid, v), M, S, rel, converged, it


def _report_energy(M, S, eps, mode):
    log_val = M + eps * np.log(S)
    big = M / eps > LOG_DOMAIN_THRESHOLD
    if big and mode is False:
        raise EnergyOverflowError(
            f"max H/eps = {M / eps:.1f} exceeds {LOG_DOMAIN_THRESHOLD:g}; increase eps or enable log-domain mode"
        )
    if big or mode is True:
        return float(log_val), True
    return float(np.exp(M / eps) * S), False


def solve_exp_harmonic(H: Hamiltonian, grid: Grid2D, boundary, cfg: SolveConfig | None = None,
                       initial: GridFunction | None = None) -> SolveResult:
    """Minimise the discrete exponential energy with the given Dirichlet data.

    Parameters
    ----------
    H : Hamiltonian
        Needs closed-form (or quadrature) gradient and Hessian.
    grid : Grid2D
    boundary : GridFunction, array or callable
        Only the outer ring of node values is used.
    cfg : SolveConfig
        ``continuation_ladder`` entries larger than ``cfg.eps`` are solved
        first, each warm starting the next.
    initial : GridFunction, optional
        Starting iterate; the discrete harmonic extension by default.

    Returns
    -------
    SolveResult
        ``converged`` is False (not an exception) when the iteration budget
        runs out.
    """
    cfg = cfg or SolveConfig()
    if not H.exact_derivatives:
        raise ValidationError(f"{H.name} has no exact derivatives; mollify it first")
    bvals = boundary_values(grid, boundary)
    v = initial if initial is not None else harmonic_extension(grid, bvals)
    ladder = [e for e in cfg.continuation_ladder if e > cfg.eps] + [cfg.eps]
    trace: list[dict] = []
    disc = _Discretisation(grid, cfg.quadrature)
    total = 0
    for eps in ladder:
        v, M, S, rel, conv, it = _newton(H, grid, bvals, v, eps, cfg, trace, disc)
        total += it
    energy, logged = _report_energy(M, S, cfg.eps, cfg.log_domain)
    res = residual_aronsson(H, v, cfg.eps)
    return SolveResult(u=v, energy=energy, residual=res.sup_norm(grid.interior_mask()), iters=total,
                       converged=conv, trace=trace, eps=cfg.eps, log_energy=logged, grad_norm=rel)


def discrete_energy(H: Hamiltonian, u: GridFunction, eps: float, quadrature: str = "gauss2") -> float:
    """``sum_q exp(H(Du(q))/eps) w_q`` over the quadrature points (may overflow to inf)."""
    disc = _Discretisation(u.grid, quadrature)
    g = disc.cell_gradients(u.values)
    with np.errstate(over="ignore"):
        return float(np.sum(np.exp(H.eval(g) / eps)) * disc.area)


def energy_gradient(H: Hamiltonian, u: GridFunction, eps: float, quadrature: str = "gauss2") -> np.ndarray:
    """Gradient of :func:`discrete_energy` in the interior node values (unshifted)."""
    disc = _Discretisation(u.grid, quadrature)
    E = _Energy(H, disc, eps)
    _, g, _ = E.derivatives(u.values, 0.0, want_hessian=False)
    return g


def residual_aronsson(H: Hamiltonian, u: GridFunction, eps: float) -> GridFunction:
    """``<D^2u DpH, DpH> + eps tr(D^2H D^2u)`` at interior nodes (zero on the boundary)."""
    gx, gy = gradient(u)
    uxx, uxy, uyy = hessian(u)
    P = np.stack([gx.values, gy.values], axis=-1)
    D2 = np.stack([np.stack([uxx.values, uxy.values], -1), np.stack([uxy.values, uyy.values], -1)], -2)
    g = H.grad(P)
    Hm = H.hess(P)
    A = np.einsum("...i,...ij,...j->...", g, D2, g)
    div = np.einsum("...ij,...ji->...", Hm, D2)
    r = A + eps * div
    r[u.grid.boundary_mask()] = 0.0
    return GridFunction(u.grid, r)


def eps_continuation(H: Hamiltonian, grid: Grid2D, boundary, ladder: Sequence[float],
                     cfg: SolveConfig | None = None) -> list[SolveResult]:
    """Solve along a strictly decreasing ladder, warm starting each rung.

    ``prev_sup_diff`` of each result holds the sup-norm distance to the
    previous rung's solution.
    """
    ladder = [float(e) for e in ladder]
    if not ladder or any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValidationError("eps ladder must be non-empty, positive and strictly decreasing")
    base = cfg or SolveConfig()
    out: list[SolveResult] = []
    prev = None
    for eps in ladder:
        c = replace(base, eps=eps, continuation_ladder=())
        r = solve_exp_harmonic(H, grid, boundary, c, initial=None if prev is None else prev.u)
        if prev is not None:
            r.prev_sup_diff = float(np.max(np.abs(r.u.values - prev.u.values)))
        out.append(r)
        prev = r
    return out


@dataclass
class DeltaStage:
    delta: float
    hamiltonian: Hamiltonian
    results: list[SolveResult]
    linf_on_V: list[float]
    coarse: bool

    def summary(self) -> dict:
        return {"delta": self.delta, "coarse": self.coarse, "H": self.hamiltonian.describe(),
                "eps": [r.eps for r in self.results], "linf_on_V": self.linf_on_V,
                "converged": [r.converged for r in self.results]}


def linf_H_on(H: Hamiltonian, u: GridFunction, V=None) -> float:
    """``max H(Du)`` over the nodes of ``V`` (all nodes when ``V`` is None)."""
    gx, gy = gradient(u)
    vals = H.eval(np.stack([gx.values, gy.values], axis=-1))
    if V is None:
        return float(vals.max())
    mask = u.grid.region_mask(V)
    if not mask.any():
        raise ValidationError("region contains no grid nodes")
    return float(vals[mask].max())


def delta_pipeline(H: Hamiltonian, grid: Grid2D, boundary, delta_ladder: Sequence[float],
                   eps_ladder: Sequence[float], V=None, cfg: SolveConfig | None = None,
                   n_quad: int = 32) -> list[DeltaStage]:
    """Mollify ``H`` at each ``delta`` and run an eps continuation with the result.

    Stages with ``delta >= 0.5`` (or a single-rung ladder) are flagged coarse.
    """
    deltas = [float(d) for d in delta_ladder]
    if not deltas or any(d <= 0 for d in deltas):
        raise ValidationError("delta ladder must be non-empty and positive")
    stages = []
    for d in deltas:
        Hd = mollify(H, d, n_quad=n_quad)
        res = eps_continuation(Hd, grid, boundary, eps_ladder, cfg)
        linf = [linf_H_on(Hd, r.u, V) for r in res]
        stages.append(DeltaStage(d, Hd, res, linf, coarse=(len(deltas) == 1 or d >= 0.5)))
        if not all(r.converged for r in res):
            logger.warning("delta=%g: some eps rungs did not converge", d)
    return stages


__all__ = [
    "SolveConfig", "SolveResult", "solve_exp_harmonic", "residual_aronsson", "eps_continuation",
    "delta_pipeline", "harmonic_extension", "aronsson_function", "linear_function", "boundary_values",
    "cell_gradients", "discrete_energy", "energy_gradient", "linf_H_on", "DeltaStage", "NumericalError",
]
