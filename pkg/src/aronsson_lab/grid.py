"""Uniform node grids on rectangles, finite-difference stencils and CSV I/O.

Arrays are indexed ``values[i, j]`` with ``i`` along ``x`` and ``j`` along
``y``.  First derivatives use second-order central differences in the
interior and second-order one-sided differences on the boundary; second
derivatives use the three-point stencil (one-sided four-point on the
boundary) and the cross stencil for the mixed term.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataIOError, DomainError, ValidationError


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    x_min: float = -1.0
    x_max: float = 1.0
    y_min: float = -1.0
    y_max: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 3 or self.ny < 3:
            raise ValidationError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.ny}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValidationError("grid extents must be increasing")

    @classmethod
    def square(cls, n: int, box=(-1.0, 1.0, -1.0, 1.0)) -> "Grid2D":
        return cls(n, n, *map(float, box))

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def points(self) -> np.ndarray:
        X, Y = self.mesh()
        return np.stack([X, Y], axis=-1)

    def boundary_mask(self, rings: int = 1) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[:rings, :] = m[-rings:, :] = True
        m[:, :rings] = m[:, -rings:] = True
        return m

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def region_mask(self, box, closed: bool = True) -> np.ndarray:
        """Nodes inside the rectangle ``box = (x0, x1, y0, y1)``."""
        x0, x1, y0, y1 = box
        tol = 1e-9 * self.h
        X, Y = self.mesh()
        if closed:
            return (X >= x0 - tol) & (X <= x1 + tol) & (Y >= y0 - tol) & (Y <= y1 + tol)
        return (X > x0 + tol) & (X < x1 - tol) & (Y > y0 + tol) & (Y < y1 - tol)

    def contains_box(self, box) -> bool:
        x0, x1, y0, y1 = box
        tol = 1e-12 * max(1.0, abs(self.x_max), abs(self.y_max))
        return (x0 < x1 and y0 < y1 and x0 >= self.x_min - tol and x1 <= self.x_max + tol
                and y0 >= self.y_min - tol and y1 <= self.y_max + tol)

    def trapezoid_weights(self) -> np.ndarray:
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy)

    def sample(self, f) -> "GridFunction":
        X, Y = self.mesh()
        return GridFunction(self, np.broadcast_to(f(X, Y), self.shape))

    def describe(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "box": list(self.box)}


class GridFunction:
    """Node values on a :class:`Grid2D`; the value array is read-only."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: Grid2D, values):
        values = np.array(values, dtype=float)
        if values.shape != grid.shape:
            raise ValidationError(f"values shape {values.shape} does not match grid {grid.shape}")
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    def __repr__(self):
        return f"GridFunction({self.grid.nx}x{self.grid.ny})"

    def _lift(self, other):
        if isinstance(other, GridFunction):
            if other.grid != self.grid:
                raise ValidationError("grid functions live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._lift(other))

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def sup_norm(self, mask=None) -> float:
        v = self.values if mask is None else self.values[mask]
        return float(np.max(np.abs(v))) if v.size else 0.0


class TestFunction(GridFunction):
    """Non-negative cutoff that vanishes on the two outermost node rings.

    ``c_grad`` and ``c_hess`` record ``max |D phi| * d`` and
    ``max |D^2 phi| * d^2`` where ``d`` is the width of the transition
    layer, i.e. the constants in ``|D phi| <= C/d`` and ``|D^2 phi| <= C/d^2``.
    """

    __slots__ = ("c_grad", "c_hess", "width", "kind")
    __test__ = False  # not a pytest class

    def __init__(self, grid, values, width: float, kind: str):
        super().__init__(grid, values)
        if np.any(self.values < 0) or np.any(self.values[grid.boundary_mask(2)] != 0):
            raise ValidationError("test function must be >= 0 and vanish on the two outer rings")
        gx, gy = gradient(GridFunction(grid, self.values))
        hxx, hxy, hyy = hessian(GridFunction(grid, self.values))
        self.width = float(width)
        self.kind = kind
        self.c_grad = float(np.max(np.hypot(gx.values, gy.values))) * width
        hnorm = np.sqrt(hxx.values**2 + 2 * hxy.values**2 + hyy.values**2)
        self.c_hess = float(np.max(hnorm)) * width**2


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t**2)


def cutoff(grid: Grid2D, inner, outer=None) -> TestFunction:
    """Tensor-product cutoff equal to 1 on ``inner`` and 0 outside ``outer``.

    ``outer`` defaults to the grid rectangle shrunk by two cells, so the
    result always vanishes on the two outermost rings.  The ramps are
    quintic smoothsteps along each axis.
    """
    gx0, gx1 = grid.x_min + 2 * grid.hx, grid.x_max - 2 * grid.hx
    gy0, gy1 = grid.y_min + 2 * grid.hy, grid.y_max - 2 * grid.hy
    if outer is None:
        outer = (gx0, gx1, gy0, gy1)
    ox0, ox1, oy0, oy1 = max(outer[0], gx0), min(outer[1], gx1), max(outer[2], gy0), min(outer[3], gy1)
    ix0, ix1, iy0, iy1 = inner
    if not (ox0 < ix0 < ix1 < ox1 and oy0 < iy0 < iy1 < oy1):
        raise DomainError("inner rectangle must sit strictly inside the usable outer rectangle")

    def ramp(s, a, b, c, d):
        up = _smoothstep((s - a) / (b - a))
        down = _smoothstep((d - s) / (d - c))
        return np.minimum(up, down)

    X, Y = grid.mesh()
    vals = ramp(X, ox0, ix0, ix1, ox1) * ramp(Y, oy0, iy0, iy1, oy1)
    width = min(ix0 - ox0, ox1 - ix1, iy0 - oy0, oy1 - iy1)
    return TestFunction(grid, vals, width, "cutoff")


def bump(grid: Grid2D, center, radius: float) -> TestFunction:
    """Smooth bump ``exp(1 - 1/(1-|x-c|^2/r^2))`` (peak value 1)."""
    X, Y = grid.mesh()
    s = ((X - center[0]) ** 2 + (Y - center[1]) ** 2) / radius**2
    with np.errstate(divide="ignore", over="ignore"):
        vals = np.where(s < 1.0, np.exp(1.0 - 1.0 / np.where(s < 1.0, 1.0 - s, 1.0)), 0.0)
    return TestFunction(grid, vals, radius, "bump")


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def gradient(f: GridFunction) -> tuple[GridFunction, GridFunction]:
    g = f.grid
    gx, gy = np.gradient(f.values, g.hx, g.hy, edge_order=2)
    return GridFunction(g, gx), GridFunction(g, gy)


def _second(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    if v.shape[0] >= 4:
        out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
        out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def hessian(f: GridFunction) -> tuple[GridFunction, GridFunction, GridFunction]:
    """Return ``(f_xx, f_xy, f_yy)``."""
    g = f.grid
    fxx = _second(f.values, g.hx, 0)
    fyy = _second(f.values, g.hy, 1)
    fy = np.gradient(f.values, g.hy, axis=1, edge_order=2)
    fxy = np.gradient(fy, g.hx, axis=0, edge_order=2)
    return GridFunction(g, fxx), GridFunction(g, fxy), GridFunction(g, fyy)


def divergence(vx: GridFunction, vy: GridFunction) -> GridFunction:
    g = vx.grid
    if vy.grid != g:
        raise ValidationError("vector components live on different grids")
    return GridFunction(g, np.gradient(vx.values, g.hx, axis=0, edge_order=2)
                        + np.gradient(vy.values, g.hy, axis=1, edge_order=2))


def integrate(f: GridFunction, phi: GridFunction | None = None) -> float:
    """Trapezoid rule for ``int f phi``."""
    v = f.values if phi is None else f.values * f._lift(phi)
    return float(np.sum(v * f.grid.trapezoid_weights()))


def box_weights(grid: Grid2D, box) -> np.ndarray:
    """Trapezoid weights of the node-aligned part of ``box`` (zero elsewhere)."""
    if not grid.contains_box(box):
        raise DomainError(f"region {tuple(box)} is not inside the grid {grid.box}")
    x0, x1, y0, y1 = box
    tol = 1e-9 * grid.h
    ix = np.nonzero((grid.x >= x0 - tol) & (grid.x <= x1 + tol))[0]
    iy = np.nonzero((grid.y >= y0 - tol) & (grid.y <= y1 + tol))[0]
    if len(ix) < 2 or len(iy) < 2:
        raise DomainError(f"region {tuple(box)} contains fewer than 2x2 grid nodes")
    wx = np.zeros(grid.nx)
    wx[ix] = grid.hx
    wx[ix[[0, -1]]] *= 0.5
    wy = np.zeros(grid.ny)
    wy[iy] = grid.hy
    wy[iy[[0, -1]]] *= 0.5
    return np.outer(wx, wy)


def region_weights(grid: Grid2D, region) -> np.ndarray:
    """Quadrature weights for a rectangle ``(x0, x1, y0, y1)`` or a boolean node mask."""
    if region is None:
        return grid.trapezoid_weights()
    arr = np.asarray(region)
    if arr.dtype == bool:
        if arr.shape != grid.shape:
            raise DomainError("region mask shape does not match the grid")
        return arr * (grid.hx * grid.hy)
    return box_weights(grid, tuple(float(t) for t in region))


def w12_seminorm(f: GridFunction, V) -> float:
    """Discrete ``(int_V |Df|^2)^{1/2}`` with central-difference gradients."""
    w = region_weights(f.grid, V)
    gx, gy = gradient(f)
    return float(np.sqrt(np.sum((gx.values**2 + gy.values**2) * w)))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(f: GridFunction, path) -> Path:
    path = Path(path)
    X, Y = f.grid.mesh()
    try:
        with path.open("w", newline="") as fh:
            fh.write("x,y,value\n")
            for xv, yv, vv in zip(X.ravel(), Y.ravel(), f.values.ravel()):
                fh.write(f"{xv:.17g},{yv:.17g},{vv:.17g}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path, grid: Grid2D | None = None) -> GridFunction:
    """Read ``x,y,value`` rows written by :func:`write_csv`.

    Without ``grid`` the grid is reconstructed from the distinct coordinates.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "value"]:
        raise DataIOError(f"{path}: expected header x,y,value")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 3:
        raise DataIOError(f"{path}: malformed rows")
    xs, ys = np.unique(data[:, 0]), np.unique(data[:, 1])
    if grid is None:
        grid = Grid2D(len(xs), len(ys), xs[0], xs[-1], ys[0], ys[-1])
    if len(data) != grid.nx * grid.ny:
        raise DataIOError(f"{path}: {len(data)} rows for a {grid.nx}x{grid.ny} grid")
    ix = np.rint((data[:, 0] - grid.x_min) / grid.hx).astype(int)
    iy = np.rint((data[:, 1] - grid.y_min) / grid.hy).astype(int)
    if ix.min() < 0 or iy.min() < 0 or ix.max() >= grid.nx or iy.max() >= grid.ny:
        raise DataIOError(f"{path}: coordinates outside the grid")
    vals = np.full(grid.shape, np.nan)
    vals[ix, iy] = data[:, 2]
    if np.any(np.isnan(vals)):
        raise DataIOError(f"{path}: missing nodes")
    return GridFunction(grid, vals)
