"""Command line driver: config parsing, subcommands and result persistence.

Subcommands: ``solve``, ``identities``, ``diagnose``, ``cones``, ``run`` and
``emit-plots``.  Every report is printed as JSON.  Exit codes: 0 ok,
2 validation error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cones, diagnostics, grid as gridmod, hamiltonian as hm, identities, solver
from .errors import AronssonLabError, DataIOError, ValidationError

logger = logging.getLogger(__name__)

THREADS_ENV = "ARONSSON_LAB_THREADS"
DIAGNOSTICS = ("identities", "estimates", "cones", "annuli")


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------

def _floats(text: str, name: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(t) for t in str(text).replace(" ", "").split(",") if t != ""]
    except ValueError as exc:
        raise ValidationError(f"{name}: cannot parse {text!r} as numbers") from exc
    if n is not None and len(vals) != n:
        raise ValidationError(f"{name}: expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _box(text: str, name: str = "domain") -> tuple[float, float, float, float]:
    x0, x1, y0, y1 = _floats(text, name, 4)
    if not (x0 < x1 and y0 < y1):
        raise ValidationError(f"{name}: rectangle must have x0 < x1 and y0 < y1")
    return (x0, x1, y0, y1)


def parse_hamiltonian(text: str) -> hm.Hamiltonian:
    """``quadratic[:a11,a12,a22]``, ``quartic``, ``aniso_quartic[:b1,b2]``, ``maxquad``,
    ``sampled:<file.csv>`` or a path to a ``p_x,p_y,H`` CSV file."""
    text = text.strip()
    name, _, args = text.partition(":")
    if name == "quadratic":
        return hm.quadratic(*_floats(args, "hamiltonian", 3)) if args else hm.quadratic()
    if name == "quartic" and not args:
        return hm.quartic()
    if name == "aniso_quartic":
        return hm.aniso_quartic(*_floats(args, "hamiltonian", 2)) if args else hm.aniso_quartic()
    if name == "maxquad" and not args:
        return hm.maxquad()
    if name == "sampled" and args:
        return hm.sampled(args)
    if text.endswith(".csv"):
        return hm.sampled(text)
    raise ValidationError(f"hamiltonian: unknown value {text!r}")


def parse_boundary(text: str):
    """``aronsson``, ``zero``, ``linear:a,b[,c]`` or a grid-function CSV path.

    Returns ``(data, exact)`` where ``exact`` is the closed-form solution
    when one is known (``None`` otherwise).
    """
    text = text.strip()
    if text == "aronsson":
        return solver.aronsson_function, solver.aronsson_function
    if text == "zero":
        f = solver.linear_function(0.0, 0.0, 0.0)
        return f, f
    if text.startswith("linear:"):
        vals = _floats(text[7:], "boundary")
        if len(vals) not in (2, 3):
            raise ValidationError("boundary: linear:a,b[,c] expected")
        f = solver.linear_function(*vals)
        return f, f
    if text.endswith(".csv"):
        return gridmod.read_csv(text), None
    raise ValidationError(f"boundary: unknown value {text!r}")


def parse_testfn(text: str):
    text = text.strip()
    if text.endswith(".csv"):
        return gridmod.read_csv(text)
    name, _, args = text.partition(":")
    if name not in identities.TEST_FUNCTIONS:
        raise ValidationError(f"testfn: unknown test function {name!r}; known: {sorted(identities.TEST_FUNCTIONS)}")
    ctor = identities.TEST_FUNCTIONS[name]
    return ctor(*_floats(args, "testfn")) if args else ctor()


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# JSON / files
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def _write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def _write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in r) for r in rows]
    return _write_text(path, "\n".join(lines) + "\n")


def _read_rows(path: Path) -> list[dict]:
    try:
        with path.open(newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"{path}: malformed JSON: {exc}") from exc


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_KEYS = {"hamiltonian", "domain", "grid_sizes", "eps_ladder", "delta_ladder", "boundary", "diagnostics",
         "output_prefix", "seed", "cone_trials", "estimate_region"}
_SOLVER_KEYS = {"max_iters", "grad_tol", "quadrature", "linear_solver", "step_tol"}


@dataclass(frozen=True)
class ExperimentConfig:
    hamiltonian: str = "quadratic"
    domain: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    grid_sizes: tuple[int, ...] = (17,)
    eps_ladder: tuple[float, ...] = (0.1,)
    delta_ladder: tuple[float, ...] = ()
    boundary: str = "aronsson"
    diagnostics: tuple[str, ...] = ("identities", "estimates")
    output_prefix: str = "out/run"
    seed: int = 0
    cone_trials: int = 200
    estimate_region: tuple[float, float, float, float] | None = None
    solver_options: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("eps_ladder", "delta_ladder"):
            lad = getattr(self, name)
            if name == "eps_ladder" and not lad:
                raise ValidationError("eps_ladder: must not be empty")
            if any(not e > 0 for e in lad) or any(b >= a for a, b in zip(lad, lad[1:])):
                raise ValidationError(f"{name}: must be positive and strictly decreasing, got {list(lad)}")
        if not self.grid_sizes:
            raise ValidationError("grid_sizes: must not be empty")
        for n in self.grid_sizes:
            if n < 3 or n % 2 == 0:
                raise ValidationError(f"grid_sizes: sizes must be odd and >= 3, got {n}")
        bad = set(self.diagnostics) - set(DIAGNOSTICS)
        if bad:
            raise ValidationError(f"diagnostics: unknown selection {sorted(bad)}; choose from {list(DIAGNOSTICS)}")
        if self.cone_trials < 1:
            raise ValidationError("cone_trials: must be >= 1")
        unknown = set(self.solver_options) - _SOLVER_KEYS
        if unknown:
            raise ValidationError(f"solver: unknown keys {sorted(unknown)}")

    @property
    def region(self) -> tuple[float, float, float, float]:
        """Subrectangle used for errors and estimates (middle 3/4 of the domain by default)."""
        if self.estimate_region is not None:
            return self.estimate_region
        x0, x1, y0, y1 = self.domain
        dx, dy = (x1 - x0) / 8, (y1 - y0) / 8
        return (x0 + dx, x1 - dx, y0 + dy, y1 - dy)

    def solve_config(self) -> solver.SolveConfig:
        opts = dict(self.solver_options)
        kw = {}
        for k in ("max_iters",):
            if k in opts:
                kw[k] = int(opts[k])
        for k in ("grad_tol", "step_tol"):
            if k in opts:
                kw[k] = float(opts[k])
        for k in ("quadrature", "linear_solver"):
            if k in opts:
                kw[k] = str(opts[k])
        return solver.SolveConfig(eps=self.eps_ladder[0], **kw)

    def echo(self) -> dict:
        return {"hamiltonian": self.hamiltonian, "domain": list(self.domain), "grid_sizes": list(self.grid_sizes),
                "eps_ladder": list(self.eps_ladder), "delta_ladder": list(self.delta_ladder),
                "boundary": self.boundary, "diagnostics": list(self.diagnostics), "seed": self.seed,
                "cone_trials": self.cone_trials, "estimate_region": list(self.region),
                "solver": dict(sorted(self.solver_options.items()))}

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Read an INI-style file with an ``[experiment]`` and optional ``[solver]`` section.

        A relative ``output_prefix`` is resolved against the file's directory.
        """
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with path.open() as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ValidationError(f"config {path}: {exc}") from exc
        if "experiment" not in cp:
            raise ValidationError(f"config {path}: missing [experiment] section")
        sec = cp["experiment"]
        unknown = set(sec) - _KEYS
        if unknown:
            raise ValidationError(f"config {path}: unknown keys {sorted(unknown)}")
        kw: dict = {}
        if "hamiltonian" in sec:
            kw["hamiltonian"] = sec["hamiltonian"]
        if "domain" in sec:
            kw["domain"] = _box(sec["domain"], "domain")
        if "grid_sizes" in sec:
            sizes = _floats(sec["grid_sizes"], "grid_sizes")
            if any(s != int(s) for s in sizes):
                raise ValidationError("grid_sizes: must be integers")
            kw["grid_sizes"] = tuple(int(s) for s in sizes)
        for name in ("eps_ladder", "delta_ladder"):
            if name in sec:
                kw[name] = tuple(_floats(sec[name], name))
        if "boundary" in sec:
            kw["boundary"] = sec["boundary"].strip()
        if "diagnostics" in sec:
            raw = sec["diagnostics"].strip()
            sel = DIAGNOSTICS if raw == "all" else () if raw in ("", "none") else tuple(
                t.strip() for t in raw.split(",") if t.strip())
            kw["diagnostics"] = tuple(sel)
        if "output_prefix" in sec:
            p = Path(sec["output_prefix"].strip())
            kw["output_prefix"] = str(p if p.is_absolute() else path.parent / p)
        else:
            kw["output_prefix"] = str(path.parent / "out" / path.stem)
        for name in ("seed", "cone_trials"):
            if name in sec:
                try:
                    kw[name] = int(sec[name])
                except ValueError as exc:
                    raise ValidationError(f"{name}: must be an integer") from exc
        if "estimate_region" in sec:
            kw["estimate_region"] = _box(sec["estimate_region"], "estimate_region")
        if "solver" in cp:
            kw["solver_options"] = dict(cp["solver"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _sup_error(u: gridmod.GridFunction, exact, region) -> float:
    mask = u.grid.region_mask(region)
    X, Y = u.grid.mesh()
    return float(np.max(np.abs(u.values - exact(X, Y))[mask]))


def _tangent_plane(u: gridmod.GridFunction, center) -> diagnostics.LinearFunction:
    gx, gy = gridmod.gradient(u)
    i = int(np.argmin(np.abs(u.grid.x - center[0])))
    j = int(np.argmin(np.abs(u.grid.y - center[1])))
    a, b = float(gx.values[i, j]), float(gy.values[i, j])
    x, y = u.grid.x[i], u.grid.y[j]
    return diagnostics.LinearFunction(a, b, float(u.values[i, j] - a * x - b * y))


def _bump_family(g: gridmod.Grid2D, region) -> list[gridmod.TestFunction]:
    x0, x1, y0, y1 = region
    r = 0.2 * min(x1 - x0, y1 - y0)
    cx = np.linspace(x0 + r, x1 - r, 3)
    cy = np.linspace(y0 + r, y1 - r, 3)
    return [gridmod.bump(g, (a, b), r) for a in cx for b in cy]


def estimate_reports(H, results, region) -> list[dict]:
    """Estimates on the finest-eps solution of one grid."""
    last = results[-1]
    u = last.u
    g = u.grid
    x0, x1, y0, y1 = region
    inner = (x0 + (x1 - x0) / 6, x1 - (x1 - x0) / 6, y0 + (y1 - y0) / 6, y1 - (y1 - y0) / 6)
    out = []
    out.append(diagnostics.check_sobolev_bound(u, H, 1.0, inner, region).summary())
    for rep in diagnostics.check_determinant_bounds(u, H, _bump_family(g, region), inner, region):
        out.append(rep.summary())
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    phi = gridmod.bump(g, (cx + 0.2 * (x1 - x0), cy + 0.05 * (y1 - y0)), 0.2 * min(x1 - x0, y1 - y0))
    oc = diagnostics.orthogonality_cross_check(u, H, 1.0, 0.0, phi, last.eps)
    out.append({"estimate_id": "orthogonality", "eps": last.eps, **oc})
    r = 0.25 * min(x1 - x0, y1 - y0)
    c = (cx + 0.5 * r, cy + 0.25 * r)
    out.append(diagnostics.flatness_check(u, H, c, r, _tangent_plane(u, c)).summary())
    if len(results) >= 2:
        out.append(diagnostics.check_linf_bound(results, H, inner, U=region).summary())
    return out


def _grid_pipeline(cfg: ExperimentConfig, H, bc, exact, n: int) -> dict:
    G = gridmod.Grid2D(n, n, *cfg.domain)
    base = cfg.solve_config()
    results = solver.eps_continuation(H, G, bc, cfg.eps_ladder, base)
    rows = []
    ref = exact if exact is not None else None
    for r in results:
        err = _sup_error(r.u, ref, cfg.region) if ref is not None else float(
            np.max(np.abs(r.u.values - results[-1].u.values)[G.region_mask(cfg.region)]))
        rows.append([n, r.eps, err, "exact" if ref is not None else "finest_eps",
                     solver.linf_H_on(H, r.u, cfg.region), r.residual, int(r.converged), r.iters])
    reports: dict = {"n": n, "solves": [r.meta() for r in results]}
    if "identities" in cfg.diagnostics:
        reports["determinant_identity"] = [
            dict(identities.check_determinant_identity(H, r, r.eps, region=cfg.region).summary(), eps=r.eps)
            for r in results]
    if "estimates" in cfg.diagnostics:
        reports["estimates"] = estimate_reports(H, results, cfg.region)
    if "cones" in cfg.diagnostics:
        rep = cones.comparison_with_cones(results[-1], H, cfg.cone_trials, seed=cfg.seed)
        reports["comparison_with_cones"] = rep.summary()
    delta_rows = []
    if cfg.delta_ladder:
        for st in solver.delta_pipeline(H, G, bc, cfg.delta_ladder, cfg.eps_ladder, cfg.region, base):
            for r, linf in zip(st.results, st.linf_on_V):
                delta_rows.append([n, st.delta, r.eps, linf, int(st.coarse)])
    return {"results": results, "rows": rows, "reports": reports, "delta_rows": delta_rows}


def _closed_form_reports(H, seed: int, n_samples: int = 20) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        v = identities.random_test_function(rng)
        pts = rng.uniform(-1, 1, size=(4, 2))
        pts[np.abs(pts) < 0.05] = 0.05
        for iid in ("structure", "divergence_form", "planar_gradient", "planar_divergence",
                    "planar_h_gradient", "planar_h_divergence"):
            for rep in identities.run_closed_form(iid, H, v, pts):
                out.append({"identity_id": rep.identity_id, "testfn": v.name,
                            "relative_residual": rep.relative_residual})
    return out


def run(cfg: ExperimentConfig) -> tuple[int, Path]:
    """Execute the configured pipelines and write the manifest; returns ``(exit_code, manifest_path)``."""
    prefix = Path(cfg.output_prefix)
    files: list[Path] = []
    manifest = {"config": cfg.echo(), "status": "ok", "exit_code": 0}
    code = 0
    try:
        try:
            prefix.parent.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create {prefix.parent}: {exc}") from exc
        H = parse_hamiltonian(cfg.hamiltonian)
        bc, exact = parse_boundary(cfg.boundary)
        workers = min(worker_count(), len(cfg.grid_sizes))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(lambda n: _grid_pipeline(cfg, H, bc, exact, n), cfg.grid_sizes))
        else:
            outs = [_grid_pipeline(cfg, H, bc, exact, n) for n in cfg.grid_sizes]
        traces = {}
        for n, o in zip(cfg.grid_sizes, outs):
            for j, r in enumerate(o["results"]):
                files.append(gridmod.write_csv(r.u, Path(f"{prefix}_n{n}_e{j}_u.csv")))
                traces[f"n{n}_e{j}"] = r.trace
        files.append(_write_rows(Path(f"{prefix}_eps_table.csv"),
                                 ["n", "eps", "sup_error", "reference", "linf_H", "residual", "converged", "iters"],
                                 [row for o in outs for row in o["rows"]]))
        files.append(_write_text(Path(f"{prefix}_trace.json"), dumps(traces)))
        reports = {"grids": [o["reports"] for o in outs]}
        if "identities" in cfg.diagnostics:
            reports["closed_form"] = _closed_form_reports(H, cfg.seed)
        if "annuli" in cfg.diagnostics:
            table = diagnostics.log_divergence_experiment()
            files.append(_write_rows(Path(f"{prefix}_annuli.csv"), ["k", "alpha", "increment", "partial_sum"],
                                     [[r["k"], r["alpha"], r["increment"], r["partial_sum"]] for r in table]))
        if cfg.delta_ladder:
            files.append(_write_rows(Path(f"{prefix}_delta_table.csv"), ["n", "delta", "eps", "linf_H", "coarse"],
                                     [row for o in outs for row in o["delta_rows"]]))
        files.append(_write_text(Path(f"{prefix}_reports.json"), dumps(reports)))
    except AronssonLabError as exc:
        code = exc.exit_code
        manifest.update(status="error", exit_code=code,
                        error={"type": type(exc).__name__, "message": str(exc)})
    base = prefix.parent
    manifest["files"] = [{"path": os.path.relpath(f, base), "sha256": sha256(f), "bytes": f.stat().st_size}
                         for f in files]
    mpath = Path(f"{prefix}_manifest.json")
    try:
        _write_text(mpath, dumps(manifest))
    except DataIOError:
        return DataIOError.exit_code, mpath
    return code, mpath


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

def emit_plots(prefix, out_dir=None) -> list[Path]:
    """Write plot-ready CSVs from the outputs of :func:`run` with this prefix.

    ``eps_convergence.csv`` (n, eps, sup_error), ``annuli.csv`` (k, alpha,
    partial_sum) when the annulus table exists, ``delta_linf.csv`` when a
    delta table exists and ``residual_heatmap.csv`` (x, y, residual) of the
    finest solve.
    """
    prefix = Path(prefix)
    if not prefix.parent.is_dir() or not any(prefix.parent.iterdir()):
        raise DataIOError(f"no outputs found: {prefix.parent} is missing or empty")
    mpath = Path(f"{prefix}_manifest.json")
    eps_path = Path(f"{prefix}_eps_table.csv")
    missing = [str(p) for p in (mpath, eps_path) if not p.exists()]
    if missing:
        raise DataIOError(f"missing inputs: {', '.join(missing)}")
    manifest = _read_json(mpath)
    listed = [prefix.parent / f["path"] for f in manifest.get("files", [])]
    absent = [str(p) for p in listed if not p.exists()]
    if absent:
        raise DataIOError(f"missing inputs: {', '.join(absent)}")
    out_dir = Path(out_dir) if out_dir is not None else prefix.parent
    written = []
    rows = _read_rows(eps_path)
    written.append(_write_rows(out_dir / "eps_convergence.csv", ["n", "eps", "sup_error"],
                               [[int(r["n"]), float(r["eps"]), float(r["sup_error"])] for r in rows]))
    ann = Path(f"{prefix}_annuli.csv")
    if ann.exists():
        written.append(_write_rows(out_dir / "annuli.csv", ["k", "alpha", "partial_sum"],
                                   [[int(r["k"]), r["alpha"], float(r["partial_sum"])] for r in _read_rows(ann)]))
    dl = Path(f"{prefix}_delta_table.csv")
    if dl.exists():
        written.append(_write_rows(out_dir / "delta_linf.csv", ["n", "delta", "eps", "linf_H"],
                                   [[int(r["n"]), float(r["delta"]), float(r["eps"]), float(r["linf_H"])]
                                    for r in _read_rows(dl)]))
    conf = manifest["config"]
    n = max(conf["grid_sizes"])
    j = len(conf["eps_ladder"]) - 1
    u_path = Path(f"{prefix}_n{n}_e{j}_u.csv")
    if not u_path.exists():
        raise DataIOError(f"missing inputs: {u_path}")
    u = gridmod.read_csv(u_path)
    H = parse_hamiltonian(conf["hamiltonian"])
    res = solver.residual_aronsson(H, u, conf["eps_ladder"][-1])
    written.append(gridmod.write_csv(res, out_dir / "residual_heatmap.csv"))
    return written


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_solution(prefix: str):
    u = gridmod.read_csv(f"{prefix}_u.csv")
    meta_path = Path(f"{prefix}_meta.json")
    meta = _read_json(meta_path) if meta_path.exists() else {}
    return u, meta


def cmd_solve(args) -> int:
    H = parse_hamiltonian(args.hamiltonian)
    box = _box(args.domain)
    G = gridmod.Grid2D(args.grid, args.grid, *box)
    bc, exact = parse_boundary(args.bc)
    if args.eps_ladder:
        ladder = _floats(args.eps_ladder, "eps-ladder")
    elif args.eps is not None:
        ladder = [args.eps]
    else:
        raise ValidationError("give --eps or --eps-ladder")
    results = solver.eps_continuation(H, G, bc, ladder)
    last = results[-1]
    prefix = Path(args.out)
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {prefix.parent}: {exc}") from exc
    gridmod.write_csv(last.u, Path(f"{prefix}_u.csv"))
    _write_text(Path(f"{prefix}_trace.json"), dumps([t for r in results for t in r.trace]))
    meta = {"config": {"hamiltonian": args.hamiltonian, "grid": args.grid, "domain": list(box), "bc": args.bc,
                       "eps_ladder": ladder}, "eps": last.eps, "rungs": [r.meta() for r in results]}
    if exact is not None:
        meta["sup_error_exact"] = float(np.max(np.abs(last.u.values - G.sample(exact).values)))
    _write_text(Path(f"{prefix}_meta.json"), dumps(meta))
    print(dumps(meta))
    return 0 if all(r.converged for r in results) else 3


def cmd_identities(args) -> int:
    H = parse_hamiltonian(args.hamiltonian)
    ids = identities.IDENTITY_IDS if args.check == "all" else (args.check,)
    if args.check != "all" and args.check not in identities.IDENTITY_IDS:
        raise ValidationError(f"unknown identity {args.check!r}; known: {list(identities.IDENTITY_IDS)}")
    out = []
    if args.solution:
        u, meta = _load_solution(args.solution)
        eps = args.eps if args.eps is not None else meta.get("eps")
        if eps is None:
            raise ValidationError("the determinant identity needs --eps (or a meta file)")
        out.append(identities.check_determinant_identity(H, u, float(eps)).summary())
        print(dumps(out))
        return 0
    v = parse_testfn(args.testfn)
    grid_checks = {"structure": identities.check_structure, "divergence_form": identities.check_divergence_form}
    for iid in ids:
        if iid == "determinant":
            continue
        if isinstance(v, gridmod.GridFunction) or args.grid:
            fn = v if isinstance(v, gridmod.GridFunction) else gridmod.Grid2D.square(args.grid).sample(v)
            if iid in grid_checks and args.refine and not isinstance(v, gridmod.GridFunction):
                reps = [identities.refinement_study(grid_checks[iid], H, v, (-1.0, 1.0, -1.0, 1.0),
                                                    [args.grid, 2 * args.grid - 1])]
            elif iid in grid_checks:
                reps = [grid_checks[iid](H, fn)]
            elif iid in ("planar_gradient", "planar_divergence"):
                reps = identities.check_planar_pair(fn)
            else:
                reps = identities.check_planar_h_pair(H, fn)
        else:
            rng = np.random.default_rng(args.seed)
            pts = rng.uniform(-1, 1, size=(args.n_points, 2))
            pts[np.abs(pts) < 0.05] = 0.05
            reps = identities.run_closed_form(iid, H, v, pts)
        out += [r.summary() for r in reps if r.identity_id == iid]
    print(dumps(out))
    return 0


_ESTIMATES = ("sobolev_bound", "det_lower", "det_upper", "orthogonality", "flatness", "log_divergence")


def cmd_diagnose(args) -> int:
    which = _ESTIMATES if args.which == "all" else (args.which,)
    if args.which != "all" and args.which not in _ESTIMATES + ("linf_bound",):
        raise ValidationError(f"unknown estimate {args.which!r}; known: {list(_ESTIMATES) + ['linf_bound']}")
    out = []
    if "log_divergence" in which:
        table = diagnostics.log_divergence_experiment()
        out.append({"estimate_id": "log_divergence", "rows": table})
        if args.csv:
            _write_rows(Path(args.csv), ["k", "alpha", "increment", "partial_sum"],
                        [[r["k"], r["alpha"], r["increment"], r["partial_sum"]] for r in table])
    rest = [w for w in which if w != "log_divergence"]
    if rest:
        if not args.solution:
            raise ValidationError("--solution is required for grid estimates")
        H = parse_hamiltonian(args.hamiltonian)
        if args.which == "linf_bound":
            prefixes = args.solution.split(",")
            results = []
            for p in prefixes:
                u, meta = _load_solution(p)
                results.append(solver.SolveResult(u, float("nan"), float("nan"), 0, True, eps=float(meta["eps"])))
            V = _box(args.V, "V") if args.V else None
            if V is None:
                raise ValidationError("linf_bound needs --V")
            print(dumps([diagnostics.check_linf_bound(results, H, V).summary()]))
            return 0
        u, meta = _load_solution(args.solution)
        U = u.grid.box
        x0, x1, y0, y1 = U
        V = _box(args.V, "V") if args.V else (x0 + (x1 - x0) / 4, x1 - (x1 - x0) / 4,
                                              y0 + (y1 - y0) / 4, y1 - (y1 - y0) / 4)
        phis = _bump_family(u.grid, V)
        if "sobolev_bound" in rest:
            out.append(diagnostics.check_sobolev_bound(u, H, args.alpha, V, U).summary())
        if "det_lower" in rest or "det_upper" in rest:
            for rep in diagnostics.check_determinant_bounds(u, H, phis, V, U):
                if rep.estimate_id in rest:
                    out.append(rep.summary())
        if "orthogonality" in rest:
            phi = phis[len(phis) // 2 + 1]
            val = diagnostics.orthogonality_defect(u, H, args.alpha, None, phi)
            item = {"estimate_id": "orthogonality", "defect": val, "alpha": args.alpha}
            if "eps" in meta:
                item.update(diagnostics.orthogonality_cross_check(u, H, args.alpha, None, phi, float(meta["eps"])))
            out.append(item)
        if "flatness" in rest:
            c = (0.5 * (V[0] + V[1]), 0.5 * (V[2] + V[3]))
            r = 0.5 * min(V[1] - V[0], V[3] - V[2])
            out.append(diagnostics.flatness_check(u, H, c, r, _tangent_plane(u, c)).summary())
    print(dumps(out))
    return 0


def cmd_cones(args) -> int:
    H = parse_hamiltonian(args.hamiltonian)
    out: dict = {"hamiltonian": H.name, "a": args.a}
    cone = cones.ConeFunction(H, args.a)
    if args.table:
        cone.write_table(args.table)
        out["table"] = args.table
    if args.value:
        x = _floats(args.value, "value", 2)
        out["value"] = cones.cone_value(H, args.a, x)
    if args.check_solution:
        u, meta = _load_solution(args.check_solution)
        rep = cones.comparison_with_cones(u, H, args.trials, seed=args.seed,
                                          eps_slack=float(meta.get("eps", 0.0)))
        out["comparison_with_cones"] = rep.summary()
        out["lipschitz"] = cones.lipschitz_characterization(u, H, args.a, seed=args.seed).summary()
    if args.mcshane:
        if args.L is None:
            raise ValidationError("--mcshane needs --L")
        data = gridmod.read_csv(args.mcshane)
        ext = cones.mcshane_extend(data, args.L)
        if args.out:
            gridmod.write_csv(ext, f"{args.out}_mcshane.csv")
        out["mcshane"] = {"min": float(ext.values.min()), "max": float(ext.values.max()),
                          "output": f"{args.out}_mcshane.csv" if args.out else None}
    print(dumps(out))
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.out:
        cfg = ExperimentConfig(**{**cfg.__dict__, "output_prefix": args.out})
    code, mpath = run(cfg)
    print(dumps({"manifest": str(mpath), "exit_code": code}))
    return code


def cmd_emit_plots(args) -> int:
    paths = emit_plots(args.prefix, args.out_dir)
    print(dumps({"written": [str(p) for p in paths]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aronsson-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve the regularised Dirichlet problem")
    s.add_argument("--hamiltonian", default="quadratic")
    s.add_argument("--eps", type=float)
    s.add_argument("--eps-ladder")
    s.add_argument("--grid", type=int, default=33)
    s.add_argument("--domain", default="-1,1,-1,1")
    s.add_argument("--bc", default="aronsson")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("identities", help="check pointwise and divergence identities")
    s.add_argument("--check", default="all")
    s.add_argument("--hamiltonian", default="quadratic")
    s.add_argument("--testfn", default="sinsin")
    s.add_argument("--grid", type=int)
    s.add_argument("--refine", action="store_true")
    s.add_argument("--solution")
    s.add_argument("--eps", type=float)
    s.add_argument("--n-points", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_identities)

    s = sub.add_parser("diagnose", help="evaluate estimates on a stored solution")
    s.add_argument("--which", default="all")
    s.add_argument("--solution")
    s.add_argument("--hamiltonian", default="quadratic")
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--V")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("cones", help="cone functions and comparison with cones")
    s.add_argument("--hamiltonian", default="quadratic")
    s.add_argument("--a", type=float, required=True)
    s.add_argument("--value")
    s.add_argument("--check-solution")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mcshane")
    s.add_argument("--L", type=float)
    s.add_argument("--out")
    s.add_argument("--table")
    s.set_defaults(func=cmd_cones)

    s = sub.add_parser("run", help="run the pipelines of an experiment config")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("emit-plots", help="write plot-ready CSVs from run outputs")
    s.add_argument("prefix")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return int(args.func(args))
    except AronssonLabError as exc:
        print(dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
