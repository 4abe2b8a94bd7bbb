"""Command line front end: ``nonloc-homog <subcommand> --config cfg.json --out dir``.

Exit status 0 on success, 1 if a numerical check fails, 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cell import (appendix_details, cell_solution, check_sup_bound, solve_cell_fixed_point)
from .effective import check_positivity, effective_matrix
from .fiber import (Grid, assemble_fiber, make_grid, operator_norm, quadratic_form_check,
                    quadrature_tolerance, second_eigenvalue)
from .harness import (constants_bundle, corrector_K, default_xi_grid, lipschitz_constant,
                      rate_sweep, threshold_errors)
from .kernels import KernelSpec, MuSpec
from .threshold import (COLUMNS, RATES, Contour, F1_operator, F_j_contour, G_kl_contour,
                        constant_projector, riesz_projection, spectral_projector,
                        threshold_sweep, xi_sweep_points)

SCHEMA_VERSION = 1
SUBCOMMANDS = ("constants", "cell", "effective", "threshold", "rates", "verify-all")

DEFAULT_TOLERANCES = {
    "cell_residual": 1e-9,
    "cell_mean": 1e-10,
    "fixed_point_rel": 1e-8,
    "projection": 1e-8,
    "idempotency": 1e-9,
    "slope_F_minus_P": 0.9,
    "slope_F_minus_P_F1": 1.9,
    "slope_AF_minus_G2": 2.8,
    "slope_AF_minus_G2_G3": 3.8,
    "pg3p_rel": 1e-9,
    "route_rel": 1e-8,
    "rate_plain": 0.9,
    "rate_corrected": 1.85,
    "hermitian": 1e-10,
    "quadratic_form": 1e-10,
}

ROUNDOFF = 1e-12

KERNEL_PARAMS = {"gaussian": "sigma", "box": "r", "exponential": "lambda", "tabulated": "file"}


class ConfigError(ValueError):
    """Invalid configuration; ``where`` names the offending field or line."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def _num(obj: dict, key: str, path: str, positive=True, integer=False, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}" if path else key, "missing field")
    val = obj[key]
    where = f"{path}.{key}" if path else key
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(where, f"expected a number, got {val!r}")
    if integer and (not isinstance(val, int)):
        raise ConfigError(where, f"expected an integer, got {val!r}")
    if not math.isfinite(val) or (positive and not val > 0):
        raise ConfigError(where, f"must be a positive finite number, got {val!r}")
    return val


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{where}.{extra[0]}" if where else extra[0], "unknown field")


@dataclass
class ExperimentConfig:
    d: int
    N: int
    kernel: dict
    mu: dict
    eps: list
    xi_sweep: dict = field(default_factory=lambda: {"direction": None, "m_max": 10,
                                                    "grid_points": 17, "refinement": 8})
    contour_K: int = 128
    output_dir: str = "out"
    seed: int = 0
    tolerances: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        _check_keys(raw, ("schema_version", "d", "N", "kernel", "mu", "eps", "xi_sweep",
                          "contour_K", "output_dir", "seed", "tolerances"), "")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got "
                                                f"{raw.get('schema_version')!r}")
        base_dir = Path(base_dir)
        d = _num(raw, "d", "", integer=True)
        if d not in (1, 2, 3):
            raise ConfigError("d", "dimension must be 1, 2 or 3")
        N = _num(raw, "N", "", integer=True)
        if N % 2 or N < 8:
            raise ConfigError("N", "grid size must be even and at least 8")
        if N ** d > 16384:
            raise ConfigError("N", f"N^d = {N ** d} exceeds the dense limit 16384")

        kernel = raw.get("kernel")
        _check_keys(kernel, ("family", "sigma", "r", "lambda", "file", "normalization",
                             "truncation"), "kernel")
        fam = kernel.get("family")
        if fam not in KERNEL_PARAMS:
            raise ConfigError("kernel.family", f"unknown kernel family {fam!r}")
        key = KERNEL_PARAMS[fam]
        extra = set(kernel) - {"family", key, "normalization", "truncation"}
        if extra:
            raise ConfigError(f"kernel.{sorted(extra)[0]}", f"not a parameter of {fam}")
        if fam == "tabulated":
            f = kernel.get("file")
            if not isinstance(f, str):
                raise ConfigError("kernel.file", "expected a path")
            if not (base_dir / f).is_file():
                raise ConfigError("kernel.file", f"file not found: {f}")
        else:
            _num(kernel, key, "kernel")
            if "truncation" in kernel:
                raise ConfigError("kernel.truncation", "only tabulated kernels take a truncation")
        if "normalization" in kernel:
            _num(kernel, "normalization", "kernel")
        if "truncation" in kernel:
            _num(kernel, "truncation", "kernel")

        mu = raw.get("mu")
        _check_keys(mu, ("family", "value", "alpha", "base", "file", "lower", "upper"), "mu")
        mfam = mu.get("family")
        allowed = {"constant": {"value"}, "cosine_product": {"alpha", "base"},
                   "tabulated": {"file", "lower", "upper"}}
        if mfam not in allowed:
            raise ConfigError("mu.family", f"unknown mu family {mfam!r}")
        extra = set(mu) - allowed[mfam] - {"family"}
        if extra:
            raise ConfigError(f"mu.{sorted(extra)[0]}", f"not a parameter of {mfam}")
        if mfam == "constant":
            _num(mu, "value", "mu")
        elif mfam == "cosine_product":
            alpha = _num(mu, "alpha", "mu", positive=False)
            if not abs(alpha) < 1:
                raise ConfigError("mu.alpha", "need |alpha| < 1")
            if "base" in mu:
                _num(mu, "base", "mu")
        else:
            f = mu.get("file")
            if not isinstance(f, str):
                raise ConfigError("mu.file", "expected a path")
            if not (base_dir / f).is_file():
                raise ConfigError("mu.file", f"file not found: {f}")
            for k in ("lower", "upper"):
                if k in mu:
                    _num(mu, k, "mu")

        eps = raw.get("eps")
        if not isinstance(eps, list) or len(eps) < 2:
            raise ConfigError("eps", "expected a list of at least two values")
        for i, e in enumerate(eps):
            if isinstance(e, bool) or not isinstance(e, (int, float)) or not e > 0:
                raise ConfigError(f"eps[{i}]", f"must be positive, got {e!r}")
        if len(set(eps)) != len(eps):
            raise ConfigError("eps", "values must be distinct")

        xs = dict(cls.__dataclass_fields__["xi_sweep"].default_factory())
        if "xi_sweep" in raw:
            _check_keys(raw["xi_sweep"], tuple(xs), "xi_sweep")
            xs.update(raw["xi_sweep"])
        for k in ("m_max", "grid_points", "refinement"):
            _num(xs, k, "xi_sweep", integer=True)
        if xs["direction"] is not None:
            dirn = xs["direction"]
            if (not isinstance(dirn, list) or len(dirn) != d
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                               for v in dirn) or not any(dirn)):
                raise ConfigError("xi_sweep.direction", f"expected a nonzero list of {d} numbers")

        K = _num(raw, "contour_K", "", integer=True, default=128)
        if K < 64:
            raise ConfigError("contour_K", "need at least 64 contour points")
        out = raw.get("output_dir", "out")
        if not isinstance(out, str):
            raise ConfigError("output_dir", "expected a string")
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed", "expected an unsigned 64-bit integer")
        tol = raw.get("tolerances", {})
        _check_keys(tol, tuple(DEFAULT_TOLERANCES), "tolerances")
        for k in tol:
            _num(tol, k, "tolerances")
        return cls(d, N, dict(kernel), dict(mu), list(eps), xs, K, out, seed, dict(tol),
                   base_dir)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "d": self.d, "N": self.N,
                "kernel": dict(self.kernel), "mu": dict(self.mu), "eps": list(self.eps),
                "xi_sweep": dict(self.xi_sweep), "contour_K": self.contour_K,
                "output_dir": self.output_dir, "seed": self.seed,
                "tolerances": dict(self.tolerances)}

    @property
    def tol(self) -> dict:
        return {**DEFAULT_TOLERANCES, **self.tolerances}

    def kernel_spec(self) -> KernelSpec:
        k = self.kernel
        norm = float(k.get("normalization", 1.0))
        fam = k["family"]
        if fam == "tabulated":
            return KernelSpec.from_csv(self.base_dir / k["file"], self.d, k.get("truncation"), norm)
        ctor = {"gaussian": KernelSpec.gaussian, "box": KernelSpec.box,
                "exponential": KernelSpec.exponential}[fam]
        return ctor(float(k[KERNEL_PARAMS[fam]]), self.d, norm)

    def mu_spec(self) -> MuSpec:
        m = self.mu
        if m["family"] == "constant":
            return MuSpec.constant(float(m["value"]), self.d)
        if m["family"] == "cosine_product":
            return MuSpec.cosine_product(float(m["alpha"]), float(m.get("base", 1.0)), self.d)
        table = np.loadtxt(self.base_dir / m["file"], delimiter=",", ndmin=2)
        return MuSpec.tabulated(table, self.d, m.get("lower"), m.get("upper"))

    def grid(self) -> Grid:
        return make_grid(self.d, self.N)

    def direction(self) -> np.ndarray:
        dirn = self.xi_sweep["direction"]
        return np.eye(self.d)[0] if dirn is None else np.asarray(dirn, float)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from None
    cfg = ExperimentConfig.from_dict(raw, path.parent)
    try:
        cfg.kernel_spec()
        cfg.mu_spec()
    except ValueError as exc:
        raise ConfigError("kernel/mu", str(exc)) from None
    if cfg.mu_spec().d != cfg.d or cfg.kernel_spec().d != cfg.d:
        raise ConfigError("d", "does not match the kernel dimension")
    return cfg


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("NONLOC_HOMOG_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError("NONLOC_HOMOG_THREADS", f"not an integer: {env!r}") from None
    if value < 0:
        raise ConfigError("--threads", "must be nonnegative")
    return value if value > 0 else (os.cpu_count() or 1)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


def write_json(path: Path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


class Experiment:
    """Lazily computed pieces shared between subcommands."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = threads
        self.a = cfg.kernel_spec()
        self.mu = cfg.mu_spec()
        self.grid = cfg.grid()
        self._cache = {}

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def constants(self):
        return self._get("constants", lambda: constants_bundle(self.a, self.mu, self.grid))

    @property
    def cell(self):
        return self._get("cell", lambda: cell_solution(self.a, self.mu, self.grid))

    @property
    def g0(self):
        return self._get("g0", lambda: effective_matrix(self.a, self.mu, self.grid, self.cell))

    @property
    def tau(self) -> float:
        return self._get("tau", lambda: quadrature_tolerance(self.a, self.mu, self.grid))

    @property
    def contour(self) -> Contour:
        return Contour.around_threshold(self.constants.d0_bound, self.cfg.contour_K)

    def xi_threshold(self) -> np.ndarray:
        return xi_sweep_points(self.constants.delta0, self.cfg.direction(),
                               int(self.cfg.xi_sweep["m_max"]))

    def xi_grid(self) -> np.ndarray:
        return default_xi_grid(self.grid.d, int(self.cfg.xi_sweep["grid_points"]),
                               int(self.cfg.xi_sweep["refinement"]))

    @property
    def threshold(self):
        return self._get("threshold", lambda: threshold_sweep(
            self.a, self.mu, self.grid, self.xi_threshold(), self.contour, self.cell, self.g0,
            self.constants, self.threads))

    @property
    def rates(self):
        pts = int(self.cfg.xi_sweep["grid_points"])
        eps = sorted((float(e) for e in self.cfg.eps), reverse=True)
        return self._get("rates", lambda: rate_sweep(
            self.a, self.mu, self.grid, self.xi_grid(), eps, self.g0, self.cell,
            self.constants, self.tau, 2 * math.pi / pts, self.threads))

    # artifact writers
    def write_constants(self, out: Path):
        write_json(out / "constants.json", self.constants.as_dict())

    def write_cell(self, out: Path):
        cell, d = self.cell, self.grid.d
        header = [f"x{j + 1}" for j in range(d)] + [f"v{j + 1}" for j in range(d)] + \
                 [f"w{j + 1}" for j in range(d)]
        rows = np.column_stack([self.grid.nodes, cell.v.T, cell.w.T])
        write_csv(out / "cell.csv", header, rows)
        app = appendix_details(self.a, self.mu, self.grid)
        rep = check_sup_bound(cell, self.a, self.mu, app.frak_C)
        write_json(out / "cell.json", {
            "residuals": cell.residuals.tolist(), "sup_norms": list(rep.sup_norms),
            "means": [float(np.mean(v)) for v in cell.v],
            "bound_linf": rep.bound_linf, "bound_l2": rep.bound_l2,
            "margins_linf": list(rep.margins_linf), "margins_l2": list(rep.margins_l2),
            "frak_C": app.frak_C, "t0": app.t0, "C_tilde_2pi": app.C_tilde_2pi})

    def write_effective(self, out: Path):
        rep = check_positivity(self.g0, self.constants)
        write_json(out / "effective.json", {
            "g0": self.g0.g0.tolist(), "g_kl": self.g0.gkl_raw.tolist(),
            "min_eigenvalue": rep.min_eigenvalue, "floor_mu_lower_C_a": rep.floor,
            "margin": rep.margin, "positive": rep.passed})

    def write_threshold(self, out: Path):
        rep, d = self.threshold, self.grid.d
        header = ["xi_norm"] + [f"xi{j + 1}" for j in range(d)] + list(COLUMNS) + \
                 ["G3_norm", "lowest_eigenvalue", "idempotency", "contour_K"]
        rows = [(rep.xi_norm[i], *rep.xi[i], *(rep.columns[c][i] for c in COLUMNS),
                 rep.G3_norm[i], rep.lowest_eigenvalue[i], rep.idempotency[i],
                 str(int(rep.contour_points[i]))) for i in range(rep.xi_norm.size)]
        write_csv(out / "threshold.csv", header, rows)
        write_json(out / "threshold.json", {"slopes": rep.slopes,
                                            "bound_margins": rep.bound_margins,
                                            "low_order_fit": rep.low_order_fit})

    def write_rates(self, out: Path):
        rep = self.rates
        write_csv(out / "rates.csv", ["epsilon", "fiber_sup_plain", "fiber_sup_corrected",
                                      "ws_plain", "ws_corrected", "bound_plain",
                                      "bound_corrected"], rep.rows())
        mp, mc = rep.row_checks()
        write_json(out / "rates.json", {"slopes": rep.slopes, "slack": rep.slack,
                                        "tau_q": self.tau, "row_margin_plain": float(mp.min()),
                                        "row_margin_corrected": float(mc.min())})


def _check(name, value, threshold, kind):
    """kind 'max': value <= threshold; 'min': value >= threshold."""
    value, threshold = float(value), float(threshold)
    margin = threshold - value if kind == "max" else value - threshold
    return {"name": name, "value": value, "threshold": threshold, "margin": margin,
            "passed": bool(margin >= 0)}


def run_checks(exp: Experiment) -> list[dict]:
    """Every invariant suite; returns one record per named check."""
    cfg, a, mu, grid, tol = exp.cfg, exp.a, exp.mu, exp.grid, exp.cfg.tol
    consts, cell, g0, tau = exp.constants, exp.cell, exp.g0, exp.tau
    rng = np.random.default_rng(cfg.seed)
    out = []

    # cell problem
    out.append(_check("cell_residual", np.max(cell.residuals), tol["cell_residual"], "max"))
    out.append(_check("cell_mean_zero", max(abs(float(np.mean(v))) for v in cell.v),
                      tol["cell_mean"], "max"))
    diffs = []
    for j in range(grid.d):
        fp = solve_cell_fixed_point(a, mu, grid, j)
        scale = max(np.linalg.norm(cell.v[j]), np.finfo(float).tiny)
        diffs.append(np.linalg.norm(fp - cell.v[j]) / scale if np.any(cell.v[j])
                     else np.linalg.norm(fp))
    out.append(_check("cell_fixed_point", max(diffs), tol["fixed_point_rel"], "max"))
    sup = check_sup_bound(cell, a, mu, consts.frak_C)
    out.append(_check("sup_bound_linf", max(sup.sup_norms), sup.bound_linf, "max"))
    out.append(_check("sup_bound_l2", max(sup.sup_norms), sup.bound_l2, "max"))

    # effective matrix
    pos = check_positivity(g0, consts)
    out.append(_check("effective_positivity", pos.min_eigenvalue, pos.floor, "min"))

    # projections
    contour = exp.contour
    dirs = rng.normal(size=(10, grid.d))
    radii = consts.delta0 * rng.uniform(0.05, 1.0, size=10)
    proj_err = idem = 0.0
    for r, v in zip(radii, dirs):
        op = assemble_fiber(a, mu, grid, r * v / np.linalg.norm(v))
        f = riesz_projection(op, contour)
        proj_err = max(proj_err, operator_norm(f - spectral_projector(op)[1]))
        idem = max(idem, operator_norm(f @ f - f))
    out.append(_check("projection_equivalence", proj_err, tol["projection"], "max"))
    out.append(_check("projection_idempotency", idem, tol["idempotency"], "max"))

    # threshold expansion
    # a residual column at round-off level (mu constant) has no meaningful slope;
    # it is then checked against the round-off floor instead
    th = exp.threshold
    a_norm = operator_norm(assemble_fiber(a, mu, grid, np.zeros(grid.d)).matrix)
    for c in RATES:
        floor = ROUNDOFF * (1.0 if c.startswith("F_") else a_norm)
        peak = float(np.max(th.columns[c]))
        if peak <= floor:
            out.append(_check(f"threshold_slope_{c}", peak, floor, "max") | {"vanishing": True})
        else:
            out.append(_check(f"threshold_slope_{c}", th.slopes[c], tol[f"slope_{c}"], "min"))
    if np.max(th.G3_norm) <= ROUNDOFF * a_norm:
        out.append(_check("pg3p_exactness", np.max(th.columns["PG3P"]), ROUNDOFF * a_norm, "max")
                   | {"vanishing": True})
    else:
        rel = np.max(th.columns["PG3P"] / np.maximum(th.G3_norm, np.finfo(float).tiny))
        out.append(_check("pg3p_exactness", rel, tol["pg3p_rel"], "max"))
    gk = G_kl_contour(a, mu, grid)
    p = constant_projector(grid)
    gscale = np.max(np.abs(g0.gkl_raw))
    route = max(operator_norm(gk[k, l] - g0.gkl_raw[k, l] * p)
                for k in range(grid.d) for l in range(grid.d)) / gscale
    out.append(_check("route_G_kl", route, tol["route_rel"], "max"))
    froute = 0.0
    for j in range(grid.d):
        f1 = F1_operator(cell, np.eye(grid.d)[j])
        diff = operator_norm(F_j_contour(a, mu, grid, j) - f1)
        n1 = operator_norm(f1)
        froute = max(froute, diff / n1 if n1 > 1e-14 else diff)
    out.append(_check("route_F_j", froute, tol["route_rel"], "max"))

    # rates
    rr = exp.rates
    out.append(_check("rate_slope_plain", rr.slopes["ws_plain"], tol["rate_plain"], "min"))
    out.append(_check("rate_slope_corrected", rr.slopes["ws_corrected"],
                      tol["rate_corrected"], "min"))
    mp, mc = rr.row_checks()
    out.append(_check("rate_rows_plain", float(mp.min()), 0.0, "min"))
    out.append(_check("rate_rows_corrected", float(mc.min()), 0.0, "min"))

    # fiber-level domination for |xi| <= delta0
    xs = np.vstack([consts.delta0 * cfg.direction() / np.linalg.norm(cfg.direction()),
                    exp.xi_threshold()])
    worst5 = worst6 = -np.inf
    for x in xs:
        for e in cfg.eps:
            plain, corr = threshold_errors(a, mu, grid, g0, cell, x, float(e))
            worst5 = max(worst5, plain - consts.C5 / e)
            worst6 = max(worst6, corr - consts.C6)
    out.append(_check("fiber_domination_C5", worst5, tau, "max"))
    out.append(_check("fiber_domination_C6", worst6, tau, "max"))

    # coercivity
    worst = np.inf
    for x in exp.xi_grid():
        lam = float(np.linalg.eigvalsh(assemble_fiber(a, mu, grid, x).matrix)[0])
        worst = min(worst, lam - consts.mu_lower * consts.C_a * float(x @ x))
    out.append(_check("coercivity_lambda_min", worst, -tau, "min"))
    lam2 = second_eigenvalue(assemble_fiber(a, mu, grid, np.zeros(grid.d)))
    out.append(_check("coercivity_second_eigenvalue", lam2 - consts.d0_bound, -tau, "min"))

    # Lipschitz bound
    lip = lipschitz_constant(a, mu)
    worst = -np.inf
    for _ in range(100):
        x, y = rng.uniform(-math.pi, math.pi, size=(2, grid.d))
        diff = operator_norm(assemble_fiber(a, mu, grid, x).matrix
                             - assemble_fiber(a, mu, grid, y).matrix)
        worst = max(worst, diff - lip * float(np.linalg.norm(x - y)))
    out.append(_check("lipschitz", worst, tau, "max"))

    # corrector and quadratic form
    herm = 0.0
    for x in exp.xi_grid()[:: max(1, len(exp.xi_grid()) // 8)]:
        k = corrector_K(g0, cell, grid, x, float(min(cfg.eps)))
        herm = max(herm, float(np.max(np.abs(k - k.conj().T))))
    out.append(_check("corrector_hermitian", herm, tol["hermitian"], "max"))
    qf = 0.0
    for _ in range(3):
        x = rng.uniform(-math.pi, math.pi, size=grid.d)
        u = rng.normal(size=grid.size) + 1j * rng.normal(size=grid.size)
        qf = max(qf, quadratic_form_check(assemble_fiber(a, mu, grid, x), u))
    out.append(_check("quadratic_form", qf, tol["quadratic_form"], "max"))
    return out


def _write_metadata(out: Path, cfg: ExperimentConfig, command: str, threads: int):
    write_json(out / "metadata.json", {
        "command": command, "version": __version__, "threads": threads,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict()})


def run(command: str, cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg, threads)
    status = 0
    if command == "constants":
        exp.write_constants(out)
    elif command == "cell":
        exp.write_cell(out)
    elif command == "effective":
        exp.write_effective(out)
    elif command == "threshold":
        exp.write_threshold(out)
    elif command == "rates":
        exp.write_rates(out)
    elif command == "verify-all":
        exp.write_constants(out)
        exp.write_cell(out)
        exp.write_effective(out)
        exp.write_threshold(out)
        exp.write_rates(out)
        checks = run_checks(exp)
        write_csv(out / "checks.csv", ["name", "value", "threshold", "margin", "passed"],
                  [(c["name"], c["value"], c["threshold"], c["margin"],
                    "true" if c["passed"] else "false") for c in checks])
        failed = [c["name"] for c in checks if not c["passed"]]
        write_json(out / "verify.json", {"passed": not failed, "failed": failed,
                                         "checks": checks})
        for c in checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} "
                  f"value={c['value']:.6g} threshold={c['threshold']:.6g}")
        if failed:
            print("failing checks: " + ", ".join(failed), file=sys.stderr)
            status = 1
    else:
        raise ValueError(f"unknown subcommand {command!r}")
    _write_metadata(out, cfg, command, threads)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nonloc-homog",
                                     description="Homogenization experiments for nonlocal "
                                                 "convolution-type operators.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads, 0 = all cores (env NONLOC_HOMOG_THREADS)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed", "expected an unsigned 64-bit integer")
            cfg.seed = args.seed
        threads = resolve_threads(args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    try:
        return run(args.command, cfg, out, threads)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
