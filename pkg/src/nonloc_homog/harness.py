"""Explicit constants, the corrector K(xi, eps) and resolvent error sweeps.

Whole-space errors are obtained from fiber errors through the exact scaling
identity: the norm for the eps-scaled operator equals eps^2 times the supremum
over xi of the fiber-level norm.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .cell import CellSolution, appendix_details
from .fiber import (Grid, assemble_fiber, effective_symbol, fourier_multiplier, make_grid,
                    mode_vectors, operator_norm, resolvent)
from .kernels import KernelSpec, MuSpec, moment, symbol_floor
from .threshold import F1_operator, constant_projector, fit_slope


@dataclass(frozen=True)
class ConstantsBundle:
    mu_lower: float
    mu_upper: float
    M0: float
    M1: float
    M2: float
    M3: float
    M4: float
    C_pi: float
    M_cal: float
    r_a: float
    C_r_a: float
    C_a: float
    d0_bound: float
    delta0: float
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    C6: float
    C_tilde_2pi: float
    frak_C: float
    t0: float
    C5_tilde: float
    C6_tilde: float
    v_sup_bound: float
    bold_C1: float
    bold_C2: float

    def as_dict(self) -> dict:
        return asdict(self)


def default_grid(d: int) -> Grid:
    return make_grid(d, {1: 64, 2: 32, 3: 16}[d])


def constants_bundle(a: KernelSpec, mu: MuSpec, grid: Grid | None = None) -> ConstantsBundle:
    """All explicit constants; the appendix constant is evaluated on ``grid``."""
    d = a.d
    if mu.d != d:
        raise ValueError("kernel and mu dimensions differ")
    grid = default_grid(d) if grid is None else grid
    m = [moment(a, k) for k in range(5)]
    if not all(math.isfinite(x) for x in m):
        raise ValueError("kernel moments must be finite")
    lo, hi = mu.lower, mu.upper
    m1, m2, m3, m4 = m[1:]
    c_pi = symbol_floor(a, math.pi)
    m_cal = m2 / d                      # radial kernels: int z z^T a = (M2/d) I
    r_a = 3 * m_cal / (2 * m3)
    c_r = symbol_floor(a, r_a)
    c_a = min(m_cal / 4, c_r / (math.pi ** 2 * d), c_pi / (math.pi ** 2 * d))
    d0 = lo * c_pi
    delta0 = lo * c_pi / (3 * m1 * hi)
    k = (math.pi + 2) / math.pi
    c1 = 6 * (math.pi + 2) * hi * m1 / (math.pi * d0)
    c2 = k * (36 * hi ** 2 * m1 ** 2 / d0 ** 2 + 3 * hi * m2 / d0)
    c3 = k / 2 * (6 ** 3 * hi ** 3 * m1 ** 3 / d0 ** 2 + hi * m3 + 36 * hi ** 2 * m1 * m2 / d0)
    c4 = k / 2 * (6 ** 4 * hi ** 4 * m1 ** 4 / d0 ** 3 + hi * m4 / 4
                  + hi ** 2 * (12 * m1 * m3 + 9 * m2 ** 2) / d0
                  + 6 ** 4 * hi ** 3 * m1 ** 2 * m2 / (4 * d0 ** 2))
    mc = lo * c_a
    c5 = math.sqrt(3 / d0) + c1 / mc ** 0.5 + c3 / mc ** 1.5
    c6 = 3 / d0 + (2 * c1 ** 2 + 2 * c2) / mc + (3 * c1 * c3 + c4) / mc ** 2 + c3 ** 2 / mc ** 3
    app = appendix_details(a, mu, grid)
    c5t = max(c5, 2 / (math.sqrt(mc) * delta0))
    c6t = max(c6, 2 / (mc * delta0 ** 2) + 2 * c1 / (mc * delta0))
    v_sup = hi * m1 * app.frak_C
    bold1 = c5t + 1 / (math.sqrt(mc) * math.pi)
    bold2 = c6t + 1 / (mc * math.pi ** 2) + 2 * math.sqrt(d) * v_sup / (mc * math.pi)
    out = ConstantsBundle(lo, hi, *m, c_pi, m_cal, r_a, c_r, c_a, d0, delta0, c1, c2, c3, c4,
                          c5, c6, app.C_tilde_2pi, app.frak_C, app.t0, c5t, c6t, v_sup,
                          bold1, bold2)
    bad = [k for k, v in out.as_dict().items() if not (math.isfinite(v) and v > 0)]
    if bad:
        raise ValueError(f"non-positive or non-finite constants: {bad}")
    if not delta0 < math.pi:
        raise ValueError("delta0 must be smaller than pi")
    return out


def _v_stack(cell: CellSolution, grid: Grid) -> np.ndarray:
    if cell.grid != grid:
        raise ValueError("cell solution lives on a different grid")
    return np.asarray(cell.v)


def corrector_K(g0, cell: CellSolution, grid: Grid, xi, eps: float) -> np.ndarray:
    """K = -i sum [v_j](D_j + xi_j) R0 + i sum R0 (D_j + xi_j) [v_j], R0 = (A0(xi) + eps^2)^{-1}."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    v = _v_stack(cell, grid)
    k = mode_vectors(grid, xi)
    s = effective_symbol(g0, grid, xi) + eps ** 2
    out = np.zeros((grid.size, grid.size), complex)
    for j in range(grid.d):
        if not np.any(v[j]):
            continue
        mj = fourier_multiplier(grid, k[:, j] / s)
        out += -1j * v[j][:, None] * mj + 1j * mj * v[j][None, :]
    return out


def effective_resolvent(g0, grid: Grid, xi, eps: float) -> np.ndarray:
    s = effective_symbol(g0, grid, xi) + eps ** 2
    m = fourier_multiplier(grid, 1.0 / s)
    return 0.5 * (m + m.conj().T)


def fiber_error(a: KernelSpec, mu: MuSpec, grid: Grid, g0, cell: CellSolution, xi, eps: float,
                with_corrector: bool = False) -> float:
    """||(A(xi)+eps^2)^{-1} - (A0(xi)+eps^2)^{-1} [- K(xi, eps)]||."""
    r = resolvent(assemble_fiber(a, mu, grid, xi), eps ** 2)
    diff = r - effective_resolvent(g0, grid, xi, eps)
    if with_corrector:
        diff = diff - corrector_K(g0, cell, grid, xi, eps)
    return operator_norm(diff)


def threshold_errors(a: KernelSpec, mu: MuSpec, grid: Grid, g0, cell: CellSolution, xi,
                     eps: float) -> tuple[float, float]:
    """Errors of the rank-one threshold approximations of the fiber resolvent.

    Returns (||R - c P||, ||R - c P - [F]_1 c P - c P [F]_1||) with
    c = (<g0 xi, xi> + eps^2)^{-1}.
    """
    xi = np.atleast_1d(np.asarray(xi, float))
    r = resolvent(assemble_fiber(a, mu, grid, xi), eps ** 2)
    g = np.asarray(getattr(g0, "g0", g0), float)
    c = 1.0 / (float(xi @ g @ xi) + eps ** 2)
    p = constant_projector(grid)
    f1 = F1_operator(cell, xi)
    plain = r - c * p
    return operator_norm(plain), operator_norm(plain - c * (f1 @ p + p @ f1))


def lipschitz_constant(a: KernelSpec, mu: MuSpec) -> float:
    """mu+ M1(a): Lipschitz constant of xi -> A(xi)."""
    return mu.upper * moment(a, 1)


def xi_sampling_bound(a: KernelSpec, mu: MuSpec, spacing: float, eps_list=None) -> float:
    """Slack on sampled suprema: Lipschitz constant * spacing * max eps^{-4}.

    The eps^{-4} factor bounds ||R(xi)|| ||R(eta)|| in the resolvent identity.
    Without ``eps_list`` the bare Lipschitz part is returned.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    base = lipschitz_constant(a, mu) * spacing
    if eps_list is None:
        return base
    return base * max(float(e) ** -4 for e in eps_list)


def default_xi_grid(d: int, points: int = 17, refinement: int = 8) -> np.ndarray:
    """Tensor grid on [-pi, pi)^d plus a geometric refinement toward 0 along each axis."""
    axis = -math.pi + 2 * math.pi * np.arange(points) / points
    mesh = np.meshgrid(*[axis] * d, indexing="ij")
    pts = [np.stack([m.ravel() for m in mesh], axis=-1)]
    for j in range(d):
        ref = np.zeros((refinement, d))
        ref[:, j] = math.pi * 2.0 ** -np.arange(1, refinement + 1)
        pts.append(ref)
    return np.concatenate(pts)


@dataclass
class RateReport:
    eps: np.ndarray
    fiber_sup_plain: np.ndarray
    fiber_sup_corrected: np.ndarray
    ws_plain: np.ndarray
    ws_corrected: np.ndarray
    bound_plain: np.ndarray
    bound_corrected: np.ndarray
    argmax_plain: np.ndarray
    argmax_corrected: np.ndarray
    slopes: dict = field(default_factory=dict)
    slack: float = 0.0

    def rows(self):
        for i in range(self.eps.size):
            yield (float(self.eps[i]), float(self.fiber_sup_plain[i]),
                   float(self.fiber_sup_corrected[i]), float(self.ws_plain[i]),
                   float(self.ws_corrected[i]), float(self.bound_plain[i]),
                   float(self.bound_corrected[i]))

    def row_checks(self) -> tuple[np.ndarray, np.ndarray]:
        """Margins bound + eps^2 * slack - measured for both columns."""
        extra = self.eps ** 2 * self.slack
        return (self.bound_plain + extra - self.ws_plain,
                self.bound_corrected + extra - self.ws_corrected)


def _errors_at(a, mu, grid, g0, cell, xi, eps_list):
    lam, vec = linalg.eigh(assemble_fiber(a, mu, grid, xi).matrix)
    plain, corr = [], []
    for eps in eps_list:
        r = (vec / (lam + eps ** 2)) @ vec.conj().T
        diff = r - effective_resolvent(g0, grid, xi, eps)
        plain.append(operator_norm(0.5 * (diff + diff.conj().T)))
        diff = diff - corrector_K(g0, cell, grid, xi, eps)
        corr.append(operator_norm(0.5 * (diff + diff.conj().T)))
    return np.array(plain), np.array(corr)


def rate_sweep(a: KernelSpec, mu: MuSpec, grid: Grid, xi_grid, eps_list, g0, cell: CellSolution,
               constants: ConstantsBundle | None = None, tau_q: float = 0.0,
               xi_spacing: float | None = None, threads: int = 1,
               fit_points: int = 5) -> RateReport:
    """Sup over xi of plain and corrected fiber errors for each eps, scaled by eps^2."""
    eps = np.asarray(eps_list, float)
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps values must be positive and strictly decreasing")
    xi_grid = np.atleast_2d(np.asarray(xi_grid, float)).reshape(-1, grid.d)

    def work(x):
        return _errors_at(a, mu, grid, g0, cell, x, eps)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            res = list(ex.map(work, xi_grid))
    else:
        res = [work(x) for x in xi_grid]
    plain = np.array([r[0] for r in res])
    corr = np.array([r[1] for r in res])
    sup_p = plain.max(axis=0)
    sup_c = corr.max(axis=0)
    if constants is None:
        b1 = b2 = np.full(eps.size, np.nan)
    else:
        b1 = constants.bold_C1 * eps
        b2 = constants.bold_C2 * eps ** 2
    if xi_spacing is None:
        xi_spacing = 2 * math.pi / 17
    slack = xi_sampling_bound(a, mu, xi_spacing, eps) + tau_q
    rep = RateReport(eps, sup_p, sup_c, eps ** 2 * sup_p, eps ** 2 * sup_c, b1, b2,
                     xi_grid[plain.argmax(axis=0)], xi_grid[corr.argmax(axis=0)], slack=slack)
    sel = slice(max(0, eps.size - fit_points), None)
    rep.slopes = {"ws_plain": fit_slope(eps[sel], rep.ws_plain[sel]),
                  "ws_corrected": fit_slope(eps[sel], rep.ws_corrected[sel])}
    return rep
