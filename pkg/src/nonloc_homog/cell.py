"""Cell problems for the corrector fields and the L-infinity diagnostics.

w_j(x) = int (x_j - y_j) a(x - y) mu(x, y) dy and
w_kl(x) = int (x_k - y_k)(x_l - y_l) a(x - y) mu(x, y) dy are assembled with the
same kernel quadrature as the fiber operators; v_j is the mean-zero solution of
A(0) v_j = w_j.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from .fiber import (Grid, assemble_fiber, cell_average_kernel, integral_operator,
                    kernel_quadrature, potential_p)
from .kernels import KernelSpec, MuSpec, moment, symbol_floor


@dataclass(frozen=True, eq=False)
class CellSolution:
    v: np.ndarray          # (d, n) corrector fields
    w: np.ndarray          # (d, n)
    wkl: np.ndarray        # (d, d, n)
    residuals: np.ndarray  # (d,)
    sup_norms: np.ndarray  # (d,)
    grid: Grid
    kernel: KernelSpec
    mu: MuSpec

    @property
    def d(self) -> int:
        return self.grid.d


def _moment_weights(a: KernelSpec, grid: Grid, alpha) -> np.ndarray:
    q = kernel_quadrature(a, grid)
    f = np.ones(q.weight.shape)
    for j in alpha:
        f = f * q.t[:, j]
    return q.sums(f)


def compute_w(a: KernelSpec, mu: MuSpec, grid: Grid):
    """Return (w, wkl): w has shape (d, n), wkl shape (d, d, n)."""
    d = grid.d
    w = np.array([integral_operator(_moment_weights(a, grid, (j,)), mu, grid).sum(axis=1)
                  for j in range(d)])
    wkl = np.empty((d, d, grid.size))
    for k in range(d):
        for l in range(k, d):
            wkl[k, l] = integral_operator(_moment_weights(a, grid, (k, l)), mu, grid).sum(axis=1)
            wkl[l, k] = wkl[k, l]
    return w, wkl


class _ProjectedSolver:
    """Solves A(0) v = f on mean-zero functions via the shifted matrix A(0) + c P."""

    def __init__(self, a0: np.ndarray):
        n = a0.shape[0]
        self.a0 = a0
        shift = float(np.mean(np.diag(a0)))
        self.shift = shift
        try:
            self.fac = linalg.cho_factor(a0 + shift / n * np.ones((n, n)))
        except linalg.LinAlgError:
            raise RuntimeError("restricted cell operator is singular") from None

    def solve(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, float)
        v = linalg.cho_solve(self.fac, f - f.mean())
        return v - v.mean()

    def inverse(self) -> np.ndarray:
        """P_perp A(0)^{-1} P_perp as a dense matrix."""
        n = self.a0.shape[0]
        proj = np.eye(n) - np.full((n, n), 1.0 / n)
        r = linalg.cho_solve(self.fac, proj)
        return proj @ r


def _a0_real(a: KernelSpec, mu: MuSpec, grid: Grid) -> np.ndarray:
    return assemble_fiber(a, mu, grid, np.zeros(grid.d)).matrix.real


def _residual(a0, v, w, scale: float = 0.0) -> float:
    """||A(0) v - w|| / ||w||; below 1e-8 * scale the right side counts as zero."""
    nw = max(np.linalg.norm(w), 1e-8 * scale)
    r = np.linalg.norm(a0 @ v - w)
    return float(r / nw) if nw > 0 else float(r)


def solve_cell(a: KernelSpec, mu: MuSpec, grid: Grid, j: int) -> np.ndarray:
    """Mean-zero real solution v_j of A(0) v_j = w_j."""
    if not 0 <= j < grid.d:
        raise ValueError("direction index out of range")
    w, _ = compute_w(a, mu, grid)
    return _ProjectedSolver(_a0_real(a, mu, grid)).solve(w[j])


def solve_cell_fixed_point(a: KernelSpec, mu: MuSpec, grid: Grid, j: int,
                           damping: float = 0.5, rtol: float = 1e-12,
                           maxiter: int = 200_000) -> np.ndarray:
    """Damped iteration v <- (1-t) v + t (w_j + B(0) v) / p, projected to mean zero."""
    w, _ = compute_w(a, mu, grid)
    f = w[j]
    p = potential_p(a, mu, grid)
    b = p[:, None] * np.eye(grid.size) - _a0_real(a, mu, grid)
    v = np.zeros(grid.size)
    for _ in range(maxiter):
        new = (1 - damping) * v + damping * (f + b @ v) / p
        new -= new.mean()
        step = np.linalg.norm(new - v)
        v = new
        if step <= rtol * max(np.linalg.norm(v), np.finfo(float).tiny):
            return v
        if not np.any(v):
            return v
    raise RuntimeError("fixed-point iteration did not converge")


def cell_solution(a: KernelSpec, mu: MuSpec, grid: Grid) -> CellSolution:
    w, wkl = compute_w(a, mu, grid)
    a0 = _a0_real(a, mu, grid)
    solver = _ProjectedSolver(a0)
    v = np.array([solver.solve(w[j]) for j in range(grid.d)])
    scale = mu.upper * moment(a, 1) * math.sqrt(grid.size)
    res = np.array([_residual(a0, v[j], w[j], scale) for j in range(grid.d)])
    for arr in (v, w, wkl, res):
        arr.setflags(write=False)
    sup = np.max(np.abs(v), axis=1)
    sup.setflags(write=False)
    return CellSolution(v, w, wkl, res, sup, grid, a, mu)


def reduced_resolvent(a: KernelSpec, mu: MuSpec, grid: Grid) -> np.ndarray:
    """R_0^perp(0) = P_perp A(0)^{-1} P_perp."""
    return _ProjectedSolver(_a0_real(a, mu, grid)).inverse()


def rearrangement_F(a_tilde, t: float, copies: int = 1) -> float:
    """Largest integral of a_tilde over a set of measure <= t.

    ``a_tilde`` holds grid values on the unit cell (each node carries measure
    1/n).  With ``copies`` > 1 the function is taken on a union of that many
    translated cells (total measure ``copies``).  Piecewise linear in t.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    vals = np.sort(np.asarray(a_tilde, float).ravel())[::-1]
    if np.any(vals < 0):
        raise ValueError("a_tilde must be nonnegative")
    n = vals.size
    total = float(copies)
    if t > total * (1 + 1e-12):
        raise ValueError("t exceeds the measure of the domain")
    quantum = 1.0 / n
    vals = np.repeat(vals, copies)
    k = min(int(math.floor(t / quantum + 1e-9)), vals.size)
    mass = quantum * float(np.sum(vals[:k]))
    if k < vals.size:
        mass += (t - k * quantum) * vals[k]
    return mass


def _cell_symbol(values: np.ndarray, grid: Grid, y: np.ndarray) -> np.ndarray:
    """int (1 - cos<z, y>) f(z) dz for f piecewise constant on the grid cells."""
    x = grid.nodes
    h = grid.spacing
    y = np.atleast_2d(y)
    sinc = np.prod(np.sinc(y * h / (2 * math.pi)), axis=1)
    cos = np.cos(y @ x.T) @ values
    return grid.h * (values.sum() - sinc * cos)


def _min_symbol_outside(values: np.ndarray, grid: Grid, radius: float) -> float:
    """Minimum of the piecewise-constant symbol over |y| >= radius."""
    ymax = 2 * math.pi * min(grid.N, 64 if grid.d == 1 else 16)
    if grid.d == 1:
        ys = np.linspace(radius, ymax, int(200 * (ymax - radius) / (2 * math.pi)) + 2)[:, None]
    else:
        radii = np.linspace(radius, ymax, int(40 * (ymax - radius) / (2 * math.pi)) + 2)
        ang = np.linspace(0, math.pi, 64 if grid.d == 2 else 16, endpoint=False)
        if grid.d == 2:
            dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            pol = np.linspace(0, math.pi, 17)
            dirs = np.stack([np.outer(np.sin(pol), np.cos(2 * ang)).ravel(),
                             np.outer(np.sin(pol), np.sin(2 * ang)).ravel(),
                             np.repeat(np.cos(pol), ang.size)], axis=1)
        ys = (radii[:, None, None] * dirs[None]).reshape(-1, grid.d)
    vals = np.concatenate([_cell_symbol(values, grid, ys[s:s + 4096])
                           for s in range(0, ys.shape[0], 4096)])
    i = int(np.argmin(vals))
    best = float(vals[i])
    if grid.d == 1:
        lo = ys[max(i - 1, 0), 0]
        hi = ys[min(i + 1, ys.shape[0] - 1), 0]
        if hi > lo:
            res = minimize_scalar(lambda s: float(_cell_symbol(values, grid, np.array([[s]]))[0]),
                                  bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            best = min(best, float(res.fun))
    return best


@dataclass(frozen=True)
class AppendixConstant:
    frak_C: float
    t0: float
    C_tilde_2pi: float
    norm_a1: float
    norm_a: float
    first_branch: float
    second_branch: float


def appendix_details(a: KernelSpec, mu: MuSpec, grid: Grid) -> AppendixConstant:
    at = cell_average_kernel(a, grid)
    a1 = np.minimum(at, 1.0)
    norm_a1 = float(grid.h * a1.sum())
    norm_a = float(grid.h * at.sum())
    c2pi = _min_symbol_outside(a1, grid, 2 * math.pi)
    if not c2pi > 0:
        raise RuntimeError("symbol of min(a_tilde, 1) vanishes outside |y| >= 2 pi")
    lo, hi = mu.lower, mu.upper
    copies = 4 ** grid.d
    # F is piecewise linear and nondecreasing: scan the quanta k/n
    vals = np.repeat(np.sort(at)[::-1], copies)
    cum = grid.h * np.cumsum(vals)
    ok = hi * cum <= 0.5 * lo * norm_a1
    if not ok[0]:
        raise RuntimeError("rearrangement too coarse: no admissible t0 on the grid")
    k = int(np.nonzero(ok)[0][-1]) + 1 if ok.all() else int(np.argmin(ok))
    t0 = k * grid.h
    first = (t0 * lo * c2pi) ** -2
    second = (hi / lo + math.sqrt(2 / (lo * norm_a1) + (hi / lo) ** 2)) ** 2
    return AppendixConstant(max(first, second), t0, c2pi, norm_a1, norm_a, first, second)


def appendix_constant(a: KernelSpec, mu: MuSpec, grid: Grid) -> float:
    """The L-infinity constant frak C(a_tilde, mu) of the cell-problem inverse."""
    return appendix_details(a, mu, grid).frak_C


def l2_sup_bound(a: KernelSpec, mu: MuSpec, grid: Grid) -> float:
    """mu+ M1 (1/(mu- |a|_1) + mu+ |a|_2 / (mu-^2 C_pi |a|_1)), from the equation directly."""
    at = cell_average_kernel(a, grid)
    n1 = float(grid.h * at.sum())
    n2 = math.sqrt(float(grid.h * np.sum(at ** 2)))
    lo, hi = mu.lower, mu.upper
    c_pi = symbol_floor(a, math.pi)
    return hi * moment(a, 1) * (1 / (lo * n1) + hi * n2 / (lo ** 2 * c_pi * n1))


@dataclass(frozen=True)
class SupBoundReport:
    sup_norms: tuple[float, ...]
    bound_linf: float
    bound_l2: float
    margins_linf: tuple[float, ...]
    margins_l2: tuple[float, ...]
    passed: tuple[bool, ...]

    @property
    def ok(self) -> bool:
        return all(self.passed)


def check_sup_bound(cell: CellSolution, a: KernelSpec, mu: MuSpec, frak_C: float) -> SupBoundReport:
    bound = mu.upper * moment(a, 1) * frak_C
    alt = l2_sup_bound(a, mu, cell.grid)
    sups = tuple(float(s) for s in cell.sup_norms)
    m1 = tuple(bound - s for s in sups)
    m2 = tuple(alt - s for s in sups)
    passed = tuple(x >= 0 and y >= 0 for x, y in zip(m1, m2))
    return SupBoundReport(sups, bound, alt, m1, m2, passed)
