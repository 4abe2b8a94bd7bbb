"""Riesz projections near the bottom of the spectrum and the threshold expansion.

For small |xi| the fiber operator A(xi) has one eigenvalue inside the circle
Gamma (centre d0/6, radius d0/3) and the rest of its spectrum beyond 2 d0/3.
F(xi) = -(1/2 pi i) int_Gamma (A(xi) - z)^{-1} dz is compared with

    P + [F]_1(xi)                    (projector, first order)
    [G]_2(xi) + [G]_3(xi)            (A(xi) F(xi), second and third order)

The differences F - P and A F are integrated as -R(z) dA R_0(z) with
dA = A(xi) - A(0) assembled directly, which keeps the residuals accurate down
to |xi|^4 well below machine epsilon times ||A||.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .cell import CellSolution, reduced_resolvent
from .fiber import (FiberOperator, Grid, assemble_fiber, fiber_increment, integral_operator,
                    kernel_quadrature, operator_norm)
from .kernels import KernelSpec, MuSpec

IDEMPOTENCY_TOL = 1e-9
MAX_CONTOUR_POINTS = 2048


@dataclass(frozen=True)
class Contour:
    center: float
    radius: float
    K: int = 128

    def __post_init__(self):
        if self.K < 64:
            raise ValueError("contour needs at least 64 quadrature points")
        if not self.radius > 0:
            raise ValueError("contour radius must be positive")

    @classmethod
    def around_threshold(cls, d0: float, K: int = 128) -> "Contour":
        """Circle enclosing [0, d0/3] through the midpoint of (d0/3, 2 d0/3)."""
        return cls(d0 / 6, d0 / 3, K)

    def doubled(self) -> "Contour":
        return Contour(self.center, self.radius, 2 * self.K)

    def nodes(self):
        """Points z_k and weights c_k with -(1/2 pi i) int f dz ~ sum c_k f(z_k)."""
        theta = 2 * math.pi * np.arange(self.K) / self.K
        e = np.exp(1j * theta)
        return self.center + self.radius * e, -(self.radius / self.K) * e


class ContourError(RuntimeError):
    pass


def _matrix(op) -> np.ndarray:
    return op.matrix if isinstance(op, FiberOperator) else np.asarray(op)


def _check_gap(eigs: np.ndarray, contour: Contour, xi=None):
    dist = np.abs(eigs - contour.center)
    bad = (dist > 0.5 * contour.radius) & (dist < 1.5 * contour.radius)
    where = "" if xi is None else f" at xi={list(np.round(np.atleast_1d(xi), 12))}"
    if np.any(bad):
        raise ContourError(f"contour hits spectrum{where}: eigenvalue {eigs[bad][0]:.6g}")
    inside = int(np.sum(dist <= 0.5 * contour.radius))
    if inside != 1:
        raise ContourError(f"expected one eigenvalue inside the contour{where}, found {inside}")


def _contour_sum(m: np.ndarray, contour: Contour, power: int) -> np.ndarray:
    n = m.shape[0]
    eye = np.eye(n)
    out = np.zeros((n, n), complex)
    for z, c in zip(*contour.nodes()):
        r = linalg.solve(m - z * eye, eye)
        out += (c * z ** power) * r
    return out


def riesz_projection(op, contour: Contour) -> np.ndarray:
    """Trapezoid quadrature of the Riesz projector, K doubled until idempotent to 1e-9."""
    m = _matrix(op)
    _check_gap(linalg.eigvalsh(m), contour, getattr(op, "xi", None))
    while True:
        f = _contour_sum(m, contour, 0)
        if np.linalg.norm(f @ f - f, 2) < IDEMPOTENCY_TOL or contour.K >= MAX_CONTOUR_POINTS:
            return f
        contour = contour.doubled()


def riesz_AF(op, contour: Contour) -> np.ndarray:
    """-(1/2 pi i) int_Gamma z (A - z)^{-1} dz, i.e. A F."""
    m = _matrix(op)
    _check_gap(linalg.eigvalsh(m), contour, getattr(op, "xi", None))
    return _contour_sum(m, contour, 1)


def spectral_projector(op) -> tuple[float, np.ndarray]:
    """Lowest eigenvalue and its rank-one projector from a dense eigendecomposition."""
    lam, vec = linalg.eigh(_matrix(op), subset_by_index=[0, 0])
    v = vec[:, 0]
    return float(lam[0]), np.outer(v, v.conj())


def constant_projector(grid: Grid) -> np.ndarray:
    return np.full((grid.size, grid.size), 1.0 / grid.size)


def _multi_index(alpha, d: int) -> tuple[int, ...]:
    alpha = tuple(int(x) for x in alpha)
    if len(alpha) != d or any(x < 0 for x in alpha):
        raise ValueError("multi-index must have d nonnegative entries")
    return alpha


def derivative_operator(a: KernelSpec, mu: MuSpec, grid: Grid, alpha) -> np.ndarray:
    """d^alpha A(0): kernel -(-i)^|alpha| sum_n (z+n)^alpha a(z+n), times mu."""
    alpha = _multi_index(alpha, grid.d)
    order = sum(alpha)
    if order > 4:
        raise ValueError("derivatives are available up to order 4")
    if order == 0:
        return assemble_fiber(a, mu, grid, np.zeros(grid.d)).matrix.copy()
    q = kernel_quadrature(a, grid)
    f = np.prod(q.t ** np.array(alpha), axis=1)
    w = -((-1j) ** order) * q.sums(f)
    return integral_operator(w, mu, grid)


def taylor_term(a: KernelSpec, mu: MuSpec, grid: Grid, xi, m: int) -> np.ndarray:
    """[Delta_m A](xi) = sum_{|alpha|=m} d^alpha A(0) xi^alpha / alpha!."""
    xi = np.atleast_1d(np.asarray(xi, float))
    q = kernel_quadrature(a, grid)
    f = (-1j * (q.t @ xi)) ** m / math.factorial(m)
    return -integral_operator(q.sums(f), mu, grid)


def F1_operator(cell: CellSolution, xi) -> np.ndarray:
    """[F]_1(xi) = sum_j xi_j (i (., v_j) 1 - i (., 1) v_j)."""
    xi = np.atleast_1d(np.asarray(xi, float))
    grid = cell.grid
    v = np.tensordot(xi, cell.v, axes=1)
    one = np.ones(grid.size)
    return 1j * grid.h * (np.outer(one, v) - np.outer(v, one))


def F_j_contour(a: KernelSpec, mu: MuSpec, grid: Grid, j: int) -> np.ndarray:
    """-P d_j A(0) R - R d_j A(0) P with R = R_0^perp(0)."""
    alpha = [0] * grid.d
    alpha[j] = 1
    dj = derivative_operator(a, mu, grid, alpha)
    p = constant_projector(grid)
    r = reduced_resolvent(a, mu, grid)
    return -p @ dj @ r - r @ dj @ p


def G_kl_contour(a: KernelSpec, mu: MuSpec, grid: Grid) -> np.ndarray:
    """G_kl = P dk dl A P - P dk A R dl A P - P dl A R dk A P, shape (d, d, n, n)."""
    d = grid.d
    p = constant_projector(grid)
    r = reduced_resolvent(a, mu, grid)
    first = []
    for k in range(d):
        alpha = [0] * d
        alpha[k] = 1
        first.append(derivative_operator(a, mu, grid, alpha))
    out = np.empty((d, d, grid.size, grid.size), complex)
    for k in range(d):
        for l in range(d):
            alpha = [0] * d
            alpha[k] += 1
            alpha[l] += 1
            dkl = derivative_operator(a, mu, grid, alpha)
            out[k, l] = (p @ dkl @ p - p @ first[k] @ r @ first[l] @ p
                         - p @ first[l] @ r @ first[k] @ p)
    return out


def G3_operator(a: KernelSpec, mu: MuSpec, grid: Grid, cell: CellSolution | None, xi,
                resolvent_perp: np.ndarray | None = None) -> np.ndarray:
    """Third-order term [G]_3(xi) of A(xi) F(xi) (eight-term formula)."""
    p = constant_projector(grid)
    r = reduced_resolvent(a, mu, grid) if resolvent_perp is None else resolvent_perp
    d1 = taylor_term(a, mu, grid, xi, 1)
    d2 = taylor_term(a, mu, grid, xi, 2)
    d3 = taylor_term(a, mu, grid, xi, 3)
    pd1 = p @ d1
    d1 @ p
    rd1 = r @ d1
    d1r = d1 @ r
    pd2p = p @ d2 @ p
    g = (p @ d3 @ p
         - pd1 @ r @ d2 @ p
         - p @ d2 @ rd1 @ p
         + pd1 @ r @ d1 @ rd1 @ p
         - rd1 @ pd2p
         - pd2p @ d1r
         + rd1 @ p @ d1 @ rd1 @ p
         + pd1 @ rd1 @ p @ d1r)
    return g


def xi_sweep_points(delta0: float, direction, m_max: int = 10) -> np.ndarray:
    theta = np.asarray(direction, float)
    theta = theta / np.linalg.norm(theta)
    return np.array([delta0 * 2.0 ** (-m) * theta for m in range(1, m_max + 1)])


def fit_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


COLUMNS = ("F_minus_P", "F_minus_P_F1", "AF_minus_G2", "AF_minus_G2_G3", "PG3P")
RATES = {"F_minus_P": 1, "F_minus_P_F1": 2, "AF_minus_G2": 3, "AF_minus_G2_G3": 4}


@dataclass
class ThresholdReport:
    xi: np.ndarray
    xi_norm: np.ndarray
    columns: dict
    G3_norm: np.ndarray
    lowest_eigenvalue: np.ndarray
    idempotency: np.ndarray
    contour_points: np.ndarray
    slopes: dict = field(default_factory=dict)
    bound_margins: dict = field(default_factory=dict)
    low_order_fit: dict = field(default_factory=dict)

    def rows(self):
        for i in range(self.xi_norm.size):
            yield (float(self.xi_norm[i]),) + tuple(float(self.columns[c][i]) for c in COLUMNS)


def _sweep_point(a, mu, grid, xi, contour, cell, g0, a0_eig, r_perp):
    xi = np.asarray(xi, float)
    op = assemble_fiber(a, mu, grid, xi)
    m = op.matrix
    eigs = linalg.eigvalsh(m)
    _check_gap(eigs, contour, xi)
    lam0, v0 = a0_eig
    delta = fiber_increment(a, mu, grid, xi, 1)
    p = constant_projector(grid)
    eye = np.eye(grid.size)
    cur = contour
    while True:
        fmp = np.zeros_like(m)
        af = np.zeros_like(m)
        for z, c in zip(*cur.nodes()):
            r0 = (v0 / (lam0 - z)) @ v0.conj().T
            y = linalg.solve(m - z * eye, delta @ r0)
            fmp -= c * y
            af -= (c * z) * y
        defect = np.linalg.norm((p + fmp) @ (p + fmp) - (p + fmp), 2)
        if defect < IDEMPOTENCY_TOL or cur.K >= MAX_CONTOUR_POINTS:
            break
        cur = cur.doubled()
    f1 = F1_operator(cell, xi)
    g2 = float(xi @ g0 @ xi) * p
    g3 = G3_operator(a, mu, grid, cell, xi, r_perp)
    vals = {
        "F_minus_P": operator_norm(fmp),
        "F_minus_P_F1": operator_norm(fmp - f1),
        "AF_minus_G2": operator_norm(af - g2),
        "AF_minus_G2_G3": operator_norm(af - g2 - g3),
        "PG3P": operator_norm(p @ g3 @ p),
    }
    return vals, operator_norm(g3), float(eigs[0]), float(defect), cur.K, operator_norm(af)


def threshold_sweep(a: KernelSpec, mu: MuSpec, grid: Grid, xi_list, contour: Contour,
                    cell: CellSolution, g0, constants=None, threads: int = 1,
                    fit_points: int | None = None) -> ThresholdReport:
    """Residual norms of the threshold expansion along a list of quasimomenta."""
    xi_arr = np.atleast_2d(np.asarray(xi_list, float))
    if xi_arr.shape[1] != grid.d:
        xi_arr = xi_arr.reshape(-1, grid.d)
    norms = np.linalg.norm(xi_arr, axis=1)
    order = np.argsort(-norms, kind="stable")
    xi_arr, norms = xi_arr[order], norms[order]
    g0m = np.asarray(getattr(g0, "g0", g0), float).reshape(grid.d, grid.d)
    a0 = assemble_fiber(a, mu, grid, np.zeros(grid.d)).matrix
    a0_eig = linalg.eigh(a0)
    r_perp = reduced_resolvent(a, mu, grid)

    def work(x):
        return _sweep_point(a, mu, grid, x, contour, cell, g0m, a0_eig, r_perp)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(work, xi_arr))
    else:
        out = [work(x) for x in xi_arr]
    cols = {c: np.array([o[0][c] for o in out]) for c in COLUMNS}
    rep = ThresholdReport(xi_arr, norms, cols,
                          np.array([o[1] for o in out]), np.array([o[2] for o in out]),
                          np.array([o[3] for o in out]), np.array([o[4] for o in out]))
    k = fit_points if fit_points is not None else max(2, norms.size // 2)
    sel = slice(norms.size - k, None)
    for c in RATES:
        rep.slopes[c] = fit_slope(norms[sel], cols[c][sel])
    if constants is not None:
        consts = {"F_minus_P": constants.C1, "F_minus_P_F1": constants.C2,
                  "AF_minus_G2": constants.C3, "AF_minus_G2_G3": constants.C4}
        for c, cst in consts.items():
            rep.bound_margins[c] = float(np.min(cst * norms ** RATES[c] - cols[c]))
    # ||A F|| = lowest eigenvalue; its constant and linear coefficients must vanish
    af = np.array([o[5] for o in out])
    tt = norms[sel]
    coef = np.linalg.lstsq(np.vander(tt, 4, increasing=True), af[sel], rcond=None)[0]
    rep.low_order_fit = {"constant": float(coef[0]), "linear": float(coef[1]),
                         "quadratic": float(coef[2])}
    return rep
