"""Discretized fiber operators on the torus grid.

The fiber operator A(xi) acts on grid functions u_k = u(k/N) by

    (A(xi)u)_i = p_i u_i - sum_j W_xi(i - j) mu(x_i, x_j) u_j,

where W_xi(k) = sum_n int_{cell_k} a(t+n) exp(-i<xi, t+n>) dt integrates the
kernel exactly over the grid cell around z_k (Gauss-Legendre, split at the
kernel's non-smooth radii).  p_i = sum_j W_0(i - j) mu(x_i, x_j), so A(0)1 = 0
exactly, and the xi-derivatives of this family are integral operators of the
same shape.  All matrices act in the Euclidean grid inner product, whose
operator norm equals the L2(Omega) norm of piecewise constant functions.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.sparse import linalg as sparse_linalg

from .kernels import KernelSpec, MuSpec, eval_mu

MAX_NODES = 16384
DENSE_NORM_LIMIT = 4096


@dataclass(frozen=True)
class Grid:
    """Uniform grid k/N on the unit cell, N points per dimension."""

    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if self.N % 2:
            raise ValueError("N must be even")
        if self.N < 8:
            raise ValueError("N must be at least 8")
        if self.N ** self.d > MAX_NODES:
            raise ValueError(f"N^d = {self.N ** self.d} exceeds the cap {MAX_NODES}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N ** self.d

    @property
    def h(self) -> float:
        return float(self.N) ** (-self.d)

    @property
    def spacing(self) -> float:
        return 1.0 / self.N

    @property
    def indices(self) -> np.ndarray:
        return np.indices(self.shape).reshape(self.d, -1).T

    @property
    def nodes(self) -> np.ndarray:
        return self.indices / self.N

    def inner(self, u, v) -> complex:
        """L2(Omega) inner product (u, v) = h sum u conj(v)."""
        return self.h * np.vdot(v, u)

    def l2norm(self, u) -> float:
        return math.sqrt(self.h) * float(np.linalg.norm(u))


def make_grid(d: int, N: int) -> Grid:
    return Grid(int(d), int(N))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@functools.lru_cache(maxsize=8)
def difference_index(grid: Grid) -> np.ndarray:
    """Flat index of (idx_i - idx_j) mod N for every node pair."""
    idx = grid.indices.T
    diff = (idx[:, :, None] - idx[:, None, :]) % grid.N
    flat = np.ravel_multi_index(tuple(diff), grid.shape).astype(np.int32)
    return _readonly(flat)


@functools.lru_cache(maxsize=8)
def mu_matrix(mu: MuSpec, grid: Grid) -> np.ndarray:
    if mu.d != grid.d:
        raise ValueError("mu dimension does not match the grid")
    x = grid.nodes
    return _readonly(eval_mu(mu, x[:, None, :], x[None, :, :]))


@dataclass(frozen=True, eq=False)
class KernelQuadrature:
    """Quadrature nodes t (shape (M, d)) for integrals of a over R^d.

    ``weight`` already includes a(t); ``cell`` is the (mod N) grid cell that
    contains t, as a multi-index and as a flat index.
    """

    t: np.ndarray
    weight: np.ndarray
    cell: np.ndarray
    cell_flat: np.ndarray
    size: int

    def sums(self, values) -> np.ndarray:
        """Cell sums of weight * values, one entry per grid node."""
        values = np.asarray(values)
        f = self.weight * values
        if np.iscomplexobj(f):
            return (np.bincount(self.cell_flat, f.real, self.size)
                    + 1j * np.bincount(self.cell_flat, f.imag, self.size))
        return np.bincount(self.cell_flat, f, self.size)


def _axis_pieces(grid: Grid, reach: float, cuts, sub: int, order: int):
    h = grid.spacing
    mmax = int(math.ceil(reach / h + 0.5))
    edges = (np.arange(-mmax, mmax + 2) - 0.5) * h
    if sub > 1:
        frac = np.arange(sub) / sub
        edges = np.concatenate([(edges[:-1, None] + h * frac).ravel(), edges[-1:]])
    if cuts:
        c = np.asarray(cuts, float)
        c = np.concatenate([c, -c])
        c = c[(c > edges[0]) & (c < edges[-1])]
        edges = np.unique(np.concatenate([edges, c]))
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1], edges[1:]
    keep = hi - lo > 1e-14 * h
    lo, hi = lo[keep], hi[keep]
    cell = np.floor(0.5 * (lo + hi) / h + 0.5).astype(np.int64)
    nodes = (0.5 * (hi - lo)[:, None] * x + 0.5 * (hi + lo)[:, None]).ravel()
    weights = (0.5 * (hi - lo)[:, None] * w).ravel()
    cells = np.repeat(cell, order)
    return nodes, weights, cells


@functools.lru_cache(maxsize=16)
def kernel_quadrature(a: KernelSpec, grid: Grid) -> KernelQuadrature:
    if a.d != grid.d:
        raise ValueError("kernel dimension does not match the grid")
    reach = a.support_radius
    if grid.d == 1:
        t, w, m = _axis_pieces(grid, reach, a.breakpoints, 1, 8)
        t = t[:, None]
        m = m[:, None]
    else:
        sub, order = (1, 6) if a.smooth else (4, 4)
        t1, w1, m1 = _axis_pieces(grid, reach, (), sub, order)
        mesh = np.meshgrid(*[np.arange(t1.size)] * grid.d, indexing="ij")
        sel = np.stack([g.ravel() for g in mesh], axis=-1)
        t = t1[sel]
        keep = np.linalg.norm(t, axis=-1) <= reach
        sel = sel[keep]
        t = t[keep]
        w = np.prod(w1[sel], axis=-1)
        m = m1[sel]
    val = a.profile(np.linalg.norm(t, axis=-1))
    nz = val > 0
    cell = m[nz] % grid.N
    flat = np.ravel_multi_index(tuple(cell.T), grid.shape)
    q = KernelQuadrature(_readonly(t[nz]), _readonly(w[nz] * val[nz]),
                         _readonly(cell), _readonly(flat), grid.size)
    return q


def phase_remainder(x, order: int = 0) -> np.ndarray:
    """exp(-i x) - sum_{k<order} (-i x)^k / k!, accurate for small |x|."""
    x = np.asarray(x, float)
    if order == 0:
        return np.exp(-1j * x)
    out = np.empty(x.shape, complex)
    small = np.abs(x) < 1.0
    xs = x[small]
    term = (-1j * xs) ** order / math.factorial(order)
    acc = term.copy()
    for k in range(order + 1, order + 30):
        term = term * (-1j * xs) / k
        acc += term
    out[small] = acc
    xl = x[~small]
    direct = np.exp(-1j * xl)
    for k in range(order):
        direct -= (-1j * xl) ** k / math.factorial(k)
    out[~small] = direct
    if order == 1:
        # exp(-ix) - 1 = -2 sin^2(x/2) - i sin x without cancellation
        out[~small] = -2 * np.sin(xl / 2) ** 2 - 1j * np.sin(xl)
    return out


def kernel_cell_weights(a: KernelSpec, grid: Grid, xi=None, order: int = 0) -> np.ndarray:
    """W(k) = cell integrals of a(t) times the phase remainder of order ``order``."""
    q = kernel_quadrature(a, grid)
    if xi is None or not np.any(xi):
        if order > 0:
            return np.zeros(grid.size, complex)
        return q.sums(np.ones(q.weight.shape))
    xi = np.atleast_1d(np.asarray(xi, float))
    return q.sums(phase_remainder(q.t @ xi, order))


def cell_average_kernel(a: KernelSpec, grid: Grid) -> np.ndarray:
    """Grid function a_tilde(0, z_k) as the cell average of the periodized kernel."""
    return kernel_cell_weights(a, grid) / grid.h


def integral_operator(weights: np.ndarray, mu: MuSpec, grid: Grid) -> np.ndarray:
    """Matrix of u -> sum_j weights(i - j) mu(x_i, x_j) u_j."""
    return weights[difference_index(grid)] * mu_matrix(mu, grid)


def potential_p(a: KernelSpec, mu: MuSpec, grid: Grid) -> np.ndarray:
    """p(x_i) = sum_j W_0(i - j) mu(x_i, x_j), the row sums of the xi=0 integral operator."""
    return integral_operator(kernel_cell_weights(a, grid), mu, grid).sum(axis=1)


@dataclass(frozen=True, eq=False)
class FiberOperator:
    xi: tuple[float, ...]
    matrix: np.ndarray
    p: np.ndarray | None
    kind: str
    grid: Grid
    kernel: KernelSpec | None = None
    mu: MuSpec | None = None
    level: float | None = None


def _xi_tuple(xi, d) -> tuple[float, ...]:
    xi = np.atleast_1d(np.asarray(xi, float))
    if xi.shape != (d,):
        raise ValueError(f"quasimomentum must have {d} components")
    return tuple(float(v) for v in xi)


def assemble_fiber(a: KernelSpec, mu: MuSpec, grid: Grid, xi) -> FiberOperator:
    """A(xi) = p - B(xi) as a dense Hermitian matrix."""
    xt = _xi_tuple(xi, grid.d)
    p = potential_p(a, mu, grid)
    w = kernel_cell_weights(a, grid, np.array(xt))
    mat = -integral_operator(w, mu, grid).astype(complex)
    mat[np.diag_indices_from(mat)] += p
    return FiberOperator(xt, _readonly(mat), _readonly(p), "full", grid, a, mu)


def assemble_mu_one(a: KernelSpec, grid: Grid, xi) -> FiberOperator:
    """The mu = 1 fiber operator A_0(xi)."""
    op = assemble_fiber(a, MuSpec.constant(1.0, grid.d), grid, xi)
    return FiberOperator(op.xi, op.matrix, op.p, "mu_one", grid, a, MuSpec.constant(1.0, grid.d))


def fiber_increment(a: KernelSpec, mu: MuSpec, grid: Grid, xi, order: int = 1) -> np.ndarray:
    """A(xi) minus its Taylor polynomial of degree order-1 at xi = 0.

    order=1 gives A(xi) - A(0) (the potential cancels); larger orders subtract
    the derivative terms as well.  Computed directly from the phase remainder,
    so the result keeps full relative accuracy for small |xi|.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    w = kernel_cell_weights(a, grid, xi, order)
    return -integral_operator(w, mu, grid)


def mode_vectors(grid: Grid, xi) -> np.ndarray:
    """2 pi n + xi for every discrete Fourier mode, in numpy FFT order (flat, shape (n, d))."""
    xi = np.atleast_1d(np.asarray(xi, float))
    freqs = np.fft.fftfreq(grid.N, 1.0 / grid.N)
    mesh = np.meshgrid(*[freqs] * grid.d, indexing="ij")
    n = np.stack([m.ravel() for m in mesh], axis=-1)
    return 2 * math.pi * n + xi


def fourier_multiplier(grid: Grid, symbol) -> np.ndarray:
    """Matrix of the Fourier multiplier with the given symbol (flat, FFT order)."""
    symbol = np.asarray(symbol)
    axes = tuple(range(grid.d))
    eye = np.eye(grid.size).reshape(grid.shape + (grid.size,))
    spec = np.fft.fftn(eye, axes=axes) * symbol.reshape(grid.shape)[..., None]
    return np.fft.ifftn(spec, axes=axes).reshape(grid.size, grid.size)


def effective_symbol(g0, grid: Grid, xi) -> np.ndarray:
    g0 = np.asarray(getattr(g0, "g0", g0), float).reshape(grid.d, grid.d)
    k = mode_vectors(grid, xi)
    return np.einsum("ni,ij,nj->n", k, g0, k)


def assemble_effective_fiber(g0, grid: Grid, xi) -> FiberOperator:
    """A^0(xi) = (D + xi)* g0 (D + xi), diagonal in the discrete Fourier basis."""
    g = np.asarray(getattr(g0, "g0", g0), float).reshape(grid.d, grid.d)
    if np.max(np.abs(g - g.T)) > 1e-12 * np.max(np.abs(g)) or np.linalg.eigvalsh(g)[0] <= 0:
        raise ValueError("effective matrix must be symmetric positive definite")
    xt = _xi_tuple(xi, grid.d)
    mat = fourier_multiplier(grid, effective_symbol(g, grid, xt))
    mat = 0.5 * (mat + mat.conj().T)
    return FiberOperator(xt, _readonly(mat), None, "effective", grid)


def assemble_truncated(a: KernelSpec, mu: MuSpec, grid: Grid, level: float) -> FiberOperator:
    """xi=0 operator with the periodized kernel clipped at ``level``."""
    if not level > 0:
        raise ValueError("truncation level must be positive")
    w = np.minimum(kernel_cell_weights(a, grid) / grid.h, level) * grid.h
    b = integral_operator(w, mu, grid)
    p = b.sum(axis=1)
    mat = -b.astype(complex)
    mat[np.diag_indices_from(mat)] += p
    return FiberOperator((0.0,) * grid.d, _readonly(mat), _readonly(p),
                         "truncated", grid, a, mu, float(level))


def _as_matrix(op) -> np.ndarray:
    return op.matrix if isinstance(op, FiberOperator) else np.asarray(op)


def resolvent(op, shift: float) -> np.ndarray:
    """(M + shift I)^{-1} through a Cholesky factorization."""
    if not shift > 0:
        raise ValueError("shift must be positive")
    m = _as_matrix(op)
    n = m.shape[0]
    shifted = m + shift * np.eye(n)
    try:
        fac = linalg.cho_factor(shifted)
    except linalg.LinAlgError as exc:
        raise RuntimeError(f"factorization of the shifted operator failed: {exc}") from None
    x = linalg.cho_solve(fac, np.eye(n, dtype=shifted.dtype))
    res = np.linalg.norm(shifted @ x - np.eye(n))
    if res > 1e-9:
        raise RuntimeError(f"resolvent residual {res:.3e} exceeds 1e-9")
    return x


def operator_norm(m) -> float:
    """Largest singular value (dense up to 4096 rows, Lanczos above)."""
    m = np.asarray(_as_matrix(m))
    if m.size == 0 or not np.any(m):
        return 0.0
    n = m.shape[0]
    scale = np.max(np.abs(m))
    hermitian = m.shape[0] == m.shape[1] and np.max(np.abs(m - m.conj().T)) <= 1e-14 * scale
    if n <= DENSE_NORM_LIMIT:
        if hermitian:
            ev = linalg.eigvalsh(m)
            return float(max(abs(ev[0]), abs(ev[-1])))
        return float(linalg.svdvals(m)[0])
    # Lanczos bidiagonalization with a fixed start vector keeps results reproducible
    v0 = np.random.default_rng(0).standard_normal(min(m.shape))
    try:
        s = sparse_linalg.svds(m, k=1, tol=1e-12, v0=v0, maxiter=10_000,
                               return_singular_vectors=False)
    except sparse_linalg.ArpackNoConvergence as exc:
        raise RuntimeError(f"iterative norm did not converge: {exc}") from None
    return float(s[0])


def quadratic_form_check(op: FiberOperator, u) -> float:
    """|double-integral form - <Mu, u>| / ||u||^2 for a kernel-based fiber operator.

    The form 1/2 int_Omega int_R^d a(x-y) mu(x,y) |e^{i xi x} u(x) - e^{i xi y} u(y)|^2
    is summed node by node over the kernel quadrature with the exact phase at y.
    """
    if op.kernel is None or op.mu is None:
        raise ValueError("operator does not carry kernel data")
    grid = op.grid
    u = np.asarray(u, complex).ravel()
    if not np.any(u):
        raise ValueError("u must be nonzero")
    q = kernel_quadrature(op.kernel, grid)
    xi = np.array(op.xi)
    x = grid.nodes
    idx = grid.indices
    mu = mu_matrix(op.mu, grid)
    w = q.weight
    if op.kind == "truncated":
        raise ValueError("form check is defined for the untruncated operator")
    ex = np.exp(1j * (x @ xi)) * u
    total = 0.0
    chunk = max(1, 2_000_000 // grid.size)
    for s in range(0, w.size, chunk):
        t = q.t[s:s + chunk]
        j = np.ravel_multi_index(tuple(((idx[:, None, :] - q.cell[None, s:s + chunk, :])
                                        % grid.N).transpose(2, 0, 1)), grid.shape)
        y = x[:, None, :] - t[None, :, :]
        ey = np.exp(1j * (y @ xi)) * u[j]
        mij = mu[np.arange(grid.size)[:, None], j]
        total += float(np.sum(w[s:s + chunk] * mij * np.abs(ex[:, None] - ey) ** 2))
    form = 0.5 * grid.h * total
    lhs = grid.h * np.vdot(u, op.matrix @ u)
    return float(abs(form - lhs) / (grid.h * np.vdot(u, u).real))


def second_eigenvalue(op) -> float:
    m = _as_matrix(op)
    return float(linalg.eigvalsh(m, subset_by_index=[1, 1])[0])


def quadrature_tolerance(a: KernelSpec, mu: MuSpec, grid: Grid) -> float:
    """Empirical discretization tolerance from a comparison of two resolutions.

    Compares the potential at shared nodes and the second eigenvalue of A(0)
    between N and 2N (or N/2 and N if 2N would exceed the dense limit and
    N/2 is still a valid grid).
    """
    fine_n = 2 * grid.N
    if fine_n ** grid.d > DENSE_NORM_LIMIT and grid.N // 2 >= 8:
        coarse, fine = Grid(grid.d, grid.N // 2), grid
    else:
        coarse, fine = grid, Grid(grid.d, fine_n)
    pc = potential_p(a, mu, coarse)
    pf = potential_p(a, mu, fine).reshape(fine.shape)[(slice(None, None, 2),) * grid.d].ravel()
    dp = float(np.max(np.abs(pc - pf)))
    lc = second_eigenvalue(assemble_fiber(a, mu, coarse, np.zeros(grid.d)))
    lf = second_eigenvalue(assemble_fiber(a, mu, fine, np.zeros(grid.d)))
    floor = 1e-12 * mu.upper * float(np.sum(kernel_cell_weights(a, grid)))
    return max(dp, abs(lc - lf), floor)
