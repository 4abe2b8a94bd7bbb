"""Jump kernels a(z), periodic modulations mu(x, y) and the periodized kernel.

Every kernel family is radial, so a(z) depends on |z| only and evenness holds
by construction.  Builtin families carry closed forms for moments and for the
symbol A_hat(y) = int (1 - cos<z, y>) a(z) dz.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special
from scipy.optimize import minimize_scalar

KERNEL_FAMILIES = ("gaussian", "box", "exponential", "tabulated")
MU_FAMILIES = ("constant", "cosine_product", "tabulated")

# truncation radii in units of the family scale; tail mass stays below 1e-14
GAUSSIAN_CUTOFF = 8.0
EXPONENTIAL_CUTOFF = 40.0


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d (2 for d=1, 2*pi for d=2)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


@dataclass(frozen=True)
class KernelSpec:
    """Radial jump kernel.

    ``scale`` is sigma (gaussian), r (box) or lambda (exponential).  For the
    tabulated family ``radii``/``values`` hold the radial profile, linearly
    interpolated.  Gaussian and exponential kernels are probability densities
    times ``normalization``; the box kernel is ``normalization`` times the
    indicator of the closed ball of radius r.
    """

    d: int
    family: str
    scale: float = 1.0
    normalization: float = 1.0
    truncation: float | None = None
    radii: tuple[float, ...] | None = None
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.normalization > 0:
            raise ValueError("normalization must be positive")
        if self.family == "tabulated":
            if self.radii is None or self.values is None:
                raise ValueError("tabulated kernel needs radii and values")
            r = np.asarray(self.radii, float)
            v = np.asarray(self.values, float)
            if r.ndim != 1 or r.shape != v.shape or r.size < 2:
                raise ValueError("radii and values must be 1-D arrays of equal length >= 2")
            if not np.all(np.isfinite(r)) or not np.all(np.isfinite(v)):
                raise ValueError("tabulated kernel has non-finite entries")
            if np.any(np.diff(r) <= 0) or r[0] != 0:
                raise ValueError("radial grid must start at 0 and be strictly increasing")
            if np.any(v < 0):
                raise ValueError("tabulated kernel values must be nonnegative")
            if not np.any(v > 0):
                raise ValueError("tabulated kernel vanishes identically")
        elif not self.scale > 0:
            raise ValueError("kernel scale parameter must be positive")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation radius must be positive")

    @classmethod
    def gaussian(cls, sigma: float, d: int = 1, normalization: float = 1.0):
        return cls(d, "gaussian", float(sigma), float(normalization))

    @classmethod
    def box(cls, r: float, d: int = 1, normalization: float = 1.0):
        return cls(d, "box", float(r), float(normalization))

    @classmethod
    def exponential(cls, lam: float, d: int = 1, normalization: float = 1.0):
        return cls(d, "exponential", float(lam), float(normalization))

    @classmethod
    def tabulated(cls, radii, values, d: int = 1, truncation: float | None = None,
                  normalization: float = 1.0):
        return cls(d, "tabulated", 1.0, float(normalization),
                   None if truncation is None else float(truncation),
                   tuple(float(x) for x in radii), tuple(float(x) for x in values))

    @classmethod
    def from_csv(cls, path, d: int = 1, truncation: float | None = None,
                 normalization: float = 1.0):
        """Read a two-column (radius, value) table with a header row."""
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3:
            raise ValueError(f"{path}: need a header row and at least two data rows")
        try:
            data = np.array([[float(c) for c in row[:2]] for row in rows[1:] if row], float)
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric entry ({exc})") from None
        return cls.tabulated(data[:, 0], data[:, 1], d, truncation, normalization)

    @property
    def support_radius(self) -> float:
        """Radius beyond which the evaluated kernel is exactly zero."""
        if self.family == "gaussian":
            return GAUSSIAN_CUTOFF * self.scale
        if self.family == "exponential":
            return EXPONENTIAL_CUTOFF / self.scale
        if self.family == "box":
            return self.scale
        return self.truncation if self.truncation is not None else self.radii[-1]

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Radii where the profile is not smooth (used to split quadrature cells)."""
        if self.family == "box":
            return (self.scale,)
        if self.family == "exponential":
            return (0.0, self.support_radius)
        if self.family == "gaussian":
            return (self.support_radius,)
        pts = set(self.radii)
        pts.add(self.support_radius)
        return tuple(sorted(pts))

    @property
    def smooth(self) -> bool:
        return self.family == "gaussian"

    def profile(self, rho) -> np.ndarray:
        """Radial profile a(rho), rho >= 0."""
        rho = np.asarray(rho, float)
        d, s, c = self.d, self.scale, self.normalization
        inside = rho <= self.support_radius
        if self.family == "gaussian":
            val = c * (2 * math.pi * s * s) ** (-d / 2) * np.exp(-0.5 * (rho / s) ** 2)
        elif self.family == "box":
            val = np.full(rho.shape, c)
        elif self.family == "exponential":
            val = c * s ** d / (sphere_area(d) * math.gamma(d)) * np.exp(-s * rho)
        else:
            r = np.asarray(self.radii)
            v = np.asarray(self.values)
            gap = inside & (rho > r[-1])
            if np.any(gap):
                raise ValueError("table gap: radius %g is inside the truncation radius "
                                 "but outside the tabulated range" % rho[gap].flat[0])
            val = c * np.interp(rho, r, v)
        return np.where(inside, val, 0.0)


def eval_kernel(spec: KernelSpec, z) -> np.ndarray | float:
    """a(z) for a point or an array of points with trailing axis of length d."""
    z = np.asarray(z, float)
    if spec.d == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        rho = np.abs(z)
    else:
        if z.shape[-1] != spec.d:
            raise ValueError(f"expected points of dimension {spec.d}")
        rho = np.linalg.norm(z, axis=-1)
    out = spec.profile(rho)
    return float(out) if out.ndim == 0 else out


def _gauss_pieces(edges: np.ndarray, order: int):
    """Gauss-Legendre nodes and weights on consecutive intervals of ``edges``."""
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w
    return nodes.ravel(), weights.ravel()


def _radial_quadrature(spec: KernelSpec, max_step: float | None = None, order: int = 6):
    """Nodes/weights in rho for integrals of the piecewise-linear tabulated profile."""
    edges = np.asarray(spec.breakpoints, float)
    edges = np.unique(np.concatenate([[0.0], edges[edges <= spec.support_radius]]))
    if max_step is not None:
        refined = [edges[:1]]
        for a0, a1 in zip(edges[:-1], edges[1:]):
            m = max(1, int(math.ceil((a1 - a0) / max_step)))
            refined.append(np.linspace(a0, a1, m + 1)[1:])
        edges = np.concatenate(refined)
    return _gauss_pieces(edges, order)


def moment(spec: KernelSpec, k: int) -> float:
    """M_k(a) = int |z|^k a(z) dz for k = 0..4."""
    if not 0 <= k <= 4:
        raise ValueError("moment order must be in 0..4")
    d, s, c = spec.d, spec.scale, spec.normalization
    if spec.family == "gaussian":
        return c * s ** k * 2 ** (k / 2) * math.gamma((d + k) / 2) / math.gamma(d / 2)
    if spec.family == "box":
        return c * sphere_area(d) * s ** (k + d) / (k + d)
    if spec.family == "exponential":
        return c * math.gamma(d + k) / (math.gamma(d) * s ** k)
    rho, w = _radial_quadrature(spec)
    val = sphere_area(d) * float(np.sum(w * rho ** (k + d - 1) * spec.profile(rho)))
    if not math.isfinite(val):
        raise ValueError(f"moment M_{k} of the tabulated kernel diverges")
    return val


def _radial_cos_mean(d: int, x: np.ndarray) -> np.ndarray:
    """Average of cos<z, y> over the sphere |z| = rho, as a function of x = rho|y|."""
    x = np.asarray(x, float)
    if d == 1:
        return np.cos(x)
    if d == 3:
        return np.sinc(x / math.pi)
    nu = d / 2 - 1
    safe = np.where(x > 0, x, 1.0)
    val = math.gamma(d / 2) * (2 / safe) ** nu * special.jv(nu, safe)
    return np.where(x > 0, val, 1.0)


def _ball_cos_mean(d: int, x: np.ndarray) -> np.ndarray:
    """Average of cos<z, y> over the ball |z| <= r, as a function of x = r|y|."""
    x = np.asarray(x, float)
    if d == 1:
        return np.sinc(x / math.pi)
    safe = np.where(x > 0, x, 1.0)
    val = math.gamma(d / 2 + 1) * (2 / safe) ** (d / 2) * special.jv(d / 2, safe)
    return np.where(x > 0, val, 1.0)


def symbol_radial(spec: KernelSpec, s) -> np.ndarray:
    """A_hat as a function of |y| = s."""
    s = np.abs(np.asarray(s, float))
    m0 = moment(spec, 0)
    d, sc = spec.d, spec.scale
    if spec.family == "gaussian":
        return m0 * -np.expm1(-0.5 * (sc * s) ** 2)
    if spec.family == "box":
        return m0 * (1.0 - _ball_cos_mean(d, sc * s))
    if spec.family == "exponential":
        return m0 * -np.expm1(-0.5 * (d + 1) * np.log1p((s / sc) ** 2))
    smax = float(np.max(s)) if s.size else 0.0
    step = 0.5 / smax if smax > 0 else None
    rho, w = _radial_quadrature(spec, max_step=step)
    base = sphere_area(d) * w * rho ** (d - 1) * spec.profile(rho)
    flat = s.ravel()
    out = np.array([np.sum(base * (1.0 - _radial_cos_mean(d, rho * t))) for t in flat])
    return out.reshape(s.shape)


def symbol_Ahat(spec: KernelSpec, y) -> np.ndarray | float:
    """A_hat(y) = int (1 - cos<z, y>) a(z) dz (nonnegative, even, zero at 0)."""
    y = np.asarray(y, float)
    if spec.d == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        s = np.abs(y)
    else:
        s = np.linalg.norm(y, axis=-1)
    out = np.maximum(symbol_radial(spec, s), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PeriodizedKernel:
    xi: tuple[float, ...]
    values: np.ndarray
    lattice_sum_radius: int
    tail_bound: float


def default_lattice_radius(spec: KernelSpec) -> int:
    """Smallest shell count covering the kernel support from any point of the cell."""
    return int(math.ceil(spec.support_radius + math.sqrt(spec.d)))


def periodize(spec: KernelSpec, xi, grid, radius: int | None = None) -> PeriodizedKernel:
    """Point values of a_tilde(xi, z) = sum_n a(z+n) exp(-i<xi, z+n>) on the grid nodes."""
    xi = np.atleast_1d(np.asarray(xi, float))
    if radius is None:
        radius = default_lattice_radius(spec)
    if radius < 1:
        raise ValueError("lattice radius must be a positive integer")
    z = grid.nodes
    shifts = np.stack(np.meshgrid(*[np.arange(-radius, radius + 1)] * spec.d,
                                  indexing="ij"), axis=-1).reshape(-1, spec.d)
    vals = np.zeros(z.shape[0], complex)
    for n in shifts:
        t = z + n
        vals += eval_kernel(spec, t) * np.exp(-1j * (t @ xi))
    # uncovered points z+n all satisfy |z+n| >= radius
    if radius >= spec.support_radius:
        tail = 0.0
    else:
        tail = moment(spec, 1) / radius
        warnings.warn(f"lattice radius {radius} does not cover the kernel support "
                      f"{spec.support_radius:g}; tail bound {tail:.3g}", stacklevel=2)
    if np.all(xi == 0):
        vals = vals.real.astype(complex)
    return PeriodizedKernel(tuple(xi.tolist()), vals, int(radius), float(tail))


@dataclass(frozen=True)
class MuSpec:
    """Symmetric Z^d-periodic modulation mu(x, y) with bounds lower <= mu <= upper.

    cosine_product: base * (1 + alpha * prod_j cos(2 pi x_j) cos(2 pi y_j)).
    tabulated: values on an M^d x M^d node grid (nodes k/M), nearest-node lookup.
    """

    family: str
    d: int = 1
    base: float = 1.0
    alpha: float = 0.0
    table: tuple[tuple[float, ...], ...] | None = None
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        if self.family not in MU_FAMILIES:
            raise ValueError(f"unknown mu family {self.family!r}")
        if not self.base > 0:
            raise ValueError("mu base value must be positive")
        if not abs(self.alpha) < 1:
            raise ValueError("cosine_product needs |alpha| < 1")
        lo, hi = self._natural_bounds()
        if self.lower is None:
            object.__setattr__(self, "lower", lo)
        if self.upper is None:
            object.__setattr__(self, "upper", hi)
        if not 0 < self.lower <= self.upper:
            raise ValueError("mu bounds must satisfy 0 < lower <= upper")
        tol = 1e-12 * hi
        if lo < self.lower - tol or hi > self.upper + tol:
            raise ValueError(f"mu takes values in [{lo:g}, {hi:g}] outside the declared "
                             f"bounds [{self.lower:g}, {self.upper:g}]")

    def _natural_bounds(self):
        if self.family == "constant":
            return self.base, self.base
        if self.family == "cosine_product":
            return self.base * (1 - abs(self.alpha)), self.base * (1 + abs(self.alpha))
        t = self.table_array
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("tabulated mu must be a square matrix")
        m = round(t.shape[0] ** (1 / self.d))
        if m ** self.d != t.shape[0]:
            raise ValueError("tabulated mu size is not a d-th power")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("tabulated mu must be finite and positive")
        if np.max(np.abs(t - t.T)) > 1e-12 * np.max(np.abs(t)):
            raise ValueError("mu not symmetric")
        return float(t.min()), float(t.max())

    @property
    def table_array(self) -> np.ndarray:
        return np.asarray(self.table, float)

    @classmethod
    def constant(cls, mu0: float = 1.0, d: int = 1):
        return cls("constant", d, float(mu0))

    @classmethod
    def cosine_product(cls, alpha: float, base: float = 1.0, d: int = 1):
        return cls("cosine_product", d, float(base), float(alpha))

    @classmethod
    def tabulated(cls, values, d: int = 1, lower: float | None = None,
                  upper: float | None = None):
        v = np.asarray(values, float)
        return cls("tabulated", d, 1.0, 0.0, tuple(tuple(r) for r in v.tolist()),
                   lower, upper)


def eval_mu(spec: MuSpec, x, y) -> np.ndarray | float:
    """mu(x, y); x and y broadcast against each other with trailing axis d (or scalars if d=1)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if spec.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if spec.d == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        y = y[..., None]
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
    if spec.family == "constant":
        out = np.full(shape, spec.base)
    elif spec.family == "cosine_product":
        cx = np.prod(np.cos(2 * math.pi * x), axis=-1)
        cy = np.prod(np.cos(2 * math.pi * y), axis=-1)
        out = spec.base * (1.0 + spec.alpha * cx * cy)
    else:
        t = spec.table_array
        m = round(t.shape[0] ** (1 / spec.d))
        dims = (m,) * spec.d

        def node(p):
            k = np.floor(p * m + 0.5).astype(int) % m
            return np.ravel_multi_index(tuple(np.moveaxis(k, -1, 0)), dims)

        ix, iy = node(x), node(y)
        out = t[ix, iy]
    out = np.broadcast_to(out, shape)
    return float(out) if out.ndim == 0 else np.array(out)


def symbol_floor(spec: KernelSpec, r: float) -> float:
    """min over |y| >= r of A_hat(y), the constant C_r(a).

    Gaussian and exponential symbols increase with |y|, so the minimum sits at
    |y| = r.  Otherwise a dense radial scan is refined locally; beyond the scan
    the oscillating part of the symbol is far below the scanned minimum.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if spec.family in ("gaussian", "exponential"):
        return float(symbol_radial(spec, np.array([r]))[0])
    if spec.family == "box":
        length = spec.scale
    else:
        length = float(np.min(np.diff(spec.radii)))
        length = max(length, spec.support_radius / 200)
    top = r + 400.0 / length if spec.family == "box" else r + 60.0 / length
    count = int(min(40_000, 100 * (top - r) * length)) + 2
    s = np.linspace(r, top, count)
    vals = symbol_radial(spec, s)
    i = int(np.argmin(vals))
    best = float(vals[i])
    lo, hi = s[max(i - 1, 0)], s[min(i + 1, s.size - 1)]
    if hi > lo:
        res = minimize_scalar(lambda x: float(symbol_radial(spec, np.array([x]))[0]),
                              bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        best = min(best, float(res.fun))
    return best
