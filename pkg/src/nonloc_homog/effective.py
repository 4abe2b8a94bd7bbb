"""Effective matrix g0 with entries g_kl / 2, where
g_kl = (w_kl, 1) - (v_k, w_l) - (v_l, w_k).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import CellSolution
from .fiber import Grid
from .kernels import KernelSpec, MuSpec

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class EffectiveMatrix:
    g0: np.ndarray
    gkl_raw: np.ndarray
    min_eigenvalue: float


def effective_matrix(a: KernelSpec, mu: MuSpec, grid: Grid, cell: CellSolution) -> EffectiveMatrix:
    if cell.grid != grid or cell.kernel != a or cell.mu != mu:
        raise ValueError("cell solution was computed for different data")
    d, h = grid.d, grid.h
    g = np.empty((d, d))
    for k in range(d):
        for l in range(d):
            g[k, l] = h * (cell.wkl[k, l].sum() - cell.v[k] @ cell.w[l] - cell.v[l] @ cell.w[k])
    scale = np.max(np.abs(g))
    if np.max(np.abs(g - g.T)) > SYMMETRY_RTOL * scale:
        raise ValueError("effective matrix asymmetric")
    g = 0.5 * (g + g.T)
    g0 = 0.5 * g
    g.setflags(write=False)
    g0.setflags(write=False)
    return EffectiveMatrix(g0, g, float(np.linalg.eigvalsh(g0)[0]))


def matrix_from(values) -> EffectiveMatrix:
    """Wrap an explicit g0 (for example a closed form) as an EffectiveMatrix."""
    g0 = np.atleast_2d(np.asarray(values, float))
    return EffectiveMatrix(g0, 2 * g0, float(np.linalg.eigvalsh(0.5 * (g0 + g0.T))[0]))


@dataclass(frozen=True)
class PositivityReport:
    min_eigenvalue: float
    floor: float
    margin: float
    passed: bool


def check_positivity(g: EffectiveMatrix, constants, tol: float = 0.0) -> PositivityReport:
    """Compare the smallest eigenvalue of g0 with mu- C(a)."""
    g0 = np.asarray(g.g0, float)
    sym = 0.5 * (g0 + g0.T)
    lam = float(np.linalg.eigvalsh(sym)[0])
    floor = float(constants.mu_lower * constants.C_a)
    symmetric = np.max(np.abs(g0 - g0.T)) <= SYMMETRY_RTOL * max(np.max(np.abs(g0)), 1e-300)
    margin = lam - floor
    return PositivityReport(lam, floor, margin, bool(symmetric and margin >= -tol and lam > 0))
