"""The twelve acceptance criteria, one test each, at the stated tolerances."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from nonloc_homog.cell import (appendix_details, cell_solution, check_sup_bound,
                               solve_cell_fixed_point)
from nonloc_homog.cli import main
from nonloc_homog.effective import effective_matrix
from nonloc_homog.fiber import (assemble_fiber, make_grid, operator_norm, quadrature_tolerance,
                                second_eigenvalue)
from nonloc_homog.harness import (constants_bundle, default_xi_grid, lipschitz_constant,
                                  rate_sweep, threshold_errors)
from nonloc_homog.kernels import KernelSpec, MuSpec
from nonloc_homog.threshold import (Contour, F1_operator, F_j_contour, G3_operator, G_kl_contour,
                                    constant_projector, riesz_projection, spectral_projector,
                                    threshold_sweep, xi_sweep_points)

BOX = KernelSpec.box(0.5)
COS = MuSpec.cosine_product(0.5)
DEFAULT = Path(__file__).resolve().parents[1] / "configs" / "default.json"


def configurations():
    return [
        ("box/cosine d=1", BOX, COS, make_grid(1, 64)),
        ("gaussian/cosine d=2", KernelSpec.gaussian(0.25, d=2), MuSpec.cosine_product(0.5, d=2),
         make_grid(2, 12)),
        ("exponential/tabulated d=1", KernelSpec.exponential(6.0),
         MuSpec.tabulated([[1.0, 1.5, 1.2, 0.8], [1.5, 0.9, 1.1, 1.3],
                           [1.2, 1.1, 1.6, 1.0], [0.8, 1.3, 1.0, 1.4]]), make_grid(1, 32)),
        ("tabulated/constant d=1", KernelSpec.tabulated(np.linspace(0, 0.5, 11),
                                                        2 * (1 - 2 * np.linspace(0, 0.5, 11))),
         MuSpec.constant(1.0), make_grid(1, 32)),
    ]


def test_criterion_01_trivial_effective_matrix():
    start = time.perf_counter()
    mu = MuSpec.constant(1.0)
    grid = make_grid(1, 128)
    g0 = effective_matrix(BOX, mu, grid, cell_solution(BOX, mu, grid)).g0[0, 0]
    elapsed = time.perf_counter() - start
    rel = abs(g0 - 1 / 24) * 24
    ok = rel <= 1e-6 and elapsed < 10
    record(1, ok, f"g0={g0:.15g} rel.err={rel:.2e} (<=1e-6) time={elapsed:.2f}s (<10s)")
    assert ok


def test_criterion_02_cell_double_oracle():
    grid = make_grid(1, 64)
    cell = cell_solution(BOX, COS, grid)
    v = cell.v[0]
    fp = solve_cell_fixed_point(BOX, COS, grid, 0)
    agree = np.linalg.norm(fp - v) / np.linalg.norm(v)
    a0 = assemble_fiber(BOX, COS, grid, [0.0]).matrix.real
    res = np.linalg.norm(a0 @ v - cell.w[0]) / np.linalg.norm(cell.w[0])
    mean = abs(float(np.mean(v)))
    ok = agree <= 1e-8 and res <= 1e-9 and mean <= 1e-10
    record(2, ok, f"solver agreement={agree:.2e} (<=1e-8) residual={res:.2e} (<=1e-9) "
                  f"mean={mean:.2e} (<=1e-10)")
    assert ok


def test_criterion_03_appendix_sup_bound():
    grid = make_grid(1, 64)
    cell = cell_solution(BOX, COS, grid)
    frak = appendix_details(BOX, COS, grid).frak_C
    rep = check_sup_bound(cell, BOX, COS, frak)
    ok = rep.margins_linf[0] > 0 and rep.margins_l2[0] > 0
    record(3, ok, f"max|v1|={rep.sup_norms[0]:.4g} linf bound={rep.bound_linf:.4g} "
                  f"(margin {rep.margins_linf[0]:.4g}) l2-route bound={rep.bound_l2:.4g} "
                  f"(margin {rep.margins_l2[0]:.4g})")
    assert ok


def test_criterion_04_projection_equivalence():
    grid = make_grid(1, 64)
    c = constants_bundle(BOX, COS, grid)
    contour = Contour.around_threshold(c.d0_bound)
    xis = c.delta0 * np.linspace(-1, 1, 10)
    worst_p = worst_i = 0.0
    for xi in xis:
        op = assemble_fiber(BOX, COS, grid, [xi])
        f = riesz_projection(op, contour)
        worst_p = max(worst_p, operator_norm(f - spectral_projector(op)[1]))
        worst_i = max(worst_i, operator_norm(f @ f - f))
    ok = worst_p <= 1e-8 and worst_i <= 1e-9
    record(4, ok, f"max projector difference={worst_p:.2e} (<=1e-8) "
                  f"idempotency={worst_i:.2e} (<=1e-9) over 10 xi with |xi|<=delta0")
    assert ok


@pytest.fixture(scope="module")
def cosine_threshold():
    start = time.perf_counter()
    grid = make_grid(1, 64)
    c = constants_bundle(BOX, COS, grid)
    cell = cell_solution(BOX, COS, grid)
    g0 = effective_matrix(BOX, COS, grid, cell)
    rep = threshold_sweep(BOX, COS, grid, xi_sweep_points(c.delta0, [1.0], 10),
                          Contour.around_threshold(c.d0_bound), cell, g0, c)
    return rep, time.perf_counter() - start, (grid, c, cell, g0)


def test_criterion_05_threshold_slopes(cosine_threshold):
    rep, elapsed, _ = cosine_threshold
    need = {"F_minus_P": 0.9, "F_minus_P_F1": 1.9, "AF_minus_G2": 2.8, "AF_minus_G2_G3": 3.8}
    ok = all(rep.slopes[k] >= v for k, v in need.items()) and elapsed < 120
    text = " ".join(f"{k}={rep.slopes[k]:.4f}(>={v})" for k, v in need.items())
    record(5, ok, f"slopes {text} time={elapsed:.1f}s (<120s)")
    assert ok


def test_criterion_06_PG3P_vanishes(cosine_threshold, rng):
    rep, _, (grid, c, cell, _) = cosine_threshold
    ratios = list(rep.columns["PG3P"] / rep.G3_norm)
    p = constant_projector(grid)
    for xi in rng.uniform(-c.delta0, c.delta0, size=5):
        g3 = G3_operator(BOX, COS, grid, cell, [xi])
        ratios.append(operator_norm(p @ g3 @ p) / operator_norm(g3))
    worst = max(ratios)
    ok = worst <= 1e-9
    record(6, ok, f"max ||P G3 P|| / ||G3|| = {worst:.2e} (<=1e-9) over {len(ratios)} xi")
    assert ok


def test_criterion_07_route_equality():
    details = []
    ok = True
    for name, a, mu, grid in configurations()[:3]:
        cell = cell_solution(a, mu, grid)
        g = effective_matrix(a, mu, grid, cell)
        gk = G_kl_contour(a, mu, grid)
        p = constant_projector(grid)
        scale = np.max(np.abs(g.gkl_raw))
        rel = max(operator_norm(gk[k, l] - g.gkl_raw[k, l] * p)
                  for k in range(grid.d) for l in range(grid.d)) / scale
        frel = max(operator_norm(F_j_contour(a, mu, grid, j)
                                 - F1_operator(cell, np.eye(grid.d)[j]))
                   / max(operator_norm(F1_operator(cell, np.eye(grid.d)[j])), 1e-300)
                   for j in range(grid.d))
        ok &= rel <= 1e-8 and frel <= 1e-8
        details.append(f"{name}: G_kl {rel:.1e}, F_j {frel:.1e}")
    record(7, ok, "relative route differences (<=1e-8): " + "; ".join(details))
    assert ok


def test_criterion_08_main_rates():
    start = time.perf_counter()
    grid = make_grid(1, 64)
    c = constants_bundle(BOX, COS, grid)
    cell = cell_solution(BOX, COS, grid)
    g0 = effective_matrix(BOX, COS, grid, cell)
    tau = quadrature_tolerance(BOX, COS, grid)
    eps = 2.0 ** -np.arange(1, 8)
    rep = rate_sweep(BOX, COS, grid, default_xi_grid(1), eps, g0, cell, c, tau)
    elapsed = time.perf_counter() - start
    mp, mc = rep.row_checks()
    ok = (rep.slopes["ws_plain"] >= 0.9 and rep.slopes["ws_corrected"] >= 1.85
          and np.all(mp >= 0) and np.all(mc >= 0) and elapsed < 300)
    record(8, ok, f"slope plain={rep.slopes['ws_plain']:.4f} (>=0.9) corrected="
                  f"{rep.slopes['ws_corrected']:.4f} (>=1.85) min row margins "
                  f"{mp.min():.3g}/{mc.min():.3g} (>=0) time={elapsed:.1f}s (<300s)")
    assert ok


def test_criterion_09_constant_domination(cosine_threshold):
    _, _, (grid, c, cell, g0) = cosine_threshold
    tau = quadrature_tolerance(BOX, COS, grid)
    worst5 = worst6 = -np.inf
    ratio5 = ratio6 = 0.0
    for m in range(0, 11):
        for sign in (1, -1):
            xi = sign * c.delta0 * 2.0 ** -m
            for e in 2.0 ** -np.arange(1, 8):
                plain, corr = threshold_errors(BOX, COS, grid, g0, cell, [xi], e)
                worst5 = max(worst5, plain - c.C5 / e)
                worst6 = max(worst6, corr - c.C6)
                ratio5 = max(ratio5, plain * e / c.C5)
                ratio6 = max(ratio6, corr / c.C6)
    ok = worst5 <= tau and worst6 <= tau
    record(9, ok, f"max plain/(C5/eps)={ratio5:.2e}, max corrected/C6={ratio6:.2e} "
                  f"(both <=1 + slack {tau:.1e})")
    assert ok


def test_criterion_10_coercivity():
    details = []
    ok = True
    for name, a, mu, grid in configurations():
        c = constants_bundle(a, mu, grid)
        tau = quadrature_tolerance(a, mu, grid)
        worst = np.inf
        for xi in default_xi_grid(grid.d, 9 if grid.d > 1 else 17):
            lam = np.linalg.eigvalsh(assemble_fiber(a, mu, grid, xi).matrix)[0]
            worst = min(worst, lam - c.mu_lower * c.C_a * float(xi @ xi) + tau)
        lam2 = second_eigenvalue(assemble_fiber(a, mu, grid, np.zeros(grid.d)))
        gap = lam2 - c.mu_lower * c.C_pi + tau
        ok &= worst >= 0 and gap >= 0
        details.append(f"{name}: {worst:.2e}/{gap:.3g}")
    record(10, ok, "margins lambda_min/second eigenvalue (>=0): " + "; ".join(details))
    assert ok


def test_criterion_11_lipschitz():
    grid = make_grid(1, 64)
    tau = quadrature_tolerance(BOX, COS, grid)
    lip = lipschitz_constant(BOX, COS)
    rng = np.random.default_rng(11)
    worst = -np.inf
    for _ in range(100):
        x, y = rng.uniform(-math.pi, math.pi, size=2)
        diff = operator_norm(assemble_fiber(BOX, COS, grid, [x]).matrix
                             - assemble_fiber(BOX, COS, grid, [y]).matrix)
        worst = max(worst, diff - lip * abs(x - y))
    ok = worst <= tau
    record(11, ok, f"max ||A(xi)-A(eta)|| - mu+ M1 |xi-eta| = {worst:.3e} (<= tau_q={tau:.1e}) "
                   "over 100 pairs")
    assert ok


def test_criterion_12_determinism(tmp_path):
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    s1 = main(["verify-all", "--config", str(DEFAULT), "--out", str(out1), "--seed", "42"])
    s2 = main(["verify-all", "--config", str(DEFAULT), "--out", str(out2), "--seed", "42"])
    files = sorted(p.name for p in out1.glob("*.csv"))
    same = all((out1 / f).read_bytes() == (out2 / f).read_bytes() for f in files)
    ok = s1 == 0 and s2 == 0 and same and len(files) >= 4
    record(12, ok, f"verify-all status {s1}/{s2}, {len(files)} CSV files byte-identical={same}")
    assert ok
