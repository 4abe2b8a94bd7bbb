import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonloc_homog.cell import (appendix_details, cell_solution, check_sup_bound, compute_w,
                               l2_sup_bound, rearrangement_F, solve_cell, solve_cell_fixed_point)
from nonloc_homog.fiber import assemble_fiber, assemble_truncated, cell_average_kernel, make_grid
from nonloc_homog.kernels import KernelSpec, MuSpec, moment, symbol_floor

BOX = KernelSpec.box(0.5)
COS = MuSpec.cosine_product(0.5)


def test_w_vanishes_for_constant_mu():
    g = make_grid(1, 64)
    w, wkl = compute_w(BOX, MuSpec.constant(2.0), g)
    assert np.max(np.abs(w)) < 1e-15
    np.testing.assert_allclose(wkl[0, 0], 2.0 / 12, rtol=1e-13)


def test_w_mean_zero_cosine():
    g = make_grid(1, 64)
    w, wkl = compute_w(BOX, COS, g)
    assert abs(np.mean(w[0])) <= 1e-9
    assert np.max(np.abs(w[0])) > 1e-3


def test_w_oracle_double_integral():
    # w_1(x) = int (x - y) a(x - y) mu(x, y) dy has the closed form
    # alpha cos(2 pi x) sin(2 pi x) / (2 pi) for the box r=1/2 and the cosine mu;
    # mu is sampled at the nodes, so the grid value converges at second order
    errs = []
    for N in (64, 128):
        g = make_grid(1, N)
        w, _ = compute_w(BOX, COS, g)
        x = g.nodes[:, 0]
        oracle = 0.5 * np.cos(2 * math.pi * x) * np.sin(2 * math.pi * x) / (2 * math.pi)
        errs.append(np.max(np.abs(w[0] - oracle)) / np.max(np.abs(oracle)))
    assert errs[0] < 2e-3
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_wkl_symmetric_2d():
    g = make_grid(2, 8)
    _, wkl = compute_w(KernelSpec.gaussian(0.2, d=2), MuSpec.cosine_product(0.3, d=2), g)
    np.testing.assert_array_equal(wkl[0, 1], wkl[1, 0])


def test_solve_cell_constant_mu():
    g = make_grid(1, 32)
    v = solve_cell(BOX, MuSpec.constant(1.0), g, 0)
    assert np.max(np.abs(v)) < 1e-14
    with pytest.raises(ValueError):
        solve_cell(BOX, COS, g, 1)


def test_cell_solution_invariants(cosine_case):
    c = cosine_case.cell
    v = c.v[0]
    assert abs(v.mean()) <= 1e-10 * np.linalg.norm(v)
    assert np.isrealobj(v)
    assert c.residuals[0] <= 1e-9
    a0 = assemble_fiber(cosine_case.a, cosine_case.mu, cosine_case.grid, [0.0]).matrix.real
    assert np.linalg.norm(a0 @ v - c.w[0]) / np.linalg.norm(c.w[0]) <= 1e-9


def test_two_solvers_agree(cosine_case):
    fp = solve_cell_fixed_point(BOX, COS, cosine_case.grid, 0)
    v = cosine_case.cell.v[0]
    assert np.linalg.norm(fp - v) <= 1e-8 * np.linalg.norm(v)


def test_two_solvers_agree_2d():
    g = make_grid(2, 8)
    a = KernelSpec.gaussian(0.2, d=2)
    mu = MuSpec.cosine_product(0.4, d=2)
    cell = cell_solution(a, mu, g)
    for j in range(2):
        fp = solve_cell_fixed_point(a, mu, g, j)
        assert np.linalg.norm(fp - cell.v[j]) <= 1e-8 * np.linalg.norm(cell.v[j])


def test_truncation_consistency():
    g = make_grid(1, 32)
    cell = cell_solution(BOX, COS, g)
    top = float(cell_average_kernel(BOX, g).max())
    errs = []
    for level in (0.3 * top, 0.6 * top, 0.9 * top, top):
        a0 = assemble_truncated(BOX, COS, g, level).matrix.real
        n = g.size
        v = np.linalg.solve(a0 + np.full((n, n), 1.0 / n), cell.w[0])
        errs.append(g.l2norm(v - v.mean() - cell.v[0]))
    assert errs[-1] < 1e-13
    assert all(e1 >= e2 - 1e-15 for e1, e2 in zip(errs, errs[1:]))


def test_rearrangement_examples():
    a = np.abs(np.sin(np.arange(20.0))) + 0.1
    assert rearrangement_F(a, 1.0) == pytest.approx(a.sum() / 20)
    assert rearrangement_F(np.full(20, 3.0), 0.35) == pytest.approx(3.0 * 0.35)
    two = np.zeros(20)
    two[:2] = 10.0
    # oracle: brute force over all super-level thresholds
    brute = max(sum(sorted(two, reverse=True)[:k]) / 20 + (0.05 - k / 20) * sorted(two)[::-1][k]
                for k in range(2))
    assert rearrangement_F(two, 0.05) == pytest.approx(0.5)
    assert brute == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rearrangement_F(a, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=12), st.floats(0.01, 1.0))
def test_rearrangement_is_sup_over_sets(values, t):
    vals = np.array(values)
    n = vals.size
    k = int(math.floor(t * n + 1e-9))
    best = 0.0
    for subset in itertools.combinations(range(n), min(k, n)):
        rest = [i for i in range(n) if i not in subset]
        extra = max(vals[rest]) * (t - k / n) if rest else 0.0
        best = max(best, vals[list(subset)].sum() / n + extra)
    assert rearrangement_F(vals, t) == pytest.approx(best, rel=1e-12, abs=1e-14)
    assert rearrangement_F(vals, t) <= rearrangement_F(vals, 1.0) + 1e-14


def test_appendix_second_branch_arithmetic():
    g = make_grid(1, 64)
    app = appendix_details(BOX, COS, g)
    lo, hi = COS.lower, COS.upper
    assert app.norm_a1 == pytest.approx(1.0, rel=1e-13)
    assert app.second_branch == pytest.approx((hi / lo + math.sqrt(2 / lo + (hi / lo) ** 2)) ** 2)
    equal = appendix_details(BOX, MuSpec.constant(0.7), g)
    assert equal.second_branch == pytest.approx((1 + math.sqrt(2 / 0.7 + 1)) ** 2)
    assert app.frak_C >= 1 / (lo * app.norm_a1)
    assert app.frak_C == max(app.first_branch, app.second_branch)


def test_appendix_t0_admissible_and_largest():
    g = make_grid(1, 64)
    app = appendix_details(BOX, COS, g)
    at = cell_average_kernel(BOX, g)
    assert COS.upper * rearrangement_F(at, app.t0, copies=4) <= 0.5 * COS.lower * app.norm_a1
    nxt = app.t0 + g.h
    assert COS.upper * rearrangement_F(at, nxt, copies=4) > 0.5 * COS.lower * app.norm_a1


def test_appendix_C2pi_scan_oracle():
    g = make_grid(1, 64)
    app = appendix_details(BOX, COS, g)
    a1 = np.minimum(cell_average_kernel(BOX, g), 1.0)
    x = g.nodes[:, 0]
    ys = np.linspace(2 * math.pi, 2 * math.pi * 64, 400_001)
    # exact transform of the piecewise-constant function on cells [x - h/2, x + h/2]
    sinc = np.sinc(ys * g.h / (2 * math.pi))
    vals = g.h * (a1.sum() - sinc * (np.cos(np.outer(ys, x)) @ a1))
    assert app.C_tilde_2pi == pytest.approx(vals.min(), rel=1e-6)
    assert app.C_tilde_2pi <= vals.min() + 1e-15


def test_appendix_too_coarse():
    # a very concentrated kernel leaves no admissible grid quantum
    with pytest.raises(RuntimeError, match="rearrangement too coarse"):
        appendix_details(KernelSpec.box(0.01), MuSpec.cosine_product(0.9), make_grid(1, 8))


def test_sup_bound_cosine(cosine_case):
    rep = check_sup_bound(cosine_case.cell, BOX, COS, cosine_case.constants.frak_C)
    assert rep.ok
    assert all(m > 0 for m in rep.margins_linf + rep.margins_l2)
    assert rep.bound_l2 == pytest.approx(l2_sup_bound(BOX, COS, cosine_case.grid))


def test_sup_bound_constant_mu(constant_case):
    rep = check_sup_bound(constant_case.cell, BOX, MuSpec.constant(1.0), 1.0)
    assert rep.sup_norms[0] < 1e-14 and rep.ok


@pytest.mark.parametrize("N", [32, 64, 128])
def test_sup_bound_every_resolution(N):
    g = make_grid(1, N)
    cell = cell_solution(BOX, COS, g)
    app = appendix_details(BOX, COS, g)
    assert check_sup_bound(cell, BOX, COS, app.frak_C).ok


def test_l2_bound_formula():
    g = make_grid(1, 64)
    at = cell_average_kernel(BOX, g)
    n1 = g.h * at.sum()
    n2 = math.sqrt(g.h * np.sum(at ** 2))
    lo, hi = 0.5, 1.5
    expect = hi * 0.25 * (1 / (lo * n1) + hi * n2 / (lo ** 2 * symbol_floor(BOX, math.pi) * n1))
    assert l2_sup_bound(BOX, COS, g) == pytest.approx(expect, rel=1e-14)
    assert n1 == pytest.approx(moment(BOX, 0), rel=1e-13)
