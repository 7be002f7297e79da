"""End-to-end acceptance checks, one test per criterion at its stated tolerance."""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from oracles import determinant_roots, match_error
from test_phg import _ode_reference, laplace_data
from wahkit.curvature import decay_exponent, deviation_slopes, riem_via_identity, riemann_direct
from wahkit.geometry import ScalarField, catalog_metric, make_points, rho_ladder
from wahkit.htensor import boundary_obstruction_check, h_invariance_suite
from wahkit.indicial import BoundaryData, characteristic_exponents, companion_matrix, indicial_data, laplacian_ud
from wahkit.mollify import convolve, make_kernel, regularize
from wahkit.norms import classify_regularity
from wahkit.phg import PhgExpansion, apply_indicial, lichnerowicz_expansion, metric_expansion, solve_indicial_ode
from wahkit.yamabe import ladder_fit, make_grid, solve_lichnerowicz, solve_yamabe

CLOSED_FORM = [
    ("poly_perturbed", {"a": 1.0}, 2),
    ("log_oscillation", {}, 2),
    ("angle_dependent", {}, 2),
    ("angle_dependent", {}, 3),
]
WAH_CATALOG = [("hyperbolic", {}), ("poly_perturbed", {"a": 1.0}), ("log_oscillation", {}), ("angle_dependent", {})]


def test_criterion_01_curvature_identity(report_criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for name, params, n in CLOSED_FORM:
        metric = catalog_metric(name, params, n=n)
        pts = make_points(np.full(n, 0.3), rho_ladder(1e-6, 0.9, 64))
        A = riemann_direct(metric, pts)
        B = riem_via_identity(metric, pts)
        scale = np.abs(A).reshape(64, -1).max(axis=1)
        worst = max(worst, float(np.max(np.abs(A - B).reshape(64, -1).max(axis=1) / scale)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed <= 5.0
    report_criterion(1, "curvature identity oracle", ok, f"max rel err {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_criterion_02_wah_decay(report_criterion):
    worst = math.inf
    for name, params in WAH_CATALOG:
        slopes = deviation_slopes(catalog_metric(name, params, n=2), 1e-5, 1e-1)
        for key in ("dev_riem", "dev_ric", "dev_scalar", "dev_grad_rho"):
            fit = slopes[key]
            worst = min(worst, math.inf if fit.identically_zero else fit.exponent)
    ok = worst >= 0.95
    report_criterion(2, "WAH decay slopes", ok, f"smallest slope {worst:.4f}")
    assert ok


def test_criterion_03_obstruction(report_criterion):
    fast = boundary_obstruction_check(catalog_metric("poly_perturbed", {"a": [0, 0], "b": [1, 0]}, n=2))
    slow = boundary_obstruction_check(catalog_metric("poly_perturbed", {"a": [0.5, -0.5]}, n=2))
    ok = (fast.h_boundary <= 1e-6 and fast.riem_slope >= 1.95
          and slow.h_boundary >= 0.1 and slow.riem_slope <= 1.5)
    report_criterion(3, "obstruction dichotomy", ok,
                     f"|H|={fast.h_boundary:.1e} slope {fast.riem_slope:.3f}; "
                     f"|H|={slow.h_boundary:.3f} slope {slow.riem_slope:.3f}")
    assert ok


def test_criterion_04_h_invariance(report_criterion):
    rng = np.random.default_rng(4)
    metric = catalog_metric("angle_dependent", n=2)
    omega = ScalarField("rho*(1 + x/3) + rho**2", 2)
    pts = make_points([0.3, 0.7], rho_ladder(1e-4, 0.5, 6))
    scaling = structural = 0.0
    for _ in range(20):
        c = float(rng.uniform(0.2, 4.0))
        a, b, e = rng.uniform(-1, 1, 3)
        theta = ScalarField(f"exp({a}*rho + {b}*sin(x) + {e}*rho*cos(y))", 2)
        res = h_invariance_suite(metric, omega, theta, c, pts)
        scaling = max(scaling, res["homogeneity"], res["conformal"])
        structural = max(structural, res["trace_free"], res["annihilates_grad"])
    ok = scaling <= 1e-8 and structural <= 1e-12
    report_criterion(4, "H invariance", ok, f"scaling laws {scaling:.1e}, trace/grad {structural:.1e}")
    assert ok


def test_criterion_05_indicial_radius(report_criterion):
    worst_radius = 0.0
    for n in (1, 2, 3):
        for c in (0.0, 1.0, 5.0, -n * n / 4 + 0.01):
            data = indicial_data(laplacian_ud(catalog_metric("poly_perturbed", n=n), c), np.zeros(n))
            worst_radius = max(worst_radius, abs(data.radius - math.sqrt(n * n / 4 + c)))
    rng = np.random.default_rng(5)
    worst_roots = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        a = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        b, c = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        eig = np.linalg.eigvals(companion_matrix(BoundaryData(a, b, c)))
        worst_roots = max(worst_roots, match_error(eig, determinant_roots(a, b, c)))
    ok = worst_radius <= 1e-10 and worst_roots <= 1e-8
    report_criterion(5, "indicial radius", ok, f"radius err {worst_radius:.1e}, root match {worst_roots:.1e}")
    assert ok


def test_criterion_06_resonance(report_criterion):
    data = laplace_data(2, 3.0)
    roots = [s for s, _ in characteristic_exponents(data)]
    sweep = np.concatenate([np.linspace(-2.3, 4.7, 48), [r.real for r in roots]])
    mismatches = 0
    for nu in sweep:
        u = solve_indicial_ode(data, PhgExpansion.monomial(nu, 1.0))
        has_log = any(t.p > 0 and np.max(np.abs(t.coeff)) > 1e-12 for t in u.terms)
        at_root = min(abs(nu - r) for r in roots) <= 1e-7
        back = apply_indicial(data, u)
        exact = np.allclose(back.coefficient(nu, 0), 1.0, rtol=1e-12) and all(
            np.max(np.abs(t.coeff)) <= 1e-12 for t in back.terms if t.p > 0)
        mismatches += int(has_log != at_root or not exact)
    rho = np.geomspace(1e-3, 1e-1, 9)
    worst = 0.0
    for nu in sweep:
        if min(abs(nu - r) for r in roots) <= 1e-7:
            continue
        f = PhgExpansion.monomial(nu, 1.0)
        u = solve_indicial_ode(data, f, terminal=0.5)
        ref = _ode_reference(data, f, 0.5, rho)
        worst = max(worst, float(np.max(np.abs(u(rho) - ref) / np.maximum(np.abs(ref), 1e-300))))
    ok = mismatches == 0 and worst <= 1e-8
    report_criterion(6, "resonance dichotomy", ok, f"{len(sweep)} exponents, {mismatches} mismatches, "
                                                   f"ODE rel err {worst:.1e}")
    assert ok


def test_criterion_07_convolution(report_criterion):
    psi = make_kernel(0.5, 1)
    pts = np.array([[0.3, 0.5], [0.3, 0.1], [0.3, 0.02]])
    unit = float(np.max(np.abs(convolve(1.0, psi, pts) - 1.0)))
    ratio = convolve(ScalarField("rho**1.5", 1), psi, pts) / pts[:, 1] ** 1.5
    spread = float(np.ptp(ratio))
    rho = np.geomspace(1e-5, 1e-1, 40)
    lad = np.column_stack([np.full(40, 0.7), rho])
    lip = ScalarField("abs(theta - 0.3) + rho*cos(theta) + Abs(rho - 0.001)", 1)
    slope = decay_exponent(rho, np.abs(lip(lad) - convolve(lip, psi, lad, check=False))).slope
    t1, t2 = ScalarField("rho*sin(log(rho))", 1), ScalarField("rho*cos(theta)", 1)
    combo = ScalarField(2 * t1.expr - 3 * t2.expr, 1)
    lin = 0.0
    for m in (1, 2):
        lhs = regularize(combo, m, psi)(lad)
        rhs = 2 * regularize(t1, m, psi)(lad) - 3 * regularize(t2, m, psi)(lad)
        lin = max(lin, float(np.max(np.abs(lhs - rhs))))
    ok = unit <= 1e-8 and spread <= 1e-6 and slope >= 0.95 and lin <= 1e-10
    report_criterion(7, "convolution laws", ok,
                     f"unit {unit:.1e}, lambda spread {spread:.1e}, defect slope {slope:.3f}, linearity {lin:.1e}")
    assert ok


def test_criterion_08_yamabe(report_criterion):
    grid = make_grid(2, 1024)
    hyp = solve_lichnerowicz(catalog_metric("hyperbolic", n=2), grid=grid)
    flat = float(np.max(np.abs(hyp.phi - 1.0)))
    poly = catalog_metric("poly_perturbed", {"a": 1.0}, n=2)
    t0 = time.perf_counter()
    res = solve_yamabe(poly, grid=grid)
    residual = res.curvature_residual(1e-2, 1.0)
    elapsed = time.perf_counter() - t0
    upper = res.state.barrier_N * grid.rho
    its = res.state.iterates
    mono = max(
        max(float(np.max(its[0] - upper)), 0.0),
        max(float(np.max(b - a)) for a, b in zip(its, its[1:])),
        max(float(res.state.barrier_floor - np.min(its[-1])), 0.0),
    )
    r1 = solve_lichnerowicz(poly, grid=grid)
    r2 = solve_lichnerowicz(poly, grid=grid, u0_scale=0.5)
    agree = float(np.max(np.abs(r1.phi - r2.phi)))
    ok = flat <= 1e-10 and residual <= 1e-6 and elapsed <= 30 and mono <= 1e-12 and agree <= 1e-8
    report_criterion(8, "Yamabe end-to-end", ok,
                     f"sup|phi-1| {flat:.1e}, residual {residual:.1e} in {elapsed:.1f} s, "
                     f"monotonicity {mono:.1e}, init agreement {agree:.1e}")
    assert ok


def test_criterion_09_cross_module(report_criterion):
    poly = catalog_metric("poly_perturbed", {"a": 1.0}, n=2)
    formal = lichnerowicz_expansion(metric_expansion(poly), None, None, 3.5).coefficient(1)[0].real
    res = solve_yamabe(poly)
    rho = res.grid.rho
    keep = (rho > 1e-4) & (rho < 1e-1)
    fitted = ladder_fit(rho[keep], res.phi[keep] - 1, [(1, 0), (2, 0), (3, 0), (3, 1), (4, 0)])[(1, 0)]
    rel = abs(fitted - formal) / abs(formal)

    hyp = catalog_metric("hyperbolic", n=2)
    A = PhgExpansion.monomial(3, 1.0)
    formal_log = lichnerowicz_expansion(metric_expansion(hyp), A, None, 4.5).coefficient(3, 1)[0].real
    sol = solve_lichnerowicz(hyp, "rho**3")
    keep = (rho > 1e-3) & (rho < 3e-2)
    fit = ladder_fit(rho[keep], sol.phi[keep] - 1, [(3, 1), (3, 0), (4, 0), (4, 1), (5, 0)])
    rel_log = abs(fit[(3, 1)] - formal_log) / abs(formal_log)
    ok = rel <= 1e-3 and rel_log <= 1e-3 and abs(fit[(3, 1)]) > 0.1
    report_criterion(9, "cross-module consistency", ok,
                     f"rho^1: {fitted:.6f} vs {formal:.6f}; rho^3 log rho: {fit[(3, 1)]:.6f} vs {formal_log:.6f}")
    assert ok


REMARK_EXAMPLES = [
    # (field, exponent, expected memberships)
    ("rho*sin(log(rho))", 1.0, {"script_C^{2,0.5;1}": True, "C1(Mbar)": False, "C^{1,0.0}(Mbar)": False}),
    ("rho**0.5*sin((1 + cos(theta)/2)*log(rho))", 0.5,
     {"A_0.5": True, "C^{0,0.5}_0": True, "C^{1,0.5}_0": True, "C^{2,0.5}_0": True,
      "rho^0.5 A": False, "phg": False}),
    ("rho**1.5*log(rho)", 1.5,
     {"A_1.5": True, "rho^1.5 A": False, "phg": True,
      "C^{0,0.5}_phg": True, "C^{1,0.0}_phg": True, "C^{1,0.5}_phg": False, "C^{2,0.0}_phg": False}),
]


def test_criterion_10_classifier(report_criterion):
    wrong = []
    for expr, exponent, expected in REMARK_EXAMPLES:
        got = classify_regularity(expr, 1, exponent=exponent).memberships
        wrong += [f"{expr}: {k}" for k, v in expected.items() if got.get(k) is not v]
    total = sum(len(e) for _, _, e in REMARK_EXAMPLES)
    ok = not wrong
    report_criterion(10, "regularity classifier", ok, f"{total - len(wrong)}/{total} booleans" +
                     (f"; wrong: {wrong}" if wrong else ""))
    assert ok
