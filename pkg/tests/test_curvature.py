from __future__ import annotations

import numpy as np
import pytest

from wahkit.curvature import (
    apply22,
    decay_exponent,
    deviation_slopes,
    identity22,
    kn_product,
    laplacian_direct,
    little_f,
    riem_deviation_decomposition,
    riem_via_identity,
    riemann_direct,
    scalar_of,
    scalar_via_identity,
    taylor_defect,
    wah_equivalence_report,
    wedge,
)
from wahkit.errors import ShapeError
from wahkit.geometry import ScalarField, catalog_metric, make_points, rho_ladder


def test_kn_product_symmetries(rng):
    u = rng.standard_normal((4, 4))
    v = rng.standard_normal((4, 4))
    T = kn_product(u, v)
    assert np.allclose(T, kn_product(v, u))
    assert np.allclose(T, -T.transpose(1, 0, 2, 3))
    assert np.allclose(T, -T.transpose(0, 1, 3, 2))


def test_delta_kn_delta_is_identity_on_two_forms(rng):
    ident = identity22(3)
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    form = wedge(x, y)
    assert np.allclose(apply22(ident, form), form)


def test_kn_product_shape_check():
    with pytest.raises(ShapeError):
        kn_product(np.eye(2), np.eye(3))


@pytest.mark.parametrize("n", [1, 2, 3])
def test_hyperbolic_curvature(n):
    metric = catalog_metric("hyperbolic", n=n)
    pts = make_points(np.full(n, 0.2), [1e-3, 0.1, 0.6])
    riem = riem_via_identity(metric, pts)
    assert np.allclose(riem, -identity22(n + 1), atol=1e-12)
    assert np.allclose(riemann_direct(metric, pts), -identity22(n + 1), atol=1e-10)
    assert np.allclose(scalar_via_identity(metric, pts), -n * (n + 1), atol=1e-12)


def test_hyperbolic_scalar_n2():
    metric = catalog_metric("hyperbolic", n=2)
    pts = make_points([0.0, 0.0], [0.5])
    assert scalar_via_identity(metric, pts)[0] == pytest.approx(-6.0, abs=1e-12)


@pytest.mark.parametrize(
    "name,params,n",
    [("poly_perturbed", {"a": 1.0}, 2), ("log_oscillation", {}, 2), ("angle_dependent", {}, 3), ("angle_dependent", {}, 1)],
)
def test_identity_matches_direct(name, params, n):
    metric = catalog_metric(name, params, n=n)
    pts = make_points(np.full(n, 0.3), rho_ladder(1e-6, 0.9, 24))
    A = riemann_direct(metric, pts)
    B = riem_via_identity(metric, pts)
    scale = np.abs(A).reshape(24, -1).max(axis=1)
    assert np.max(np.abs(A - B).reshape(24, -1).max(axis=1) / scale) < 1e-8
    assert np.allclose(scalar_of(A), scalar_via_identity(metric, pts), rtol=1e-8)


def test_decomposition_sums_to_deviation():
    metric = catalog_metric("log_oscillation", n=2)
    pts = make_points([0.3, 0.1], rho_ladder(1e-5, 0.5, 16))
    scal, hess, weyl = riem_deviation_decomposition(metric, pts)
    dev = riem_via_identity(metric, pts) + identity22(3)
    assert np.max(np.abs(scal + hess + weyl - dev)) <= 1e-10


def test_little_f_closed_form():
    # gbar = drho^2 + (1 + rho)(dx^2 + dy^2): |drho|^2 = 1, Delta rho = 1 / (1 + rho)
    metric = catalog_metric("poly_perturbed", {"a": 1.0}, n=2, blend=False)
    rho = np.array([0.01, 0.1, 0.5])
    f = little_f(metric, make_points([0, 0], rho))
    assert np.allclose(f, -(2.0 / 3.0) * rho / (1 + rho), rtol=1e-12)


def test_taylor_defect_examples():
    metric = catalog_metric("hyperbolic", n=1)
    rho = rho_ladder(1e-6, 1e-1, 40)
    pts = make_points([0.0], rho)
    assert np.allclose(taylor_defect(ScalarField("rho**2", 1), metric, pts), -rho**2, rtol=1e-12)
    d = taylor_defect(ScalarField("rho*sin(log(rho))", 1), metric, pts)
    assert np.allclose(d, -rho * np.cos(np.log(rho)), atol=1e-15)
    d2 = taylor_defect(ScalarField("rho + rho**2*sin(log(rho))", 1), metric, pts)
    assert decay_exponent(rho, d2, envelope=True).slope >= 1.9


def test_laplacian_direct_on_powers():
    # hyperbolic: Delta rho^s = s (s - n) rho^s
    metric = catalog_metric("hyperbolic", n=2)
    rho = np.array([0.01, 0.3])
    pts = make_points([0.1, 0.2], rho)
    for s in (0.5, 2.0, 3.0):
        val = laplacian_direct(metric, ScalarField(f"rho**{s}", 2), pts)
        assert np.allclose(val, s * (s - 2) * rho**s, rtol=1e-12)


def test_decay_exponent_examples():
    rho = np.geomspace(1e-6, 1e-2, 100)
    assert decay_exponent(rho, rho).exponent == pytest.approx(1.0, abs=1e-12)
    fit = decay_exponent(rho, rho**2 * np.log(rho))
    assert 1.9 <= fit.exponent <= 2.0
    zero = decay_exponent(rho, np.zeros_like(rho))
    assert zero.identically_zero and zero.at_least(5)
    const = decay_exponent(rho, np.full_like(rho, 3.0))
    assert const.exponent == pytest.approx(0.0, abs=1e-12)


def test_decay_exponent_needs_samples():
    with pytest.raises(ShapeError):
        decay_exponent([1e-3, 1e-2], [1.0, 2.0])


def test_wah_report_flags():
    rep = wah_equivalence_report(catalog_metric("poly_perturbed", {"a": 1.0}, n=2))
    assert rep.flags == (True, True, True, True)
    bad = wah_equivalence_report(catalog_metric("rho_scaled", n=2))
    assert bad.flags == (False, False, False, False) and bad.consistent
    assert bad.witnesses["grad_rho_sq"][0] == pytest.approx(0.25, abs=1e-8)


def test_deviation_slopes_log_oscillation():
    slopes = deviation_slopes(catalog_metric("log_oscillation", n=2))
    for key in ("dev_riem", "dev_ric", "dev_scalar"):
        assert slopes[key].at_least(0.95)
