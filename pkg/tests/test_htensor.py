from __future__ import annotations

import numpy as np
import pytest

from wahkit.errors import CriticalPointError
from wahkit.geometry import ScalarField, catalog_metric, make_points, rho_ladder
from wahkit.htensor import (
    a_coeff,
    a_coeff_divergence,
    boundary_obstruction_check,
    conformal_killing,
    defining_function,
    h_boundary_norm,
    h_invariance_suite,
    h_tensor,
    h_tensor_definitional,
    trace_free_hessian,
)


@pytest.mark.parametrize(
    "name,params,n",
    [("poly_perturbed", {"a": 1.0}, 2), ("log_oscillation", {}, 2), ("angle_dependent", {}, 3)],
)
def test_two_code_paths_agree(name, params, n):
    metric = catalog_metric(name, params, n=n)
    pts = make_points(np.full(n, 0.3), rho_ladder(1e-6, 0.9, 16))
    for omega in (defining_function(n), ScalarField("rho*(1 + x/3) + rho**2", n)):
        H1 = h_tensor(metric, omega, pts)
        H2 = h_tensor_definitional(metric, omega, pts)
        assert np.max(np.abs(H1 - H2)) <= 1e-10 * max(1.0, np.max(np.abs(H1)))
        A1 = a_coeff(metric, omega, pts)
        assert np.allclose(A1, a_coeff_divergence(metric, omega, pts), rtol=1e-9, atol=1e-12)


def test_boundary_value_closed_form():
    # gbar = drho^2 + (1 + rho) dx^2 + dy^2 at the boundary: H(rho) = diag(1/4, -1/4, 0)
    metric = catalog_metric("poly_perturbed", {"a": [1.0, 0.0]}, n=2)
    H = h_tensor(metric, defining_function(2), make_points([0.2, 0.1], [1e-7]))[0]
    assert np.allclose(H, np.diag([0.25, -0.25, 0.0]), atol=1e-6)


def test_invariance_suite():
    metric = catalog_metric("angle_dependent", n=2)
    omega = ScalarField("rho*(1 + x/3) + rho**2", 2)
    pts = make_points([0.3, 0.3], rho_ladder(1e-4, 0.5, 8))
    res = h_invariance_suite(metric, omega, ScalarField("exp(rho + x)", 2), 2.0, pts)
    assert res["homogeneity"] <= 1e-8 and res["conformal"] <= 1e-8
    assert res["trace_free"] <= 1e-12 and res["annihilates_grad"] <= 1e-12
    assert res["symmetry"] <= 1e-12


def test_homogeneity_factor_32():
    metric = catalog_metric("poly_perturbed", {"a": 1.0}, n=2)
    omega = defining_function(2)
    pts = make_points([0.1, 0.1], [0.05, 0.3])
    assert np.allclose(h_tensor(metric, omega.scaled(2.0), pts), 32 * h_tensor(metric, omega, pts), rtol=1e-12)


def test_hyperbolic_a_coeff_vanishes():
    metric = catalog_metric("hyperbolic", n=2)
    pts = make_points([0.4, 0.0], [1e-3, 0.5])
    assert np.max(np.abs(a_coeff(metric, defining_function(2), pts))) == 0.0
    assert h_boundary_norm(metric) == 0.0


def test_conformal_killing_of_killing_field_vanishes():
    # translations in x are Killing fields of the flat compactification
    metric = catalog_metric("hyperbolic", n=1)
    pts = make_points([0.2], [0.1, 0.4])
    X = np.tile([1.0, 0.0], (2, 1))
    dX = np.zeros((2, 2, 2))
    assert np.max(np.abs(conformal_killing(metric, lambda p: (X, dX), pts))) == 0.0


def test_critical_point_raises():
    metric = catalog_metric("hyperbolic", n=1)
    with pytest.raises(CriticalPointError):
        h_tensor(metric, ScalarField("(rho - 1/2)**2", 1), make_points([0.0], [0.5]))


def test_trace_free_hessian_is_trace_free():
    metric = catalog_metric("angle_dependent", n=2)
    pts = make_points([0.5, 0.5], [0.1, 0.2])
    T = trace_free_hessian(metric, ScalarField("rho**2 + rho*x", 2), pts)
    ginv = np.linalg.inv(metric.eval(pts, 0)[0])
    assert np.max(np.abs(np.einsum("pij,pij->p", ginv, T))) <= 1e-14


def test_obstruction_fast_pair():
    rep = boundary_obstruction_check(catalog_metric("poly_perturbed", {"a": [0, 0], "b": [1, 0]}, n=2))
    assert rep.h_vanishes and rep.fast_decay and rep.consistent
    assert rep.riem_slope >= 1.95


def test_obstruction_slow_pair():
    rep = boundary_obstruction_check(catalog_metric("poly_perturbed", {"a": [0.5, -0.5]}, n=2))
    assert rep.h_boundary >= 0.1 and rep.riem_slope <= 1.5
    assert rep.consistent


def test_obstruction_requires_fast_scalar_decay():
    with pytest.raises(CriticalPointError):
        boundary_obstruction_check(catalog_metric("poly_perturbed", {"a": 1.0}, n=2))
