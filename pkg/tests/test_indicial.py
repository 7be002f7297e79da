from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import determinant_roots, match_error
from wahkit.curvature import laplacian_direct
from wahkit.errors import ConfigurationError, LinearAlgebraError
from wahkit.geometry import ScalarField, catalog_metric
from wahkit.indicial import (
    BoundaryData,
    IndicialData,
    characteristic_exponents,
    cluster_values,
    companion_matrix,
    constant_ud,
    fredholm_window,
    indicial_data,
    indicial_map,
    laplacian_ud,
    ladder_indicial,
    user_operator,
    vector_laplacian_ud,
)


def _values(exps):
    return sorted(s.real for s, k in exps for _ in range(k))


def test_indicial_map_n3():
    op = laplacian_ud(catalog_metric("hyperbolic", n=3))
    for s in (-1.0, 0.5, 2.0):
        assert indicial_map(op, s)[0, 0] == pytest.approx(s * s - 3 * s)
    assert _values(indicial_data(op).exponents) == pytest.approx([0.0, 3.0])


def test_shifted_exponents():
    op = laplacian_ud(catalog_metric("hyperbolic", n=2), 5.0)
    assert _values(indicial_data(op).exponents) == pytest.approx([1 - math.sqrt(6), 1 + math.sqrt(6)], abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("c", [0.0, 1.0, 5.0, None])
def test_radius_formula(n, c):
    c = -n * n / 4 + 0.01 if c is None else c
    data = indicial_data(laplacian_ud(catalog_metric("poly_perturbed", n=n), c), np.zeros(n))
    assert data.radius == pytest.approx(math.sqrt(n * n / 4 + c), abs=1e-10)
    assert data.symmetry_defect() <= 1e-10


def test_companion_matches_determinant_roots(rng):
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        a = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        b = rng.standard_normal((d, d))
        c = rng.standard_normal((d, d))
        eig = np.linalg.eigvals(companion_matrix(BoundaryData(a, b, c)))
        worst = max(worst, match_error(eig, determinant_roots(a, b, c)))
    assert worst <= 1e-8


def test_companion_singular_leading_coefficient():
    with pytest.raises(LinearAlgebraError):
        companion_matrix(BoundaryData(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1))))


def test_windows():
    h3 = indicial_data(laplacian_ud(catalog_metric("hyperbolic", n=3)))
    w = fredholm_window(h3)
    assert (w.lo, w.hi) == pytest.approx((0.0, 3.0))
    assert 1.5 in w and 3.0 not in w
    h2 = indicial_data(laplacian_ud(catalog_metric("hyperbolic", n=2), 5.0))
    w2 = fredholm_window(h2)
    assert (w2.lo, w2.hi) == pytest.approx((1 - math.sqrt(6), 1 + math.sqrt(6)))
    critical = IndicialData(((1.0 + 0j, 2),), 2, 0)
    assert critical.radius == 0.0 and fredholm_window(critical).empty
    ws = fredholm_window(h3, p=2)
    assert (ws.lo, ws.hi) == pytest.approx((-1.5, 1.5))
    with pytest.raises(ConfigurationError):
        fredholm_window(h3, p=1)


def test_clustering_and_multiplicity():
    op = constant_ud(1, [[1.0]], [[-2.0]], [[1.0]])  # (s - 1)^2
    (s, k), = characteristic_exponents(op)
    assert k == 2 and s == pytest.approx(1.0, abs=1e-7)
    groups = cluster_values(np.array([0.0, 1e-9, 1.0]))
    assert [g[1] for g in groups] == [2, 1]


def test_complex_exponents_below_l2_threshold():
    op = laplacian_ud(catalog_metric("hyperbolic", n=2), -2.0)
    exps = characteristic_exponents(op)
    assert all(abs(s.imag) == pytest.approx(1.0) for s, _ in exps)
    assert indicial_data(op).radius == pytest.approx(0.0, abs=1e-12)


def test_angle_dependent_trace_matches_laplacian_on_powers():
    metric = catalog_metric("angle_dependent", n=2)
    op = laplacian_ud(metric, 0.5)
    for s in (0.3, 1.7):
        f = ScalarField(f"rho**{s}*(1 + 0*x)", 2)
        lim = ladder_indicial(op, lambda pts, s: laplacian_direct(metric, f, pts) / pts[:, -1] ** s - 0.5, s, [1.0, 0.3])
        assert lim == pytest.approx(indicial_map(op, s, [1.0, 0.3])[0, 0], abs=1e-6)


def test_vector_laplacian_exponents():
    op = vector_laplacian_ud(catalog_metric("hyperbolic", n=2))
    data = indicial_data(op, [0.5, 0.2])
    assert _values(data.exponents) == pytest.approx(
        sorted([-math.sqrt(2)] * 2 + [math.sqrt(2)] * 2 + [-math.sqrt(3), math.sqrt(3)]) , abs=1e-8)
    assert data.symmetry_defect() <= 1e-8


def test_user_operator_numeric_trace():
    n = 1

    def a(p):
        out = np.zeros((len(p), 2, 2, 1, 1))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = (1 + p[:, 1])[:, None, None]
        return out

    def b(p):
        out = np.zeros((len(p), 2, 1, 1))
        out[:, 1] = -1.0
        return out

    def c(p):
        return np.full((len(p), 1, 1), -2.0)

    op = user_operator(n, 1, 0, a, b, c, name="user")
    assert _values(indicial_data(op).exponents) == pytest.approx([-1.0, 2.0], abs=1e-8)
