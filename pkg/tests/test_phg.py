from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from wahkit.errors import ConfigurationError, ExpansionCapError
from wahkit.geometry import catalog_metric
from wahkit.indicial import BoundaryData, characteristic_exponents
from wahkit.phg import (
    MatchHistory,
    PhgExpansion,
    apply_indicial,
    binom,
    binomial_series,
    expansion_from_triples,
    expansion_match,
    homogeneous_basis,
    laplacian_split,
    lichnerowicz_expansion,
    metric_expansion,
    phg_add,
    phg_mul,
    solve_indicial_ode,
)


def laplace_data(n: int, c: float) -> BoundaryData:
    """Boundary data of Δ - c on hyperbolic space: (ρ∂)² - n ρ∂ - c."""
    return BoundaryData(np.eye(1), np.array([[-float(n)]]), np.array([[-float(c)]]))


def test_binom_negative_integer_argument():
    assert binom(-2, 3) == pytest.approx(-4.0)
    assert binom(0.5, 2) == pytest.approx(-0.125)
    assert binom(3, 5) == 0.0


def test_add_merges_like_terms():
    a = expansion_from_triples([(1, 0, 2.0), (2, 1, 1.0)], 4)
    b = expansion_from_triples([(1, 0, -2.0), (3, 0, 5.0)], 3.5)
    s = phg_add(a, b)
    assert s.remainder_order == 3.5
    assert [(t.s.real, t.p) for t in s.terms] == [(2.0, 1), (3.0, 0)]


def test_mul_cauchy_product_and_remainder():
    a = PhgExpansion.polynomial([1.0, 1.0], remainder_order=3)  # 1 + ρ + O(ρ³)
    b = expansion_from_triples([(1, 1, 1.0)], 4)  # ρ log ρ + O(ρ⁴)
    prod = phg_mul(a, b)
    assert prod.remainder_order == pytest.approx(4.0)
    assert prod.coefficient(1, 1)[0] == pytest.approx(1.0)
    assert prod.coefficient(2, 1)[0] == pytest.approx(1.0)
    rho = np.array([1e-3, 1e-2])
    assert np.allclose(prod(rho)[:, 0], (1 + rho) * rho * np.log(rho))


def test_binomial_series_matches_closed_form():
    u = PhgExpansion.polynomial([0.0, 0.5], remainder_order=math.inf)
    ser = binomial_series(u, -1.5, 6)
    rho = np.array([1e-2, 5e-2])
    assert np.allclose(ser(rho)[:, 0], (1 + 0.5 * rho) ** -1.5, rtol=1e-8)


def test_apply_indicial_on_log_terms():
    # (ρ∂)²[ρ^s L] = s² ρ^s L + 2s ρ^s, ρ∂[ρ^s L] = s ρ^s L + ρ^s
    data = laplace_data(2, 0.0)
    out = apply_indicial(data, PhgExpansion.monomial(1.3, 1.0, p=1))
    assert out.coefficient(1.3, 1)[0] == pytest.approx(1.3**2 - 2 * 1.3)
    assert out.coefficient(1.3, 0)[0] == pytest.approx(2 * 1.3 - 2)


def test_rho_derivative_termwise():
    u = expansion_from_triples([(2, 2, 1.0)])
    du = u.rho_derivative()
    assert du.coefficient(2, 2)[0] == pytest.approx(2.0)
    assert du.coefficient(2, 1)[0] == pytest.approx(2.0)


def test_resonance_sweep():
    n, c = 2, 3.0
    data = laplace_data(n, c)
    roots = [s.real for s, _ in characteristic_exponents(data)]
    assert roots == pytest.approx([-1.0, 3.0])
    sweep = np.concatenate([np.linspace(-2.3, 4.7, 48), roots])
    for nu in sweep:
        f = PhgExpansion.monomial(nu, 1.0)
        u = solve_indicial_ode(data, f)
        resonant = min(abs(nu - r) for r in roots) <= 1e-7
        assert (u.max_log_power() == 1) == resonant, nu
        back = apply_indicial(data, u)
        assert np.allclose(back.coefficient(nu, 0), 1.0, rtol=1e-12)
        assert all(np.max(np.abs(t.coeff)) <= 1e-12 for t in back.terms if t.p > 0)


def test_resonant_coefficient():
    # Δ - 3 on H^3 against ρ³: u = ρ³ log ρ / 4
    u = solve_indicial_ode(laplace_data(2, 3.0), PhgExpansion.monomial(3.0, 1.0))
    assert u.coefficient(3.0, 1)[0] == pytest.approx(0.25)


def _ode_reference(data: BoundaryData, f: PhgExpansion, terminal: float, rho_eval: np.ndarray) -> np.ndarray:
    d = data.dim
    ai = np.linalg.inv(data.abar)

    def rhs(t, y):
        v, w = y[:d], y[d:]
        fv = f(np.array([math.exp(t)]))[0]
        return np.concatenate([w, ai @ (fv - data.bbar @ w - data.cbar @ v)])

    ts = np.log(rho_eval)
    sol = solve_ivp(rhs, (math.log(terminal), ts.min()), np.zeros(2 * d), method="DOP853",
                    rtol=1e-13, atol=1e-16, dense_output=True)
    return sol.sol(ts)[:d].T


def test_nonresonant_solution_matches_ode_integration(rng):
    worst = 0.0
    for _ in range(5):
        a = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
        data = BoundaryData(a, rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
        f = PhgExpansion([(0.7, 0, [1.0, -0.5]), (1.9, 0, [0.3, 0.2])])
        u = solve_indicial_ode(data, f, terminal=0.5)
        rho = np.geomspace(1e-3, 1e-1, 7)
        ref = _ode_reference(data, f, 0.5, rho)
        worst = max(worst, float(np.max(np.abs(u(rho) - ref) / np.abs(ref))))
    assert worst <= 1e-8


def test_homogeneous_basis_double_root():
    data = BoundaryData(np.eye(1), np.array([[-2.0]]), np.array([[1.0]]))  # (s - 1)²
    basis = homogeneous_basis(data, 1.0, 2)
    assert len(basis) == 2
    for blocks in basis:
        h = PhgExpansion([(1.0, k, blocks[k]) for k in range(2)])
        assert all(np.allclose(t.coeff, 0, atol=1e-12) for t in apply_indicial(data, h).terms)


def test_double_root_source_gets_two_logs():
    data = BoundaryData(np.eye(1), np.array([[-2.0]]), np.array([[1.0]]))
    u = solve_indicial_ode(data, PhgExpansion.monomial(1.0, 1.0))
    assert u.max_log_power() == 2
    assert u.coefficient(1.0, 2)[0] == pytest.approx(0.5)


def test_expansion_match_independent_of_step():
    metric = catalog_metric("poly_perturbed", {"a": 1.0}, n=3)
    split = laplacian_split(metric, 4.0)
    f = PhgExpansion.monomial(2.0, 1.0)
    results = []
    for gamma in (None, 0.3, 0.5):
        hist = MatchHistory()
        results.append(expansion_match(split, f, 2.0, 5.0, gamma=gamma, history=hist))
        assert hist.levels == sorted(hist.levels)
    for other in results[1:]:
        for t in results[0].terms:
            assert np.allclose(other.coefficient(t.s, t.p), t.coeff, rtol=1e-10)
    # the leading term solves the indicial problem exactly: I_2 = 4 - 6 - 4
    assert results[0].coefficient(2.0, 0)[0] == pytest.approx(-1 / 6)


def test_expansion_match_rejects_bad_step():
    split = laplacian_split(catalog_metric("hyperbolic", n=2), 3.0)
    with pytest.raises(ConfigurationError):
        expansion_match(split, PhgExpansion.monomial(2.0), 2.0, 4.0, gamma=0.0)


def test_expansion_cap():
    with pytest.raises(ExpansionCapError):
        PhgExpansion([(k, 0, [1.0]) for k in range(80)])


def test_metric_expansion_hyperbolic():
    ge = metric_expansion(catalog_metric("hyperbolic", n=2))
    assert not ge.scalar_deviation.terms
    phi = lichnerowicz_expansion(ge, None, None, 4.0)
    assert [(t.s.real, t.p) for t in phi.terms] == [(0.0, 0)]
    assert phi.coefficient(0)[0] == pytest.approx(1.0)


def test_lichnerowicz_expansion_poly():
    ge = metric_expansion(catalog_metric("poly_perturbed", {"a": 1.0}, n=2))
    # R + 6 = 4ρ + O(ρ²) for gbar = dρ² + (1+ρ)(dx² + dy²)
    assert ge.scalar_deviation.coefficient(1)[0] == pytest.approx(4.0)
    phi = lichnerowicz_expansion(ge, None, None, 3.5)
    assert phi.coefficient(1)[0] == pytest.approx(-0.125, rel=1e-12)


def test_lichnerowicz_expansion_resonant_log():
    ge = metric_expansion(catalog_metric("hyperbolic", n=2))
    phi = lichnerowicz_expansion(ge, PhgExpansion.monomial(3, 1.0), None, 4.5)
    assert phi.coefficient(3, 1)[0] == pytest.approx(-0.25, rel=1e-12)


def test_lichnerowicz_expansion_rejects_n1():
    ge = metric_expansion(catalog_metric("hyperbolic", n=1))
    with pytest.raises(ConfigurationError):
        lichnerowicz_expansion(ge, None, None, 3.0)


def test_resonance_at_computed_root_of_scalar_operator():
    # a 1x1 block at a numerically computed root is pure roundoff; it must still count as a kernel
    data = laplace_data(2, 3.0)
    root = min(s.real for s, _ in characteristic_exponents(data))
    u = solve_indicial_ode(data, PhgExpansion.monomial(root, 1.0))
    assert u.max_log_power() >= 1
