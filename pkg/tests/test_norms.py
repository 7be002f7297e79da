from __future__ import annotations

import math

import numpy as np
import pytest

from wahkit.errors import ConfigurationError
from wahkit.norms import (
    NormSpec,
    TensorField,
    background_derivatives,
    classify_regularity,
    divergence_rule,
    ladder,
    make_cover,
    pencil_exponents,
    phg_proxy,
    script_c_norm,
    weighted_holder_norm,
    weighted_sobolev_norm,
)


@pytest.mark.parametrize(
    "kwargs",
    [dict(k=-1), dict(alpha=1.0), dict(p=1.0), dict(alpha=0.5, p=2.0), dict(weight_r=0.5)],
)
def test_norm_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        NormSpec(**kwargs)


def test_divergence_rule():
    assert divergence_rule([1, 2, 4, 8])
    assert not divergence_rule([1, 2, 4, 4, 8])
    assert not divergence_rule([1.0, 1.0, 1.0, 1.0])
    assert divergence_rule([1.0, math.inf])


def test_weighted_holder_power_scaling():
    # rho^delta is exactly 1 after weighting by rho^-delta: C^0 norm 1 on every chart
    cover = make_cover(1, 8.0)
    assert weighted_holder_norm("rho**2", NormSpec(0, 0.0, None, 2.0), cover) == pytest.approx(1.0, abs=1e-12)


def test_weighted_holder_ladder_detects_wrong_weight():
    res = ladder(lambda t: weighted_holder_norm("rho", NormSpec(0, 0.0, None, 2.0), make_cover(1, t)))
    assert res.infinite
    res = ladder(lambda t: weighted_holder_norm("rho", NormSpec(1, 0.5, None, 1.0), make_cover(1, t)))
    assert res.finite


def test_sobolev_norm_weights():
    low = ladder(lambda t: weighted_sobolev_norm("rho", NormSpec(0, 0.0, 2.0, 0.0), make_cover(1, t)))
    high = ladder(lambda t: weighted_sobolev_norm("rho", NormSpec(0, 0.0, 2.0, 1.0), make_cover(1, t)))
    assert low.finite and high.infinite


def test_sobolev_requires_p():
    with pytest.raises(ConfigurationError):
        weighted_sobolev_norm("rho", NormSpec(0, 0.0), make_cover(1, 4.0))


def test_background_derivatives_shapes():
    d = background_derivatives("rho**2*sin(theta)", 2, n=1)
    assert [t.rank for t in d] == [0, 1, 2]
    assert len(d[2].components) == 4


def test_script_c_requires_m_le_k():
    with pytest.raises(ConfigurationError):
        script_c_norm("rho", 1, 0.5, 2, n=1)


def test_pencil_exponents_recovers_log_term():
    t = np.linspace(2, 12, 81)
    y = np.exp(-1.5 * t) * t + 2 * np.exp(-2 * t)
    exps = pencil_exponents(y, t[1] - t[0])
    assert exps is not None
    vals = sorted(round(float(np.real(s)), 6) for s in exps)
    assert vals == pytest.approx([1.5, 1.5, 2.0], abs=1e-5)


def test_phg_proxy():
    ok, _ = phg_proxy(TensorField("rho**2*cos(theta) + rho**3*log(rho)", 1))
    assert ok
    bad, _ = phg_proxy(TensorField("rho**0.5*sin((1 + cos(theta)/2)*log(rho))", 1))
    assert not bad


def test_classify_sin_log():
    rep = classify_regularity("rho*sin(log(rho))", 1, exponent=1.0, sobolev_p=2.0).memberships
    assert rep["script_C^{2,0.5;1}"] and rep["Lipschitz(Mbar)"]
    assert not rep["C1(Mbar)"]
    assert rep["W^{0,2}_0"]


def test_classify_smooth_function_everywhere():
    rep = classify_regularity("rho**2", 1, exponent=2.0).memberships
    assert all(rep.values())
