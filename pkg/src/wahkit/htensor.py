"""The conformally invariant tensor H_gbar(omega) and related operators.

Two independent code paths are provided for H:

* :func:`h_tensor` expands everything into Hessian contractions;
* :func:`h_tensor_definitional` builds ``|dω|^6 D(|dω|^{-2} grad ω)`` from a
  coordinate Lie derivative and a coordinate divergence, with the coefficient
  A computed from the divergence form as well.

Both accept a metric and a scalar field exposing ``eval(points, order)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curvature import christoffel, norm02, safe_inverse
from .errors import CriticalPointError
from .geometry import FieldLike, MetricField, ScalarField, coordinate_symbols, make_points, richardson_zero


@dataclass(frozen=True)
class _Omega:
    g: np.ndarray
    dg: np.ndarray
    ginv: np.ndarray
    w: np.ndarray  # dω
    grad: np.ndarray  # ∇ω (vector)
    q: np.ndarray  # |dω|²
    hess: np.ndarray  # covariant Hessian
    lap: np.ndarray


def _omega_data(metric: MetricField, omega: FieldLike, points: np.ndarray, crit_tol: float = 1e-300) -> _Omega:
    points = np.atleast_2d(points)
    g, dg = metric.eval(points, 1)
    ginv = safe_inverse(g)
    _, w, ddw = omega.eval(points, 2)
    grad = np.einsum("pij,pj->pi", ginv, w)
    q = np.einsum("pi,pi->p", w, grad)
    if np.any(q <= crit_tol):
        raise CriticalPointError("dω vanishes at an evaluation point")
    G = christoffel(ginv, dg)
    hess = ddw - np.einsum("pkij,pk->pij", G, w)
    lap = np.einsum("pij,pij->p", ginv, hess)
    return _Omega(g, dg, ginv, w, grad, q, hess, lap)


def a_coeff(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    """``A = (1/n)(|dω|² Δω + (n-1) Hess ω(∇ω, ∇ω))``, the expanded p-Laplacian form."""
    d = _omega_data(metric, omega, points)
    n = metric.n
    hgg = np.einsum("pij,pi,pj->p", d.hess, d.grad, d.grad)
    return (d.q * d.lap + (n - 1) * hgg) / n


def _tf_part(d: _Omega, n: int) -> np.ndarray:
    """``dω⊗dω - |dω|² ḡ/(n+1)``."""
    return np.einsum("pi,pj->pij", d.w, d.w) - (d.q / (n + 1))[:, None, None] * d.g


def h_tensor(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    """Three-term Hessian expression of H (returns covariant components)."""
    return _h_terms(metric, omega, points).sum(axis=0)


def h_term_scale(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    """Sum of the ḡ-norms of the three summands of H; the natural floating-point
    scale against which cancellation residuals are measured."""
    terms = _h_terms(metric, omega, points)
    ginv = safe_inverse(metric.eval(np.atleast_2d(points), 0)[0])
    return sum(norm02(t, ginv) for t in terms)


def _h_terms(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    d = _omega_data(metric, omega, points)
    n = metric.n
    hgg = np.einsum("pij,pi,pj->p", d.hess, d.grad, d.grad)
    A = (d.q * d.lap + (n - 1) * hgg) / n
    hx = np.einsum("pik,pk->pi", d.hess, d.grad)  # Hess(∇ω, ·)
    nabla = (
        np.einsum("pi,pj->pij", hx, d.w)
        + np.einsum("pi,pj->pij", d.w, hx)
        - (2.0 * hgg / (n + 1))[:, None, None] * d.g
    )
    tf_hess = d.hess - (d.lap / (n + 1))[:, None, None] * d.g
    return np.stack(
        [
            (d.q**2)[:, None, None] * tf_hess,
            -d.q[:, None, None] * nabla,
            A[:, None, None] * _tf_part(d, n),
        ]
    )


def conformal_killing_from_jet(
    g: np.ndarray, dg: np.ndarray, X: np.ndarray, dX: np.ndarray
) -> np.ndarray:
    """``½ L_X ḡ - (Div X/(n+1)) ḡ`` in coordinates; ``dX[p, i, k] = ∂_i X^k``."""
    N = g.shape[-1]
    ginv = safe_inverse(g)
    lie = (
        np.einsum("pk,pkij->pij", X, dg)
        + np.einsum("pkj,pik->pij", g, dX)
        + np.einsum("pik,pjk->pij", g, dX)
    )
    dlogdet = 0.5 * np.einsum("pab,pkab->pk", ginv, dg)
    div = np.einsum("pkk->p", dX) + np.einsum("pk,pk->p", X, dlogdet)
    return 0.5 * lie - (div / N)[:, None, None] * g


def conformal_killing(metric: MetricField, X, points: np.ndarray) -> np.ndarray:
    """Conformal Killing operator applied to ``X``.

    ``X(points)`` must return ``(values[P, N], jacobian[P, N, N])`` with
    ``jacobian[p, i, k] = ∂_i X^k``.
    """
    points = np.atleast_2d(points)
    g, dg = metric.eval(points, 1)
    vals, jac = X(points)
    return conformal_killing_from_jet(g, dg, vals, jac)


def _unit_gradient_jet(metric: MetricField, omega: FieldLike, points: np.ndarray):
    """``X = |dω|^{-2} grad ω`` and its coordinate Jacobian via the product rule."""
    g, dg = metric.eval(points, 1)
    ginv = safe_inverse(g)
    _, w, ddw = omega.eval(points, 2)
    dginv = -np.einsum("pka,pmab,pbl->pmkl", ginv, dg, ginv)  # ∂_m ḡ^{kl}
    grad = np.einsum("pkl,pl->pk", ginv, w)
    q = np.einsum("pk,pk->p", w, grad)
    if np.any(q <= 0):
        raise CriticalPointError("dω vanishes at an evaluation point")
    dgrad = np.einsum("pmkl,pl->pmk", dginv, w) + np.einsum("pkl,pml->pmk", ginv, ddw)
    dq = np.einsum("pmab,pa,pb->pm", dginv, w, w) + 2.0 * np.einsum("pab,pa,pmb->pm", ginv, w, ddw)
    X = grad / q[:, None]
    dX = dgrad / q[:, None, None] - np.einsum("pk,pm->pmk", grad, dq) / (q**2)[:, None, None]
    return g, dg, ginv, w, grad, q, dq, X, dX


def a_coeff_divergence(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    """``(1/n)|dω|^{3-n} Div(|dω|^{n-1} grad ω)`` with a coordinate divergence."""
    points = np.atleast_2d(points)
    n = metric.n
    g, dg, ginv, w, grad, q, dq, X, dX = _unit_gradient_jet(metric, omega, points)
    dgrad = dX * q[:, None, None] + np.einsum("pk,pm->pmk", grad, dq) / q[:, None, None]
    e = 0.5 * (n - 1)
    Y = grad * (q**e)[:, None]
    dY = dgrad * (q**e)[:, None, None] + e * np.einsum("pk,pm->pmk", grad, dq) * (q ** (e - 1))[:, None, None]
    dlogdet = 0.5 * np.einsum("pab,pkab->pk", ginv, dg)
    div = np.einsum("pkk->p", dY) + np.einsum("pk,pk->p", Y, dlogdet)
    return q ** (0.5 * (3 - n)) * div / n


def h_tensor_definitional(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    """``|dω|^6 D(|dω|^{-2} grad ω) + A (dω⊗dω - |dω|² ḡ/(n+1))``."""
    points = np.atleast_2d(points)
    n = metric.n
    g, dg, ginv, w, grad, q, dq, X, dX = _unit_gradient_jet(metric, omega, points)
    D = conformal_killing(metric, lambda pts: (X, dX), points)
    A = a_coeff_divergence(metric, omega, points)
    tf = np.einsum("pi,pj->pij", w, w) - (q / (n + 1))[:, None, None] * g
    return (q**3)[:, None, None] * D + A[:, None, None] * tf


def trace_free_hessian(metric: MetricField, omega: FieldLike, points: np.ndarray) -> np.ndarray:
    d = _omega_data(metric, omega, points)
    return d.hess - (d.lap / (metric.n + 1))[:, None, None] * d.g


def defining_function(n: int) -> ScalarField:
    return ScalarField(coordinate_symbols(n)[-1], n, name="rho")


# ---------------------------------------------------------------------------
# property checks
# ---------------------------------------------------------------------------


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def h_invariance_suite(
    metric: MetricField,
    omega: FieldLike,
    theta: FieldLike,
    c: float,
    points: np.ndarray,
) -> dict[str, float]:
    """Residuals of symmetry, trace-freeness, grad-annihilation, c^5 homogeneity and
    the θ^{-2} conformal law.

    The first three are measured in the ḡ-norm relative to :func:`h_term_scale`
    (H is a difference of terms that nearly cancel near the boundary); the two
    scaling laws are relative errors against the largest component of H.
    """
    points = np.atleast_2d(points)
    H = h_tensor(metric, omega, points)
    d = _omega_data(metric, omega, points)
    scale = np.maximum(h_term_scale(metric, omega, points), 1e-300)
    size_grad = np.sqrt(d.q)
    sym = float(np.max(norm02(H - H.transpose(0, 2, 1), d.ginv) / scale))
    trace = float(np.max(np.abs(np.einsum("pij,pij->p", d.ginv, H)) / scale))
    hx = np.einsum("pij,pi->pj", H, d.grad)
    annih = float(np.max(np.sqrt(np.einsum("pi,pj,pij->p", hx, hx, d.ginv)) / (scale * size_grad)))
    if isinstance(omega, ScalarField):
        scaled = omega.scaled(c)
    else:
        scaled = _ScaledField(omega, c)
    homog = _rel(h_tensor(metric, scaled, points), c**5 * H)
    theta_val = theta.eval(points, 0)[0]
    tilde = metric.conformal(theta)
    conf = _rel(h_tensor(tilde, omega, points), theta_val[:, None, None] ** -2 * H)
    if not np.any(np.abs(H) > 0):
        homog = _abs_or_zero(h_tensor(metric, scaled, points))
        conf = _abs_or_zero(h_tensor(tilde, omega, points))
    return {"symmetry": sym, "trace_free": trace, "annihilates_grad": annih, "homogeneity": homog, "conformal": conf}


def _abs_or_zero(a: np.ndarray) -> float:
    return float(np.max(np.abs(a)))


class _ScaledField:
    def __init__(self, base: FieldLike, c: float):
        self.base, self.c, self.n = base, c, base.n

    def eval(self, points: np.ndarray, order: int = 2):
        return tuple(self.c * x for x in self.base.eval(points, order))


@dataclass(frozen=True)
class ObstructionReport:
    h_boundary: float
    riem_slope: float
    scalar_slope: float
    little_f_slope: float
    h_vanishes: bool
    fast_decay: bool

    @property
    def consistent(self) -> bool:
        return self.h_vanishes == self.fast_decay

    def as_dict(self) -> dict:
        return {
            "h_boundary": self.h_boundary,
            "riem_slope": self.riem_slope,
            "scalar_slope": self.scalar_slope,
            "little_f_slope": self.little_f_slope,
            "h_vanishes": self.h_vanishes,
            "fast_decay": self.fast_decay,
            "consistent": self.consistent,
        }


def h_boundary_norm(metric: MetricField, theta=None, rho0: float = 1e-4) -> float:
    """``|H_ḡ(ρ)|_ḡ`` extrapolated to the boundary (quadratic Richardson)."""
    th = np.zeros(metric.n) + 0.3 if theta is None else np.asarray(theta, dtype=float)
    rhos = rho0 * np.array([1.0, 0.5, 0.25])
    pts = make_points(th, rhos)
    H = h_tensor(metric, defining_function(metric.n), pts)
    ginv = safe_inverse(metric.eval(pts, 0)[0])
    Hb = richardson_zero(rhos, H)
    gb = richardson_zero(rhos, ginv)
    return float(norm02(Hb[None], gb[None])[0])


def boundary_obstruction_check(
    metric: MetricField,
    lo: float = 1e-5,
    hi: float = 1e-1,
    vanish_tol: float = 1e-6,
    fast_slope: float = 1.95,
) -> ObstructionReport:
    """Compare ``H|∂M = 0`` with second-order decay of ``Riem + Id``."""
    from .curvature import deviation_slopes

    slopes = deviation_slopes(metric, lo, hi)
    if not slopes["dev_scalar"].at_least(1.95):
        raise CriticalPointError(
            "obstruction check needs R[g]+n(n+1) = O(rho^2); "
            f"fitted slope {slopes['dev_scalar'].exponent:.3f}"
        )
    hb = h_boundary_norm(metric)
    rs = slopes["dev_riem"]
    r_exp = rs.exponent
    return ObstructionReport(
        hb,
        r_exp,
        slopes["dev_scalar"].exponent,
        slopes["little_f"].exponent,
        hb <= vanish_tol,
        rs.at_least(fast_slope),
    )
