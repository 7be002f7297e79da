"""Curvature of conformally compact metrics.

Conventions:

* ``R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb} + Gamma^a_{ce} Gamma^e_{db} - Gamma^a_{de} Gamma^e_{cb}``
* the curvature operator on 2-forms is ``Riem_{ij}^{kl} = R_{ijab} g^{ak} g^{bl}``,
  so the hyperbolic metric gives ``-Id``
* Ricci endomorphism ``Ric_j^l = sum_i Riem_{ij}^{il}`` and scalar ``R = sum Riem_{ij}^{ij}``
* (1,1) tensors are stored as ``u[..., i, k] = u_i^k``

Pointwise arrays carry a leading axis over points.  Norms are the full
Frobenius contraction with ``gbar`` (the value is the same for ``g`` on
tensors of type (2,2) and (1,1)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import LinearAlgebraError, ShapeError
from .geometry import FieldLike, MetricField, make_points, richardson_zero, rho_ladder

# ---------------------------------------------------------------------------
# tensor algebra
# ---------------------------------------------------------------------------


def kn_product(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Raised-index Kulkarni-Nomizu product of two (1,1) tensors.

    ``(u ⊛ v)_{ij}^{kl} = ½(u_i^k v_j^l + u_j^l v_i^k - u_i^l v_j^k - u_j^k v_i^l)``.
    Works on single matrices or stacks with a leading point axis.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.shape[-1] != u.shape[-2]:
        raise ShapeError(f"kn_product needs matching square inputs, got {u.shape} and {v.shape}")
    t1 = np.einsum("...ik,...jl->...ijkl", u, v)
    t2 = np.einsum("...jl,...ik->...ijkl", u, v)
    t3 = np.einsum("...il,...jk->...ijkl", u, v)
    t4 = np.einsum("...jk,...il->...ijkl", u, v)
    return 0.5 * (t1 + t2 - t3 - t4)


def identity22(dim: int) -> np.ndarray:
    d = np.eye(dim)
    return kn_product(d, d)


def apply22(T: np.ndarray, form: np.ndarray) -> np.ndarray:
    """Action of a (2,2) tensor on a 2-form ``omega_{ij}`` (antisymmetric array).

    Uses ``(T omega)_{kl} = ½ T_{ij}^{kl} omega^{ij}`` with coordinate indices,
    which maps ``e_i ∧ e_j`` (components ``δ^i_a δ^j_b - δ^i_b δ^j_a``) to ``T_{ij}^{kl}`` antisymmetrised.
    """
    return 0.5 * np.einsum("...ijkl,...ij->...kl", T, form)


def wedge(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...j->...ij", x, y) - np.einsum("...j,...i->...ij", x, y)


def sharp(barg_inv: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Raise the second index of a symmetric 2-tensor: ``(h^♯)_i^k = h_{ij} gbar^{jk}``."""
    return np.einsum("pij,pjk->pik", h, barg_inv)


def norm22(T: np.ndarray, g: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Frobenius norm of a (2,2) tensor with respect to ``g``."""
    val = np.einsum("pijkl,pabcd,pia,pjb,pkc,pld->p", T, T, ginv, ginv, g, g, optimize=True)
    return np.sqrt(np.maximum(val, 0.0))


def norm11(E: np.ndarray, g: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    val = np.einsum("pik,pac,pia,pkc->p", E, E, ginv, g, optimize=True)
    return np.sqrt(np.maximum(val, 0.0))


def norm02(h: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    val = np.einsum("pij,pkl,pik,pjl->p", h, h, ginv, ginv, optimize=True)
    return np.sqrt(np.maximum(val, 0.0))


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature from derivatives
# ---------------------------------------------------------------------------


def safe_inverse(g: np.ndarray) -> np.ndarray:
    det = np.linalg.det(g)
    if not np.all(np.isfinite(det)) or np.any(np.abs(det) < 1e-300):
        raise LinearAlgebraError("singular metric matrix")
    return np.linalg.inv(g)


def christoffel(ginv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """``Gamma[p, l, i, j] = Γ^l_{ij}``."""
    lower = 0.5 * (dg.transpose(0, 2, 1, 3) + dg.transpose(0, 2, 3, 1) - dg)
    return np.einsum("plk,pkij->plij", ginv, lower)


def christoffel_derivative(ginv: np.ndarray, dg: np.ndarray, ddg: np.ndarray) -> np.ndarray:
    """``dGamma[p, m, l, i, j] = d_m Γ^l_{ij}``."""
    lower = 0.5 * (dg.transpose(0, 2, 1, 3) + dg.transpose(0, 2, 3, 1) - dg)
    # ddg[p, m, a, b, c] = d_m d_a g_bc
    dlower = 0.5 * (
        ddg.transpose(0, 1, 3, 2, 4) + ddg.transpose(0, 1, 3, 4, 2) - ddg
    )  # [p, m, k, i, j]
    dginv = -np.einsum("pla,pmab,pbk->pmlk", ginv, dg, ginv)
    return np.einsum("pmlk,pkij->pmlij", dginv, lower) + np.einsum("plk,pmkij->pmlij", ginv, dlower)


def riemann_from_derivatives(g: np.ndarray, dg: np.ndarray, ddg: np.ndarray) -> np.ndarray:
    """Curvature operator ``Riem_{ij}^{kl}`` of a metric given its derivatives."""
    ginv = safe_inverse(g)
    G = christoffel(ginv, dg)
    dG = christoffel_derivative(ginv, dg, ddg)
    # R^a_{bcd}
    Rup = (
        np.einsum("pcadb->pabcd", dG)
        - np.einsum("pdacb->pabcd", dG)
        + np.einsum("pace,pedb->pabcd", G, G)
        - np.einsum("pade,pecb->pabcd", G, G)
    )
    Rlow = np.einsum("pae,pebcd->pabcd", g, Rup)
    return np.einsum("pijab,pak,pbl->pijkl", Rlow, ginv, ginv, optimize=True)


def ricci_of(riem: np.ndarray) -> np.ndarray:
    return np.einsum("pijil->pjl", riem)


def scalar_of(riem: np.ndarray) -> np.ndarray:
    return np.einsum("pijij->p", riem)


# ---------------------------------------------------------------------------
# the uncompactified metric
# ---------------------------------------------------------------------------


def physical_derivatives(points: np.ndarray, barg: tuple[np.ndarray, ...], order: int = 2) -> tuple[np.ndarray, ...]:
    """Derivatives of ``g = rho^{-2} gbar`` by the product rule (no differencing)."""
    P, N = points.shape
    rho = points[:, -1]
    f = rho**-2
    grad = np.zeros((P, N))
    grad[:, -1] = -2.0 * rho**-3
    hess = np.zeros((P, N, N))
    hess[:, -1, -1] = 6.0 * rho**-4
    from .geometry import conformal_derivatives

    return conformal_derivatives((f, grad, hess), barg, order)


def riemann_direct(metric: MetricField, points: np.ndarray) -> np.ndarray:
    """Riemann operator of ``g = rho^{-2} gbar`` from Christoffel symbols of ``g``."""
    points = np.atleast_2d(points)
    g, dg, ddg = physical_derivatives(points, metric.eval(points, 2))
    return riemann_from_derivatives(g, dg, ddg)


# ---------------------------------------------------------------------------
# identities in terms of the compactified metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackgroundData:
    """Pointwise ingredients of the curvature identities."""

    points: np.ndarray
    g: np.ndarray
    ginv: np.ndarray
    grad_rho_sq: np.ndarray  # |dρ|²_ḡ
    hess_rho: np.ndarray  # Hess_ḡ ρ (covariant)
    lap_rho: np.ndarray  # Δ_ḡ ρ
    riem_bar: np.ndarray
    christoffel: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return self.points[:, -1]

    @property
    def n(self) -> int:
        return self.points.shape[1] - 1


def background_data(metric: MetricField, points: np.ndarray) -> BackgroundData:
    points = np.atleast_2d(points)
    g, dg, ddg = metric.eval(points, 2)
    ginv = safe_inverse(g)
    G = christoffel(ginv, dg)
    hess = -G[:, -1]  # Hess ρ_ij = -Γ^ρ_ij since ∂∂ρ = 0
    lap = np.einsum("pij,pij->p", ginv, hess)
    riem_bar = riemann_from_derivatives(g, dg, ddg)
    return BackgroundData(points, g, ginv, ginv[:, -1, -1].copy(), hess, lap, riem_bar, G)


def _data(metric_or_data: MetricField | BackgroundData, points: np.ndarray | None) -> BackgroundData:
    if isinstance(metric_or_data, BackgroundData):
        return metric_or_data
    return background_data(metric_or_data, points)


def riem_via_identity(barg: MetricField | BackgroundData, points: np.ndarray | None = None) -> np.ndarray:
    """``-|dρ|² Id + 2ρ δ⊛(Hess ρ)^♯ + ρ² Riem[ḡ]``."""
    d = _data(barg, points)
    N = d.n + 1
    delta = np.broadcast_to(np.eye(N), d.g.shape)
    ident = identity22(N)
    rho = d.rho
    term = kn_product(delta, sharp(d.ginv, d.hess_rho))
    return (
        -d.grad_rho_sq[:, None, None, None, None] * ident
        + 2.0 * rho[:, None, None, None, None] * term
        + (rho**2)[:, None, None, None, None] * d.riem_bar
    )


def ricci_via_identity(barg: MetricField | BackgroundData, points: np.ndarray | None = None) -> np.ndarray:
    """``-n|dρ|² δ + ρ(Δρ) δ + (n-1)ρ (Hess ρ)^♯ + ρ² Ric[ḡ]``."""
    d = _data(barg, points)
    n = d.n
    delta = np.eye(n + 1)[None]
    rho = d.rho[:, None, None]
    return (
        (-n * d.grad_rho_sq + d.rho * d.lap_rho)[:, None, None] * delta
        + (n - 1) * rho * sharp(d.ginv, d.hess_rho)
        + rho**2 * ricci_of(d.riem_bar)
    )


def scalar_via_identity(barg: MetricField | BackgroundData, points: np.ndarray | None = None) -> np.ndarray:
    """``-n(n+1)|dρ|² + 2nρ Δρ + ρ² R[ḡ]``."""
    d = _data(barg, points)
    n = d.n
    return -n * (n + 1) * d.grad_rho_sq + 2 * n * d.rho * d.lap_rho + d.rho**2 * scalar_of(d.riem_bar)


def riem_deviation_decomposition(
    barg: MetricField | BackgroundData, points: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``Riem[g] + Id`` into scalar, trace-free Hessian and background Weyl-type parts."""
    d = _data(barg, points)
    n = d.n
    N = n + 1
    ident = identity22(N)
    delta = np.broadcast_to(np.eye(N), d.g.shape)
    rho = d.rho
    R = scalar_via_identity(d)
    scal = ((R + n * (n + 1)) / (n * (n + 1)))[:, None, None, None, None] * ident
    tf_hess = d.hess_rho - (d.lap_rho / (n + 1))[:, None, None] * d.g
    hess_term = 2.0 * rho[:, None, None, None, None] * kn_product(delta, sharp(d.ginv, tf_hess))
    Rbar = scalar_of(d.riem_bar)
    weyl = (rho**2)[:, None, None, None, None] * (
        d.riem_bar - (Rbar / (n * (n + 1)))[:, None, None, None, None] * ident
    )
    return scal, hess_term, weyl


def little_f(barg: MetricField | BackgroundData, points: np.ndarray | None = None) -> np.ndarray:
    """``|dρ|² - 1 - (2/(n+1)) ρ Δρ``."""
    d = _data(barg, points)
    return d.grad_rho_sq - 1.0 - (2.0 / (d.n + 1)) * d.rho * d.lap_rho


def taylor_defect(u: FieldLike, barg: MetricField, points: np.ndarray) -> np.ndarray:
    """``u - ρ⟨dρ, du⟩_ḡ``."""
    points = np.atleast_2d(points)
    val, grad = u.eval(points, 1)[:2]
    g = barg.eval(points, 0)[0]
    ginv = safe_inverse(g)
    return val - points[:, -1] * np.einsum("pj,pj->p", ginv[:, -1], grad)


def laplacian_direct(metric: MetricField, u: FieldLike, points: np.ndarray) -> np.ndarray:
    """``Δ_g u = g^{ij}(∂_i∂_j u - Γ^k_{ij} ∂_k u)`` for ``g = ρ^{-2}ḡ``."""
    points = np.atleast_2d(points)
    g, dg = physical_derivatives(points, metric.eval(points, 1), 1)
    ginv = safe_inverse(g)
    G = christoffel(ginv, dg)
    _, grad, hess = u.eval(points, 2)
    return np.einsum("pij,pij->p", ginv, hess) - np.einsum("pij,pkij,pk->p", ginv, G, grad)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvatureReport:
    points: np.ndarray
    riem: np.ndarray
    ric: np.ndarray
    scalar: np.ndarray
    dev_riem: np.ndarray
    dev_ric: np.ndarray
    dev_scalar: np.ndarray
    dev_grad_rho: np.ndarray
    little_f: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return self.points[:, -1]


def curvature_report(metric: MetricField, points: np.ndarray) -> CurvatureReport:
    d = background_data(metric, points)
    n = d.n
    N = n + 1
    riem = riem_via_identity(d)
    ric = ricci_via_identity(d)
    scal = scalar_via_identity(d)
    # norms of (2,2) and (1,1) tensors are conformally invariant; use gbar
    dev_riem = norm22(riem + identity22(N), d.g, d.ginv)
    dev_ric = norm11(ric + n * np.eye(N), d.g, d.ginv)
    return CurvatureReport(
        d.points,
        riem,
        ric,
        scal,
        dev_riem,
        dev_ric,
        np.abs(scal + n * (n + 1)),
        np.abs(d.grad_rho_sq - 1.0),
        little_f(d),
    )


# ---------------------------------------------------------------------------
# decay fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    slope: float
    width: float
    exponent: float
    log_power: float
    identically_zero: bool
    npoints: int
    corrected: bool

    def at_least(self, target: float) -> bool:
        """Whether the decay is at least ``target`` (identically zero always passes)."""
        return self.identically_zero or self.exponent >= target

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "width": self.width,
            "exponent": self.exponent,
            "log_power": self.log_power,
            "identically_zero": self.identically_zero,
            "npoints": self.npoints,
        }


def running_envelope(rho: np.ndarray, values: np.ndarray, window: float = 2 * math.pi) -> tuple[np.ndarray, np.ndarray]:
    """Sup of ``|values|`` over windows of width ``window`` in ``log ρ``.

    Only centres whose full window lies inside the sample range are returned.
    """
    L = np.log(rho)
    order = np.argsort(L)
    L, v = L[order], np.abs(values[order])
    half = 0.5 * window
    keep = (L - half >= L[0]) & (L + half <= L[-1])
    lo = np.searchsorted(L, L - half, side="left")
    hi = np.searchsorted(L, L + half, side="right")
    env = np.array([v[a:b].max() for a, b in zip(lo, hi)])
    return np.exp(L[keep]), env[keep]


def decay_exponent(
    rho: Sequence[float] | np.ndarray,
    values: Sequence[float] | np.ndarray,
    *,
    exclude_top_decade: bool = True,
    envelope: bool | str = False,
    zero_tol: float = 0.0,
) -> DecayFit:
    """Least-squares slope of ``log|value|`` against ``log ρ``.

    The largest decade of ``ρ`` is excluded when the ladder spans more than two
    decades.  A slope within 0.1 below an integer ``k`` triggers a second fit of
    ``c ρ^k |log ρ|^p``; the reported ``exponent`` is then ``k`` corrected for
    the fitted log power's effect and lies between the raw slope and ``k``.

    ``envelope=True`` fits the running sup over windows of width 2π in ``log ρ``
    (for oscillatory data); ``envelope="auto"`` does so only when ``|value|`` is
    not monotone in ``ρ``.
    """
    rho = np.asarray(rho, dtype=float).ravel()
    values = np.abs(np.asarray(values, dtype=float).ravel())
    if rho.shape != values.shape:
        raise ShapeError("rho and values must have the same length")
    scale = max(float(np.max(values, initial=0.0)), 0.0)
    if scale <= zero_tol or np.all(values == 0):
        return DecayFit(math.inf, 0.0, math.inf, 0.0, True, 0, False)
    top = rho.max() if rho.size else 0.0
    span = np.log10(rho.max() / rho.min()) if rho.size else 0.0
    if envelope == "auto":
        order = np.argsort(rho)
        steps = np.diff(values[order])
        envelope = bool(np.any(steps > 0) and np.any(steps < 0))
    if envelope:
        rho, values = running_envelope(rho, values)
    if exclude_top_decade and rho.size and span > 2.0:
        mask = rho <= top / 10.0
        rho, values = rho[mask], values[mask]
    mask = values > max(zero_tol, 0.0)
    rho, values = rho[mask], values[mask]
    if rho.size < 8:
        raise ShapeError(f"decay fit needs at least 8 nonzero samples, got {rho.size}")
    x = np.log(rho)
    y = np.log(values)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope = float(coef[0])
    dof = max(x.size - 2, 1)
    resid = y - A @ coef
    sxx = float(np.sum((x - x.mean()) ** 2))
    width = float(math.sqrt(np.sum(resid**2) / dof / sxx)) if sxx > 0 else math.inf
    k = math.ceil(slope - 1e-12)
    exponent, p, corrected = slope, 0.0, False
    if 0 < k - slope < 0.1:
        # log-corrected model: log v = k log ρ + p log|log ρ| + c
        B = np.stack([np.log(np.abs(x)), np.ones_like(x)], axis=1)
        c2, *_ = np.linalg.lstsq(B, y - k * x, rcond=None)
        fit2 = k * x + B @ c2
        if np.sum((y - fit2) ** 2) <= np.sum(resid**2) + 1e-14 and c2[0] > 0:
            p = float(c2[0])
            exponent = float(k)
            corrected = True
    return DecayFit(slope, width, exponent, p, False, int(x.size), corrected)


# ---------------------------------------------------------------------------
# WAH equivalences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WAHReport:
    riem_to_minus_id: bool
    ric_to_minus_n: bool
    scalar_to_minus_n_np1: bool
    unit_grad_rho: bool
    witnesses: dict

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.riem_to_minus_id, self.ric_to_minus_n, self.scalar_to_minus_n_np1, self.unit_grad_rho)

    @property
    def consistent(self) -> bool:
        return len(set(self.flags)) == 1


def boundary_limit(
    metric: MetricField,
    fn: Callable[[BackgroundData], np.ndarray],
    theta: Sequence[float] | None = None,
    rho0: float = 1e-4,
) -> np.ndarray:
    """Richardson extrapolation to ``ρ = 0`` from the three smallest ladder values."""
    th = np.zeros(metric.n) if theta is None else np.asarray(theta, dtype=float)
    rhos = rho0 * np.array([1.0, 0.5, 0.25])
    d = background_data(metric, make_points(th, rhos))
    return richardson_zero(rhos, fn(d))


def wah_equivalence_report(metric: MetricField, tol: float = 1e-4, thetas: np.ndarray | None = None) -> WAHReport:
    n = metric.n
    N = n + 1
    if thetas is None:
        thetas = [np.zeros(n), np.full(n, 1.0), np.full(n, 2.5)]
    ident = identity22(N)
    wit = {"riem": 0.0, "ric": 0.0, "scalar": 0.0, "grad_rho": 0.0, "scalar_ratio": [], "grad_rho_sq": []}
    for th in thetas:
        riem = boundary_limit(metric, lambda d: riem_via_identity(d), th)
        ric = boundary_limit(metric, lambda d: ricci_via_identity(d), th)
        scal = boundary_limit(metric, lambda d: scalar_via_identity(d), th)
        gr = boundary_limit(metric, lambda d: d.grad_rho_sq, th)
        wit["riem"] = max(wit["riem"], float(np.max(np.abs(riem + ident))))
        wit["ric"] = max(wit["ric"], float(np.max(np.abs(ric + n * np.eye(N)))))
        wit["scalar"] = max(wit["scalar"], float(abs(scal + n * (n + 1))))
        wit["grad_rho"] = max(wit["grad_rho"], float(abs(gr - 1.0)))
        wit["scalar_ratio"].append(float(scal / (-n * (n + 1))))
        wit["grad_rho_sq"].append(float(gr))
    return WAHReport(wit["riem"] <= tol, wit["ric"] <= tol, wit["scalar"] <= tol, wit["grad_rho"] <= tol, wit)


def deviation_slopes(metric: MetricField, lo: float = 1e-5, hi: float = 1e-1, num: int = 240,
                     theta: Sequence[float] | None = None) -> dict[str, DecayFit]:
    """Decay fits of the four curvature deviations along a ρ ladder (envelope mode)."""
    rho = rho_ladder(lo, hi, num)
    th = np.zeros(metric.n) + 0.7 if theta is None else np.asarray(theta, dtype=float)
    rep = curvature_report(metric, make_points(th, rho))
    out = {}
    for key in ("dev_riem", "dev_ric", "dev_scalar", "dev_grad_rho", "little_f"):
        vals = getattr(rep, key)
        scale = max(1.0, float(np.max(np.abs(vals))))
        out[key] = decay_exponent(rho, vals, envelope="auto", zero_tol=1e-14 * scale)
    return out
