"""Group convolution on the upper half-space and boundary regularization.

The half-space ``{(θ, ρ) : ρ > 0}`` is a group under
``(θ, ρ)·(θ', ρ') = (θ + ρθ', ρρ')``.  Convolution with a kernel ``ψ``
supported near the identity is evaluated as

    (τ*ψ)(θ, ρ) = ∫ τ(θ - ρa/b, ρ/b) ψ(a, b) b^{-1} da db,

which is the usual left-invariant form after inverting the integration
variable.  Left-invariant derivatives pass onto the kernel:
``ρ∂_ρ(τ*ψ) = τ*(b∂_bψ)`` and ``ρ∂_θ(τ*ψ) = τ*(b∂_aψ)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from .errors import AccuracyWarning, ConfigurationError, DomainError
from .geometry import ScalarField, richardson_zero

CHUNK = 400_000


# ---------------------------------------------------------------------------
# group law
# ---------------------------------------------------------------------------


def _check_half_space(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p[..., -1] <= 0):
        raise DomainError("half-space points need a positive last coordinate")
    return p


def group_mul(p, q) -> np.ndarray:
    p = _check_half_space(p)
    q = _check_half_space(q)
    out = np.empty(np.broadcast(p, q).shape)
    out[..., :-1] = p[..., :-1] + p[..., -1:] * q[..., :-1]
    out[..., -1] = p[..., -1] * q[..., -1]
    return out


def group_inv(p) -> np.ndarray:
    p = _check_half_space(p)
    out = np.empty_like(p)
    out[..., :-1] = -p[..., :-1] / p[..., -1:]
    out[..., -1] = 1.0 / p[..., -1]
    return out


def identity(n: int) -> np.ndarray:
    e = np.zeros(n + 1)
    e[-1] = 1.0
    return e


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _kernel_symbols(n: int):
    za = sp.symbols(f"z1:{n + 1}", real=True)
    zb = sp.Symbol("zb", real=True)
    return za, zb


def _bump(z):
    return (1 - z**2) ** 4


@lru_cache(maxsize=256)
def _kernel_word(n: int, width: float, word: tuple[int, ...]) -> tuple[Callable, Callable]:
    """Lambdified ``X_{i1}…X_{ik} ψ_raw`` (full and with ``a`` integrated out).

    Letters: ``-1`` for ``b∂_b`` and ``i`` for ``b∂_{a_i}``.  Expressions are
    kept in the scaled variables ``z = a/w``, ``zb = (b-1)/w`` and are never
    expanded, which keeps their evaluation free of cancellation.
    """
    za, zb = _kernel_symbols(n)
    w = sp.nsimplify(width, rational=True)
    b = 1 + w * zb
    expr = _bump(zb)
    for z in za:
        expr = expr * _bump(z)
    for letter in reversed(word):
        var = zb if letter < 0 else za[letter]
        expr = b / w * sp.diff(expr, var)
    full = sp.lambdify((*za, zb), expr, "numpy")
    if any(letter >= 0 for letter in word):
        marg = sp.Integer(0)
    else:
        marg = expr
        for z in za:
            marg = w * sp.integrate(marg, (z, -1, 1))
    marginal = sp.lambdify(zb, marg, "numpy")
    return full, marginal


@lru_cache(maxsize=64)
def _gauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


@dataclass(frozen=True)
class KernelSpec:
    """Bump kernel ``C ∏(1-(a_i/w)²)^4 (1-((b-1)/w)²)^4`` on ``|a_i| ≤ w``, ``|b-1| ≤ w``."""

    n: int
    width: float
    scale: float
    order: int = 24
    normalization: float = 1.0
    support_box: tuple = field(default=())

    def evaluate(self, a: np.ndarray, b: np.ndarray, word: tuple[int, ...] = ()) -> np.ndarray:
        """Kernel (or a left-invariant derivative of it) at ``a`` (shape (..., n)) and ``b``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        full, _ = _kernel_word(self.n, self.width, tuple(word))
        inside = (np.all(np.abs(a) <= self.width, axis=-1)) & (np.abs(b - 1) <= self.width)
        val = np.asarray(full(*np.moveaxis(a / self.width, -1, 0), (b - 1) / self.width), dtype=float) * self.scale
        return np.where(inside, np.broadcast_to(val, inside.shape), 0.0)

    def nodes(self, order: int | None = None, marginal: bool = False):
        """Tensor Gauss–Legendre nodes ``(a, b, weights)`` on the support box."""
        z, wq = _gauss(order or self.order)
        w = self.width
        if marginal:
            return np.zeros((z.size, self.n)), 1 + w * z, w * wq
        grids = np.meshgrid(*([z] * (self.n + 1)), indexing="ij")
        wts = np.ones_like(grids[0])
        for g in np.meshgrid(*([wq] * (self.n + 1)), indexing="ij"):
            wts = wts * g
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        return w * pts[:, :-1], 1 + w * pts[:, -1], wts.ravel() * w ** (self.n + 1)

    def weights(self, word: tuple[int, ...] = (), order: int | None = None, marginal: bool = False):
        """Nodes and ``ψ b^{-1}`` weights, the form integrated against ``τ``."""
        a, b, wq = self.nodes(order, marginal)
        if marginal:
            _, marg = _kernel_word(self.n, self.width, tuple(word))
            k = np.broadcast_to(np.asarray(marg((b - 1) / self.width), dtype=float), b.shape) * self.scale
        else:
            k = self.evaluate(a, b, word)
        return a, b, wq * k / b

    def lam(self, s: complex, order: int | None = None) -> complex:
        """``λ(s) = ∫ b^{-s} ψ(a, b) b^{-1}``, so that ``ρ^s * ψ = λ(s) ρ^s``."""
        _, b, w = self.weights(order=order, marginal=True)
        return complex(np.sum(w * b.astype(complex) ** (-s)))

    def c_norm(self, k: int, samples: int = 17) -> float:
        """Sup over letters words of length ≤ k of ``|X…Xψ|`` on a sample grid."""
        z = np.linspace(-1, 1, samples)
        grids = np.meshgrid(*([z] * (self.n + 1)), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        a, b = self.width * pts[:, :-1], 1 + self.width * pts[:, -1]
        best = 0.0
        words: list[tuple[int, ...]] = [()]
        for _ in range(k + 1):
            for wd in words:
                best = max(best, float(np.max(np.abs(self.evaluate(a, b, wd)))))
            words = [wd + (l,) for wd in words for l in [-1] + list(range(self.n))]
        return best


def make_kernel(width: float = 0.5, n: int = 1, order: int = 24) -> KernelSpec:
    if not 0 < width < 1:
        raise DomainError(f"kernel width {width} must lie in (0, 1) so the support stays in b > 0")
    if n < 1:
        raise ConfigurationError("n must be positive")
    raw = KernelSpec(n, float(width), 1.0, order)
    total = raw.lam(0.0, order=2 * order).real
    check = raw.lam(0.0, order=2 * order + 4).real
    if abs(total - check) > 1e-12 * abs(total):
        raise ConfigurationError("kernel normalization did not converge")
    box = tuple([(-width, width)] * n + [(1 - width, 1 + width)])
    return KernelSpec(n, float(width), 1.0 / total, order, 1.0, box)


def kernel_normalization(psi: KernelSpec, order: int | None = None) -> float:
    """``∫ψ(q^{-1}) dV(q)`` by full tensor quadrature."""
    _, _, w = psi.weights(order=order)
    return float(np.sum(w))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _as_callable(tau) -> tuple[Callable[[np.ndarray], np.ndarray], bool]:
    if isinstance(tau, ScalarField):
        return (lambda pts: np.broadcast_to(np.asarray(tau(pts), dtype=float), pts.shape[:1])), tau.theta_dependent
    if isinstance(tau, (int, float)):
        c = float(tau)
        return (lambda pts: np.full(pts.shape[0], c)), False
    if callable(tau):
        return tau, bool(getattr(tau, "theta_dependent", True))
    raise ConfigurationError("tau must be a ScalarField, a constant or a callable on points")


def _convolve_once(f, theta_dep: bool, psi: KernelSpec, points: np.ndarray, word: tuple[int, ...],
                   order: int) -> np.ndarray:
    marginal = not theta_dep
    if marginal and any(l >= 0 for l in word):
        return np.zeros(points.shape[0])
    a, b, w = psi.weights(word, order, marginal)
    keep = w != 0
    a, b, w = a[keep], b[keep], w[keep]
    out = np.empty(points.shape[0])
    step = max(1, CHUNK // max(1, b.size))
    for start in range(0, points.shape[0], step):
        p = points[start:start + step]
        rho = p[:, -1:]
        q = np.empty((p.shape[0], b.size, psi.n + 1))
        q[..., :-1] = p[:, None, :-1] - rho[..., None] * (a / b[:, None])[None]
        q[..., -1] = rho / b[None, :]
        vals = np.asarray(f(q.reshape(-1, psi.n + 1)), dtype=float).reshape(p.shape[0], b.size)
        out[start:start + step] = vals @ w
    return out


def convolve(tau, psi: KernelSpec, points, order: int | None = None, word: tuple[int, ...] = (),
             check: bool = True, rtol: float = 1e-8) -> np.ndarray:
    """``(τ*(Xψ))`` at ``points`` where ``X`` is the left-invariant word ``word``.

    With ``check`` the result is compared with a quadrature of higher order
    and an :class:`AccuracyWarning` is issued when they disagree.
    """
    points = _check_half_space(np.atleast_2d(points))
    if points.shape[1] != psi.n + 1:
        raise ConfigurationError(f"points must have {psi.n + 1} coordinates")
    f, dep = _as_callable(tau)
    order = order or psi.order
    val = _convolve_once(f, dep, psi, points, tuple(word), order)
    if check:
        ref = _convolve_once(f, dep, psi, points, tuple(word), order + max(8, order // 2))
        scale = max(1.0, float(np.max(np.abs(ref))) if ref.size else 1.0)
        if np.max(np.abs(val - ref), initial=0.0) > rtol * scale:
            warnings.warn("convolution quadrature not converged", AccuracyWarning, stacklevel=2)
            val = ref
    return val


def convolve_commutation_check(tau, psi: KernelSpec, points, X: str = "rho", h: float = 1e-3,
                               order: int | None = None) -> np.ndarray:
    """``|X(τ*ψ) - τ*(Xψ)|`` with ``X(τ*ψ)`` by centered differences.

    ``X`` is ``"rho"`` for ``ρ∂_ρ`` or ``"theta<i>"`` for ``ρ∂_{θ^i}`` (1-based).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if X == "rho":
        word = (-1,)
        up, dn = points.copy(), points.copy()
        up[:, -1] *= math.exp(h)
        dn[:, -1] *= math.exp(-h)
        lhs = (convolve(tau, psi, up, order, check=False) - convolve(tau, psi, dn, order, check=False)) / (2 * h)
    elif X.startswith("theta"):
        i = int(X[5:] or 1) - 1
        word = (i,)
        up, dn = points.copy(), points.copy()
        up[:, i] += h
        dn[:, i] -= h
        lhs = points[:, -1] * (convolve(tau, psi, up, order, check=False)
                               - convolve(tau, psi, dn, order, check=False)) / (2 * h)
    else:
        raise ConfigurationError(f"unknown left-invariant field {X!r}")
    rhs = convolve(tau, psi, points, order, word=word, check=False)
    return np.abs(lhs - rhs)


# ---------------------------------------------------------------------------
# regularization
# ---------------------------------------------------------------------------


def _rho_derivative_field(tau) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(tau, ScalarField):
        n = len(tau.syms) - 1
        alpha = tuple([0] * n + [1])
        return lambda pts: np.broadcast_to(np.asarray(tau.partial(pts, alpha), dtype=float), pts.shape[:1])
    d = getattr(tau, "drho", None)
    if d is None:
        raise ConfigurationError("tau has no rho-derivative; pass a ScalarField or a callable with .drho")
    return d


class RegularizedField:
    """``τ̃`` from the inductive construction; ``τ - τ̃ = O(ρ^m)``."""

    def __init__(self, tau, psi: KernelSpec, m: int, order: int | None = None):
        if m not in (0, 1, 2):
            raise ConfigurationError("regularize supports m in {0, 1, 2}")
        self.tau = tau
        self.psi = psi
        self.m = m
        self.order = order or psi.order
        self._f, self._dep = _as_callable(tau)
        self._drho = _rho_derivative_field(tau) if m >= 2 else None
        self.theta_dependent = self._dep

    def _first(self, pts: np.ndarray, word=()) -> np.ndarray:
        return _convolve_once(self._f, self._dep, self.psi, pts, tuple(word), self.order)

    def _w(self, pts: np.ndarray) -> np.ndarray:
        """``∂_ρ(τ - τ*ψ)``."""
        return self._drho(pts) - self._first(pts, (-1,)) / pts[:, -1]

    def __call__(self, points) -> np.ndarray:
        pts = _check_half_space(np.atleast_2d(points))
        if self.m == 0:
            return np.zeros(pts.shape[0])
        out = self._first(pts)
        if self.m == 2:
            w_tilde = _convolve_once(self._w, self._dep, self.psi, pts, (), self.order)
            out = out + pts[:, -1] * w_tilde
        return out

    def log_derivative(self, points, k: int = 1, h: float = 0.02) -> np.ndarray:
        """``(ρ∂_ρ)^k τ̃`` by centered differences in ``log ρ``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        offsets = {1: ([-1, 1], [-0.5, 0.5]), 2: ([-1, 0, 1], [1.0, -2.0, 1.0])}
        if k not in offsets:
            raise ConfigurationError("only k = 1, 2 supported")
        shifts, coeffs = offsets[k]
        acc = np.zeros(pts.shape[0])
        for sft, c in zip(shifts, coeffs):
            q = pts.copy()
            q[:, -1] *= math.exp(sft * h)
            acc += c * self(q)
        return acc / h**k


def regularize(tau, m: int, psi: KernelSpec | None = None, n: int | None = None,
               order: int | None = None) -> RegularizedField:
    """Regularized field, linear in ``τ``, with ``τ - τ̃ = O(ρ^m)``.

    ``m = 1`` uses ``τ̃ = τ*ψ``; ``m = 2`` adds ``ρ ((∂_ρτ - ∂_ρ(τ*ψ))*ψ)``.
    """
    if psi is None:
        if n is None:
            n = len(tau.syms) - 1 if isinstance(tau, ScalarField) else 1
        psi = make_kernel(0.5, n)
    return RegularizedField(tau, psi, m, order)


def boundary_rho_derivative(field: Callable[[np.ndarray], np.ndarray], theta: Sequence[float],
                            rho0: float = 1e-3) -> float:
    """``∂_ρ f |_{ρ=0}`` for ``f`` vanishing on the boundary, by extrapolating ``f/ρ``."""
    rhos = rho0 * np.array([1.0, 0.5, 0.25])
    pts = np.column_stack([np.tile(np.atleast_1d(theta), (3, 1)), rhos])
    return float(richardson_zero(rhos, field(pts) / rhos))
