"""Uniformly degenerate operators and their indicial data.

An operator is stored in the form ``a^{ij}(ρ∂_i)(ρ∂_j) + b^i ρ∂_i + c`` with
endomorphism-valued coefficients acting on components in the normalized
background frame (coordinate frame scaled by powers of ρ so that a section of
weight ``r`` has components of order one).  Coefficient callbacks return

* ``a(points)`` with shape ``(P, N, N, d, d)``
* ``b(points)`` with shape ``(P, N, d, d)``
* ``c(points)`` with shape ``(P, d, d)``
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from .curvature import christoffel, safe_inverse
from .errors import ConfigurationError, ExtrapolationError, LinearAlgebraError
from .geometry import MetricField, coordinate_symbols, make_points, richardson_zero

CLUSTER_TOL = 1e-7


@dataclass(frozen=True)
class BoundaryData:
    """``(ā, b̄, c̄)``: the ρρ-component of ``a``, ρ-component of ``b`` and ``c`` at ρ = 0."""

    abar: np.ndarray
    bbar: np.ndarray
    cbar: np.ndarray

    @property
    def dim(self) -> int:
        return self.abar.shape[0]

    def scaled(self, k: float) -> "BoundaryData":
        return BoundaryData(k * self.abar, k * self.bbar, k * self.cbar)

    def indicial(self, s: complex) -> np.ndarray:
        return s * s * self.abar + s * self.bbar + self.cbar


@dataclass
class UDOperator:
    n: int
    dim_E: int
    weight_r: int
    a: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    c: Callable[[np.ndarray], np.ndarray]
    name: str = "operator"
    self_adjoint: bool = False
    l2_estimate: bool = False  # asserted registry attribute, never verified numerically
    exact_trace: Callable[[np.ndarray], BoundaryData] | None = None
    rho0: float = 1e-4
    _trace_cache: dict = field(default_factory=dict, repr=False)

    def apply(self, points: np.ndarray, u: np.ndarray, du: np.ndarray, ddu: np.ndarray) -> np.ndarray:
        """Apply the operator given ``u``, ``(ρ∂_i)u`` and ``(ρ∂_i)(ρ∂_j)u`` (shapes
        ``(P,d)``, ``(P,N,d)``, ``(P,N,N,d)``)."""
        return (
            np.einsum("pijab,pijb->pa", self.a(points), ddu)
            + np.einsum("piab,pib->pa", self.b(points), du)
            + np.einsum("pab,pb->pa", self.c(points), u)
        )

    def boundary_trace(self, p_hat: Sequence[float]) -> BoundaryData:
        key = tuple(float(x) for x in np.atleast_1d(p_hat))
        if key in self._trace_cache:
            return self._trace_cache[key]
        if self.exact_trace is not None:
            data = self.exact_trace(np.asarray(key))
        else:
            rhos = self.rho0 * np.array([1.0, 0.5, 0.25])
            pts = make_points(key, rhos)
            a = self.a(pts)[:, -1, -1]
            b = self.b(pts)[:, -1]
            c = self.c(pts)
            data = BoundaryData(richardson_zero(rhos, a), richardson_zero(rhos, b), richardson_zero(rhos, c))
            # a second, coarser extrapolation must agree: otherwise the coefficients
            # do not extend continuously
            rhos2 = 4 * rhos
            pts2 = make_points(key, rhos2)
            a2 = richardson_zero(rhos2, self.a(pts2)[:, -1, -1])
            if not np.all(np.isfinite(data.abar)) or not np.allclose(a2, data.abar, rtol=1e-4, atol=1e-4):
                raise ExtrapolationError(f"{self.name}: boundary trace of a^ρρ does not converge at {key}")
        if not np.all(np.isfinite(data.abar)) or not np.all(np.isfinite(data.bbar)) or not np.all(np.isfinite(data.cbar)):
            raise ExtrapolationError(f"{self.name}: boundary trace unavailable at {key}")
        self._trace_cache[key] = data
        return data


# ---------------------------------------------------------------------------
# operator registry
# ---------------------------------------------------------------------------


def laplacian_ud(metric: MetricField, c_shift: float = 0.0) -> UDOperator:
    """``Δ_g - c_shift`` for ``g = ρ^{-2}ḡ``:
    ``a^{μν} = ḡ^{μν}``, ``b^λ = -n ḡ^{λρ} - ρ ḡ^{μν} Γ̄^λ_{μν}``, ``c = -c_shift``."""
    n = metric.n
    if not metric.wah_flag:
        warnings.warn(f"{metric.name} is not WAH-flagged; indicial data computed anyway", stacklevel=2)

    def a(points: np.ndarray) -> np.ndarray:
        ginv = safe_inverse(metric.eval(points, 0)[0])
        return ginv[:, :, :, None, None]

    def b(points: np.ndarray) -> np.ndarray:
        g, dg = metric.eval(points, 1)
        ginv = safe_inverse(g)
        G = christoffel(ginv, dg)
        rho = points[:, -1]
        bb = -n * ginv[:, :, -1] - rho[:, None] * np.einsum("pmn,plmn->pl", ginv, G)
        return bb[:, :, None, None]

    def c(points: np.ndarray) -> np.ndarray:
        return np.full((np.atleast_2d(points).shape[0], 1, 1), -float(c_shift))

    def hyperbolic_trace(p_hat):
        return BoundaryData(np.ones((1, 1)), np.full((1, 1), -float(n)), np.full((1, 1), -float(c_shift)))

    exact = hyperbolic_trace if metric.name == "hyperbolic" else None

    return UDOperator(n, 1, 0, a, b, c, name=f"laplacian(c={c_shift})", self_adjoint=True,
                      l2_estimate=c_shift > -n * n / 4, exact_trace=exact)


def constant_ud(n: int, abar, bbar, cbar, weight_r: int = 0, name: str = "constant") -> UDOperator:
    """Operator ``ā(ρ∂_ρ)² + b̄ ρ∂_ρ + c̄`` plus a tangential Laplacian with constant coefficients."""
    abar = np.atleast_2d(np.asarray(abar, dtype=complex if np.iscomplexobj(abar) else float))
    bbar = np.atleast_2d(np.asarray(bbar))
    cbar = np.atleast_2d(np.asarray(cbar))
    d = abar.shape[0]
    N = n + 1

    def a(points):
        P = np.atleast_2d(points).shape[0]
        out = np.zeros((P, N, N, d, d), dtype=abar.dtype)
        for i in range(n):
            out[:, i, i] = np.eye(d)
        out[:, -1, -1] = abar
        return out

    def b(points):
        P = np.atleast_2d(points).shape[0]
        out = np.zeros((P, N, d, d), dtype=np.result_type(bbar, float))
        out[:, -1] = bbar
        return out

    def c(points):
        P = np.atleast_2d(points).shape[0]
        return np.broadcast_to(cbar, (P, d, d)).copy()

    data = BoundaryData(abar, bbar, cbar)
    return UDOperator(n, d, weight_r, a, b, c, name=name, exact_trace=lambda p: data)


def user_operator(n: int, dim_E: int, weight_r: int, a, b, c, **kw) -> UDOperator:
    """Register user-supplied coefficient callbacks in the (ρ∂) frame."""
    return UDOperator(n, dim_E, weight_r, a, b, c, **kw)


@lru_cache(maxsize=16)
def _rough_laplacian_symbolic(matrix_key: str, n: int):
    """Coefficients of the rough Laplacian on 1-forms in the normalized frame.

    The section ``ω = Σ ū_μ ρ^{-1} dΘ^μ`` is written with unknown component
    functions; ``ρ (Δω)_μ`` is expanded and the coefficients of the second,
    first and zeroth derivatives of ``ū`` are collected.
    """
    syms = coordinate_symbols(n)
    rho = syms[-1]
    N = n + 1
    gbar = sp.Matrix(sp.sympify(matrix_key, locals={s.name: s for s in syms}))
    g = gbar / rho**2
    ginv = g.inv()
    Gam = [[[sum(ginv[l, k] * (sp.diff(g[k, i], syms[j]) + sp.diff(g[k, j], syms[i]) - sp.diff(g[i, j], syms[k]))
                 for k in range(N)) / 2 for j in range(N)] for i in range(N)] for l in range(N)]
    U = [sp.Function(f"u{m}")(*syms) for m in range(N)]
    w = [U[m] / rho for m in range(N)]
    # first covariant derivative  (∇_b ω)_m
    D1 = [[sp.diff(w[m], syms[bb]) - sum(Gam[l][bb][m] * w[l] for l in range(N)) for m in range(N)] for bb in range(N)]
    out = []
    for m in range(N):
        expr = 0
        for aa in range(N):
            for bb in range(N):
                if ginv[aa, bb] == 0:
                    continue
                # (∇_a ∇_b ω)_m
                t = sp.diff(D1[bb][m], syms[aa])
                t -= sum(Gam[l][aa][bb] * D1[l][m] for l in range(N))
                t -= sum(Gam[l][aa][m] * D1[bb][l] for l in range(N))
                expr += ginv[aa, bb] * t
        out.append(sp.expand(rho * expr))
    A = [[[[sp.S(0)] * N for _ in range(N)] for _ in range(N)] for _ in range(N)]  # A[i][j][m][nu]
    B = [[[sp.S(0)] * N for _ in range(N)] for _ in range(N)]
    C = [[sp.S(0)] * N for _ in range(N)]
    for m in range(N):
        e = out[m]
        for nu in range(N):
            for i in range(N):
                for j in range(i, N):
                    der = sp.Derivative(U[nu], syms[i], syms[j]) if i != j else sp.Derivative(U[nu], (syms[i], 2))
                    coef = e.coeff(der)
                    e = e - coef * der
                    if i == j:
                        A[i][i][m][nu] += coef / rho**2
                    else:
                        A[i][j][m][nu] += coef / (2 * rho**2)
                        A[j][i][m][nu] += coef / (2 * rho**2)
        for nu in range(N):
            for i in range(N):
                der = sp.Derivative(U[nu], syms[i])
                coef = e.coeff(der)
                e = e - coef * der
                B[i][m][nu] += coef / rho
        for nu in range(N):
            coef = e.coeff(U[nu])
            e = e - coef * U[nu]
            C[m][nu] += coef
        if sp.expand(e) != 0:
            raise LinearAlgebraError("rough Laplacian coefficient extraction left a remainder")
    # ∂_i∂_j = ρ^{-2}[(ρ∂_i)(ρ∂_j) - δ_i^ρ (ρ∂_j)]: move the correction into b
    for m in range(N):
        for nu in range(N):
            for j in range(N):
                B[j][m][nu] -= A[N - 1][j][m][nu]
    flat_a = [A[i][j][m][nu] for i in range(N) for j in range(N) for m in range(N) for nu in range(N)]
    flat_b = [B[i][m][nu] for i in range(N) for m in range(N) for nu in range(N)]
    flat_c = [C[m][nu] for m in range(N) for nu in range(N)]
    return flat_a, flat_b, flat_c


def vector_laplacian_ud(metric: MetricField, c_shift: float = 0.0) -> UDOperator:
    """Rough Laplacian ``tr_g ∇²`` on 1-forms (weight 1) minus ``c_shift``, with
    coefficients derived symbolically from a closed-form catalog metric."""
    if metric.symbolic is None:
        raise ConfigurationError("vector Laplacian needs a closed-form (symbolic) metric")
    from .geometry import _lambdify_stack

    n = metric.n
    N = n + 1
    key = str(metric.symbolic.matrix.tolist())
    fa, fb, fc = _rough_laplacian_symbolic(key, n)
    syms = coordinate_symbols(n)
    la, lb, lc = (_lambdify_stack(e, syms) for e in (fa, fb, fc))

    def a(points):
        return la(points).reshape(-1, N, N, N, N)

    def b(points):
        return lb(points).reshape(-1, N, N, N)

    def c(points):
        return lc(points).reshape(-1, N, N) - c_shift * np.eye(N)

    return UDOperator(n, N, 1, a, b, c, name=f"vector_laplacian(c={c_shift})", self_adjoint=True, l2_estimate=True)


OPERATORS = {"laplacian": laplacian_ud, "vector_laplacian": vector_laplacian_ud}


# ---------------------------------------------------------------------------
# indicial data
# ---------------------------------------------------------------------------


def indicial_map(op: UDOperator | BoundaryData, s: complex, p_hat: Sequence[float] | None = None) -> np.ndarray:
    """``I_s = s² ā + s b̄ + c̄`` at ``p_hat``.

    For an operator on a bundle of weight ``r`` the coefficients act on
    normalized-frame components, while ``s`` refers to ``ρ^s`` times the
    coordinate components, so the normalized data is evaluated at ``s + r``.
    """
    if isinstance(op, BoundaryData):
        return op.indicial(s)
    data = op.boundary_trace(np.zeros(op.n) if p_hat is None else p_hat)
    return data.indicial(s + op.weight_r)


def companion_matrix(data: BoundaryData) -> np.ndarray:
    """First-order form of ``ā(ρ∂)²v + b̄ρ∂v + c̄v = 0`` in the variables ``(v, ρ∂v)``."""
    d = data.dim
    try:
        ainv = np.linalg.inv(data.abar)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError("ā is not invertible") from exc
    dtype = np.result_type(data.abar, data.bbar, data.cbar, float)
    A = np.zeros((2 * d, 2 * d), dtype=dtype)
    A[:d, d:] = np.eye(d)
    A[d:, :d] = -ainv @ data.cbar
    A[d:, d:] = -ainv @ data.bbar
    return A


def cluster_values(vals: np.ndarray, tol: float = CLUSTER_TOL) -> list[tuple[complex, int, list[int]]]:
    """Single-linkage clusters of complex numbers; returns (mean, size, member indices)."""
    vals = np.asarray(vals, dtype=complex)
    m = len(vals)
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(m):
        for j in range(i + 1, m):
            if abs(vals[i] - vals[j]) <= tol * max(1.0, abs(vals[i])):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    out = [(complex(np.mean(vals[idx])), len(idx), sorted(idx)) for idx in groups.values()]
    out.sort(key=lambda t: (round(t[0].real, 9), round(t[0].imag, 9)))
    return out


def _clean(z: complex, tol: float = 1e-12) -> complex:
    re = 0.0 if abs(z.real) < tol else z.real
    im = 0.0 if abs(z.imag) < tol * max(1.0, abs(z)) else z.imag
    return complex(re, im)


def characteristic_exponents(op: UDOperator | BoundaryData, p_hat: Sequence[float] | None = None,
                             tol: float = CLUSTER_TOL) -> list[tuple[complex, int]]:
    """Eigenvalues of the companion matrix with algebraic multiplicities.

    For a :class:`UDOperator` of weight ``r`` the eigenvalues (normalized frame)
    are shifted by ``-r`` to the coordinate-component convention.
    """
    if isinstance(op, BoundaryData):
        data, shift = op, 0
    else:
        data, shift = op.boundary_trace(np.zeros(op.n) if p_hat is None else p_hat), op.weight_r
    eig = np.linalg.eigvals(companion_matrix(data)) - shift
    return [(_clean(s), k) for s, k, _ in cluster_values(eig, tol)]


@dataclass(frozen=True)
class IndicialData:
    exponents: tuple[tuple[complex, int], ...]
    n: int
    weight_r: int

    @property
    def center_line(self) -> float:
        return self.n / 2 - self.weight_r

    @property
    def radius(self) -> float:
        return indicial_radius(self)

    def symmetry_defect(self) -> float:
        """Distance from the exponent multiset to its reflection about the centre line."""
        c = self.center_line
        pts = [s for s, k in self.exponents for _ in range(k)]
        worst = 0.0
        for s in pts:
            refl = complex(2 * c - s.real, s.imag)
            worst = max(worst, min(abs(refl - t) for t in pts))
        return worst

    def as_dict(self) -> dict:
        return {
            "exponents": [{"re": s.real, "im": s.imag, "mult": k} for s, k in self.exponents],
            "radius": self.radius,
            "center_line": self.center_line,
        }


def indicial_data(op: UDOperator, p_hat: Sequence[float] | None = None) -> IndicialData:
    return IndicialData(tuple(characteristic_exponents(op, p_hat)), op.n, op.weight_r)


def indicial_radius(data: IndicialData) -> float:
    """``min |Re s - (n/2 - r)|`` over the characteristic exponents."""
    if not data.exponents:
        return math.inf
    c = data.center_line
    return float(min(abs(s.real - c) for s, _ in data.exponents))


@dataclass(frozen=True)
class Window:
    lo: float
    hi: float

    @property
    def empty(self) -> bool:
        return not self.lo < self.hi

    def __contains__(self, delta: float) -> bool:
        return self.lo < delta < self.hi

    def as_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "empty": self.empty}


def fredholm_window(data: IndicialData, p: float | None = None) -> Window:
    """Admissible weights: ``|δ - n/2| < R`` (Hölder, ``p=None``) or ``|δ + n/p - n/2| < R``."""
    R = data.radius
    n = data.n
    if p is None:
        centre = n / 2
    else:
        if not p > 1:
            raise ConfigurationError("Sobolev exponent p must exceed 1")
        centre = n / 2 - n / p
    if R <= 0:
        return Window(centre, centre)
    return Window(centre - R, centre + R)


def ladder_indicial(op: UDOperator, apply_power: Callable[[np.ndarray, complex], np.ndarray],
                    s: complex, p_hat: Sequence[float], rho0: float = 1e-3) -> np.ndarray:
    """Richardson limit of ``ρ^{-s} P(ρ^s ū)`` evaluated by a caller-supplied action."""
    rhos = rho0 * np.array([1.0, 0.5, 0.25])
    vals = apply_power(make_points(p_hat, rhos), s)
    return richardson_zero(rhos, vals)
