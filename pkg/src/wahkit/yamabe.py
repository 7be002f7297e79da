"""Degenerate elliptic solves and the constructive Lichnerowicz/Yamabe pipeline.

Everything is posed for compactifications that do not depend on the boundary
coordinates, so functions of ``ρ`` alone stay in that class and the Laplacian
reduces to the ordinary differential operator

    Δ_g u = a(ρ) u_tt - b(ρ) u_t,        t = -log ρ,

with ``a = a^{ρρ}``, ``b = b^ρ`` the uniformly degenerate coefficients.  The
grid is uniform in ``t`` on ``[t_lo, t_max]``; node 0 is the interior end
(``ρ = e^{-t_lo}``) and carries a Robin condition selecting the indicial root
that stays bounded into the interior, the last node is the boundary end with
``u = 0``.

Two discretizations are used.  The second-order one is an M-matrix and carries
the monotone iteration with its maximum-principle invariants; a sixth-order
one is used for a final Newton polish so that curvature residuals measured
with the continuous formulas reach ``1e-6``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from scipy.interpolate import make_interp_spline

from .curvature import christoffel, decay_exponent, little_f, scalar_via_identity
from .errors import (
    BarrierError,
    ConfigurationError,
    DiscretizationError,
    NumericalError,
    StabilityError,
    ValidationError,
    WahkitError,
)
from .geometry import MetricField, ScalarField, make_points, metric_from_sympy
from .indicial import laplacian_ud
from .mollify import make_kernel, regularize

MONO_TOL = 1e-12
LAMBDA_SAFETY = 1.1


# ---------------------------------------------------------------------------
# grids and grid functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TGrid:
    n: int
    t: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return np.exp(-self.t)

    @property
    def h(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def size(self) -> int:
        return self.t.size

    def points(self, theta: Sequence[float] | None = None) -> np.ndarray:
        th = np.zeros(self.n) if theta is None else np.asarray(theta, dtype=float)
        return make_points(th, self.rho)


def make_grid(n: int, points: int = 1024, t_max: float = 20.0, rho_hi: float = 1.0) -> TGrid:
    if points < 16:
        raise ConfigurationError("need at least 16 t-points")
    t_lo = -math.log(rho_hi)
    if not t_max > t_lo + 1:
        raise ConfigurationError("t_max must exceed -log(rho_hi) + 1")
    return TGrid(int(n), np.linspace(t_lo, t_max, int(points)))


def _end_conditions(v: np.ndarray, h: float, width: int = 9) -> tuple[list, list]:
    """First and second derivatives at both ends from one-sided high-order differences."""
    off = list(range(width))
    left = [(k, float(_fd_weights(off, k, h) @ v[:width])) for k in (1, 2)]
    right = [(k, float(_fd_weights([-o for o in off[::-1]], k, h) @ v[-width:])) for k in (1, 2)]
    return left, right


class RadialField:
    """Quintic spline in ``t`` of a grid function, usable as a scalar field of ``(θ, ρ)``."""

    theta_dependent = False

    def __init__(self, grid: TGrid, values: np.ndarray, name: str = "radial"):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self.n = grid.n
        self.name = name
        self._s = make_interp_spline(grid.t, self.values, k=5, bc_type=_end_conditions(self.values, grid.h))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self._s(-np.log(np.atleast_2d(points)[:, -1]))

    def eval(self, points: np.ndarray, order: int = 2) -> tuple[np.ndarray, ...]:
        points = np.atleast_2d(points)
        rho = points[:, -1]
        t = -np.log(rho)
        P, N = points.shape
        out: list[np.ndarray] = [self._s(t)]
        if order >= 1:
            d1 = self._s(t, 1)
            g = np.zeros((P, N))
            g[:, -1] = -d1 / rho
            out.append(g)
        if order >= 2:
            H = np.zeros((P, N, N))
            H[:, -1, -1] = (self._s(t, 2) + d1) / rho**2
            out.append(H)
        return tuple(out)

    def power(self, k: float, name: str | None = None) -> "RadialField":
        return RadialField(self.grid, self.values**k, name or f"{self.name}^{k:g}")


def _on_grid(value, grid: TGrid, label: str) -> np.ndarray:
    """Coerce a constant, callable, ScalarField or array to nodal values."""
    if value is None:
        return np.zeros(grid.size)
    if isinstance(value, (int, float)):
        return np.full(grid.size, float(value))
    if isinstance(value, str):
        value = ScalarField(value, grid.n)
    if isinstance(value, ScalarField):
        if value.theta_dependent:
            raise ConfigurationError(f"{label} depends on the boundary coordinates")
        return np.broadcast_to(np.asarray(value(grid.points()), dtype=float), (grid.size,)).copy()
    if callable(value):
        return np.asarray(value(grid.points()), dtype=float).reshape(grid.size)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (grid.size,):
        raise ConfigurationError(f"{label} must have {grid.size} nodal values, got shape {arr.shape}")
    return arr


def check_theta_independent(metric: MetricField, rtol: float = 1e-10) -> None:
    rho = np.geomspace(1e-3, 1.0, 7)
    base = metric.eval(make_points(np.zeros(metric.n), rho), 1)
    for th in (0.9, 2.3):
        other = metric.eval(make_points(np.full(metric.n, th), rho), 1)
        for x, y in zip(base, other):
            if not np.allclose(x, y, rtol=rtol, atol=rtol):
                raise ConfigurationError(
                    f"{metric.name}: the radial solver needs a compactification independent of the boundary coordinates")


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------


@dataclass
class RadialData:
    """Nodal coefficients of ``Δ_g`` and the scalar curvature of a metric on a grid."""

    grid: TGrid
    a: np.ndarray
    b: np.ndarray
    R: np.ndarray
    metric: MetricField

    @property
    def n(self) -> int:
        return self.grid.n


def radial_data(metric: MetricField, grid: TGrid) -> RadialData:
    if metric.n != grid.n:
        raise ConfigurationError("grid and metric dimensions differ")
    check_theta_independent(metric)
    pts = grid.points()
    op = laplacian_ud(metric)
    a = op.a(pts)[:, -1, -1, 0, 0]
    b = op.b(pts)[:, -1, 0, 0]
    R = scalar_via_identity(metric, pts)
    return RadialData(grid, a, b, R, metric)


def interior_root(a0: float, b0: float, q0: float) -> float:
    """Root of ``a s² + b s - q = 0`` with the smaller real part (bounded into the interior)."""
    disc = b0 * b0 + 4 * a0 * q0
    if disc < 0:
        raise ConfigurationError(f"no real indicial root at the interior end (q={q0})")
    return (-b0 - math.sqrt(disc)) / (2 * a0)


def _fd_weights(offsets: Sequence[int], deriv: int, h: float) -> np.ndarray:
    o = np.asarray(offsets, dtype=float)
    V = np.vander(o, increasing=True).T
    rhs = np.zeros(len(o))
    rhs[deriv] = math.factorial(deriv)
    return np.linalg.solve(V, rhs) / h**deriv


def _derivative_matrices(N: int, h: float, order: int) -> tuple[sps.csr_matrix, sps.csr_matrix]:
    """``D1, D2`` for ``∂_t`` and ``∂_t²`` with centred stencils of the given order and
    one-sided stencils near the ends."""
    half = order // 2
    width = order + 2
    D1 = sps.lil_matrix((N, N))
    D2 = sps.lil_matrix((N, N))
    for i in range(N):
        if half <= i < N - half:
            off = list(range(-half, half + 1))
            o1, o2 = off, off
        else:
            start = 0 if i < half else N - width
            o2 = [j - i for j in range(start, start + width)]
            o1 = o2[:-1] if i < half else o2[1:]
        for k, w in zip(o1, _fd_weights(o1, 1, h)):
            D1[i, i + k] = w
        for k, w in zip(o2, _fd_weights(o2, 2, h)):
            D2[i, i + k] = w
    return D1.tocsr(), D2.tocsr()


@dataclass
class RadialOperator:
    """Discrete ``Δ - q`` (``q`` nodal) with the Robin/Dirichlet end conditions.

    For ``order=2`` row 0 holds the equation with the Robin condition
    eliminating a ghost node, so the matrix acts on nodal values.  Higher
    orders keep the ghost node ``t_lo - h`` as an extra unknown (index 0) whose
    row is the Robin condition.  The last row is the Dirichlet row.
    """

    matrix: sps.csr_matrix
    s_interior: float
    order: int
    pde_rows: np.ndarray
    ghost: int = 0

    def lift(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.concatenate([v[:1], v]) if self.ghost else v

    def drop(self, u: np.ndarray) -> np.ndarray:
        return u[self.ghost:]

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u


def radial_operator(data: RadialData, q: np.ndarray | float, s_interior: float, order: int = 2) -> RadialOperator:
    grid = data.grid
    N, h = grid.size, grid.h
    q = np.broadcast_to(np.asarray(q, dtype=float), (N,))
    s = s_interior
    if order == 2:
        a, b = data.a, data.b
        D1, D2 = _derivative_matrices(N, h, order)
        M = (sps.diags(a) @ D2 - sps.diags(b) @ D1 - sps.diags(q)).tolil()
        M[0, :] = 0
        # ghost node u_{-1} = u_1 + 2 h s u_0 from (u_1 - u_{-1})/(2h) = -s u_0
        M[0, 1] = 2 * a[0] / h**2
        M[0, 0] = -2 * a[0] / h**2 + 2 * a[0] * s / h + b[0] * s - q[0]
        ghost = 0
    else:
        ghost = 1
        lift = lambda v: np.concatenate([v[:1], v])
        a, b, qq = lift(data.a), lift(data.b), lift(q)
        D1, D2 = _derivative_matrices(N + 1, h, order)
        M = (sps.diags(a) @ D2 - sps.diags(b) @ D1 - sps.diags(qq)).tolil()
        M[0, :] = 0
        w = _fd_weights(list(range(-1, order)), 1, h)
        for k, wk in enumerate(w):
            M[0, k] = wk
        M[0, 1] += s
    size = N + ghost
    M[size - 1, :] = 0
    M[size - 1, size - 1] = 1.0
    return RadialOperator(M.tocsr(), s, order, np.arange(ghost, size - 1), ghost)


def check_m_matrix(op: RadialOperator, tol: float = 1e-12) -> None:
    """Nonpositive diagonal, nonnegative off-diagonals and weak diagonal dominance on equation rows."""
    M = op.matrix.tocsr()
    for i in op.pde_rows:
        row = M.getrow(i)
        vals = dict(zip(row.indices, row.data))
        d = vals.pop(i, 0.0)
        off = np.array(list(vals.values()) or [0.0])
        if d >= 0 or np.any(off < -tol * abs(d)) or abs(d) < off.sum() * (1 - tol):
            raise StabilityError(f"discrete operator is not an M-matrix at row {i} (diag {d:.3e}, off {off.tolist()})")


def _rhs(f: np.ndarray, op: RadialOperator) -> np.ndarray:
    out = op.lift(f).copy()
    out[-1] = 0.0
    if op.ghost:
        out[0] = 0.0
    return out


# ---------------------------------------------------------------------------
# the linear problem
# ---------------------------------------------------------------------------


@dataclass
class LinearSolution:
    grid: TGrid
    u: np.ndarray
    residual: float
    window: tuple[float, float]
    operator: RadialOperator

    def field(self) -> RadialField:
        return RadialField(self.grid, self.u, "u")


def linear_solve(g: MetricField, kappa, c: float, f, delta: float, *, grid: TGrid | None = None,
                 order: int = 2, rtol: float = 1e-10) -> LinearSolution:
    """Solve ``Δ_g u - (c - κ) u = f`` with ``u = 0`` at the boundary end and the
    interior Robin condition; ``f`` and ``κ`` are nodal data or fields."""
    n = g.n
    if c <= -n * n / 4:
        raise ConfigurationError(f"need c > -n^2/4 = {-n * n / 4}")
    R = math.sqrt(n * n / 4 + c)
    window = (n / 2 - R, n / 2 + R)
    if not abs(delta - n / 2) < R:
        raise ConfigurationError(f"weight delta={delta} outside the Fredholm window ({window[0]:.6g}, {window[1]:.6g})")
    grid = grid or make_grid(n)
    data = radial_data(g, grid)
    kap = _on_grid(kappa, grid, "kappa")
    q = c - kap
    if np.any(q < -1e-14):
        raise ConfigurationError("need c - kappa >= 0 on the grid")
    fv = _on_grid(f, grid, "f")
    op = radial_operator(data, q, interior_root(data.a[0], data.b[0], q[0]), order)
    if order == 2:
        check_m_matrix(op)
    rhs = _rhs(fv, op)
    u_ext = spla.spsolve(op.matrix.tocsc(), rhs)
    res = float(np.max(np.abs(op.apply(u_ext) - rhs)))
    u = op.drop(u_ext)
    scale = max(1.0, float(np.max(np.abs(rhs))))
    if not np.all(np.isfinite(u)) or res > rtol * scale * max(1.0, abs(op.matrix).max() * grid.h**2):
        raise NumericalError(f"linear solve residual {res:.3e}")
    return LinearSolution(grid, u, res, window, op)


# ---------------------------------------------------------------------------
# Lichnerowicz nonlinearity
# ---------------------------------------------------------------------------


@dataclass
class LichData:
    """``F(θ) = (n-1)/(4n) R θ - a θ^{-(3n+1)/(n-1)} - b θ^{-(n+1)/(n-1)} + (n²-1)/4 θ^{(n+3)/(n-1)}``."""

    n: int
    R: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def exponents(self) -> tuple[float, float, float]:
        n = self.n
        return -(3 * n + 1) / (n - 1), -(n + 1) / (n - 1), (n + 3) / (n - 1)

    def F(self, theta: np.ndarray) -> np.ndarray:
        n = self.n
        kA, kB, al = self.exponents
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((n - 1) / (4 * n) * self.R * theta - self.a * theta**kA - self.b * theta**kB
                    + (n * n - 1) / 4 * theta**al)

    def dF(self, theta: np.ndarray) -> np.ndarray:
        n = self.n
        kA, kB, al = self.exponents
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((n - 1) / (4 * n) * self.R - kA * self.a * theta ** (kA - 1) - kB * self.b * theta ** (kB - 1)
                    + (n * n - 1) / 4 * al * theta ** (al - 1))


def _sup_violation(lhs: np.ndarray, rhs: np.ndarray, rows: np.ndarray) -> tuple[float, int]:
    d = (lhs - rhs)[rows]
    k = int(np.argmax(d))
    return float(d[k]), int(rows[k])


@dataclass
class Barriers:
    u_star: float
    N: float
    s_interior: float


def barriers(gamma: RadialData, lich: LichData, *, N0: float = 0.25, N_max: float = 2.0**12,
             tol: float = 1e-12) -> Barriers:
    """Constant subsolution ``1+u_*`` and supersolution ``1+Nρ`` (plus ``1-Nρ`` where ``ρ<1/N``),
    all verified against the second-order discrete operator."""
    if np.any(gamma.R >= 0):
        k = int(np.argmax(gamma.R))
        raise BarrierError(f"scalar curvature not negative at rho={gamma.grid.rho[k]:.4g}")
    if np.any(lich.a < 0) or np.any(lich.b < 0):
        raise ValidationError("A and B must be nonnegative")
    grid = gamma.grid
    rho = grid.rho
    s = interior_root(gamma.a[0], gamma.b[0], max(float(lich.dF(np.ones(grid.size))[0]), 0.0))
    D = radial_operator(gamma, 0.0, s, 2)
    rows = D.pde_rows

    u_star = None
    worst = (math.inf, -1)
    # largest admissible candidate: -2^{-12}, ..., -1/2, then towards -1
    cands = [-(0.5**k) for k in range(12, 0, -1)] + [-1.0 + 0.5**k for k in range(2, 48)]
    for cand in cands:
        vals = lich.F(np.full(grid.size, 1.0 + cand))
        bad = float(np.max(vals[rows]))
        if bad <= 0 and np.all(D.apply(np.full(grid.size, cand))[rows] >= vals[rows] - tol):
            u_star = cand
            break
        k_bad = int(np.argmax(vals[rows]))
        worst = (bad, int(rows[k_bad]))
    if u_star is None:
        raise BarrierError(f"no u_* in (-1, 0) with F(1+u_*) <= 0; violation {worst[0]:.3e} at rho={rho[worst[1]]:.4g}")

    N = N0
    while N <= N_max:
        up = N * rho
        v, i = _sup_violation(D.apply(up), lich.F(1.0 + up), rows)
        ok = v <= tol * max(1.0, N)
        low_rows = rows[rho[rows] < 1.0 / N]
        if ok and low_rows.size:
            dn = -N * rho
            v2, i2 = _sup_violation(lich.F(1.0 + dn), D.apply(dn), low_rows)
            ok = v2 <= tol * max(1.0, N)
        if ok:
            return Barriers(float(u_star), float(N), s)
        N *= 2
    raise BarrierError(f"no supersolution 1+N rho with N <= {N_max}; last violation at rho={rho[i]:.4g}")


def choose_lambda(lich: LichData, bar: Barriers, grid: TGrid, samples: int = 64) -> float:
    """``1.1 max ∂F/∂u`` over the grid and ``u ∈ [u_*, max Nρ]``, floored at ``n+1``."""
    n = lich.n
    top = bar.N * float(np.max(grid.rho))
    us = np.linspace(bar.u_star, top, samples)
    dF = np.array([lich.dF(np.full(grid.size, 1.0 + u)) for u in us])
    lam = max(LAMBDA_SAFETY * float(np.max(dF)), float(n + 1))
    G = np.array([lich.F(np.full(grid.size, 1.0 + u)) for u in us]) - lam * us[:, None]
    if np.any(np.diff(G, axis=0) > 1e-12 * max(1.0, float(np.max(np.abs(G))))):
        raise NumericalError("G(u) = F(1+u) - Lambda u is not decreasing on the sampled range")
    return lam


# ---------------------------------------------------------------------------
# monotone iteration
# ---------------------------------------------------------------------------


@dataclass
class YamabeState:
    lam: float
    barrier_N: float
    barrier_floor: float
    iterates: list[np.ndarray] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    increments: list[float] = field(default_factory=list)
    converged: bool = False
    polish_residual: float = math.nan

    def report(self) -> dict[str, Any]:
        """Convergence summary; ``final_residual`` belongs to the returned solution, i.e. the
        polished one when a polish step ran."""
        monotone = self.residuals[-1] if self.residuals else math.nan
        final = self.polish_residual if math.isfinite(self.polish_residual) else monotone
        return {
            "iterations": len(self.iterates) - 1,
            "lambda": self.lam,
            "N": self.barrier_N,
            "u_star": self.barrier_floor,
            "final_residual": final,
            "monotone_residual": monotone,
            "polish_residual": self.polish_residual,
            "converged": self.converged,
        }


def _scaled_residual(lich: LichData, D: RadialOperator, u: np.ndarray) -> float:
    """``sup (4n/(n-1)) θ^{-(n+3)/(n-1)} |Δθ - F(θ)|`` on equation rows; for ``a=b=0`` this is the
    discrete value of ``|R[θ^{4/(n-1)}γ] + n(n+1)|``."""
    n = lich.n
    th = 1.0 + D.drop(u)
    r = D.lift((4 * n / (n - 1)) * th ** (-(n + 3) / (n - 1))) * (D.apply(u) - D.lift(lich.F(th)))
    return float(np.max(np.abs(r[D.pde_rows])))


def monotone_iterate(gamma: RadialData, lich: LichData, state: YamabeState, s_interior: float,
                     tol: float = 1e-10, u0: np.ndarray | None = None, check: bool = True,
                     max_iter: int = 20000) -> np.ndarray:
    """``(Δ_γ - Λ)u_{i+1} = G(u_i)`` from ``u_0 = Nρ``; returns ``u`` (``θ = 1 + u``)."""
    grid = gamma.grid
    rho = grid.rho
    lam = state.lam
    D = radial_operator(gamma, 0.0, s_interior, 2)
    L = radial_operator(gamma, lam, s_interior, 2)
    check_m_matrix(L)
    lu = spla.splu(L.matrix.tocsc())
    upper = state.barrier_N * rho
    lower = np.maximum(-state.barrier_N * rho, state.barrier_floor)
    u = upper.copy() if u0 is None else np.clip(np.asarray(u0, dtype=float), lower, upper)
    state.iterates = [u.copy()]
    state.residuals = [_scaled_residual(lich, D, u)]
    state.increments = []
    for _ in range(max_iter):
        G = lich.F(1.0 + u) - lam * u
        nxt = lu.solve(_rhs(G, L))
        if check:
            dec = float(np.min(u - nxt))
            if dec < -MONO_TOL:
                raise DiscretizationError(f"monotonicity violated by {-dec:.3e}; refine the grid")
            if np.any(nxt > upper + MONO_TOL) or np.any(nxt < lower - MONO_TOL):
                raise DiscretizationError("iterate left the barrier band; refine the grid")
        inc = float(np.max(np.abs(nxt - u)))
        u = nxt
        state.iterates.append(u.copy())
        state.increments.append(inc)
        res = _scaled_residual(lich, D, u)
        state.residuals.append(res)
        if inc <= tol and res <= 10 * tol:
            state.converged = True
            return u
    raise NumericalError(f"monotone iteration did not converge in {max_iter} steps (last increment {inc:.3e})")


def newton_polish(gamma: RadialData, lich: LichData, u: np.ndarray, s_interior: float, order: int = 6,
                  tol: float = 1e-14, max_iter: int = 30) -> tuple[np.ndarray, float]:
    """Newton iteration for the high-order discretization started from ``u``."""
    D = radial_operator(gamma, 0.0, s_interior, order)
    rows = D.pde_rows
    U = D.lift(u).copy()
    for _ in range(max_iter):
        th = 1.0 + D.drop(U)
        r = D.apply(U)
        r[rows] -= D.lift(lich.F(th))[rows]
        J = D.matrix - sps.diags(np.where(np.isin(np.arange(U.size), rows), D.lift(lich.dF(th)), 0.0))
        dU = spla.spsolve(J.tocsc(), -r)
        U = U + dU
        if np.max(np.abs(dU)) <= tol * max(1.0, float(np.max(np.abs(U)))):
            break
    else:
        raise NumericalError("Newton polish did not converge")
    return D.drop(U), _scaled_residual(lich, D, U)


# ---------------------------------------------------------------------------
# gauges
# ---------------------------------------------------------------------------


@dataclass
class Gauge:
    """Positive conformal gauge on a grid, with the metric it produces."""

    grid: TGrid
    values: np.ndarray
    metric: MetricField
    trivial: bool

    def field(self) -> RadialField:
        return RadialField(self.grid, self.values, "gauge")


def _smooth_pos(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Smooth upper bound for ``max(x, 0)`` that is ``O(eps²)`` where ``x`` is very negative."""
    return 0.5 * (x + np.sqrt(x * x + eps * eps))


def negative_gauge(g: MetricField, grid: TGrid | None = None, *, force: bool = False, margin: float = 0.0) -> Gauge:
    """Positive ``ψ`` with ``ψ - 1`` decaying and ``R[ψ^{4/(n-1)}g] < 0`` on the grid.

    When ``R[g]`` is already negative on the grid the gauge is ``ψ ≡ 1`` unless
    ``force`` is set; otherwise ``Δ_g u - κu = κ`` with ``κ = (n-1)/(4n)(R - R̃)``
    and ``R̃ = R - ρ³ - pos(R - ρ³ + 1)`` (a smoothed ``min(R - ρ³, -1)``).
    """
    n = g.n
    if n < 2:
        raise ConfigurationError("conformal gauges need n >= 2")
    grid = grid or make_grid(n)
    data = radial_data(g, grid)
    if not force and np.all(data.R < -margin):
        return Gauge(grid, np.ones(grid.size), g, True)
    rho = grid.rho
    base = data.R - rho**3
    R_tilde = base - _smooth_pos(base + 1.0, rho**2)
    kap = (n - 1) / (4 * n) * (data.R - R_tilde)
    sol = linear_solve(g, -kap, 0.0, kap, min(1.0, n / 2), grid=grid)
    psi = 1.0 + sol.u
    if np.any(psi <= 0):
        raise NumericalError("negative gauge is not positive")
    gamma = g.conformal(RadialField(grid, psi ** (4 / (n - 1))), name=f"psi-gauge({g.name})")
    R_gamma = scalar_via_identity(gamma, grid.points())
    if np.any(R_gamma >= 0):
        raise NumericalError("gauged scalar curvature is not negative on the grid")
    return Gauge(grid, psi, gamma, False)


def radial_little_f(g: MetricField, points: np.ndarray) -> np.ndarray:
    """``|dρ|² - 1 - (2/(n+1)) ρ Δ_ḡ ρ`` from first derivatives of ``ḡ`` only."""
    gb, dg = g.eval(points, 1)
    ginv = np.linalg.inv(gb)
    lap = -np.einsum("pij,pij->p", ginv, christoffel(ginv, dg)[:, -1])
    return ginv[:, -1, -1] - 1.0 - 2.0 / (g.n + 1) * points[:, -1] * lap


def smooth_cutoff(x: np.ndarray) -> np.ndarray:
    """``χ`` with ``χ = 1`` on ``(-1/3, ∞)`` and support in ``(-2/3, ∞)``."""
    y = (np.asarray(x, dtype=float) + 2 / 3) * 3

    def h(z):
        return np.where(z > 0, np.exp(-1 / np.where(z > 0, z, 1)), 0.0)

    return h(y) / (h(y) + h(1 - y))


def gauge_fix_scalar(g: MetricField, grid: TGrid | None = None, *, force: bool = False,
                     width: float = 0.5) -> Gauge:
    """``θ = 1 + χ(ŵ)ŵ`` with ``ŵ = -((n+1)/(4n)) f̂`` and ``f̂`` the second-order regularization
    of ``|dρ|² - 1 - (2/(n+1))ρΔρ``; the returned metric is ``θ^{-2}g``.

    If ``f`` already decays at order two (fitted slope ``≥ 1.9``) the gauge is ``θ ≡ 1``.
    """
    n = g.n
    grid = grid or make_grid(n)
    check_theta_independent(g)
    probe = np.geomspace(1e-5, 1e-1, 80)
    fv = little_f(g, make_points(np.zeros(n), probe))
    fit = decay_exponent(probe, fv, zero_tol=1e-14)
    if not force and fit.at_least(1.9):
        return Gauge(grid, np.ones(grid.size), g, True)

    # the convolution samples ρ up to 2 ρ_max; use the unblended closed form when there is one
    src = g
    if g.symbolic is not None:
        src = metric_from_sympy(g.symbolic.matrix, n, name=g.name, params=g.params, blend=False)

    def tau(points: np.ndarray) -> np.ndarray:
        return radial_little_f(src, np.atleast_2d(points))

    def drho(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        eps = 1e-3 * points[:, -1]
        out = 0.0
        for k, w in ((-2, 1 / 12), (-1, -2 / 3), (1, 2 / 3), (2, -1 / 12)):
            q = points.copy()
            q[:, -1] += k * eps
            out = out + w * radial_little_f(src, q)
        return out / eps

    tau.theta_dependent = False
    tau.drho = drho
    f_hat = regularize(tau, 2, make_kernel(width, n))
    w_hat = -(n + 1) / (4 * n) * f_hat(grid.points())
    theta = 1.0 + smooth_cutoff(w_hat) * w_hat
    theta[-1] = 1.0 + w_hat[-1]
    if np.any(theta < 1 / 3 - 1e-12):
        raise NumericalError("scalar gauge fell below the cutoff floor")
    fixed = g.conformal(RadialField(grid, theta**-2.0), name=f"scalar-gauge({g.name})")
    return Gauge(grid, theta, fixed, False)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


@dataclass
class LichnerowiczResult:
    grid: TGrid
    phi: np.ndarray
    theta: np.ndarray
    psi: Gauge
    state: YamabeState
    metric: MetricField
    stage_metric: MetricField
    stage_phi: np.ndarray | None = None
    gauge: Gauge | None = None

    def __post_init__(self):
        if self.stage_phi is None:
            self.stage_phi = self.phi

    def field(self) -> RadialField:
        return RadialField(self.grid, self.phi, "phi")

    def decay(self, lo: float = 1e-6, hi: float = 1e-1, stage: bool = False):
        """Decay fit of ``φ - 1`` (or of the solution relative to the gauged metric)."""
        rho = self.grid.rho
        keep = (rho >= lo) & (rho <= hi)
        phi = self.stage_phi if stage else self.phi
        return decay_exponent(rho[keep][::-1], (phi - 1.0)[keep][::-1], zero_tol=1e-13)

    def curvature_residual(self, lo: float = 1e-2, hi: float = 1.0, count: int = 200) -> float:
        """``sup |R[φ^{4/(n-1)}g] + n(n+1)|`` on a ρ ladder, from the curvature module."""
        n = self.metric.n
        conf = self.metric.conformal(self.field().power(4 / (n - 1)))
        pts = make_points(np.zeros(n) + 0.3, np.geomspace(lo, hi, count))
        return float(np.max(np.abs(scalar_via_identity(conf, pts) + n * (n + 1))))


def _stage(tag: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except WahkitError as exc:
        raise type(exc)(f"[{tag}] {exc}") from exc


def solve_lichnerowicz(g: MetricField, A=None, B=None, *, grid: TGrid | None = None, tol: float = 1e-10,
                       polish: bool = True, u0: np.ndarray | None = None, u0_scale: float | None = None,
                       force_gauge: bool = False) -> LichnerowiczResult:
    """Positive ``φ`` with ``Δφ = (n-1)/(4n)Rφ - Aφ^{-(3n+1)/(n-1)} - Bφ^{-(n+1)/(n-1)} + (n²-1)/4 φ^{(n+3)/(n-1)}``."""
    n = g.n
    if n < 2:
        raise ConfigurationError("the Lichnerowicz equation needs n >= 2")
    grid = grid or make_grid(n)
    Av = _on_grid(A, grid, "A")
    Bv = _on_grid(B, grid, "B")
    if np.any(Av < 0) or np.any(Bv < 0):
        raise ValidationError("A and B must be nonnegative")
    psi = _stage("negative_gauge", negative_gauge, g, grid, force=force_gauge)
    gamma = _stage("radial_data", radial_data, psi.metric, grid)
    lich = LichData(n, gamma.R, psi.values ** (-4 * (n + 1) / (n - 1)) * Av,
                    psi.values ** (-2 * (n + 2) / (n - 1)) * Bv)
    bar = _stage("barriers", barriers, gamma, lich)
    lam = _stage("choose_lambda", choose_lambda, lich, bar, grid)
    state = YamabeState(lam, bar.N, bar.u_star)
    check = u0 is None and u0_scale is None
    if u0_scale is not None:
        u0 = u0_scale * bar.N * grid.rho
    u = _stage("monotone_iterate", monotone_iterate, gamma, lich, state, bar.s_interior, tol, u0, check)
    if polish:
        u, state.polish_residual = _stage("polish", newton_polish, gamma, lich, u, bar.s_interior)
    theta = 1.0 + u
    phi = psi.values * theta
    if np.any(phi <= 0):
        raise NumericalError("solution is not positive")
    return LichnerowiczResult(grid, phi, theta, psi, state, g, psi.metric)


def solve_yamabe(g: MetricField, *, grid: TGrid | None = None, tol: float = 1e-10, gauge: bool | None = None,
                 polish: bool = True) -> LichnerowiczResult:
    """``φ`` with ``R[φ^{4/(n-1)}g] = -n(n+1)``; metrics flagged for second-order control are first
    moved to the scalar gauge ``θ^{-2}g`` (the returned ``phi`` is relative to ``g`` itself)."""
    n = g.n
    grid = grid or make_grid(n)
    use_gauge = g.script_c2 if gauge is None else gauge
    fix = _stage("gauge_fix_scalar", gauge_fix_scalar, g, grid) if use_gauge else None
    target = g if fix is None or fix.trivial else fix.metric
    res = solve_lichnerowicz(target, grid=grid, tol=tol, polish=polish)
    if fix is not None and not fix.trivial:
        phi = res.phi * fix.values ** (-(n - 1) / 2)
        return LichnerowiczResult(grid, phi, res.theta, res.psi, res.state, g, target, res.phi, fix)
    res.gauge = fix
    return res


def ladder_fit(rho: np.ndarray, values: np.ndarray, basis: Sequence[tuple[float, int]]) -> dict[tuple[float, int], float]:
    """Least-squares coefficients of ``Σ c_{s,p} ρ^s (log ρ)^p``."""
    rho = np.asarray(rho, dtype=float)
    cols = np.stack([rho**s * np.log(rho) ** p for s, p in basis], axis=1)
    scale = np.max(np.abs(cols), axis=0)
    coef, *_ = np.linalg.lstsq(cols / scale, np.asarray(values, dtype=float), rcond=None)
    return {key: float(c / sc) for key, c, sc in zip(basis, coef, scale)}
