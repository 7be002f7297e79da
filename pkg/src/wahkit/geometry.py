"""Collar charts, Möbius parametrizations and a catalog of closed-form metrics.

Points are stored as arrays of shape ``(P, n + 1)`` holding background
coordinates ``(theta^1, ..., theta^n, rho)``; the defining function ``rho`` is
always the last coordinate.  Metric evaluators return the compactified metric
``gbar = rho^2 g`` together with partial derivatives

* ``g[p, i, j]``          = gbar_ij
* ``dg[p, k, i, j]``      = d_k gbar_ij
* ``ddg[p, k, l, i, j]``  = d_k d_l gbar_ij
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np
import sympy as sp

from .errors import CatalogError, ConfigurationError, DomainError, ValidationError

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollarChart:
    """A product collar ``T^n x (0, rho_star]`` sampled uniformly in ``t = -log rho``."""

    n: int
    rho_star: float
    t_grid: np.ndarray
    theta_grid: tuple[np.ndarray, ...]
    periodic: tuple[bool, ...]
    period: float = TWO_PI

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def t_min(self) -> float:
        return float(self.t_grid[0])

    @property
    def t_max(self) -> float:
        return float(self.t_grid[-1])

    @property
    def rho(self) -> np.ndarray:
        return np.exp(-self.t_grid)

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    def points(self, theta: Sequence[float] | None = None) -> np.ndarray:
        """Grid points along the t-grid at a fixed boundary location."""
        th = np.zeros(self.n) if theta is None else np.asarray(theta, dtype=float)
        return make_points(th, self.rho)

    def boundary_points(self) -> np.ndarray:
        """Tensor grid of boundary coordinates, shape ``(M, n)``."""
        mesh = np.meshgrid(*self.theta_grid, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def make_collar_chart(
    n: int,
    rho_star: float = 1.0,
    points: int = 128,
    t_max: float = 12.0,
    theta_points: int = 16,
    period: float = TWO_PI,
) -> CollarChart:
    if int(n) != n or n < 1:
        raise ConfigurationError(f"boundary dimension must be a positive integer, got {n}")
    if n > 3:
        raise ConfigurationError("boundary dimensions above 3 are not supported")
    if not (0.0 < rho_star <= 1.0):
        raise DomainError(f"rho_star must lie in (0, 1], got {rho_star}")
    if int(points) != points or points < 2 or int(theta_points) != theta_points or theta_points < 1:
        raise ConfigurationError("grid resolution must be a positive integer (at least 2 t-points)")
    t_min = -math.log(rho_star)
    if not t_max > t_min:
        raise ConfigurationError(f"t_max={t_max} must exceed t_min={t_min}")
    t = np.linspace(t_min, t_max, int(points))
    theta = tuple(np.arange(theta_points) * (period / theta_points) for _ in range(n))
    return CollarChart(int(n), float(rho_star), t, theta, (True,) * int(n), float(period))


def make_points(theta: Sequence[float] | np.ndarray, rho: Sequence[float] | np.ndarray) -> np.ndarray:
    """Points with common boundary coordinates ``theta`` and a list of ``rho``."""
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    th = np.asarray(theta, dtype=float).reshape(1, -1)
    return np.concatenate([np.repeat(th, rho.size, axis=0), rho[:, None]], axis=1)


def rho_ladder(lo: float, hi: float, num: int) -> np.ndarray:
    """Geometric ladder of ``num`` defining-function values, decreasing."""
    return np.geomspace(hi, lo, num)


# ---------------------------------------------------------------------------
# Möbius parametrizations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MapHandle:
    forward: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    domain: Mapping[str, Any]
    center: np.ndarray
    scale: float

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.forward(pts)


def mobius_param(chart: CollarChart | int, p0: Sequence[float]) -> MapHandle:
    """``Phi(x, y) = (theta0 + rho0 x, rho0 y)`` on the hyperbolic ball of radius 2."""
    n = chart.n if isinstance(chart, CollarChart) else int(chart)
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (n + 1,):
        raise ConfigurationError(f"base point must have {n + 1} coordinates")
    rho0 = float(p0[-1])
    if not rho0 > 0:
        raise DomainError(f"Möbius base point needs rho0 > 0, got {rho0}")
    shift = np.concatenate([p0[:-1], [0.0]])

    def forward(pts: np.ndarray) -> np.ndarray:
        return shift + rho0 * np.asarray(pts, dtype=float)

    def jacobian(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.broadcast_to(rho0 * np.eye(n + 1), (pts.shape[0], n + 1, n + 1)).copy()

    center = np.zeros(n + 1)
    center[-1] = 1.0
    domain = {"kind": "hyperbolic_ball", "center": tuple(center), "radius": 2.0}
    return MapHandle(forward, jacobian, domain, p0.copy(), rho0)


def boundary_mobius_param(
    chart: CollarChart,
    p_hat: Sequence[float],
    r: float,
    metric: "MetricField | None" = None,
) -> MapHandle:
    """Boundary dilation ``Psi_r(x, y) = (r x, r y)`` on ``Y = {|x| < 1, 0 < y < 1}``.

    Coordinates are recentred at ``p_hat`` by an affine map ``theta' = S (theta - p_hat)``
    chosen so that the boundary block of ``gbar`` at ``p_hat`` becomes the identity.
    The returned map takes ``(x, y)`` to the original background coordinates.
    """
    n = chart.n
    p_hat = np.asarray(p_hat, dtype=float)
    if p_hat.shape != (n,):
        raise ConfigurationError(f"boundary point must have {n} coordinates")
    if not 0 < r < chart.rho_star:
        raise DomainError(f"need 0 < r < rho_star={chart.rho_star}, got r={r}")
    if metric is None:
        s_inv = np.eye(n)
    else:
        gb = metric.boundary_value(p_hat)[:n, :n]
        w, v = np.linalg.eigh(gb)
        s_inv = v @ np.diag(w ** -0.5) @ v.T  # inverse square root of the boundary block
    lin = np.eye(n + 1)
    lin[:n, :n] = s_inv
    base = np.concatenate([p_hat, [0.0]])

    def forward(pts: np.ndarray) -> np.ndarray:
        return base + r * np.asarray(pts, dtype=float) @ lin.T

    def jacobian(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.broadcast_to(r * lin, (pts.shape[0], n + 1, n + 1)).copy()

    domain = {
        "kind": "rectangle",
        "lower": tuple([-1.0] * n + [0.0]),
        "upper": tuple([1.0] * n + [1.0]),
        "recentering": s_inv.tolist(),
    }
    return MapHandle(forward, jacobian, domain, base, float(r))


def hyperbolic_ball_samples(n: int, count: int, radius: float = 2.0, seed: int = 0) -> np.ndarray:
    """Deterministic samples of the hyperbolic ball of given radius about ``(0, 1)``.

    In the half-space model this ball is the Euclidean ball with centre
    ``(0, cosh r)`` and radius ``sinh r``.
    """
    rng = np.random.default_rng(seed)
    c, R = math.cosh(radius), math.sinh(radius)
    out = []
    while sum(len(o) for o in out) < count:
        cand = rng.uniform(-1.0, 1.0, size=(4 * count, n + 1))
        cand = cand[np.sum(cand**2, axis=1) < 1.0]
        pts = cand * R
        pts[:, -1] += c
        out.append(pts)
    pts = np.concatenate(out)[:count]
    centre = np.zeros((1, n + 1))
    centre[0, -1] = 1.0
    return np.concatenate([centre, pts[: count - 1]])


def hyperbolic_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distance in the upper half-space model (last coordinate positive)."""
    num = np.sum((p - q) ** 2, axis=-1)
    return np.arccosh(1.0 + num / (2.0 * p[..., -1] * q[..., -1]))


# ---------------------------------------------------------------------------
# symbolic plumbing
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def coordinate_symbols(n: int) -> tuple[sp.Symbol, ...]:
    thetas = tuple(sp.Symbol(f"theta{i + 1}", real=True) for i in range(n))
    return thetas + (sp.Symbol("rho", positive=True),)


def _lambdify_stack(exprs: Sequence[sp.Expr], syms: Sequence[sp.Symbol]) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a list of expressions into ``f(points) -> (P, len(exprs))``."""
    exprs = [sp.sympify(e) for e in exprs]
    fn = sp.lambdify(syms, exprs, modules="numpy", cse=True)

    def call(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        with np.errstate(all="ignore"):
            vals = fn(*pts.T)
        out = np.empty((pts.shape[0], len(exprs)))
        for j, v in enumerate(vals):
            out[:, j] = v
        return out

    return call


def smoothstep(x: sp.Expr) -> sp.Expr:
    """C^3 transition polynomial equal to 0 at x=0 and 1 at x=1."""
    return x**4 * (35 - 84 * x + 70 * x**2 - 20 * x**3)


def blend_profile(rho: sp.Symbol, rho_star: float) -> tuple[sp.Expr, float]:
    """Cutoff equal to 1 on (0, rho_star] and 0 beyond ``rho_end``."""
    rho_end = max(1.0, 2.0 * rho_star)
    x = (rho - rho_star) / (rho_end - rho_star)
    chi = sp.Piecewise((1, rho <= rho_star), (1 - smoothstep(x), rho < rho_end), (0, True))
    return chi, rho_end


# ---------------------------------------------------------------------------
# scalar fields
# ---------------------------------------------------------------------------


class FieldLike(Protocol):
    n: int

    def eval(self, points: np.ndarray, order: int = 2) -> tuple[np.ndarray, ...]: ...


class ScalarField:
    """Closed-form scalar function of the background coordinates.

    ``eval(points, order)`` returns ``(value,)``, ``(value, grad)`` or
    ``(value, grad, hess)``; arbitrary partials are available through
    :meth:`partial`.
    """

    def __init__(self, expr: sp.Expr | str | float, n: int, name: str | None = None):
        self.n = int(n)
        self.syms = coordinate_symbols(self.n)
        if isinstance(expr, str):
            expr = parse_expression(expr, self.n)
        self.expr = sp.sympify(expr)
        self.name = name or str(self.expr)
        self._cache: dict[tuple[int, ...], Callable[[np.ndarray], np.ndarray]] = {}

    @property
    def theta_dependent(self) -> bool:
        return any(s in self.expr.free_symbols for s in self.syms[:-1])

    def __repr__(self) -> str:
        return f"ScalarField({self.name!r}, n={self.n})"

    def scaled(self, c: float) -> "ScalarField":
        return ScalarField(c * self.expr, self.n, name=f"{c}*({self.name})")

    def diff_expr(self, alpha: Sequence[int]) -> sp.Expr:
        e = self.expr
        for k, m in enumerate(alpha):
            if m:
                e = sp.diff(e, self.syms[k], m)
        return e

    def partial(self, points: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
        key = tuple(int(a) for a in alpha)
        if key not in self._cache:
            self._cache[key] = _lambdify_stack([self.diff_expr(key)], self.syms)
        return self._cache[key](points)[:, 0]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.partial(points, (0,) * (self.n + 1))

    def eval(self, points: np.ndarray, order: int = 2) -> tuple[np.ndarray, ...]:
        points = np.atleast_2d(points)
        N = self.n + 1
        out = [self(points)]
        if order >= 1:
            grad = np.empty((points.shape[0], N))
            for k in range(N):
                alpha = [0] * N
                alpha[k] = 1
                grad[:, k] = self.partial(points, alpha)
            out.append(grad)
        if order >= 2:
            hess = np.empty((points.shape[0], N, N))
            for k, l in combinations_with_replacement(range(N), 2):
                alpha = [0] * N
                alpha[k] += 1
                alpha[l] += 1
                hess[:, k, l] = hess[:, l, k] = self.partial(points, alpha)
            out.append(hess)
        return tuple(out)


def parse_expression(text: str, n: int) -> sp.Expr:
    """Parse a field expression in ``rho``, ``theta``/``x`` (first boundary coordinate)
    and ``theta1 .. thetan``."""
    syms = coordinate_symbols(n)
    local = {s.name: s for s in syms}
    local["theta"] = syms[0]
    local["x"] = syms[0]
    if n >= 2:
        local["y"] = syms[1]
    try:
        expr = sp.sympify(text, locals=local)
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigurationError(f"cannot parse expression {text!r}: {exc}") from exc
    unknown = expr.free_symbols - set(syms)
    if unknown:
        raise ConfigurationError(f"unknown symbols {sorted(map(str, unknown))} in {text!r}")
    return expr


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymbolicMetric:
    """Unblended closed form of ``gbar`` valid on ``(0, rho_star]``."""

    syms: tuple[sp.Symbol, ...]
    matrix: sp.Matrix


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def conformal_derivatives(
    phi: tuple[np.ndarray, ...], metric: tuple[np.ndarray, ...], order: int
) -> tuple[np.ndarray, ...]:
    """Derivatives of ``phi * h`` from those of a scalar ``phi`` and a metric ``h``."""
    f, h = phi[0], metric[0]
    out = [f[:, None, None] * h]
    if order >= 1:
        fg, dh = phi[1], metric[1]
        out.append(fg[:, :, None, None] * h[:, None] + f[:, None, None, None] * dh)
    if order >= 2:
        fh, ddh = phi[2], metric[2]
        dd = (
            fh[:, :, :, None, None] * h[:, None, None]
            + fg[:, :, None, None, None] * dh[:, None]
            + fg[:, None, :, None, None] * dh[:, :, None]
            + f[:, None, None, None, None] * ddh
        )
        out.append(dd)
    return tuple(out)


class MetricField:
    """Compactified metric ``gbar`` on a collar chart with derivative callbacks."""

    def __init__(
        self,
        n: int,
        evaluator: Callable[[np.ndarray, int], tuple[np.ndarray, ...]],
        *,
        chart: CollarChart | None = None,
        kind: str = "closed_form",
        wah_flag: bool = True,
        name: str = "custom",
        params: Mapping[str, Any] | None = None,
        symbolic: SymbolicMetric | None = None,
        theta_dependent: bool = False,
        script_c2: bool = True,
    ):
        if kind not in ("closed_form", "grid_sampled"):
            raise ConfigurationError(f"unknown metric kind {kind!r}")
        self.n = int(n)
        self.chart = chart
        self.kind = kind
        self.wah_flag = bool(wah_flag)
        self.name = name
        self.params = dict(params or {})
        self.symbolic = symbolic
        self.theta_dependent = theta_dependent
        self.script_c2 = script_c2
        self._evaluator = evaluator

    @property
    def dim(self) -> int:
        return self.n + 1

    def __repr__(self) -> str:
        return f"MetricField({self.name!r}, n={self.n}, params={self.params})"

    def eval(self, points: np.ndarray, order: int = 2) -> tuple[np.ndarray, ...]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise ConfigurationError(f"points must have {self.dim} coordinates")
        if np.any(points[:, -1] <= 0):
            raise DomainError("metric evaluated at rho <= 0")
        return self._evaluator(points, order)

    def boundary_value(self, p_hat: Sequence[float], rho0: float = 1e-4) -> np.ndarray:
        """``gbar`` at a boundary point by quadratic extrapolation in rho."""
        rhos = rho0 * np.array([1.0, 0.5, 0.25])
        g = self.eval(make_points(p_hat, rhos), 0)[0]
        return richardson_zero(rhos, g)

    def validate(self, points: np.ndarray) -> None:
        g = self.eval(points, 0)[0]
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"{self.name}: non-finite metric components")
        if not np.allclose(g, np.swapaxes(g, 1, 2)):
            raise ValidationError(f"{self.name}: metric not symmetric")
        w = np.linalg.eigvalsh(g)
        if np.min(w) <= 0:
            bad = int(np.argmin(np.min(w, axis=1)))
            raise ValidationError(f"{self.name}: metric not positive definite at {points[bad].tolist()}")

    def conformal(self, factor: FieldLike, name: str | None = None) -> "MetricField":
        """The metric ``factor * gbar`` (factor positive with up to two derivatives)."""
        base = self

        def evaluator(points: np.ndarray, order: int) -> tuple[np.ndarray, ...]:
            return conformal_derivatives(factor.eval(points, order), base.eval(points, order), order)

        return MetricField(
            self.n,
            evaluator,
            chart=self.chart,
            kind=self.kind,
            wah_flag=self.wah_flag,
            name=name or f"conformal({self.name})",
            params=self.params,
            theta_dependent=True,
            script_c2=self.script_c2,
        )


def richardson_zero(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Value at 0 of the quadratic through three samples (leading axis of ``y``)."""
    x = np.asarray(x, dtype=float)
    w = np.empty(3)
    for i in range(3):
        others = [x[j] for j in range(3) if j != i]
        w[i] = others[0] * others[1] / ((x[i] - others[0]) * (x[i] - others[1]))
    return np.tensordot(w, np.asarray(y), axes=(0, 0))


def metric_from_sympy(
    matrix: sp.Matrix,
    n: int,
    *,
    chart: CollarChart | None = None,
    name: str = "custom",
    params: Mapping[str, Any] | None = None,
    wah_flag: bool = True,
    blend: bool = True,
    script_c2: bool = True,
) -> MetricField:
    """Build a closed-form :class:`MetricField` from a sympy matrix in ``coordinate_symbols(n)``.

    With ``blend`` set, the metric is interpolated to the flat (hyperbolic)
    compactification between ``rho_star`` and ``max(1, 2 rho_star)``.
    """
    syms = coordinate_symbols(n)
    N = n + 1
    matrix = sp.Matrix(matrix)
    if matrix.shape != (N, N):
        raise ConfigurationError(f"metric matrix must be {N}x{N}")
    core = matrix
    full = matrix
    if blend:
        rho_star = chart.rho_star if chart is not None else 1.0
        chi, _ = blend_profile(syms[-1], rho_star)
        full = sp.eye(N) + chi * (matrix - sp.eye(N))
    pairs = [(i, j) for i in range(N) for j in range(i, N)]
    e0 = [full[i, j] for i, j in pairs]
    e1 = [sp.diff(full[i, j], syms[k]) for k in range(N) for i, j in pairs]
    e2 = [
        sp.diff(full[i, j], syms[k], syms[l])
        for k, l in combinations_with_replacement(range(N), 2)
        for i, j in pairs
    ]
    fns = [_lambdify_stack(e0, syms), _lambdify_stack(e1, syms), _lambdify_stack(e2, syms)]
    npairs = len(pairs)
    iu = np.array(pairs)

    def unpack(vals: np.ndarray) -> np.ndarray:
        out = np.empty(vals.shape[:-1] + (N, N))
        out[..., iu[:, 0], iu[:, 1]] = vals
        out[..., iu[:, 1], iu[:, 0]] = vals
        return out

    def evaluator(points: np.ndarray, order: int) -> tuple[np.ndarray, ...]:
        P = points.shape[0]
        res = [unpack(fns[0](points))]
        if order >= 1:
            res.append(unpack(fns[1](points).reshape(P, N, npairs)))
        if order >= 2:
            flat = fns[2](points).reshape(P, -1, npairs)
            dd = np.empty((P, N, N, N, N))
            for m, (k, l) in enumerate(combinations_with_replacement(range(N), 2)):
                blk = unpack(flat[:, m])
                dd[:, k, l] = blk
                dd[:, l, k] = blk
            res.append(dd)
        return tuple(res)

    theta_dep = any(s in full.free_symbols for s in syms[:-1])
    return MetricField(
        n,
        evaluator,
        chart=chart,
        kind="closed_form",
        wah_flag=wah_flag,
        name=name,
        params=params,
        symbolic=SymbolicMetric(syms, core),
        theta_dependent=theta_dep,
        script_c2=script_c2,
    )


def grid_sampled_metric(
    values: Callable[[np.ndarray], np.ndarray],
    n: int,
    *,
    chart: CollarChart | None = None,
    step: float = 1e-3,
    name: str = "sampled",
    wah_flag: bool = True,
) -> MetricField:
    """Metric known only through component values; derivatives by 4th-order
    central differences in ``theta`` and in ``t = -log rho``."""
    N = n + 1
    stencil1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
    offsets = np.array([-2, -1, 0, 1, 2])

    def shifted(points: np.ndarray, k: int, m: int) -> np.ndarray:
        q = points.copy()
        if k < n:
            q[:, k] = q[:, k] + m * step
        else:
            q[:, k] = q[:, k] * math.exp(-m * step)
        return q

    def d1(f: Callable[[np.ndarray], np.ndarray], points: np.ndarray, k: int) -> np.ndarray:
        acc = sum(c * f(shifted(points, k, m)) for c, m in zip(stencil1, offsets) if c != 0.0) / step
        if k == n:  # d/drho = -(1/rho) d/dt
            acc = -acc / points[:, -1].reshape((-1,) + (1,) * (acc.ndim - 1))
        return acc

    def evaluator(points: np.ndarray, order: int) -> tuple[np.ndarray, ...]:
        g = values(points)
        res = [g]
        if order >= 1:
            res.append(np.stack([d1(values, points, k) for k in range(N)], axis=1))
        if order >= 2:
            dd = np.empty((points.shape[0], N, N, N, N))
            for l in range(N):
                dl = lambda q, l=l: d1(values, q, l)  # noqa: E731
                for k in range(N):
                    dd[:, k, l] = d1(dl, points, k)
            res.append(0.5 * (dd + dd.transpose(0, 2, 1, 3, 4)))
        return tuple(res)

    return MetricField(n, evaluator, chart=chart, kind="grid_sampled", wah_flag=wah_flag, name=name,
                       theta_dependent=True)


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

CATALOG_PARAMS: dict[str, dict[str, Any]] = {
    "hyperbolic": {},
    "poly_perturbed": {"a": 1.0, "b": 0.0},
    "log_oscillation": {"eps": 0.5, "amp": 1.0},
    "angle_dependent": {"a": 0.5, "c": 0.3},
    "rho_scaled": {"lapse": 4.0},
}


def _per_direction(value: Any, n: int, label: str) -> list[sp.Expr]:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ValidationError(f"parameter {label} needs {n} entries, got {len(value)}")
        return [sp.nsimplify(v) for v in value]
    return [sp.nsimplify(value)] * n


def catalog_matrix(name: str, params: Mapping[str, Any], n: int) -> tuple[sp.Matrix, bool, bool]:
    """Sympy matrix of a catalog entry, its WAH flag and its C^{;2} flag."""
    if name not in CATALOG_PARAMS:
        raise CatalogError(f"unknown catalog metric {name!r}; known: {sorted(CATALOG_PARAMS)}")
    merged = {**CATALOG_PARAMS[name], **dict(params)}
    unknown = set(params) - set(CATALOG_PARAMS[name]) - {"n"}
    if unknown:
        raise ValidationError(f"unknown parameters {sorted(unknown)} for {name}")
    syms = coordinate_symbols(n)
    rho = syms[-1]
    N = n + 1
    M = sp.eye(N)
    wah, c2 = True, True
    if name == "poly_perturbed":
        a = _per_direction(merged["a"], n, "a")
        b = _per_direction(merged["b"], n, "b")
        for i in range(n):
            M[i, i] = 1 + a[i] * rho + b[i] * rho**2
    elif name == "log_oscillation":
        eps = sp.nsimplify(merged["eps"])
        amp = sp.nsimplify(merged["amp"])
        if not 0 < float(eps) < 1:
            raise ValidationError("log_oscillation needs eps in (0, 1)")
        M[0, 0] = 1 + amp * rho ** (1 + eps) * sp.sin(sp.log(rho))
        c2 = False
    elif name == "angle_dependent":
        a = sp.nsimplify(merged["a"])
        c = sp.nsimplify(merged["c"])
        th = syms[0]
        M[n, n] = 1 + c * rho * sp.cos(th)
        for i in range(n):
            M[i, i] = 1 + a * rho * (2 + sp.cos(th))
    elif name == "rho_scaled":
        lapse = sp.nsimplify(merged["lapse"])
        if float(lapse) <= 0:
            raise ValidationError("lapse must be positive")
        M[n, n] = lapse
        wah = float(lapse) == 1.0
    return M, wah, c2


def catalog_metric(
    name: str,
    params: Mapping[str, Any] | None = None,
    *,
    n: int | None = None,
    chart: CollarChart | None = None,
    blend: bool = True,
) -> MetricField:
    """Closed-form catalog metric with exact derivative callbacks."""
    params = dict(params or {})
    if n is None:
        n = chart.n if chart is not None else int(params.get("n", 2))
    if chart is not None and chart.n != n:
        raise ConfigurationError("chart dimension does not match n")
    params.pop("n", None)
    matrix, wah, c2 = catalog_matrix(name, params, n)
    metric = metric_from_sympy(
        matrix,
        n,
        chart=chart,
        name=name,
        params={**CATALOG_PARAMS[name], **params},
        wah_flag=wah,
        blend=blend and name != "rho_scaled",
        script_c2=c2,
    )
    check = chart if chart is not None else make_collar_chart(n, 1.0, points=32, theta_points=4)
    pts = np.concatenate([make_points(th, check.rho) for th in check.boundary_points()[:: max(1, len(check.boundary_points()) // 8)]])
    metric.validate(pts)
    return metric


def metric_from_json(doc: Mapping[str, Any] | str | Path) -> tuple[MetricField, CollarChart]:
    """Load ``{"name", "params", "chart": {"n", "rho_star", "points", "t_max"}}``."""
    if isinstance(doc, (str, Path)) and not str(doc).lstrip().startswith("{"):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    allowed = {"name", "params", "chart"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigurationError(f"unknown keys {sorted(extra)}; valid keys: {sorted(allowed)}")
    if "name" not in doc:
        raise ConfigurationError("metric document needs a 'name'")
    chart_doc = dict(doc.get("chart", {}))
    chart_allowed = {"n", "rho_star", "points", "t_max"}
    extra = set(chart_doc) - chart_allowed
    if extra:
        raise ConfigurationError(f"unknown chart keys {sorted(extra)}; valid keys: {sorted(chart_allowed)}")
    chart = make_collar_chart(
        int(chart_doc.get("n", 2)),
        float(chart_doc.get("rho_star", 1.0)),
        points=int(chart_doc.get("points", 128)),
        t_max=float(chart_doc.get("t_max", 12.0)),
    )
    return catalog_metric(doc["name"], doc.get("params", {}), chart=chart), chart
