"""Estimators for weighted Hölder/Sobolev norms and the intermediate classes.

Norms are measured on Möbius charts ``Φ(z) = (θ0 + ρ0 x, ρ0 y)`` whose
domain is the hyperbolic ball of radius 2 about ``(0, 1)``.  A covariant
tensor of weight ``r`` pulls back with components scaled by ``ρ0^r``; each
chart derivative contributes another factor ``ρ0``.

Membership questions are answered along a refinement ladder of collars
``ρ ≥ e^{-t_max}``: a quantity is declared infinite when its estimate grows
by a factor of at least two on three consecutive refinements.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from .errors import ConfigurationError
from .geometry import (
    MapHandle,
    ScalarField,
    _lambdify_stack,
    coordinate_symbols,
    hyperbolic_ball_samples,
    hyperbolic_distance,
    mobius_param,
    parse_expression,
)
from .indicial import cluster_values

LADDER = (2.0, 8.0, 32.0, 128.0)
GROWTH = 2.0


@dataclass(frozen=True)
class NormSpec:
    k: int = 0
    alpha: float = 0.0
    p: float | None = None
    delta: float = 0.0
    weight_r: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ConfigurationError("k must be nonnegative")
        if not 0 <= self.alpha < 1:
            raise ConfigurationError("alpha must lie in [0, 1)")
        if self.p is not None:
            if self.p <= 1:
                raise ConfigurationError("Sobolev exponent p must exceed 1")
            if self.alpha:
                raise ConfigurationError("a norm spec has either alpha or p, not both")
        if int(self.weight_r) != self.weight_r:
            raise ConfigurationError("weight_r must be an integer")


class TensorField:
    """Covariant tensor given by closed-form components in background coordinates.

    ``rank`` is the covariant rank (the bundle weight); a scalar has rank 0.
    """

    def __init__(self, components: Sequence[sp.Expr | str | float] | sp.Expr | str | float, n: int,
                 rank: int = 0, name: str | None = None):
        self.n = int(n)
        self.syms = coordinate_symbols(self.n)
        if isinstance(components, (str, int, float, sp.Basic)):
            components = [components]
        self.components = [parse_expression(c, self.n) if isinstance(c, str) else sp.sympify(c) for c in components]
        self.rank = int(rank)
        self.name = name or str(self.components[0] if len(self.components) == 1 else self.components)
        self._cache: dict = {}

    @classmethod
    def coerce(cls, u, n: int | None = None) -> "TensorField":
        if isinstance(u, TensorField):
            return u
        if isinstance(u, ScalarField):
            return cls([u.expr], u.n, 0, u.name)
        if n is None:
            raise ConfigurationError("dimension n required for a bare expression")
        return cls(u, n)

    def weighted(self, delta: float) -> list[sp.Expr]:
        rho = self.syms[-1]
        return [rho ** (-sp.nsimplify(delta)) * c for c in self.components]

    def derivative_stack(self, delta: float, order: int) -> Callable[[np.ndarray], np.ndarray]:
        """Evaluator of all partials of order exactly ``order`` of ``ρ^{-δ}u``; shape (P, multi, comp)."""
        key = (float(delta), order)
        if key not in self._cache:
            base = self.weighted(delta)
            idx = list(itertools.combinations_with_replacement(range(self.n + 1), order))
            exprs = []
            for combo in idx:
                for c in base:
                    e = c
                    for var in combo:
                        e = sp.diff(e, self.syms[var])
                    exprs.append(e)
            f = _lambdify_stack(exprs, self.syms)
            ncomp = len(base)
            self._cache[key] = lambda pts, f=f, m=len(idx), c=ncomp: f(pts).reshape(pts.shape[0], m, c)
        return self._cache[key]

    def values(self, points: np.ndarray) -> np.ndarray:
        return self.derivative_stack(0.0, 0)(points)[:, 0, :]


@dataclass(frozen=True)
class ChartPatch:
    handle: MapHandle
    multiplicity: float = 1.0


@dataclass
class Cover:
    n: int
    patches: list[ChartPatch]
    t_max: float

    def __len__(self) -> int:
        return len(self.patches)


def make_cover(n: int, t_max: float, theta_centers: Sequence[float] | np.ndarray | None = None,
               dt: float = 1.0, period: float = 2 * math.pi, t_min: float = 2.0) -> Cover:
    """Möbius charts centred at ``ρ0 = e^{-t}``, ``t ∈ [t_min, t_max]`` in steps ``dt``.

    Only the listed boundary centres are sampled; each chart stands for the
    ``(period/(count ρ0))^n`` translates that would tile its level, which is
    recorded as its multiplicity (used by the Sobolev sum).
    """
    if t_max < t_min:
        raise ConfigurationError("t_max below the first chart level")
    if theta_centers is None:
        theta_centers = np.linspace(0, period, 4, endpoint=False) + 0.37
    thetas = np.atleast_1d(np.asarray(theta_centers, dtype=float))
    levels = np.arange(t_min, t_max + 1e-9, dt)
    patches = []
    for t in levels:
        rho0 = math.exp(-t)
        mult = (period / (len(thetas) * rho0)) ** n
        for th in thetas:
            p0 = np.concatenate([np.full(n, th), [rho0]])
            patches.append(ChartPatch(mobius_param(n, p0), mult))
    return Cover(n, patches, float(t_max))


def _chart_data(u: TensorField, delta: float, patch: ChartPatch, z: np.ndarray, k: int) -> list[np.ndarray]:
    """Chart partials of ``Φ^*(ρ^{-δ}u)`` of orders ``0..k``: each (P, multi, comp)."""
    rho0 = patch.handle.scale
    x = patch.handle(z)
    return [u.derivative_stack(delta, j)(x) * rho0 ** (j + u.rank) for j in range(k + 1)]


@dataclass
class _Samples:
    z: np.ndarray
    pairs: tuple[np.ndarray, np.ndarray]
    dist: np.ndarray


def _samples(n: int, count: int, seed: int) -> _Samples:
    z = hyperbolic_ball_samples(n, count, 2.0, seed)
    i, j = np.triu_indices(count, 1)
    d = hyperbolic_distance(z[i], z[j])
    keep = (d >= 0.1) & (d <= 1.0)
    i, j = i[keep], j[keep]
    return _Samples(z, (i, j), np.linalg.norm(z[i] - z[j], axis=1))


def weighted_holder_norm(u, spec: NormSpec, cover: Cover, samples: int = 48, seed: int = 0) -> float:
    """``sup_charts ‖Φ^*(ρ^{-δ}u)‖_{C^{k,α}(B_2)}`` estimated on sampled points and pairs."""
    if not len(cover):
        raise ConfigurationError("empty cover")
    u = TensorField.coerce(u, cover.n)
    if spec.weight_r != u.rank and spec.weight_r != 0:
        raise ConfigurationError(f"spec weight {spec.weight_r} does not match tensor rank {u.rank}")
    S = _samples(cover.n, samples, seed)
    best = 0.0
    for patch in cover.patches:
        data = _chart_data(u, spec.delta, patch, S.z, spec.k)
        val = max(float(np.max(np.abs(d))) for d in data)
        if spec.alpha > 0:
            top = data[-1]
            i, j = S.pairs
            q = np.max(np.abs(top[i] - top[j]), axis=(1, 2)) / S.dist**spec.alpha
            val += float(np.max(q, initial=0.0))
        best = max(best, val)
    return best


def weighted_sobolev_norm(u, spec: NormSpec, cover: Cover, samples: int = 256, seed: int = 0) -> float:
    """``(Σ_i ρ(p_i)^{-δp} ‖Φ_i^*u‖^p_{W^{k,p}(B_2)})^{1/p}`` with chart multiplicities."""
    if spec.p is None:
        raise ConfigurationError("Sobolev norm needs p")
    if not len(cover):
        raise ConfigurationError("empty cover")
    u = TensorField.coerce(u, cover.n)
    p = spec.p
    z = hyperbolic_ball_samples(cover.n, samples, 2.0, seed)
    # hyperbolic volume weights of uniform Euclidean samples
    vol = math.pi ** ((cover.n + 1) / 2) / math.gamma((cover.n + 1) / 2 + 1) * math.sinh(2.0) ** (cover.n + 1)
    w = vol / samples * z[:, -1] ** (-(cover.n + 1))
    total = 0.0
    for patch in cover.patches:
        rho0 = patch.handle.scale
        data = _chart_data(u, 0.0, patch, z, spec.k)
        local = sum(float(np.sum(w * np.sum(np.abs(d) ** p, axis=(1, 2)))) for d in data)
        total += patch.multiplicity * rho0 ** (-spec.delta * p) * local
    return total ** (1.0 / p)


# ---------------------------------------------------------------------------
# the intermediate classes
# ---------------------------------------------------------------------------


def background_derivatives(u, m: int, barh: sp.Matrix | None = None, n: int | None = None) -> list[TensorField]:
    """``[u, ∇̄u, ∇̄²u]`` up to ``m`` as covariant tensor fields (flat background by default)."""
    u = TensorField.coerce(u, n)
    if u.rank != 0:
        raise ConfigurationError("background derivatives implemented for scalar fields")
    syms = u.syms
    N = len(syms)
    f = u.components[0]
    out = [u]
    if m >= 1:
        out.append(TensorField([sp.diff(f, s) for s in syms], u.n, 1, f"dbar({u.name})"))
    if m >= 2:
        G = None
        if barh is not None:
            barh = sp.Matrix(barh)
            hinv = barh.inv()
            G = [[[sum(hinv[l, q] * (sp.diff(barh[q, i], syms[j]) + sp.diff(barh[q, j], syms[i])
                                     - sp.diff(barh[i, j], syms[q])) for q in range(N)) / 2
                   for j in range(N)] for i in range(N)] for l in range(N)]
        comps = []
        for i in range(N):
            for j in range(N):
                e = sp.diff(f, syms[i], syms[j])
                if G is not None:
                    e -= sum(G[l][i][j] * sp.diff(f, syms[l]) for l in range(N))
                comps.append(e)
        out.append(TensorField(comps, u.n, 2, f"hess_bar({u.name})"))
    if m > 2:
        raise ConfigurationError("m > 2 not supported")
    return out


def script_c_norm(u, k: int, alpha: float, m: int, barh: sp.Matrix | None = None, cover: Cover | None = None,
                  n: int | None = None, t_max: float = 8.0, samples: int = 48) -> float:
    """``Σ_{l≤m} ‖∇̄^l u‖_{C^{k-l,α}_{r+l}}``."""
    if m > k:
        raise ConfigurationError("need m <= k")
    u = TensorField.coerce(u, n)
    cover = cover or make_cover(u.n, t_max)
    total = 0.0
    for l, T in enumerate(background_derivatives(u, m, barh)):
        total += weighted_holder_norm(T, NormSpec(k - l, alpha, None, float(u.rank + l), T.rank), cover, samples)
    return total


@dataclass
class LadderResult:
    values: list[float]
    infinite: bool

    @property
    def finite(self) -> bool:
        return not self.infinite


def divergence_rule(values: Sequence[float], growth: float = GROWTH, streak: int = 3) -> bool:
    """True when the sequence grows by at least ``growth`` on ``streak`` consecutive steps (or overflows)."""
    vals = list(values)
    if any(not np.isfinite(v) for v in vals):
        return True
    run = 0
    for a, b in zip(vals, vals[1:]):
        run = run + 1 if b >= growth * max(a, 1e-300) and b > 1e-12 else 0
        if run >= streak:
            return True
    return False


def ladder(estimator: Callable[[float], float], t_values: Sequence[float] = LADDER) -> LadderResult:
    vals = []
    with np.errstate(all="ignore"):
        for t in t_values:
            vals.append(float(estimator(t)))
    return LadderResult(vals, divergence_rule(vals))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def _conormal_sup(u: TensorField, shift: float, t_max: float, order: int = 2, thetas=None, per_unit: int = 24) -> float:
    """``sup |(ρ∂_ρ)^i ∂_θ^β (ρ^{-shift} u)|`` over ``e^{-t_max} ≤ ρ ≤ e^{-1}``, ``i+|β| ≤ order``."""
    syms = u.syms
    rho = syms[-1]
    base = rho ** (-sp.nsimplify(shift)) * u.components[0]
    key = ("conormal", float(shift), order)
    if key not in u._cache:
        exprs = []
        frontier = [base]
        seen = [base]
        for _ in range(order):
            nxt = []
            for e in frontier:
                nxt.append(rho * sp.diff(e, rho))
                nxt += [sp.diff(e, s) for s in syms[:-1]]
            seen += nxt
            frontier = nxt
        exprs = seen
        u._cache[key] = _lambdify_stack(exprs, syms)
    f = u._cache[key]
    t = np.linspace(1.0, t_max, max(64, int(per_unit * t_max)))
    thetas = np.linspace(0, 2 * math.pi, 9)[:-1] + 0.1 if thetas is None else np.asarray(thetas)
    pts = np.array([[*([th] * u.n), math.exp(-tt)] for th in thetas for tt in t])
    with np.errstate(all="ignore"):
        vals = f(pts)
    return float(np.max(np.abs(vals)))


def _coordinate_holder(u: TensorField, k: int, alpha: float, t_max: float, theta: float = 0.4,
                       count: int = 240) -> float:
    """Unweighted ``C^{k,α}`` estimate of ``u`` on the segment ``θ = const``, ``ρ ∈ [e^{-t_max}, 1/2]``."""
    rho = np.concatenate([np.geomspace(math.exp(-t_max), 0.5, count)])
    pts = np.column_stack([np.full((rho.size, u.n), theta), rho])
    best = 0.0
    with np.errstate(all="ignore"):
        for j in range(k + 1):
            d = u.derivative_stack(0.0, j)(pts)
            best = max(best, float(np.max(np.abs(d))))
        if alpha > 0:
            top = u.derivative_stack(0.0, k)(pts)
            i, jj = np.triu_indices(rho.size, 1)
            q = np.max(np.abs(top[i] - top[jj]), axis=(1, 2)) / np.abs(rho[i] - rho[jj]) ** alpha
            best += float(np.max(q))
    return best


def _boundary_oscillation(u: TensorField, order: int, t_max: float, thetas=None) -> float:
    """Oscillation over ``ρ ∈ [e^{-t_max}, e^{-t_max/2}]`` of the coordinate derivatives of
    order ``order``; tends to zero iff those derivatives extend continuously."""
    thetas = np.linspace(0, 2 * math.pi, 5)[:-1] + 0.2 if thetas is None else thetas
    rho = np.geomspace(math.exp(-t_max), math.exp(-t_max / 2), 400)
    worst = 0.0
    with np.errstate(all="ignore"):
        for th in thetas:
            pts = np.column_stack([np.full((rho.size, u.n), th), rho])
            d = u.derivative_stack(0.0, order)(pts)
            worst = max(worst, float(np.max(np.ptp(d, axis=0))))
    return worst


def pencil_exponents(values: np.ndarray, dt: float, rank_tol: float = 1e-9, max_order: int = 12):
    """Exponents ``s`` of an exponential-polynomial model ``Σ c t^p e^{-s t}`` fitted to
    samples on a uniform ``t`` grid (matrix pencil); ``None`` if no low-order model fits."""
    y = np.asarray(values, dtype=float)
    N = y.size
    L = N // 2
    H = np.array([y[i:i + L + 1] for i in range(N - L)])
    U, sv, Vh = np.linalg.svd(H, full_matrices=False)
    if sv[0] == 0:
        return []
    M = int(np.sum(sv > rank_tol * sv[0]))
    if M > max_order:
        return None
    V = Vh[:M].conj().T
    V1, V2 = V[:-1], V[1:]
    z = np.linalg.eigvals(np.linalg.pinv(V1) @ V2)
    return [complex(-np.log(zz) / dt) for zz in z]


def phg_proxy(u: TensorField, thetas=None, t0: float = 2.0, t1: float = 12.0, samples: int = 81,
              tol: float = 1e-3) -> tuple[bool, list]:
    """Polyhomogeneity proxy: a finite exponent set, fitted per boundary point, that is the
    same at every sampled boundary point."""
    thetas = np.linspace(0, 2 * math.pi, 5)[:-1] + 0.3 if thetas is None else thetas
    t = np.linspace(t0, t1, samples)
    sets = []
    for th in thetas:
        pts = np.column_stack([np.full((t.size, u.n), th), np.exp(-t)])
        vals = u.values(pts)[:, 0]
        ex = pencil_exponents(vals, t[1] - t[0])
        if ex is None:
            return False, sets
        sets.append([c for c, _, _ in cluster_values(np.array(ex), 1e-2)])
    ref = sets[0]
    for other in sets[1:]:
        if len(other) != len(ref) or any(abs(a - b) > tol * max(1, abs(a)) for a, b in zip(ref, other)):
            return False, sets
    return True, sets


@dataclass
class RegularityReport:
    name: str
    memberships: dict[str, bool] = field(default_factory=dict)
    witnesses: dict[str, list[float]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "memberships": dict(self.memberships),
                "witnesses": {k: [float(x) for x in v] for k, v in self.witnesses.items()}}


def classify_regularity(u, n: int = 1, deltas: Sequence[float] = (0.0,), ks: Sequence[int] = (0, 1, 2),
                        holder_pairs: Sequence[tuple[int, float]] = ((0, 0.0), (0, 0.5), (1, 0.0), (1, 0.5), (2, 0.0)),
                        exponent: float | None = None, alpha: float = 0.5,
                        sobolev_p: float | None = None) -> RegularityReport:
    """Membership booleans (with witness values along the refinement ladder).

    Keys:

    * ``C^{k,a}_delta``: weighted Hölder classes for ``k`` in ``ks`` and ``delta`` in ``deltas``;
    * ``script_C^{k,a;m}``: the intermediate classes for ``m = 1, 2`` (``k = 2``);
    * ``C0(Mbar)``, ``Lipschitz(Mbar)``, ``C1(Mbar)``: continuity of ``u`` and ``du`` up to the boundary;
    * ``C^{k,a}(Mbar)``: unweighted Hölder up to the boundary for ``holder_pairs``;
    * ``A``, ``rho^d A``, ``A_d``: conormal classes, with ``d = exponent`` when given;
    * ``phg``: the polyhomogeneity proxy; ``C^{k,a}_phg`` combines it with ``C^{k,a}(Mbar)``;
    * ``W^{0,p}_delta``: weighted Sobolev classes when ``sobolev_p`` is given.
    """
    u = TensorField.coerce(u, n)
    rep = RegularityReport(u.name)

    def record(key: str, res: LadderResult) -> None:
        rep.memberships[key] = res.finite
        rep.witnesses[key] = res.values

    for k in ks:
        for d in deltas:
            record(f"C^{{{k},{alpha}}}_{d:g}",
                   ladder(lambda t, k=k, d=d: weighted_holder_norm(u, NormSpec(k, alpha, None, d, u.rank),
                                                                  make_cover(u.n, t, dt=2.0 if t > 40 else 1.0))))
    if sobolev_p is not None:
        for d in deltas:
            record(f"W^{{0,{sobolev_p:g}}}_{d:g}",
                   ladder(lambda t, d=d: weighted_sobolev_norm(u, NormSpec(0, 0.0, sobolev_p, d, u.rank),
                                                               make_cover(u.n, t, dt=2.0 if t > 40 else 1.0))))
    for m in (1, 2):
        record(f"script_C^{{2,{alpha};{m}}}",
               ladder(lambda t, m=m: script_c_norm(u, 2, alpha, m, cover=make_cover(u.n, t, dt=2.0 if t > 40 else 1.0))))
    record("Lipschitz(Mbar)", ladder(lambda t: _coordinate_holder(u, 1, 0.0, t)))
    top_order = max([1] + [k for k, _ in holder_pairs])
    osc = [[_boundary_oscillation(u, j, t) for t in LADDER] for j in range(top_order + 1)]
    extends = [bool(o[-1] < 1e-3 and np.isfinite(o[-1])) for o in osc]
    rep.memberships["C0(Mbar)"] = extends[0]
    rep.witnesses["C0(Mbar)"] = osc[0]
    rep.memberships["C1(Mbar)"] = extends[1]
    rep.witnesses["C1(Mbar)"] = osc[1]
    for k, a in holder_pairs:
        key = f"C^{{{k},{a}}}(Mbar)"
        record(key, ladder(lambda t, k=k, a=a: _coordinate_holder(u, k, a, t)))
        if a == 0:
            # bounded k-th derivatives are not enough without alpha: they must also extend
            rep.memberships[key] = rep.memberships[key] and extends[k]
    record("A", ladder(lambda t: _conormal_sup(u, 0.0, t)))
    if exponent is not None:
        record(f"rho^{exponent:g} A", ladder(lambda t: _conormal_sup(u, exponent, t)))
        record(f"A_{exponent:g}", ladder(lambda t: _conormal_sup(u, exponent - 0.05, t)))
    phg, sets = phg_proxy(u)
    rep.memberships["phg"] = phg
    rep.witnesses["phg"] = [float(len(s)) for s in sets]
    for k, a in holder_pairs:
        rep.memberships[f"C^{{{k},{a}}}_phg"] = phg and rep.memberships[f"C^{{{k},{a}}}(Mbar)"]
    return rep
