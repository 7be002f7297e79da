"""Polyhomogeneous expansions and formal solutions of degenerate ODEs in ρ.

An expansion is a finite sum of terms ``ρ^s (log ρ)^p x`` with constant
vectors ``x`` (one boundary point at a time) and a remainder marker
``remainder_order``: everything not listed is ``O(ρ^δ)`` up to logarithms.

The indicial operator acts exactly on such sums through

    (ρ∂_ρ)[ρ^s L^p] = ρ^s (s L^p + p L^{p-1}),      L = log ρ,

so the linear algebra reduces to small block-triangular systems, one per
exponent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import sympy as sp

from .errors import ConfigurationError, ExpansionCapError, NumericalError, NumericalMultiplicityError
from .geometry import MetricField
from .indicial import CLUSTER_TOL, BoundaryData, UDOperator, characteristic_exponents

MAX_TERMS = 64
EXP_TOL = 1e-10
GAMMA_FLOOR = 0.25


def binom(beta: float, l: int) -> float:
    """Generalized binomial coefficient ``β(β-1)…(β-l+1)/l!``."""
    out = 1.0
    for k in range(l):
        out *= (beta - k) / (k + 1)
    return out


def _same(s: complex, t: complex, tol: float = EXP_TOL) -> bool:
    return abs(s - t) <= tol * max(1.0, abs(s))


@dataclass(frozen=True)
class PhgTerm:
    s: complex
    p: int
    coeff: np.ndarray

    def value(self, rho: np.ndarray) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        L = np.log(rho)
        return (rho.astype(complex) ** self.s * L**self.p)[:, None] * self.coeff[None, :]


class PhgExpansion:
    """Finite sum of ``ρ^s (log ρ)^p x`` plus ``O(ρ^remainder_order)``."""

    def __init__(self, terms: Iterable[PhgTerm | tuple] = (), remainder_order: float = math.inf,
                 weight_r: int = 0, dim: int | None = None, cap: int = MAX_TERMS):
        raw = []
        for t in terms:
            if not isinstance(t, PhgTerm):
                s, p, c = t
                t = PhgTerm(complex(s), int(p), np.atleast_1d(np.asarray(c, dtype=complex)))
            if t.p < 0:
                raise ConfigurationError("log powers must be nonnegative")
            if not (np.all(np.isfinite(t.coeff)) and np.isfinite(t.s)):
                raise NumericalError(f"non-finite term at exponent {t.s}")
            raw.append(t)
        if dim is None:
            dim = raw[0].coeff.shape[0] if raw else 1
        self.dim = int(dim)
        self.remainder_order = float(remainder_order)
        self.weight_r = int(weight_r)
        merged: list[PhgTerm] = []
        for t in raw:
            if t.coeff.shape != (self.dim,):
                raise ConfigurationError(f"coefficient of length {t.coeff.shape} in a dimension-{self.dim} expansion")
            if t.s.real >= self.remainder_order:
                continue
            for k, m in enumerate(merged):
                if m.p == t.p and _same(m.s, t.s):
                    merged[k] = PhgTerm(m.s, m.p, m.coeff + t.coeff)
                    break
            else:
                merged.append(PhgTerm(t.s, t.p, t.coeff.copy()))
        merged = [t for t in merged if np.any(t.coeff != 0)]
        merged.sort(key=lambda t: (t.s.real, t.s.imag, t.p))
        if len(merged) > cap:
            raise ExpansionCapError(f"expansion exceeds {cap} terms")
        self.terms: tuple[PhgTerm, ...] = tuple(merged)

    # -- basic queries -------------------------------------------------
    @classmethod
    def zero(cls, dim: int = 1, remainder_order: float = math.inf, weight_r: int = 0) -> "PhgExpansion":
        return cls((), remainder_order, weight_r, dim)

    @classmethod
    def monomial(cls, s: complex, coeff=1.0, p: int = 0, remainder_order: float = math.inf) -> "PhgExpansion":
        c = np.atleast_1d(np.asarray(coeff, dtype=complex))
        return cls([(s, p, c)], remainder_order, dim=c.shape[0])

    @classmethod
    def polynomial(cls, coeffs: Sequence, remainder_order: float | None = None) -> "PhgExpansion":
        """``Σ coeffs[k] ρ^k`` (scalar)."""
        order = len(coeffs) if remainder_order is None else remainder_order
        return cls([(k, 0, [c]) for k, c in enumerate(coeffs)], order)

    def __len__(self) -> int:
        return len(self.terms)

    def __repr__(self) -> str:
        body = " + ".join(f"({_fmt(t.coeff)})ρ^{_fmt_s(t.s)}" + (f"L^{t.p}" if t.p else "") for t in self.terms)
        return f"PhgExpansion({body or '0'} + O(ρ^{self.remainder_order:g}))"

    @property
    def exponents(self) -> list[complex]:
        out: list[complex] = []
        for t in self.terms:
            if not any(_same(t.s, s) for s in out):
                out.append(t.s)
        return out

    @property
    def leading_order(self) -> float:
        return self.terms[0].s.real if self.terms else self.remainder_order

    def max_log_power(self, s: complex | None = None) -> int:
        ps = [t.p for t in self.terms if s is None or _same(t.s, s)]
        return max(ps) if ps else -1

    def coefficient(self, s: complex, p: int = 0) -> np.ndarray:
        for t in self.terms:
            if t.p == p and _same(t.s, s):
                return t.coeff
        return np.zeros(self.dim, dtype=complex)

    def is_real(self) -> bool:
        return all(abs(t.s.imag) == 0 and np.all(t.coeff.imag == 0) for t in self.terms)

    def __call__(self, rho) -> np.ndarray:
        """Values of the finite part at ``rho``; shape ``(len(rho), dim)``."""
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        out = np.zeros((rho.shape[0], self.dim), dtype=complex)
        for t in self.terms:
            out += t.value(rho)
        return out.real if self.is_real() else out

    def rho_derivative(self) -> "PhgExpansion":
        """``ρ∂_ρ`` applied termwise."""
        new = []
        for t in self.terms:
            new.append((t.s, t.p, t.s * t.coeff))
            if t.p:
                new.append((t.s, t.p - 1, t.p * t.coeff))
        return PhgExpansion(new, self.remainder_order, self.weight_r, self.dim)

    # -- algebra -------------------------------------------------------
    def truncate(self, order: float) -> "PhgExpansion":
        return PhgExpansion(self.terms, min(order, self.remainder_order), self.weight_r, self.dim)

    def below(self, order: float) -> "PhgExpansion":
        """Terms with ``Re s < order`` only, remainder unknown beyond."""
        return PhgExpansion([t for t in self.terms if t.s.real < order], min(order, self.remainder_order),
                            self.weight_r, self.dim)

    def scale(self, c) -> "PhgExpansion":
        return PhgExpansion([(t.s, t.p, c * t.coeff) for t in self.terms], self.remainder_order, self.weight_r, self.dim)

    def matmul(self, M: np.ndarray) -> "PhgExpansion":
        M = np.atleast_2d(M)
        return PhgExpansion([(t.s, t.p, M @ t.coeff) for t in self.terms], self.remainder_order, self.weight_r,
                            M.shape[0])

    def shift(self, s: complex, p: int = 0) -> "PhgExpansion":
        """Multiply by ``ρ^s L^p``."""
        return PhgExpansion([(t.s + s, t.p + p, t.coeff) for t in self.terms], self.remainder_order + complex(s).real,
                            self.weight_r, self.dim)

    def __add__(self, other):
        return phg_add(self, other)

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return phg_add(self, -other)

    def __mul__(self, other):
        if isinstance(other, PhgExpansion):
            return phg_mul(self, other)
        return self.scale(other)

    __rmul__ = __mul__

    def as_records(self) -> list[dict]:
        return [
            {"re_s": float(t.s.real), "im_s": float(t.s.imag), "p": int(t.p),
             "coeff": [[float(c.real), float(c.imag)] if c.imag else float(c.real) for c in t.coeff]}
            for t in self.terms
        ]


def _fmt(c: np.ndarray) -> str:
    vals = [f"{z.real:.6g}" if z.imag == 0 else f"{z:.6g}" for z in c]
    return ", ".join(vals)


def _fmt_s(s: complex) -> str:
    return f"{s.real:g}" if s.imag == 0 else f"({s:g})"


def phg_add(a: PhgExpansion, b: PhgExpansion) -> PhgExpansion:
    if a.dim != b.dim and len(a) and len(b):
        raise ConfigurationError("dimension mismatch in expansion sum")
    dim = a.dim if len(a) else b.dim
    return PhgExpansion(a.terms + b.terms, min(a.remainder_order, b.remainder_order), a.weight_r, dim)


def phg_mul(a: PhgExpansion, b: PhgExpansion, order: float | None = None) -> PhgExpansion:
    """Cauchy product; coefficient vectors multiply componentwise (a scalar factor broadcasts)."""
    rem = min(a.remainder_order + b.leading_order, b.remainder_order + a.leading_order)
    if math.isnan(rem):
        rem = math.inf
    if order is not None:
        rem = min(rem, order)
    dim = max(a.dim, b.dim)
    if a.dim != b.dim and 1 not in (a.dim, b.dim):
        raise ConfigurationError("dimension mismatch in expansion product")
    terms = []
    for s in a.terms:
        for t in b.terms:
            if (s.s + t.s).real < rem:
                terms.append((s.s + t.s, s.p + t.p, s.coeff * t.coeff))
    return PhgExpansion(terms, rem, a.weight_r, dim)


def phg_power_series(u: PhgExpansion, coeffs: Callable[[int], float], order: float) -> PhgExpansion:
    """``Σ_l coeffs(l) u^l`` truncated at ``order`` (requires ``u`` of positive order)."""
    low = u.leading_order
    if low <= 0:
        raise ConfigurationError("power series needs an expansion of positive order")
    out = PhgExpansion.polynomial([coeffs(0)], remainder_order=order) if u.dim == 1 else \
        PhgExpansion([(0, 0, np.full(u.dim, coeffs(0)))], order, dim=u.dim)
    power = PhgExpansion([(0, 0, np.ones(u.dim))], order, dim=u.dim)
    l = 0
    while True:
        l += 1
        if l * low >= order:
            break
        power = phg_mul(power, u, order)
        c = coeffs(l)
        if c != 0:
            out = out + power.scale(c)
    return out.truncate(order)


def binomial_series(u: PhgExpansion, beta: float, order: float) -> PhgExpansion:
    """``(1 + u)^β``."""
    return phg_power_series(u, lambda l: float(binom(beta, l)), order)


# ---------------------------------------------------------------------------
# the indicial operator acting on expansions
# ---------------------------------------------------------------------------


def _derivative_table(s: complex, p: int) -> dict[int, tuple[complex, complex, complex]]:
    """Coefficients of ``L^j`` in ``(ρ∂)^k[ρ^s L^p] / ρ^s`` for k = 0, 1, 2."""
    tab: dict[int, list[complex]] = {p: [1.0, s, s * s]}
    if p >= 1:
        tab.setdefault(p - 1, [0, 0, 0])
        tab[p - 1][1] += p
        tab[p - 1][2] += 2 * s * p
    if p >= 2:
        tab.setdefault(p - 2, [0, 0, 0])
        tab[p - 2][2] += p * (p - 1)
    return {j: tuple(v) for j, v in tab.items()}


@dataclass(frozen=True)
class RemainderTerm:
    """``ρ^s L^p [Ma (ρ∂_ρ)² + Mb ρ∂_ρ + Mc]``."""

    s: complex
    p: int
    Ma: np.ndarray
    Mb: np.ndarray
    Mc: np.ndarray


def _apply_coefficients(Ma, Mb, Mc, u: PhgExpansion) -> list[tuple]:
    out = []
    for t in u.terms:
        for j, (c0, c1, c2) in _derivative_table(t.s, t.p).items():
            out.append((t.s, j, (c2 * Ma + c1 * Mb + c0 * Mc) @ t.coeff))
    return out


def _as_data(Iop: BoundaryData | UDOperator, p_hat) -> BoundaryData:
    if isinstance(Iop, BoundaryData):
        return Iop
    return Iop.boundary_trace(np.zeros(Iop.n) if p_hat is None else p_hat)


def apply_indicial(Iop: BoundaryData | UDOperator, u: PhgExpansion, p_hat=None) -> PhgExpansion:
    """Exact action of ``ā(ρ∂)² + b̄ρ∂ + c̄`` on a finite expansion."""
    data = _as_data(Iop, p_hat)
    return PhgExpansion(_apply_coefficients(data.abar, data.bbar, data.cbar, u), u.remainder_order, u.weight_r,
                        data.dim)


@dataclass
class OperatorSplit:
    """``𝒫 = I(𝒫) + 𝓡`` at one boundary point, with ``𝓡`` a finite series of
    :class:`RemainderTerm` exact modulo ``O(ρ^series_order)``."""

    data: BoundaryData
    remainder: tuple[RemainderTerm, ...] = ()
    series_order: float = math.inf
    gamma: float | None = None

    def __post_init__(self):
        if self.gamma is None:
            orders = [r.s.real for r in self.remainder if np.any(r.Ma) or np.any(r.Mb) or np.any(r.Mc)]
            first = min(orders) if orders else 1.0
            self.gamma = max(GAMMA_FLOOR, min(1.0, first))
        if self.gamma <= 0:
            raise ConfigurationError("remainder gain must be positive")

    def shifted(self, c: float) -> "OperatorSplit":
        """Same split for ``𝒫 - c``."""
        d = self.data
        return OperatorSplit(BoundaryData(d.abar, d.bbar, d.cbar - c * np.eye(d.dim)), self.remainder,
                             self.series_order, self.gamma)

    def apply(self, u: PhgExpansion) -> PhgExpansion:
        out = apply_indicial(self.data, u)
        terms = list(out.terms)
        for r in self.remainder:
            for s, p, c in _apply_coefficients(r.Ma, r.Mb, r.Mc, u):
                terms.append((s + r.s, p + r.p, c))
        rem = min(u.remainder_order, self.series_order + u.leading_order)
        return PhgExpansion(terms, rem, u.weight_r, self.data.dim)


# ---------------------------------------------------------------------------
# solving I(𝒫)u = f
# ---------------------------------------------------------------------------


def _block_system(data: BoundaryData, s: complex, Q: int) -> np.ndarray:
    """Matrix of the map ``(x_0..x_Q) ↦`` coefficients of ``L^k`` in ``I(Σ ρ^s L^k x_k)/ρ^s``."""
    d = data.dim
    M0 = data.indicial(s)
    M1 = 2 * s * data.abar + data.bbar
    M2 = data.abar
    K = np.zeros(((Q + 1) * d, (Q + 1) * d), dtype=complex)
    for k in range(Q + 1):
        K[k * d:(k + 1) * d, k * d:(k + 1) * d] = M0
        if k + 1 <= Q:
            K[k * d:(k + 1) * d, (k + 1) * d:(k + 2) * d] = (k + 1) * M1
        if k + 2 <= Q:
            K[k * d:(k + 1) * d, (k + 2) * d:(k + 3) * d] = (k + 1) * (k + 2) * M2
    return K


def _null_space(K: np.ndarray, rel: float = 1e-7, scale: float = 0.0) -> np.ndarray:
    u, sv, vh = np.linalg.svd(K)
    scale = max(scale, sv[0] if sv.size else 0.0) or 1.0
    rank = int(np.sum(sv > rel * scale))
    return vh[rank:].conj().T


def _operator_size(data: BoundaryData, s: complex) -> float:
    # rank is judged against the size of the operator, not of the (possibly tiny) block itself
    r = 1.0 + abs(s)
    return float(np.linalg.norm(data.abar) * r * r + np.linalg.norm(data.bbar) * r + np.linalg.norm(data.cbar))


def homogeneous_basis(data: BoundaryData, s: complex, mult: int) -> list[np.ndarray]:
    """Coefficient blocks ``(x_0..x_{m-1})`` of the homogeneous solutions at a
    characteristic exponent of algebraic multiplicity ``m``."""
    d = data.dim
    H = _null_space(_block_system(data, s, mult - 1), scale=_operator_size(data, s))
    if H.shape[1] != mult:
        raise NumericalMultiplicityError(
            f"exponent {s}: homogeneous space has dimension {H.shape[1]}, expected {mult}")
    return [H[:, j].reshape(mult, d) for j in range(mult)]


def _resonant_solve(data: BoundaryData, s: complex, mult: int, w: np.ndarray) -> np.ndarray:
    """Canonical solution at a resonant exponent.

    ``w`` has shape ``(P+1, d)``.  The particular solution is the one
    orthogonal to the homogeneous solutions; this choice does not depend on
    how many log levels are carried and is linear in ``w``.
    """
    d = data.dim
    P = w.shape[0] - 1
    Q = P + mult
    K = _block_system(data, s, Q)
    rhs = np.zeros((Q + 1) * d, dtype=complex)
    rhs[: (P + 1) * d] = w.ravel()
    x, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    if np.linalg.norm(K @ x - rhs) > 1e-8 * (1.0 + np.linalg.norm(rhs)):
        raise NumericalMultiplicityError(f"no polyhomogeneous particular solution at exponent {s}")
    H = _null_space(K, scale=_operator_size(data, s))
    if H.shape[1] != mult:
        raise NumericalMultiplicityError(
            f"exponent {s}: Jordan structure unresolved (kernel {H.shape[1]} vs multiplicity {mult})")
    x = x - H @ np.linalg.lstsq(H, x, rcond=None)[0]
    return x.reshape(Q + 1, d)


def solve_indicial_ode(
    Iop: BoundaryData | UDOperator,
    f: PhgExpansion,
    p_hat=None,
    *,
    terminal: float | None = None,
    keep_above: float | None = None,
    tol: float = CLUSTER_TOL,
) -> PhgExpansion:
    """Formal solution of ``I(𝒫)u = f`` term by term.

    Non-resonant source exponents give ``ρ^ν x`` with ``I_ν x = w``; a source
    exponent on a characteristic exponent raises the log power by up to the
    multiplicity.  With ``terminal = ρ*`` the homogeneous solutions are added so
    that ``u(ρ*) = ρ∂_ρu(ρ*) = 0`` (the variation-of-constants solution);
    ``keep_above`` then retains only homogeneous terms with ``Re s > keep_above``.
    """
    data = _as_data(Iop, p_hat)
    d = data.dim
    if f.dim != d:
        raise ConfigurationError(f"source has dimension {f.dim}, operator acts on {d}")
    roots = characteristic_exponents(data, tol=tol)
    terms: list[tuple] = []
    for s in f.exponents:
        group = [t for t in f.terms if _same(t.s, s)]
        P = max(t.p for t in group)
        w = np.zeros((P + 1, d), dtype=complex)
        for t in group:
            w[t.p] = t.coeff
        hit = [(r, m) for r, m in roots if abs(s - r) <= tol * max(1.0, abs(r))]
        if hit:
            r, m = hit[0]
            x = _resonant_solve(data, r, m, w)
            if x.shape[0] - 1 > P + 2 * d:
                raise NumericalMultiplicityError("log escalation exceeds the companion-block bound")
        else:
            M0 = data.indicial(s)
            M1 = 2 * s * data.abar + data.bbar
            x = np.zeros((P + 1, d), dtype=complex)
            for k in range(P, -1, -1):
                rhs = w[k].copy()
                if k + 1 <= P:
                    rhs -= (k + 1) * M1 @ x[k + 1]
                if k + 2 <= P:
                    rhs -= (k + 1) * (k + 2) * data.abar @ x[k + 2]
                x[k] = np.linalg.solve(M0, rhs)
        terms += [(s, k, x[k]) for k in range(x.shape[0])]
    u = PhgExpansion(terms, f.remainder_order, f.weight_r, d)
    if terminal is None:
        return u
    basis = []
    for r, m in roots:
        for blocks in homogeneous_basis(data, r, m):
            basis.append(PhgExpansion([(r, k, blocks[k]) for k in range(m)], dim=d))
    rs = np.array([terminal])
    cols = [np.concatenate([h(rs)[0], h.rho_derivative()(rs)[0]]) for h in basis]
    target = -np.concatenate([u(rs)[0], u.rho_derivative()(rs)[0]])
    coef = np.linalg.solve(np.array(cols).T.astype(complex), target)
    for c, h in zip(coef, basis):
        if keep_above is None or h.leading_order > keep_above:
            u = u + PhgExpansion([(t.s, t.p, c * t.coeff) for t in h.terms], u.remainder_order, dim=d)
    return u


# ---------------------------------------------------------------------------
# iterative matching
# ---------------------------------------------------------------------------


@dataclass
class MatchHistory:
    exponents: list[list[complex]] = field(default_factory=list)
    levels: list[float] = field(default_factory=list)


def _negligible(e: PhgExpansion, scale: float) -> bool:
    return all(np.max(np.abs(t.coeff)) <= 1e-13 * scale for t in e.terms)


def expansion_match(
    op_split: OperatorSplit | tuple,
    f: PhgExpansion,
    delta0: float,
    target_order: float,
    *,
    gamma: float | None = None,
    history: MatchHistory | None = None,
    max_iter: int = 200,
) -> PhgExpansion:
    """Expansion of a solution of ``𝒫u = f`` up to ``O(ρ^target_order)``.

    Each pass solves the indicial problem for the residual terms below the
    current level, which then advances by the remainder gain ``γ``.
    """
    if isinstance(op_split, tuple):
        op_split = OperatorSplit(*op_split)
    step = op_split.gamma if gamma is None else gamma
    if step <= 0:
        raise ConfigurationError("step must be positive")
    d = op_split.data.dim
    f = f.truncate(target_order)
    scale = max([1.0] + [float(np.max(np.abs(t.coeff))) for t in f.terms])
    u = PhgExpansion.zero(d, target_order, f.weight_r)
    level = delta0
    for _ in range(max_iter):
        res = (f - op_split.apply(u)).below(target_order)
        if not res.terms or _negligible(res, scale):
            return u.truncate(target_order)
        level = max(level + step, res.leading_order + 1e-12)
        part = res.below(min(level, target_order))
        v = solve_indicial_ode(op_split.data, part)
        u = u + PhgExpansion(v.terms, target_order, u.weight_r, d)
        if history is not None:
            history.exponents.append(u.exponents)
            history.levels.append(level)
    raise ExpansionCapError(f"expansion matching did not terminate in {max_iter} passes")


# ---------------------------------------------------------------------------
# metric expansions and the Lichnerowicz series
# ---------------------------------------------------------------------------


@dataclass
class MetricExpansion:
    """Series data of a metric at one boundary point: the Laplacian split and
    the expansion of ``R[g] + n(n+1)``."""

    n: int
    laplacian: OperatorSplit
    scalar_deviation: PhgExpansion
    p_hat: tuple[float, ...]


def _rho_series(expr: sp.Expr, rho: sp.Symbol, order: int) -> list[float]:
    ser = sp.series(expr, rho, 0, order).removeO()
    ser = sp.expand(ser)
    if ser.has(sp.log) or any(not (e.is_Integer and e >= 0) for e in
                              [t.as_coeff_exponent(rho)[1] for t in sp.Add.make_args(ser)]):
        raise ConfigurationError("metric coefficients are not power series in rho")
    coeffs = [0.0] * order
    for t in sp.Add.make_args(ser):
        c, e = t.as_coeff_exponent(rho)
        if int(e) < order:
            coeffs[int(e)] += float(c)
    return coeffs


def _symbolic_scalar(gbar: sp.Matrix, syms) -> tuple[sp.Expr, sp.Expr, sp.Expr]:
    """``R[gbar]``, ``Δ_gbar ρ`` and ``|dρ|²_gbar`` symbolically."""
    N = len(syms)
    ginv = gbar.inv()
    G = [[[sum(ginv[l, k] * (sp.diff(gbar[k, i], syms[j]) + sp.diff(gbar[k, j], syms[i])
                             - sp.diff(gbar[i, j], syms[k])) for k in range(N)) / 2
           for j in range(N)] for i in range(N)] for l in range(N)]
    ric = sp.zeros(N, N)
    for b in range(N):
        for d_ in range(N):
            e = 0
            for a in range(N):
                e += sp.diff(G[a][d_][b], syms[a]) - sp.diff(G[a][a][b], syms[d_])
                for m in range(N):
                    e += G[a][a][m] * G[m][d_][b] - G[a][d_][m] * G[m][a][b]
            ric[b, d_] = e
    R = sum(ginv[i, j] * ric[i, j] for i in range(N) for j in range(N))
    lap = -sum(ginv[i, j] * G[N - 1][i][j] for i in range(N) for j in range(N))
    return R, lap, ginv[N - 1, N - 1]


def metric_expansion(metric: MetricField, p_hat: Sequence[float] | None = None, order: int = 4) -> MetricExpansion:
    """Power-series data of ``Δ_g`` and ``R[g]+n(n+1)`` from the closed form of ``gbar``.

    Only metrics whose compactification is a power series in ρ and does not
    depend on the boundary coordinates are supported; then θ-independent
    expansions are exact solutions of the frozen-θ problem.
    """
    if metric.symbolic is None:
        raise ConfigurationError(f"{metric.name}: no closed form available for series expansion")
    syms = metric.symbolic.syms
    M = metric.symbolic.matrix
    n = metric.n
    rho = syms[-1]
    if any(s in M.free_symbols for s in syms[:-1]):
        raise ConfigurationError(f"{metric.name}: series expansion needs a theta-independent metric")
    p_hat = tuple(float(x) for x in (np.zeros(n) if p_hat is None else np.atleast_1d(p_hat)))
    R_bar, lap_rho, grad2 = _symbolic_scalar(M, syms)
    ginv = M.inv()
    a_rr = ginv[n, n]
    b_r = -n * a_rr + rho * lap_rho
    scal = rho**2 * R_bar + 2 * n * rho * lap_rho - n * (n + 1) * grad2 + n * (n + 1)
    a_c = _rho_series(a_rr, rho, order)
    b_c = _rho_series(b_r, rho, order)
    r_c = _rho_series(scal, rho, order)
    data = BoundaryData(np.array([[a_c[0]]]), np.array([[b_c[0]]]), np.zeros((1, 1)))
    rem = tuple(
        RemainderTerm(k, 0, np.array([[a_c[k]]]), np.array([[b_c[k]]]), np.zeros((1, 1)))
        for k in range(1, order) if a_c[k] or b_c[k]
    )
    split = OperatorSplit(data, rem, series_order=order)
    scalar = PhgExpansion([(k, 0, [c]) for k, c in enumerate(r_c)], order)
    return MetricExpansion(n, split, scalar, p_hat)


def laplacian_split(metric: MetricField, c_shift: float = 0.0, p_hat=None, order: int = 4) -> OperatorSplit:
    """Split of ``Δ_g - c_shift`` into its indicial part and a power-series remainder."""
    return metric_expansion(metric, p_hat, order).laplacian.shifted(c_shift)


def _real_check(e: PhgExpansion, label: str) -> None:
    if any(t.s.imag != 0 for t in e.terms):
        raise ConfigurationError(f"{label}: complex exponents are not supported in the nonlinear expansion")


def lichnerowicz_expansion(
    g_exp: MetricExpansion,
    A_exp: PhgExpansion | None,
    B_exp: PhgExpansion | None,
    target_order: float,
    *,
    gamma: float | None = None,
    max_iter: int = 200,
) -> PhgExpansion:
    """Expansion of ``φ = 1 + u`` for the Lichnerowicz equation.

    ``u`` solves ``(Δ_g - (n+1))u = F(u)`` with

        F(u) = (n-1)/(4n)(R+n(n+1))(1+u) - A(1+u)^{-(3n+1)/(n-1)} - B(1+u)^{-(n+1)/(n-1)}
               + (n²-1)/4 [(1+u)^{(n+3)/(n-1)} - 1 - (n+3)/(n-1) u],

    which is expanded by binomial series and matched order by order.
    """
    n = g_exp.n
    if n < 2:
        raise ConfigurationError("the Lichnerowicz equation needs n >= 2")
    A_exp = PhgExpansion.zero() if A_exp is None else A_exp
    B_exp = PhgExpansion.zero() if B_exp is None else B_exp
    for lab, e in (("A", A_exp), ("B", B_exp), ("scalar curvature", g_exp.scalar_deviation)):
        _real_check(e, lab)
        if e.leading_order < 1 - 1e-12:
            raise ConfigurationError(f"{lab} must vanish at least to order 1 at the boundary")
    split = g_exp.laplacian.shifted(n + 1)
    target = min(target_order, split.series_order + 1, g_exp.scalar_deviation.remainder_order,
                 A_exp.remainder_order, B_exp.remainder_order)
    step = min(split.gamma, 1.0) if gamma is None else gamma
    alpha = (n + 3) / (n - 1)
    kA = -(3 * n + 1) / (n - 1)
    kB = -(n + 1) / (n - 1)
    r = g_exp.scalar_deviation.truncate(target)

    def F(u: PhgExpansion) -> PhgExpansion:
        one_u = PhgExpansion.polynomial([1.0], target) + u
        out = phg_mul(r, one_u, target).scale((n - 1) / (4 * n))
        if A_exp.terms:
            out = out - phg_mul(A_exp, binomial_series(u, kA, target), target)
        if B_exp.terms:
            out = out - phg_mul(B_exp, binomial_series(u, kB, target), target)
        if u.terms:
            nl = phg_power_series(u, lambda l: 0.0 if l < 2 else float(binom(alpha, l)), target)
            out = out + nl.scale((n * n - 1) / 4)
        return out.truncate(target)

    u = PhgExpansion.zero(1, target)
    level = 1.0
    scale = 1.0
    for _ in range(max_iter):
        res = (F(u) - split.apply(u)).below(target)
        if not res.terms or _negligible(res, scale):
            return (PhgExpansion.polynomial([1.0], target) + u).truncate(target)
        level = max(level + step, res.leading_order + 1e-12)
        v = solve_indicial_ode(split.data, res.below(min(level, target)))
        u = u + PhgExpansion(v.terms, target, dim=1)
    raise ExpansionCapError(f"Lichnerowicz expansion did not terminate in {max_iter} passes")


def expansion_from_triples(triples: Iterable[Sequence], remainder_order: float = math.inf) -> PhgExpansion:
    """Scalar expansion from ``(s, p, value)`` triples."""
    return PhgExpansion([(complex(s), int(p), [complex(v)]) for s, p, v in triples], remainder_order)
