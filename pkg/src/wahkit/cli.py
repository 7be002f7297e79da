"""Command-line front end.

Every run is described by a :class:`RunConfig`, built either from command-line
flags or from a JSON document (``wahkit --config run.json``).  Reports are JSON
with a top-level ``"schema": 1``; tabular output is CSV with a header row and
17 significant digits.  Failures map to exit codes through the ``exit_code``
attribute of the error hierarchy (2 configuration, 3 numerical, 4 barrier,
5 expansion cap).
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import sympy as sp

from . import curvature as cv
from . import htensor as ht
from . import indicial as ind
from . import mollify as mo
from . import norms as nm
from . import phg
from . import yamabe as ym
from .errors import CatalogError, ConfigurationError, WahkitError
from .geometry import (
    CATALOG_PARAMS,
    ScalarField,
    boundary_mobius_param,
    catalog_metric,
    coordinate_symbols,
    make_collar_chart,
    make_points,
    parse_expression,
)

SCHEMA = 1

FIELD_CATALOG: dict[str, tuple[str, float | None]] = {
    "rho_sin_log": ("rho*sin(log(rho))", 1.0),
    "oscillating": ("rho**(1/2)*sin((1 + cos(theta)/2)*log(rho))", 0.5),
    "log_power": ("rho**(3/2)*log(rho)", 1.5),
    "rho_squared": ("rho**2", 2.0),
    "lipschitz": ("rho*(1 + cos(theta)/2)", 1.0),
}

COMMANDS: dict[str, dict[str, Any]] = {
    "curvature-report": {
        "metric": "hyperbolic",
        "chart": {"n": 2, "rho_star": 1.0, "points": 128, "t_max": 12.0},
        "options": {"theta": 0.7, "field": None, "slope_lo": 1e-5, "slope_hi": 1e-1},
        "tolerances": {"wah": 1e-4, "oracle_min_rho": 1e-6},
    },
    "classify": {
        "metric": None,
        "chart": {"n": 1, "rho_star": 1.0, "points": 128, "t_max": 12.0},
        "options": {"field": "rho_sin_log", "exponent": None, "alpha": 0.5, "deltas": [0.0], "sobolev_p": 2.0},
        "tolerances": {},
    },
    "regularize": {
        "metric": None,
        "chart": {"n": 1, "rho_star": 0.1, "points": 96, "t_max": 18.5},
        "options": {"field": "rho_sin_log", "m": 1, "width": 0.5, "theta": 0.3},
        "tolerances": {"quadrature": 1e-8},
    },
    "htensor-check": {
        "metric": "hyperbolic",
        "chart": {"n": 2, "rho_star": 1.0, "points": 16, "t_max": 8.0},
        "options": {"conformal_factor": "1 + rho*cos(theta)/2 + rho**2/4", "scale": 2.0, "obstruction": True},
        "tolerances": {"vanish": 1e-6, "fast_slope": 1.95},
    },
    "indicial": {
        "metric": "hyperbolic",
        "chart": {"n": 2, "rho_star": 1.0, "points": 128, "t_max": 12.0},
        "options": {"operator": "laplacian", "c_shift": 0.0, "weight": None, "p": None, "theta": 0.0},
        "tolerances": {"cluster": ind.CLUSTER_TOL},
    },
    "phg-solve": {
        "metric": "hyperbolic",
        "chart": {"n": 2, "rho_star": 1.0, "points": 128, "t_max": 12.0},
        "options": {"operator": "laplacian", "c_shift": 0.0, "sources": [], "target_order": None},
        "tolerances": {},
    },
    "yamabe": {
        "metric": None,
        "chart": {"n": 2, "rho_star": 1.0, "points": 1024, "t_max": 20.0},
        "options": {"A": None, "B": None, "gauge": None, "force_negative_gauge": False, "polish": True,
                    "expansion_order": 3.0},
        "tolerances": {"tol": 1e-10},
    },
}

TOP_KEYS = ("command", "metric", "chart", "tolerances", "output", "options")
OUTPUT_KEYS = ("json", "csv")
METRIC_KEYS = ("name", "params")
OPERATORS = ("laplacian", "vector-laplacian")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    metric: dict | None = None
    chart: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in TOP_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_keys(doc: Mapping, valid: Sequence[str], where: str) -> None:
    extra = sorted(set(doc) - set(valid))
    if extra:
        raise ConfigurationError(f"unknown {where} keys {extra}; valid keys: {sorted(valid)}")


def _resolve_field(text: str) -> tuple[str, float | None]:
    if text in FIELD_CATALOG:
        return FIELD_CATALOG[text]
    return text, None


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.metric is not None:
        name = cfg.metric.get("name")
        if name not in CATALOG_PARAMS:
            raise CatalogError(f"unknown metric {name!r}; catalog: {sorted(CATALOG_PARAMS)}")
        _check_keys(cfg.metric["params"], list(CATALOG_PARAMS[name]), f"parameter for {name}")
    n = cfg.chart["n"]
    if int(n) != n or n < 1:
        raise ConfigurationError(f"n must be a positive integer, got {n}")
    for key in ("field", "A", "B", "conformal_factor"):
        val = cfg.options.get(key)
        if isinstance(val, str):
            parse_expression(_resolve_field(val)[0] if key == "field" else val, int(n))
    if cfg.command == "yamabe" and cfg.metric is None:
        raise ConfigurationError("yamabe needs a metric")
    if cfg.command in ("indicial", "phg-solve") and cfg.options["operator"] not in OPERATORS:
        raise ConfigurationError(f"unknown operator {cfg.options['operator']!r}; valid: {list(OPERATORS)}")
    if cfg.command == "phg-solve":
        cfg.options["sources"] = [_triple(s) for s in cfg.options["sources"]]
        if not cfg.options["sources"]:
            raise ConfigurationError("phg-solve needs at least one source triple")
    if cfg.command == "classify":
        cfg.options["deltas"] = [float(d) for d in cfg.options["deltas"]]
    return cfg


def _triple(item) -> list:
    if isinstance(item, str):
        item = item.split(",")
    if len(item) != 3:
        raise ConfigurationError(f"source must be 's,p,value', got {item!r}")
    s, p, v = item
    try:
        p_int = int(p)
        out = [float(s), p_int, float(v)]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"source {item!r}: {exc}") from exc
    if p_int < 0 or p_int != float(p):
        raise ConfigurationError(f"log power must be a nonnegative integer in {item!r}")
    return out


def config_from_mapping(doc: Mapping[str, Any]) -> RunConfig:
    """Fill defaults into a (possibly partial) configuration document and validate it."""
    _check_keys(doc, TOP_KEYS, "top-level")
    command = doc.get("command")
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}; valid commands: {sorted(COMMANDS)}")
    spec = COMMANDS[command]
    metric = doc.get("metric", spec["metric"])
    if isinstance(metric, str):
        metric = {"name": metric}
    if metric is not None:
        _check_keys(metric, METRIC_KEYS, "metric")
        metric = {"name": metric.get("name"), "params": dict(metric.get("params") or {})}
    chart_doc = dict(doc.get("chart") or {})
    _check_keys(chart_doc, list(spec["chart"]), "chart")
    chart = {**spec["chart"], **chart_doc}
    tol_doc = dict(doc.get("tolerances") or {})
    _check_keys(tol_doc, list(spec["tolerances"]), f"{command} tolerance")
    tolerances = {**spec["tolerances"], **tol_doc}
    out_doc = dict(doc.get("output") or {})
    _check_keys(out_doc, OUTPUT_KEYS, "output")
    output = {k: out_doc.get(k) for k in OUTPUT_KEYS}
    opt_doc = dict(doc.get("options") or {})
    _check_keys(opt_doc, list(spec["options"]), f"{command} option")
    options = {**copy.deepcopy(spec["options"]), **opt_doc}
    return _validate(RunConfig(command, metric, _cast_chart(chart), tolerances, output, options))


def _cast_chart(chart: dict) -> dict:
    return {"n": int(chart["n"]), "rho_star": float(chart["rho_star"]), "points": int(chart["points"]),
            "t_max": float(chart["t_max"])}


def _metric_arg(value: str | None, params: str | None) -> dict | None:
    if value is None:
        return None
    if value.lstrip().startswith("{") or value.endswith(".json"):
        text = value if value.lstrip().startswith("{") else Path(value).read_text()
        doc = json.loads(text)
        _check_keys(doc, ("name", "params", "chart"), "metric document")
        return {"name": doc.get("name"), "params": doc.get("params", {}), "_chart": doc.get("chart", {})}
    try:
        p = json.loads(params) if params else {}
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"--params is not valid JSON: {exc}") from exc
    if not isinstance(p, dict):
        raise ConfigurationError("--params must be a JSON object")
    return {"name": value, "params": p}


def _kv_pairs(items: Sequence[str] | None, label: str) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"{label} entries look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wahkit", description="Weakly asymptotically hyperbolic metric toolkit.")
    parser.add_argument("--config", help="run from a JSON configuration document")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p: argparse.ArgumentParser, metric_required: bool = False) -> None:
        p.add_argument("--metric", required=metric_required, help="catalog name or metric JSON document")
        p.add_argument("--params", help="catalog parameters as a JSON object")
        p.add_argument("--n", type=int, help="boundary dimension")
        p.add_argument("--rho-star", type=float, dest="rho_star", help="largest rho of the sample ladder")
        p.add_argument("--t-max", type=float, dest="t_max", help="ladder reaches rho = exp(-t_max)")
        p.add_argument("--tolerance", action="append", metavar="KEY=VALUE", help="override a tolerance")
        p.add_argument("--json", dest="json_out", help="write the JSON report here instead of stdout")
        p.add_argument("--csv", dest="csv_out", help="write the CSV table here")
        p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")

    p = sub.add_parser("curvature-report", help="curvature deviations along a rho ladder")
    common(p)
    p.add_argument("--points", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--field", help="also report the Taylor defect of this field")

    p = sub.add_parser("classify", help="regularity classes of a field")
    common(p)
    p.add_argument("--field", help=f"expression or one of {sorted(FIELD_CATALOG)}")
    p.add_argument("--exponent", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--deltas", type=float, nargs="+")
    p.add_argument("--sobolev-p", type=float, dest="sobolev_p")

    p = sub.add_parser("regularize", help="regularize a field and tabulate the defect")
    common(p)
    p.add_argument("--points", type=int)
    p.add_argument("--field")
    p.add_argument("--m", type=int)
    p.add_argument("--width", type=float)
    p.add_argument("--theta", type=float)

    p = sub.add_parser("htensor-check", help="invariance residuals of the obstruction tensor")
    common(p)
    p.add_argument("--points", type=int)
    p.add_argument("--conformal-factor", dest="conformal_factor")
    p.add_argument("--scale", type=float)
    p.add_argument("--no-obstruction", dest="obstruction", action="store_false", default=None)

    p = sub.add_parser("indicial", help="characteristic exponents and the weight window")
    common(p)
    p.add_argument("--operator", choices=OPERATORS)
    p.add_argument("--c-shift", type=float, dest="c_shift")
    p.add_argument("--weight", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--theta", type=float)

    p = sub.add_parser("phg-solve", help="polyhomogeneous solution for a finite source")
    common(p)
    p.add_argument("--operator", choices=OPERATORS)
    p.add_argument("--c-shift", type=float, dest="c_shift")
    p.add_argument("--source", action="append", dest="sources", metavar="S,P,VALUE")
    p.add_argument("--target-order", type=float, dest="target_order")

    p = sub.add_parser("yamabe", help="constant scalar curvature conformal factor")
    common(p, metric_required=True)
    p.add_argument("--points", type=int)
    p.add_argument("--A", dest="A")
    p.add_argument("--B", dest="B")
    p.add_argument("--tol", type=float)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gauge", dest="gauge", action="store_true", default=None)
    g.add_argument("--no-gauge", dest="gauge", action="store_false")
    p.add_argument("--force-negative-gauge", dest="force_negative_gauge", action="store_true", default=None)
    p.add_argument("--no-polish", dest="polish", action="store_false", default=None)
    return parser


_NON_OPTIONS = {"command", "config", "metric", "params", "n", "rho_star", "t_max", "points", "tolerance",
                "json_out", "csv_out", "dump_config", "tol"}


def _namespace_to_doc(ns: argparse.Namespace) -> dict:
    metric = _metric_arg(ns.metric, ns.params)
    chart: dict[str, Any] = {}
    if metric is not None and "_chart" in metric:
        chart.update(metric.pop("_chart"))
    for key in ("n", "rho_star", "t_max", "points"):
        val = getattr(ns, key, None)
        if val is not None:
            chart[key] = val
    tolerances = _kv_pairs(ns.tolerance, "--tolerance")
    if getattr(ns, "tol", None) is not None:
        tolerances["tol"] = ns.tol
    options = {k: v for k, v in vars(ns).items() if k not in _NON_OPTIONS and v is not None}
    doc: dict[str, Any] = {"command": ns.command, "chart": chart, "tolerances": tolerances,
                           "output": {"json": ns.json_out, "csv": ns.csv_out}, "options": options}
    if metric is not None:
        doc["metric"] = metric
    return doc


def parse_config(source: Sequence[str] | Mapping[str, Any] | str | Path) -> RunConfig:
    """Configuration from command-line arguments, a mapping, or a JSON file path."""
    if isinstance(source, Mapping):
        return config_from_mapping(source)
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read configuration {source}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("configuration document must be a JSON object")
        return config_from_mapping(doc)
    parser = _build_parser()
    ns = parser.parse_args(list(source))
    if ns.config is not None:
        if ns.command is not None:
            parser.error("--config cannot be combined with a subcommand")
        return parse_config(ns.config)
    if ns.command is None:
        parser.error("a subcommand or --config is required")
    cfg = config_from_mapping(_namespace_to_doc(ns))
    if ns.dump_config:
        cfg.options["_dump"] = True
    return cfg


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _plain(x):
    if isinstance(x, Mapping):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        return {"re": _plain(x.real), "im": _plain(x.imag)}
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps_report(report: Mapping[str, Any]) -> str:
    return json.dumps(_plain({"schema": SCHEMA, **report}), indent=2, sort_keys=True) + "\n"


def format_csv(header: Sequence[str], rows: np.ndarray) -> str:
    lines = [",".join(header)]
    for row in np.atleast_2d(rows):
        lines.append(",".join(f"{float(v):.16e}" for v in row))
    return "\n".join(lines) + "\n"


@dataclass
class Artifacts:
    report: dict
    header: tuple[str, ...] = ()
    table: np.ndarray | None = None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _chart(cfg: RunConfig):
    c = _cast_chart(cfg.chart)
    return make_collar_chart(c["n"], c["rho_star"], points=c["points"], t_max=c["t_max"])


def _metric(cfg: RunConfig, chart=None):
    n = int(cfg.chart["n"])
    if chart is not None and chart.rho_star < 1.0:
        chart = None
    return catalog_metric(cfg.metric["name"], cfg.metric["params"], n=n, chart=chart)


def _theta(cfg: RunConfig) -> np.ndarray:
    return np.full(int(cfg.chart["n"]), float(cfg.options.get("theta", 0.0)))


def _curvature_report(cfg: RunConfig) -> Artifacts:
    chart = _chart(cfg)
    metric = _metric(cfg, chart)
    opts, tols = cfg.options, cfg.tolerances
    pts = chart.points(_theta(cfg))
    rep = cv.curvature_report(metric, pts)
    table = np.stack([rep.rho, rep.dev_riem, rep.dev_ric, rep.dev_scalar, rep.little_f], axis=1)
    slopes = cv.deviation_slopes(metric, opts["slope_lo"], opts["slope_hi"])
    wah = cv.wah_equivalence_report(metric, tols["wah"])
    sel = pts[pts[:, -1] >= tols["oracle_min_rho"]]
    sel = sel[np.linspace(0, sel.shape[0] - 1, min(64, sel.shape[0])).astype(int)]
    direct = cv.riemann_direct(metric, sel)
    ident = cv.riem_via_identity(metric, sel)
    oracle = float(np.max(np.abs(direct - ident)) / max(float(np.max(np.abs(direct))), 1e-300))
    parts = cv.riem_deviation_decomposition(metric, sel)
    dev = ident + cv.identity22(metric.n + 1)
    decomposition = float(np.max(np.abs(sum(parts) - dev)))
    report = {
        "command": cfg.command,
        "metric": cfg.metric,
        "slopes": {k: v.as_dict() for k, v in slopes.items()},
        "wah": {"flags": list(wah.flags), "consistent": wah.consistent, "witnesses": wah.witnesses},
        "oracle_relative_error": oracle,
        "decomposition_residual": decomposition,
        "decomposition_parts": [float(np.max(np.abs(p[-1]))) for p in parts],
    }
    if opts["field"] is not None:
        expr, _ = _resolve_field(opts["field"])
        u = ScalarField(expr, metric.n)
        rho = np.geomspace(opts["slope_lo"], opts["slope_hi"], 120)
        tpts = make_points(_theta(cfg), rho)
        defect = cv.taylor_defect(u, metric, tpts)
        fit = cv.decay_exponent(rho, defect, envelope="auto", zero_tol=1e-14)
        report["taylor_defect"] = {"field": expr, **fit.as_dict()}
    return Artifacts(report, ("rho", "dev_riem", "dev_ric", "dev_scalar", "little_f"), table)


def boundary_scaling(expr: str, chart, radii: Sequence[float] = (2.0**-2, 2.0**-4, 2.0**-6, 2.0**-8, 2.0**-10,
                                                                   2.0**-12, 2.0**-14, 2.0**-16, 2.0**-18,
                                                                   2.0**-20, 2.0**-22, 2.0**-24),
                     samples: int = 9) -> dict:
    """``sup_Y |u ∘ Ψ_r|`` over boundary rectangles ``Ψ_r(Y)`` and its decay rate in ``r``."""
    n = chart.n
    u = ScalarField(expr, n)
    x = np.linspace(-1.0, 1.0, samples)
    y = np.geomspace(1e-3, 1.0, samples)
    mesh = np.meshgrid(*([x] * n), y, indexing="ij")
    Y = np.stack([m.ravel() for m in mesh], axis=-1)
    rs, sups = [], []
    for r in radii:
        if not r < chart.rho_star:
            continue
        handle = boundary_mobius_param(chart, np.zeros(n), r)
        rs.append(r)
        sups.append(float(np.max(np.abs(u(handle(Y))))))
    fit = cv.decay_exponent(np.array(rs), np.array(sups), exclude_top_decade=False, zero_tol=1e-300)
    return {"r": rs, "sup": sups, **fit.as_dict()}


def _classify(cfg: RunConfig) -> Artifacts:
    opts = cfg.options
    n = int(cfg.chart["n"])
    expr, exp0 = _resolve_field(opts["field"])
    exponent = opts["exponent"] if opts["exponent"] is not None else exp0
    rep = nm.classify_regularity(expr, n, deltas=tuple(opts["deltas"]), exponent=exponent, alpha=opts["alpha"],
                                 sobolev_p=opts["sobolev_p"])
    report = {"command": cfg.command, "field": expr, "n": n, "exponent": exponent, **rep.as_dict(),
              "boundary_scaling": boundary_scaling(expr, _chart(cfg))}
    return Artifacts(report)


def _regularize(cfg: RunConfig) -> Artifacts:
    opts, tols = cfg.options, cfg.tolerances
    chart = _chart(cfg)
    n = chart.n
    expr, _ = _resolve_field(opts["field"])
    tau = ScalarField(expr, n)
    psi = mo.make_kernel(opts["width"], n)
    reg = mo.regularize(tau, int(opts["m"]), psi)
    pts = chart.points(_theta(cfg))
    rho = pts[:, -1]
    raw = tau(pts)
    smooth = reg(pts)
    defect = np.abs(raw - smooth)
    fit = cv.decay_exponent(rho, defect, exclude_top_decade=False, envelope="auto", zero_tol=1e-14)
    probe = pts[:: max(1, pts.shape[0] // 8)]
    unit = mo.convolve(1.0, psi, probe, rtol=tols["quadrature"])
    commutation = mo.convolve_commutation_check(tau, psi, probe)
    corners = np.array([[*([lo] * n), 1 - psi.width] for lo in (-psi.width,)]
                       + [[*([psi.width] * n), 1 + psi.width]])
    reach = mo.group_mul(probe[:1], corners)
    report = {
        "command": cfg.command,
        "field": expr,
        "m": int(opts["m"]),
        "kernel": {"width": psi.width, "normalization": mo.kernel_normalization(psi)},
        "unit_error": float(np.max(np.abs(unit - 1.0))),
        "commutation_residual": float(np.max(commutation)),
        "support_rho": [float(reach[:, -1].min()), float(reach[:, -1].max())],
        "defect": fit.as_dict(),
    }
    return Artifacts(report, ("rho", "tau", "tau_tilde", "defect"), np.stack([rho, raw, smooth, defect], axis=1))


def _htensor_check(cfg: RunConfig) -> Artifacts:
    opts, tols = cfg.options, cfg.tolerances
    chart = _chart(cfg)
    metric = _metric(cfg, chart)
    n = metric.n
    omega = ht.defining_function(n)
    theta = ScalarField(opts["conformal_factor"], n)
    pts = np.concatenate([chart.points(th) for th in chart.boundary_points()[:: max(1, len(chart.boundary_points()) // 4)]])
    if np.any(theta(pts) <= 0):
        raise ConfigurationError("the conformal factor must be positive on the sample points")
    suite = ht.h_invariance_suite(metric, omega, theta, float(opts["scale"]), pts)
    H = ht.h_tensor(metric, omega, pts)
    Hdef = ht.h_tensor_definitional(metric, omega, pts)
    scale = np.maximum(ht.h_term_scale(metric, omega, pts), 1e-300)
    A1 = ht.a_coeff(metric, omega, pts)
    A2 = ht.a_coeff_divergence(metric, omega, pts)
    report = {
        "command": cfg.command,
        "metric": cfg.metric,
        "conformal_factor": opts["conformal_factor"],
        "scale": float(opts["scale"]),
        "residuals": suite,
        "definitional_agreement": float(np.max(np.abs(H - Hdef).max(axis=(1, 2)) / scale)),
        "a_coeff_agreement": float(np.max(np.abs(A1 - A2)) / max(1.0, float(np.max(np.abs(A1))))),
        "h_boundary": ht.h_boundary_norm(metric),
    }
    if opts["obstruction"]:
        try:
            obs = ht.boundary_obstruction_check(metric, vanish_tol=tols["vanish"], fast_slope=tols["fast_slope"])
            report["obstruction"] = obs.as_dict()
        except WahkitError as exc:
            report["obstruction"] = {"skipped": str(exc)}
    return Artifacts(report)


def _operator(cfg: RunConfig):
    metric = _metric(cfg)
    c = float(cfg.options["c_shift"])
    if cfg.options["operator"] == "laplacian":
        return metric, ind.laplacian_ud(metric, c)
    return metric, ind.vector_laplacian_ud(metric, c)


def _indicial(cfg: RunConfig) -> Artifacts:
    opts = cfg.options
    _, op = _operator(cfg)
    p_hat = _theta(cfg)
    exps = ind.characteristic_exponents(op, p_hat, tol=cfg.tolerances["cluster"])
    data = ind.IndicialData(tuple(exps), op.n, op.weight_r)
    window = ind.fredholm_window(data, opts["p"])
    checks = []
    for s, _k in exps:
        sv = np.linalg.svd(ind.indicial_map(op, s, p_hat), compute_uv=False)
        checks.append(float(sv[-1] / max(sv[0], 1.0)))
    report = {
        "command": cfg.command,
        "operator": opts["operator"],
        "c_shift": float(opts["c_shift"]),
        "n": op.n,
        **data.as_dict(),
        "radius": ind.indicial_radius(data),
        "window": window.as_dict(),
        "singularity_check": max(checks, default=0.0),
    }
    if opts["weight"] is not None:
        report["weight"] = float(opts["weight"])
        report["weight_admissible"] = float(opts["weight"]) in window
    return Artifacts(report)


def _phg_solve(cfg: RunConfig) -> Artifacts:
    opts = cfg.options
    if opts["operator"] != "laplacian":
        metric, op = _operator(cfg)
        data = op.boundary_trace(_theta(cfg))
        split = phg.OperatorSplit(data)
    else:
        metric = _metric(cfg)
        split = phg.laplacian_split(metric, float(opts["c_shift"]))
    f = phg.expansion_from_triples(opts["sources"])
    target = opts["target_order"]
    if target is None:
        target = max(s for s, _, _ in opts["sources"]) + 1.0
    u = phg.expansion_match(split, f, min(s for s, _, _ in opts["sources"]) - 1.0, float(target))
    indicial_part = phg.solve_indicial_ode(split.data, f.below(float(target)))
    residual = (phg.apply_indicial(split.data, indicial_part) - f.below(float(target))).below(float(target))
    full = (split.apply(u) - f).below(float(target))
    report = {
        "command": cfg.command,
        "operator": opts["operator"],
        "c_shift": float(opts["c_shift"]),
        "target_order": float(target),
        "expansion": u.as_records(),
        "indicial_solution": indicial_part.as_records(),
        "indicial_residual": max([float(np.max(np.abs(t.coeff))) for t in residual.terms], default=0.0),
        "residual": max([float(np.max(np.abs(t.coeff))) for t in full.terms], default=0.0),
        "exponents": [{"re": s.real, "im": s.imag, "mult": k}
                      for s, k in ind.characteristic_exponents(split.data)],
    }
    return Artifacts(report)


def series_of(expr: str | None, n: int, order: float) -> phg.PhgExpansion | None:
    """Power series in ``ρ`` of a θ-independent expression, as an expansion up to ``O(ρ^order)``."""
    if expr is None:
        return None
    e = parse_expression(expr, n)
    rho = coordinate_symbols(n)[-1]
    if e.free_symbols - {rho}:
        raise ConfigurationError(f"{expr!r} depends on the boundary coordinates")
    k = int(math.ceil(order))
    ser = sp.expand(sp.series(e, rho, 0, k).removeO())
    triples = []
    for term in sp.Add.make_args(ser):
        c, ex = term.as_coeff_exponent(rho)
        if term.has(sp.log) or not ex.is_number:
            raise ConfigurationError(f"{expr!r} is not a power series in rho")
        if c != 0:
            triples.append((float(ex), 0, float(c)))
    return phg.expansion_from_triples(triples, order)


def _yamabe(cfg: RunConfig) -> Artifacts:
    opts, tols = cfg.options, cfg.tolerances
    c = _cast_chart(cfg.chart)
    metric = _metric(cfg)
    n = metric.n
    grid = ym.make_grid(n, points=c["points"], t_max=c["t_max"], rho_hi=c["rho_star"])
    A = ScalarField(opts["A"], n) if opts["A"] is not None else None
    B = ScalarField(opts["B"], n) if opts["B"] is not None else None
    if A is not None or B is not None or opts["force_negative_gauge"]:
        res = ym.solve_lichnerowicz(metric, A, B, grid=grid, tol=tols["tol"], polish=opts["polish"],
                                    force_gauge=bool(opts["force_negative_gauge"]))
    else:
        res = ym.solve_yamabe(metric, grid=grid, tol=tols["tol"], gauge=opts["gauge"], polish=opts["polish"])
    rho = grid.rho
    u = res.phi - 1.0
    conf = metric.conformal(res.field().power(4 / (n - 1)))
    scal = cv.scalar_via_identity(conf, grid.points(np.zeros(n) + 0.3))
    # R[φ^{4/(n-1)}g] = -n(n+1) + 4n/(n-1) (A φ^{-4(n+1)/(n-1)} + B φ^{-2(n+2)/(n-1)})
    expected = -n * (n + 1) + 4 * n / (n - 1) * (ym._on_grid(A, grid, "A") * res.phi ** (-4 * (n + 1) / (n - 1))
                                                + ym._on_grid(B, grid, "B") * res.phi ** (-2 * (n + 2) / (n - 1)))
    residual = np.abs(scal - expected)
    window = (rho >= 1e-2) & (rho <= 1.0)
    report = {
        "command": cfg.command,
        "metric": cfg.metric,
        **res.state.report(),
        "curvature_residual": float(np.max(residual[window])),
        "min_phi": float(np.min(res.phi)),
        "gauge_fixed": res.gauge is not None and not res.gauge.trivial,
        "negative_gauge_trivial": res.psi.trivial,
        "monotone_steps": len(res.state.iterates) - 1,
    }
    if np.any(np.abs(u) > 0):
        report["decay"] = res.decay().as_dict()
    try:
        g_exp = phg.metric_expansion(metric)
        order = float(opts["expansion_order"])
        exp = phg.lichnerowicz_expansion(g_exp, series_of(opts["A"], n, order), series_of(opts["B"], n, order), order)
        report["expansion"] = exp.as_records()
    except WahkitError as exc:
        report["expansion"] = {"skipped": str(exc)}
    return Artifacts(report, ("rho", "u", "residual"), np.stack([rho, u, residual], axis=1))


HANDLERS: dict[str, Callable[[RunConfig], Artifacts]] = {
    "curvature-report": _curvature_report,
    "classify": _classify,
    "regularize": _regularize,
    "htensor-check": _htensor_check,
    "indicial": _indicial,
    "phg-solve": _phg_solve,
    "yamabe": _yamabe,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def thread_cap() -> int | None:
    raw = os.environ.get("WAHKIT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        val = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"WAHKIT_THREADS must be a positive integer, got {raw!r}") from exc
    if val < 1:
        raise ConfigurationError(f"WAHKIT_THREADS must be a positive integer, got {raw!r}")
    return val


def execute(cfg: RunConfig) -> Artifacts:
    """Run a validated configuration and return its report and table."""
    thread_cap()
    return HANDLERS[cfg.command](cfg)


def run(cfg: RunConfig, stdout=None) -> int:
    """Execute ``cfg`` and write its artifacts; returns the exit status."""
    stdout = stdout or sys.stdout
    art = execute(cfg)
    text = dumps_report(art.report)
    if cfg.output.get("json"):
        Path(cfg.output["json"]).write_text(text)
    else:
        stdout.write(text)
    if cfg.output.get("csv"):
        if art.table is None:
            raise ConfigurationError(f"{cfg.command} produces no table")
        Path(cfg.output["csv"]).write_text(format_csv(art.header, art.table))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
        if cfg.options.pop("_dump", False):
            sys.stdout.write(cfg.to_json() + "\n")
            return 0
        return run(cfg)
    except SystemExit as exc:
        return int(exc.code or 0)
    except WahkitError as exc:
        print(f"wahkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
