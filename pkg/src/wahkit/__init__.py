"""Numerical toolkit for weakly asymptotically hyperbolic metrics.

Closed-form conformally compact metrics, their curvature, weighted function
space diagnostics, regularization by group convolution, the conformally
invariant obstruction tensor, indicial roots of uniformly degenerate
operators, polyhomogeneous expansions and a constructive Yamabe solver.
"""
from __future__ import annotations

import os as _os

# BLAS pools are sized when numpy is first imported, so the cap is applied here.
_cap = _os.environ.get("WAHKIT_THREADS")
if _cap and _cap.strip().isdigit() and int(_cap) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap.strip())

from .errors import (  # noqa: E402
    AccuracyWarning,
    BarrierError,
    ConfigurationError,
    ExpansionCapError,
    NumericalError,
    WahkitError,
)
from .geometry import ScalarField, catalog_metric, make_collar_chart, make_points  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AccuracyWarning",
    "BarrierError",
    "ConfigurationError",
    "ExpansionCapError",
    "NumericalError",
    "ScalarField",
    "WahkitError",
    "catalog_metric",
    "make_collar_chart",
    "make_points",
]
