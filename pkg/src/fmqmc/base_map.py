"""Logistic base map between the unit cube and R^d.

``logit_forward`` is G = F^{-1} applied componentwise, with F the standard
logistic CDF.  Inputs closer than ``BOUNDARY_MARGIN`` to 0 or 1 are rejected;
clamping is the caller's decision.
"""

from __future__ import annotations

import numpy as np

BOUNDARY_MARGIN = 2.0**-32
_TAIL = 36.0


class BoundaryInputError(ValueError):
    """A unit-cube coordinate is too close to 0 or 1 to be mapped."""


def check_interior(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any(~np.isfinite(u)) or np.any(u < BOUNDARY_MARGIN) or np.any(u > 1.0 - BOUNDARY_MARGIN):
        raise BoundaryInputError(f"inputs must lie in [{BOUNDARY_MARGIN!r}, 1 - {BOUNDARY_MARGIN!r}]")
    return u


def logit_forward(u):
    """G(u) = log(u / (1 - u)), componentwise."""
    u = check_interior(u)
    return np.log(u) - np.log1p(-u)


def logistic_cdf(x):
    """F(x) = 1 / (1 + exp(-x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logistic_sf(x):
    """1 - F(x), evaluated as F(-x) to keep precision in the right tail."""
    return logistic_cdf(-np.asarray(x, dtype=np.float64))


def _log1pexp_neg(a):
    # log(1 + exp(-a)) for a >= 0; beyond _TAIL the series term is exact to double precision
    return np.where(a > _TAIL, np.exp(-a), np.log1p(np.exp(-a)))


def logistic_logpdf(x):
    """Log density of independent standard logistic coordinates, summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    return np.sum(-a - 2.0 * _log1pexp_neg(a), axis=-1)


def log_abs_det_logit(u):
    """log|det dG/du| = -sum_j log(u_j (1 - u_j))."""
    u = check_interior(u)
    return -np.sum(np.log(u) + np.log1p(-u), axis=-1)


def logit_derivative(u, k: int):
    """First or second derivative of the scalar logit."""
    u = np.asarray(u, dtype=np.float64)
    w = u * (1.0 - u)
    if k == 1:
        return 1.0 / w
    if k == 2:
        return (2.0 * u - 1.0) / (w * w)
    raise ValueError(f"unsupported derivative order {k}; expected 1 or 2")
