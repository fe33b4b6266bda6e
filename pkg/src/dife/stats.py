"""Paired t-test with an in-repo Student-t CDF.

The CDF runs through the regularized incomplete beta function, evaluated
with a modified Lentz continued fraction; documented precision 1e-10.
"""

from __future__ import annotations

import math
import warnings

__all__ = ["paired_t_test", "student_t_sf", "incomplete_beta"]

_BETA_EPS = 1e-15
_BETA_MAX_ITER = 500


def _log_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _beta_cf(a, b, x):
    """Continued fraction for the incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def incomplete_beta(a, b, x):
    """Regularized I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(b * math.log1p(-x) + a * math.log(x) - _log_beta(b, a)) * _beta_cf(b, a, 1.0 - x) / b


def student_t_sf(t, dof):
    """Two-sided tail probability P(|T| >= t) for Student-t with dof df."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return incomplete_beta(dof / 2.0, 0.5, x)


def paired_t_test(a, b):
    """(t, p) for paired samples; two-sided p via the Student-t CDF."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) != len(b):
        raise ValueError(f"paired samples must have equal length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    d = [x - y for x, y in zip(a, b)]
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            warnings.warn("paired_t_test: all differences are zero; degenerate (t=0, p=1)")
            return 0.0, 1.0
        warnings.warn("paired_t_test: constant nonzero difference; degenerate (t=inf, p=0)")
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    return t, student_t_sf(t, n - 1)
