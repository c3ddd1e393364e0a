"""Special functions and the distribution tails built on them.

The four primitives (erf, regularized lower incomplete gamma, regularized
incomplete beta, Owen's T) delegate to ``scipy.special``; everything that
produces a p-value in this package goes through the wrappers below so the
domain checks live in one place.
"""

import math

import numpy as np
from scipy import special as _sp

__all__ = [
    "DomainError",
    "erf",
    "gammainc_lower",
    "betainc",
    "owens_t",
    "eval_special",
    "normal_cdf",
    "normal_sf",
    "chi2_sf",
    "student_t_cdf",
    "student_t_sf",
    "student_t_two_sided",
    "f_sf",
]


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


def _check_positive(name, value):
    arr = np.asarray(value, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be > 0, got {value!r}")


def erf(x):
    return _sp.erf(x)


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma P(a, x)."""
    _check_positive("a", a)
    if np.any(np.asarray(x, dtype=float) < 0):
        raise DomainError(f"x must be >= 0, got {x!r}")
    return _sp.gammainc(a, x)


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    _check_positive("a", a)
    _check_positive("b", b)
    xa = np.asarray(x, dtype=float)
    if np.any((xa < 0) | (xa > 1)):
        raise DomainError(f"x must lie in [0, 1], got {x!r}")
    return _sp.betainc(a, b, x)


def owens_t(h, a):
    """Owen's T function T(h, a)."""
    return _sp.owens_t(h, a)


_DISPATCH = {
    "erf": erf,
    "gammainc": gammainc_lower,
    "gammainc_lower": gammainc_lower,
    "betainc": betainc,
    "owens_t": owens_t,
}


def eval_special(function, *args):
    """Evaluate a special function by name.

    >>> eval_special("erf", 0.0)
    0.0
    """
    try:
        fn = _DISPATCH[function]
    except KeyError:
        raise DomainError(f"unknown special function {function!r}") from None
    out = fn(*args)
    return float(out) if np.ndim(out) == 0 else out


def normal_cdf(z):
    return 0.5 * _sp.erfc(-np.asarray(z, dtype=float) / math.sqrt(2.0))


def normal_sf(z):
    return 0.5 * _sp.erfc(np.asarray(z, dtype=float) / math.sqrt(2.0))


def chi2_sf(x, df):
    """Upper tail of the chi-square distribution, 1 - P(df/2, x/2)."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    _check_positive("df", df)
    return _sp.gammaincc(0.5 * df, 0.5 * x)


def _t_tail(t, df):
    # P(T < -|t|) = I_{df/(df+t^2)}(df/2, 1/2) / 2
    t = np.asarray(t, dtype=float)
    if np.isinf(df):
        return normal_sf(np.abs(t))
    x = df / (df + t * t)
    return 0.5 * _sp.betainc(0.5 * df, 0.5, x)


def student_t_cdf(t, df):
    _check_positive("df", df)
    t = np.asarray(t, dtype=float)
    tail = _t_tail(t, df)
    return np.where(t < 0, tail, 1.0 - tail)


def student_t_sf(t, df):
    _check_positive("df", df)
    t = np.asarray(t, dtype=float)
    tail = _t_tail(t, df)
    return np.where(t > 0, tail, 1.0 - tail)


def student_t_two_sided(t, df):
    """Two-sided p-value P(|T| > |t|)."""
    _check_positive("df", df)
    return np.minimum(1.0, 2.0 * _t_tail(t, df))


def f_sf(f, dfn, dfd):
    """Upper tail of the F distribution."""
    _check_positive("dfn", dfn)
    _check_positive("dfd", dfd)
    f = np.maximum(np.asarray(f, dtype=float), 0.0)
    x = dfd / (dfd + dfn * f)
    return _sp.betainc(0.5 * dfd, 0.5 * dfn, x)
