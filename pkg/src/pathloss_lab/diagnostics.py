"""Coefficient t-tests, Type II ANOVA and residual diagnostics."""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .regression import ols_fit
from .special import chi2_sf, f_sf, student_t_two_sided


def coefficient_t_tests(fit):
    """Per-coefficient ``(t, p)`` with two-sided p-values on ``df_resid`` dof."""
    out = {}
    for label, beta, se in zip(fit.labels, fit.coefficients, fit.standard_errors):
        if se == 0:
            warnings.warn(f"zero standard error for {label}; t reported as infinite", RuntimeWarning)
            t = math.copysign(math.inf, beta) if beta != 0 else math.inf
            out[label] = (t, 0.0)
            continue
        t = float(beta / se)
        out[label] = (t, float(student_t_two_sided(t, fit.df_resid)))
    return out


@dataclass
class AnovaRow:
    label: str
    columns: tuple
    t_value: float
    F_statistic: float
    df_num: int
    df_den: int
    p_value_t: float
    p_value_F: float
    sum_sq: float

    def to_json(self):
        return {
            "label": self.label,
            "columns": list(self.columns),
            "t_value": _json_float(self.t_value),
            "F_statistic": self.F_statistic,
            "df_num": self.df_num,
            "df_den": self.df_den,
            "p_value_t": _json_float(self.p_value_t),
            "p_value_F": self.p_value_F,
            "sum_sq": self.sum_sq,
        }


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class AnovaTable:
    rows: list
    rss_full: float
    df_resid: int

    def __getitem__(self, label):
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_json(self):
        return {
            "type": "II",
            "rss_full": self.rss_full,
            "df_resid": self.df_resid,
            "rows": [r.to_json() for r in self.rows],
        }


def anova_type2(design, terms=None, full_fit=None):
    """Type II ANOVA: drop each term (others retained), refit, F-test the loss.

    ``terms`` maps a term name to the column labels it owns; by default
    every non-intercept column is its own single-dof term.
    """
    if terms is None:
        terms = {c: (c,) for c in design.columns if c != "intercept"}
    full = full_fit if full_fit is not None else ols_fit(design)
    tt = coefficient_t_tests(full)
    rss_full = full.rss
    df_den = full.df_resid
    rows = []
    for name, cols in terms.items():
        cols = (cols,) if isinstance(cols, str) else tuple(cols)
        unknown = [c for c in cols if c not in design.columns]
        if unknown:
            raise ValueError(f"term {name!r} references unknown column(s) {unknown}")
        reduced = ols_fit(design.drop(cols))
        df_num = len(cols)
        ss = max(reduced.rss - rss_full, 0.0)
        F = (ss / df_num) / (rss_full / df_den) if rss_full > 0 else math.inf
        p_F = float(f_sf(F, df_num, df_den)) if math.isfinite(F) else 0.0
        if df_num == 1:
            t, p_t = tt[cols[0]]
        else:
            t, p_t = math.nan, math.nan
        rows.append(AnovaRow(name, cols, t, F, df_num, df_den, p_t, p_F, ss))
    return AnovaTable(rows, rss_full, df_den)


@dataclass
class ResidualDiagnostics:
    n: int
    mean: float
    std: float
    skewness: float
    kurtosis: float  # raw; a normal sample gives ~3
    jarque_bera: tuple
    omnibus_k2: tuple
    durbin_watson: float

    @property
    def excess_kurtosis(self):
        return self.kurtosis - 3.0

    def to_json(self):
        return {
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "skewness": self.skewness,
            "kurtosis": self.kurtosis,
            "excess_kurtosis": self.excess_kurtosis,
            "jarque_bera": {"statistic": self.jarque_bera[0], "p_value": self.jarque_bera[1]},
            "omnibus_k2": {"statistic": self.omnibus_k2[0], "p_value": self.omnibus_k2[1]},
            "durbin_watson": self.durbin_watson,
        }


def central_moments(x):
    """Mean and biased 2nd-4th central moments."""
    x = np.asarray(x, dtype=float)
    mean = x.mean()
    d = x - mean
    d2 = d * d
    return mean, d2.mean(), (d2 * d).mean(), (d2 * d2).mean()


def _shape_moments(x):
    """Mean, std, skewness and raw kurtosis.

    Deviations are rescaled by their largest magnitude first, so the fourth
    power neither underflows nor overflows; the shape statistics are scale
    free and unaffected.
    """
    x = np.asarray(x, dtype=float)
    mean = x.mean()
    d = x - mean
    top = float(np.max(np.abs(d))) if d.size else 0.0
    if top == 0.0 or not math.isfinite(top):
        raise ValueError("zero-variance data")
    d = d / top
    d2 = d * d
    m2 = d2.mean()
    if m2 == 0:
        raise ValueError("zero-variance data")
    m3 = (d2 * d).mean()
    m4 = (d2 * d2).mean()
    return float(mean), top * math.sqrt(m2), m3 / m2**1.5, m4 / m2**2


def skewness_kurtosis(x):
    """Population skewness and raw kurtosis."""
    _, _, s, k = _shape_moments(x)
    return s, k


def jarque_bera(x):
    n = np.asarray(x).size
    s, k = skewness_kurtosis(x)
    jb = n / 6.0 * (s * s + 0.25 * (k - 3.0) ** 2)
    return float(jb), float(chi2_sf(jb, 2))


def skew_z(s, n):
    """D'Agostino's normal approximation for sample skewness (n >= 8)."""
    y = s * math.sqrt((n + 1) * (n + 3) / (6.0 * (n - 2)))
    beta2 = 3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3) / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9))
    w2 = -1.0 + math.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / math.sqrt(0.5 * math.log(w2))
    alpha = math.sqrt(2.0 / (w2 - 1.0))
    if y == 0:
        y = 1.0
    ya = y / alpha
    return delta * math.log(ya + math.sqrt(ya * ya + 1.0))


def kurtosis_z(k, n):
    """Anscombe-Glynn normal approximation for raw sample kurtosis."""
    e = 3.0 * (n - 1) / (n + 1)
    var = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    x = (k - e) / math.sqrt(var)
    sqrt_beta1 = (
        6.0 * (n * n - 5 * n + 2) / ((n + 7.0) * (n + 9)) * math.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2.0) * (n - 3)))
    )
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + math.sqrt(1.0 + 4.0 / sqrt_beta1**2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + x * math.sqrt(2.0 / (a - 4.0))
    if denom == 0:
        return math.nan
    term2 = math.copysign(abs((1.0 - 2.0 / a) / denom) ** (1.0 / 3.0), denom)
    return (term1 - term2) / math.sqrt(2.0 / (9.0 * a))


def omnibus_k2(x):
    """D'Agostino-Pearson K^2 with its chi-square(2) p-value."""
    n = np.asarray(x).size
    if n < 8:
        raise ValueError(f"omnibus test needs n >= 8, got {n}")
    s, k = skewness_kurtosis(x)
    k2 = skew_z(s, n) ** 2 + kurtosis_z(k, n) ** 2
    return float(k2), float(chi2_sf(k2, 2))


def durbin_watson(resid):
    resid = np.asarray(resid, dtype=float)
    top = float(np.max(np.abs(resid))) if resid.size else 0.0
    if top > 0:
        resid = resid / top  # scale free; avoids underflow in the squares
    denom = float(resid @ resid)
    if denom == 0:
        raise ValueError("zero residuals")
    diff = np.diff(resid)
    return float(diff @ diff) / denom


def residual_diagnostics(residuals):
    """Moments, Jarque-Bera, omnibus K^2 and Durbin-Watson (in given order)."""
    r = np.asarray(residuals, dtype=float)
    if r.size < 8:
        raise ValueError(f"need at least 8 residuals, got {r.size}")
    if np.ptp(r) == 0:
        raise ValueError("zero-variance residuals")
    mean, std, s, k = _shape_moments(r)
    n = r.size
    jb = n / 6.0 * (s * s + 0.25 * (k - 3.0) ** 2)
    k2 = skew_z(s, n) ** 2 + kurtosis_z(k, n) ** 2
    return ResidualDiagnostics(
        n=n,
        mean=float(mean),
        std=float(std),
        skewness=float(s),
        kurtosis=float(k),
        jarque_bera=(float(jb), float(chi2_sf(jb, 2))),
        omnibus_k2=(float(k2), float(chi2_sf(k2, 2))),
        durbin_watson=durbin_watson(r),
    )
