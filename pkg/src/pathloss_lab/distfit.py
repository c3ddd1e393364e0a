"""Maximum-likelihood fits of candidate shadow-fading distributions.

Families: normal, skew-normal, Cauchy, Student's t and Gaussian mixtures.
Every fit carries its log-likelihood, AIC, BIC and Kolmogorov-Smirnov
distance so candidates can be ranked side by side.
"""

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import erfc, gammaln, log_ndtr, logsumexp

from .special import betainc, normal_cdf, owens_t

logger = logging.getLogger(__name__)

FAMILIES = ("normal", "skew_normal", "cauchy", "student_t", "gmm")
PARAM_NAMES = {
    "normal": ("loc", "scale"),
    "cauchy": ("loc", "scale"),
    "student_t": ("df", "loc", "scale"),
    "skew_normal": ("shape", "loc", "scale"),
}

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_PI = math.log(math.pi)
_LOG_2 = math.log(2.0)
_SQRT_HALF = math.sqrt(0.5)
# Student t: above these df the density constant switches to its asymptotic
# series and the CDF to the normal limit (error below 1e-8).
_DF_ASYMPTOTIC = 1e4
_DF_NORMAL_CDF = 1e8
DF_MAX = 1e12
# Multi-start screening runs on at most this many order statistics.
_SCREEN_POINTS = 8192


class FitError(RuntimeError):
    """Optimizer failure; ``best`` holds the best parameters found, if any."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if not (self.weights.shape == self.means.shape == self.variances.shape):
            raise ValueError("weights, means and variances must have equal length")

    @property
    def m(self):
        return self.weights.size

    @property
    def sds(self):
        return np.sqrt(self.variances)

    def sorted(self):
        order = np.argsort(self.means, kind="stable")
        return GmmParams(self.weights[order], self.means[order], self.variances[order])

    def to_json(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["weights"], obj["means"], obj["variances"])


@dataclass
class DistributionFit:
    family: str
    params: object  # dict of floats, or GmmParams for "gmm"
    loglik: float
    n: int
    ks: float = math.nan
    converged: bool = True
    iterations: int = 0
    variance_floor_active: bool = False
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def k(self):
        if self.family == "gmm":
            return 3 * self.params.m - 1
        return len(PARAM_NAMES[self.family])

    @property
    def aic(self):
        return 2.0 * self.k - 2.0 * self.loglik

    @property
    def bic(self):
        return self.k * math.log(self.n) - 2.0 * self.loglik

    @property
    def label(self):
        return f"gmm-{self.params.m}" if self.family == "gmm" else self.family

    def to_json(self):
        params = self.params.to_json() if self.family == "gmm" else dict(self.params)
        out = {
            "family": self.family,
            "label": self.label,
            "params": params,
            "k": self.k,
            "n": self.n,
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "ks": self.ks,
            "converged": self.converged,
        }
        if self.family == "gmm":
            out["components"] = self.params.m
            out["variance_floor_active"] = self.variance_floor_active
        return out

    @classmethod
    def from_json(cls, obj):
        family = obj["family"]
        params = GmmParams.from_json(obj["params"]) if family == "gmm" else dict(obj["params"])
        return cls(
            family,
            params,
            float(obj["loglik"]),
            int(obj["n"]),
            ks=float(obj.get("ks", math.nan)),
            converged=bool(obj.get("converged", True)),
            variance_floor_active=bool(obj.get("variance_floor_active", False)),
        )


# ---------------------------------------------------------------------------
# densities


def _check_scale(scale):
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")


def _log_normal_cdf(t):
    # erfc is accurate and cheaper than log_ndtr away from the far lower tail
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(0.5 * erfc(-t * _SQRT_HALF))
    far = t < -30.0
    if far.any():
        out[far] = log_ndtr(t[far])
    return out


def logpdf(family, params, x):
    x = np.asarray(x, dtype=float)
    if family == "gmm":
        g = params
        z = (x[..., None] - g.means) ** 2 / g.variances
        comp = np.log(g.weights) - 0.5 * (_LOG_2PI + np.log(g.variances) + z)
        return logsumexp(comp, axis=-1)
    p = params
    if family == "normal":
        z = (x - p["loc"]) / p["scale"]
        return -0.5 * (_LOG_2PI + z * z) - math.log(p["scale"])
    if family == "cauchy":
        z = (x - p["loc"]) / p["scale"]
        return -_LOG_PI - math.log(p["scale"]) - np.log1p(z * z)
    if family == "student_t":
        nu = p["df"]
        z = (x - p["loc"]) / p["scale"]
        if nu > _DF_ASYMPTOTIC:
            # gammaln differences cancel catastrophically here; use the
            # asymptotic series of the normalising constant instead
            c = -0.5 * _LOG_2PI - 0.25 / nu + 1.0 / (24.0 * nu**3) - math.log(p["scale"])
        else:
            c = gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi) - math.log(p["scale"])
        return c - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
    if family == "skew_normal":
        z = (x - p["loc"]) / p["scale"]
        return _LOG_2 - math.log(p["scale"]) - 0.5 * (_LOG_2PI + z * z) + _log_normal_cdf(p["shape"] * z)
    raise ValueError(f"unknown family {family!r}")


def cdf(family, params, x):
    x = np.asarray(x, dtype=float)
    if family == "gmm":
        g = params
        return np.sum(g.weights * normal_cdf((x[..., None] - g.means) / g.sds), axis=-1)
    p = params
    z = (x - p["loc"]) / p["scale"]
    if family == "normal":
        return normal_cdf(z)
    if family == "cauchy":
        # arctan(-1/z)/pi keeps the lower tail free of cancellation
        with np.errstate(divide="ignore"):
            lower = np.arctan(-1.0 / z) / math.pi
        return np.where(z < 0, lower, 0.5 + np.arctan(z) / math.pi)
    if family == "student_t":
        nu = p["df"]
        if nu > _DF_NORMAL_CDF:
            return normal_cdf(z)
        tail = 0.5 * betainc(0.5 * nu, 0.5, nu / (nu + z * z))
        return np.where(z < 0, tail, 1.0 - tail)
    if family == "skew_normal":
        return np.clip(normal_cdf(z) - 2.0 * owens_t(z, p["shape"]), 0.0, 1.0)
    raise ValueError(f"unknown family {family!r}")


def density_and_cdf(fit, x):
    """Return ``(pdf, cdf)`` of a fitted distribution at ``x``."""
    return np.exp(logpdf(fit.family, fit.params, x)), cdf(fit.family, fit.params, x)


def loglikelihood(family, params, data):
    return float(np.sum(logpdf(family, params, data)))


# ---------------------------------------------------------------------------
# parametric MLE


def _robust_center_scale(x):
    q25, q50, q75 = np.percentile(x, [25, 50, 75])
    scale = (q75 - q25) / 1.349
    if not scale > 0:
        scale = float(np.std(x))
    return float(q50), float(scale)


def _unpack(family, theta):
    if family == "cauchy":
        return {"loc": theta[0], "scale": math.exp(theta[1])}
    if family == "student_t":
        # df = 1/t^2 puts the normal limit at the interior point t = 0, where
        # the likelihood is smooth, instead of at log(df) -> infinity
        t2 = theta[0] * theta[0]
        df = DF_MAX if t2 < 1.0 / DF_MAX else 1.0 / t2
        return {"df": df, "loc": theta[1], "scale": math.exp(theta[2])}
    if family == "skew_normal":
        return {"shape": theta[0], "loc": theta[1], "scale": math.exp(theta[2])}
    raise ValueError(family)


def _skew_normal_moment_start(z):
    mean, sd = float(z.mean()), float(z.std())
    g = float(np.mean(((z - mean) / sd) ** 3))
    g = max(min(g, 0.95), -0.95)
    a = abs(g) ** (2.0 / 3.0)
    delta = math.copysign(math.sqrt(0.5 * math.pi * a / (a + ((4.0 - math.pi) / 2.0) ** (2.0 / 3.0))), g)
    delta = max(min(delta, 0.99), -0.99)
    shape = delta / math.sqrt(1.0 - delta * delta)
    omega = sd / math.sqrt(1.0 - 2.0 * delta * delta / math.pi)
    xi = mean - omega * delta * math.sqrt(2.0 / math.pi)
    return [shape, xi, math.log(omega)]


def _starts(family, z):
    q25, q75 = np.percentile(z, [25, 75])
    sd = float(z.std())
    if family == "cauchy":
        return [[0.0, math.log(0.5 * (q75 - q25))], [0.0, math.log(sd)], [q25, 0.0], [q75, 0.0]]
    if family == "student_t":
        return [[df**-0.5, 0.0, 0.0] for df in (2.0, 5.0, 30.0)] + [[0.5, float(z.mean()), math.log(sd)]]
    if family == "skew_normal":
        return [_skew_normal_moment_start(z), [0.0, float(z.mean()), math.log(sd)], [2.0, q25, 0.0], [-2.0, q75, 0.0]]
    raise ValueError(family)


def _normal_fit(x):
    mu = float(x.mean())
    sigma = float(math.sqrt(np.mean((x - mu) ** 2)))
    if sigma == 0:
        raise ValueError("degenerate data: zero spread")
    return {"loc": mu, "scale": sigma}


def fit_mle(family, data, options=None):
    """Maximum-likelihood fit of a single-component family.

    Normal uses the closed form (1/n variance). The others maximise the
    log-likelihood with Nelder-Mead over unconstrained coordinates (log
    scale, 1/sqrt(df)) from several quantile-based starts, on data standardised
    by median and IQR; the best start is restarted once to polish it.
    """
    opts = {"maxiter": 4000, "xatol": 1e-9, "fatol": 1e-13, "compute_ks": True}
    opts.update(options or {})
    x = np.asarray(data, dtype=float)
    if x.ndim != 1 or x.size < 10:
        raise ValueError(f"need at least 10 observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite values")
    if np.ptp(x) == 0:
        raise ValueError("degenerate data: zero spread")

    if family == "normal":
        params = _normal_fit(x)
        result = DistributionFit(family, params, loglikelihood(family, params, x), x.size)
    elif family in PARAM_NAMES:
        center, spread = _robust_center_scale(x)
        z = (x - center) / spread

        def make_objective(sample):
            def objective(theta):
                try:
                    p = _unpack(family, theta)
                except OverflowError:
                    return math.inf
                if family == "student_t" and p["df"] <= 1e-3:
                    return math.inf
                v = -float(np.mean(logpdf(family, p, sample)))
                return v if math.isfinite(v) else math.inf

            return objective

        # Coarse multi-start screen on an evenly spaced quantile sketch of the
        # data, then a tight polish of the winner on the full sample.
        if z.size > _SCREEN_POINTS:
            sketch = np.sort(z)[np.round(np.linspace(0, z.size - 1, _SCREEN_POINTS)).astype(int)]
        else:
            sketch = z
        coarse = {"maxiter": opts["maxiter"], "xatol": 1e-4, "fatol": 1e-9}
        tight = {"maxiter": opts["maxiter"], "xatol": opts["xatol"], "fatol": opts["fatol"]}
        screen = make_objective(sketch)
        objective = make_objective(z)
        best_x, best_f = None, math.inf
        for start in _starts(family, z):
            res = optimize.minimize(screen, np.asarray(start, dtype=float), method="Nelder-Mead", options=coarse)
            if best_x is None or res.fun < best_f:
                best_x, best_f = res.x, res.fun
        best = None
        for _ in range(2):
            start = best_x if best is None else best.x
            polished = optimize.minimize(objective, start, method="Nelder-Mead", options=tight)
            if best is None or polished.fun <= best.fun:
                best = polished
        if not (best.success and math.isfinite(best.fun)):
            raise FitError(f"{family} fit did not converge: {best.message}", best=_unpack(family, best.x))
        pz = _unpack(family, best.x)
        params = dict(pz)
        params["loc"] = center + spread * pz["loc"]
        params["scale"] = spread * pz["scale"]
        params = {name: float(params[name]) for name in PARAM_NAMES[family]}
        result = DistributionFit(family, params, loglikelihood(family, params, x), x.size, iterations=int(best.nit))
    else:
        raise ValueError(f"unknown family {family!r}; GMMs go through fit_gmm")
    if opts["compute_ks"]:
        result.ks = ks_statistic(result, x)
    return result


# ---------------------------------------------------------------------------
# Gaussian mixtures


def _kmeans_pp_1d(xs, m, rng, lloyd_iters=10):
    """k-means++ seeding plus a few Lloyd passes on sorted scalars.

    Returns sorted centres and the index boundaries of each cluster in ``xs``.
    """
    n = xs.size
    centers = [xs[rng.integers(n)]]
    d2 = (xs - centers[0]) ** 2
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers.append(xs[rng.integers(n)])
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0.0, total)))
            centers.append(xs[min(idx, n - 1)])
        d2 = np.minimum(d2, (xs - centers[-1]) ** 2)
    c = np.sort(np.asarray(centers, dtype=float))
    csum = np.concatenate([[0.0], np.cumsum(xs)])
    for _ in range(lloyd_iters):
        cuts = np.searchsorted(xs, 0.5 * (c[:-1] + c[1:]))
        bounds = np.concatenate([[0], cuts, [n]])
        counts = np.diff(bounds)
        sums = csum[bounds[1:]] - csum[bounds[:-1]]
        new = np.where(counts > 0, sums / np.maximum(counts, 1), c)
        if np.array_equal(new, c):
            break
        c = np.sort(new)
    cuts = np.searchsorted(xs, 0.5 * (c[:-1] + c[1:]))
    return c, np.concatenate([[0], cuts, [n]])


def _init_from_kmeans(xs, m, rng, floor):
    c, bounds = _kmeans_pp_1d(xs, m, rng)
    weights = np.empty(m)
    means = np.empty(m)
    variances = np.empty(m)
    var_all = xs.var()
    for j in range(m):
        seg = xs[bounds[j] : bounds[j + 1]]
        if seg.size >= 2:
            weights[j] = seg.size
            means[j] = seg.mean()
            variances[j] = max(seg.var(), floor)
        else:
            weights[j] = 1.0
            means[j] = c[j]
            variances[j] = var_all
    return weights / weights.sum(), means, variances


_EM_CHUNK = 8192  # keeps the (m, chunk) work arrays cache-resident


def _em_pass(x, weights, means, variances, lp, buf):
    """E-step plus sufficient statistics.

    Returns the log-likelihood and an (m, 3) array of responsibility-weighted
    sums of 1, x and x^2.
    """
    m = weights.size
    const = (np.log(weights) - 0.5 * (_LOG_2PI + np.log(variances)))[:, None]
    half_prec = (0.5 / variances)[:, None]
    mu = means[:, None]
    ll = 0.0
    stats = np.zeros((m, 3))
    for a in range(0, x.size, _EM_CHUNK):
        xc = x[a : a + _EM_CHUNK]
        k = xc.size
        L = lp[:, :k]
        W = buf[:, :k]
        np.subtract(xc, mu, out=L)
        np.square(L, out=L)
        L *= -half_prec
        L += const
        top = L.max(axis=0)
        L -= top
        np.exp(L, out=L)
        total = L.sum(axis=0)
        ll += float(top.sum() + np.log(total).sum())
        np.divide(1.0, total, out=W[0])
        np.multiply(xc, W[0], out=W[1])
        np.multiply(xc, W[1], out=W[2])
        stats += L @ W.T
    return ll, stats


def _em(x, weights, means, variances, max_iter, tol, floor):
    """EM on centred data; the log-likelihood trace is recorded per iteration."""
    m = weights.size
    trace = []
    floor_hit = False
    converged = False
    tiny = 10.0 * np.finfo(float).eps
    ll_prev = -math.inf
    chunk = min(_EM_CHUNK, x.size)
    lp = np.empty((m, chunk))
    buf = np.empty((3, chunk))
    it = 0
    for it in range(1, max_iter + 1):
        ll, stats = _em_pass(x, weights, means, variances, lp, buf)
        trace.append(ll)
        if abs(ll - ll_prev) < tol * abs(ll):
            converged = True
            break
        ll_prev = ll
        nk = stats[:, 0] + tiny
        means = stats[:, 1] / nk
        variances = np.maximum(stats[:, 2] / nk - means * means, 0.0)
        low = variances < floor
        if low.any():
            floor_hit = True
            variances = np.where(low, floor, variances)
        weights = nk / nk.sum()
    return GmmParams(weights, means, variances), trace, converged, floor_hit, it


def fit_gmm(data, m, restarts=8, max_iter=500, tol=1e-8, seed=42, compute_ks=True, traces=None):
    """EM fit of an ``m``-component 1-D Gaussian mixture, best of ``restarts``.

    Each restart gets its own RNG stream spawned from ``seed`` and is seeded
    by k-means++. Variances are floored at ``1e-6 * var(data)``. The
    returned components are sorted by mean.

    If ``traces`` is a list, the log-likelihood trace of every restart (not
    only the winning one) is appended to it.
    """
    x = np.asarray(data, dtype=float)
    if not 1 <= m <= 8:
        raise ValueError(f"m must lie in 1..8, got {m}")
    if x.size < 10 * m:
        raise ValueError(f"need at least {10 * m} observations for m={m}, got {x.size}")
    if np.ptp(x) == 0:
        raise ValueError("degenerate data: all values equal")
    floor = 1e-6 * float(x.var())
    # EM runs on centred data; means are shifted back afterwards
    shift = float(x.mean())
    xc = x - shift
    xs = np.sort(xc)
    best = None
    for stream in np.random.SeedSequence(seed).spawn(max(1, restarts)):
        rng = np.random.default_rng(stream)
        w, mu, var = _init_from_kmeans(xs, m, rng, floor)
        params, trace, converged, floor_hit, iters = _em(xc, w, mu, var, max_iter, tol, floor)
        if traces is not None:
            traces.append(trace)
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace, converged, floor_hit, iters)
    params, trace, converged, floor_hit, iters = best
    if not converged:
        logger.warning("GMM m=%d hit max_iter=%d before converging", m, max_iter)
    params = GmmParams(params.weights, params.means + shift, params.variances).sorted()
    fit = DistributionFit(
        "gmm",
        params,
        loglikelihood("gmm", params, x),
        x.size,
        converged=converged,
        iterations=iters,
        variance_floor_active=floor_hit,
        loglik_trace=trace,
    )
    if compute_ks:
        fit.ks = ks_statistic(fit, x)
    return fit


def fit_all(data, gmm_components=range(1, 6), restarts=8, seed=42, max_iter=500, tol=1e-8):
    """Fit the four parametric families plus a GMM for every requested m."""
    fits = [fit_mle(f, data) for f in ("normal", "skew_normal", "cauchy", "student_t")]
    gmms = [fit_gmm(data, m, restarts=restarts, max_iter=max_iter, tol=tol, seed=seed) for m in gmm_components]
    return fits, gmms


# ---------------------------------------------------------------------------
# goodness of fit and ranking


def ks_statistic(fit, data):
    """Kolmogorov-Smirnov distance between the fitted and empirical CDFs."""
    xs = np.sort(np.asarray(data, dtype=float))
    n = xs.size
    if n < 1:
        raise ValueError("need at least one observation")
    F = cdf(fit.family, fit.params, xs)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n), 0.0))


def _compare(a, b):
    scale = max(abs(a.bic), abs(b.bic), 1e-300)
    if abs(a.bic - b.bic) > 1e-6 * scale:
        return -1 if a.bic < b.bic else 1
    if a.k != b.k:
        return -1 if a.k < b.k else 1
    if a.ks != b.ks:
        return -1 if a.ks < b.ks else 1
    return 0


@dataclass
class Ranking:
    ordered: list

    @property
    def winner(self):
        return self.ordered[0]

    def to_json(self):
        return {
            "criterion": "bic",
            "winner": self.winner.label,
            "table": [f.to_json() for f in self.ordered],
        }


def rank_candidates(fits):
    """Order fits by BIC; near-ties (1e-6 relative) go to fewer parameters, then smaller KS."""
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("need at least two fits to rank")
    if len({f.n for f in fits}) != 1:
        raise ValueError("fits were made on different sample sizes")
    return Ranking(sorted(fits, key=functools.cmp_to_key(_compare)))


def select_gmm(gmms):
    """Best mixture by the same BIC rule."""
    gmms = list(gmms)
    return gmms[0] if len(gmms) == 1 else rank_candidates(gmms).winner


# ---------------------------------------------------------------------------
# plot data


def _bracket_start(fit):
    if fit.family == "gmm":
        g = fit.params
        return float(np.sum(g.weights * g.means)), float(np.max(g.sds))
    return fit.params["loc"], fit.params["scale"]


def ppf(fit, p, tol=1e-9, max_iter=400):
    """Quantiles by bracketed bisection on the CDF."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    center, width = _bracket_start(fit)
    lo = np.full(p.shape, center - width)
    hi = np.full(p.shape, center + width)
    step = np.full(p.shape, width)
    for _ in range(2000):
        below = cdf(fit.family, fit.params, lo) > p
        if not below.any():
            break
        lo = np.where(below, lo - step, lo)
        step = np.where(below, step * 2.0, step)
    step = np.full(p.shape, width)
    for _ in range(2000):
        above = cdf(fit.family, fit.params, hi) < p
        if not above.any():
            break
        hi = np.where(above, hi + step, hi)
        step = np.where(above, step * 2.0, step)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        done = (hi - lo) <= np.maximum(tol, 4.0 * np.finfo(float).eps * np.abs(mid))
        if done.all():
            break
        go_right = cdf(fit.family, fit.params, mid) < p
        lo = np.where(go_right & ~done, mid, lo)
        hi = np.where(~go_right & ~done, mid, hi)
    return 0.5 * (lo + hi)


def qq_points(fit, data, max_points=2000):
    """``(theoretical, empirical)`` quantile pairs at p_i = (i - 0.5)/n."""
    if max_points < 2:
        raise ValueError("max_points must be >= 2")
    xs = np.sort(np.asarray(data, dtype=float))
    n = xs.size
    if n > max_points:
        idx = np.unique(np.round(np.linspace(0, n - 1, max_points)).astype(int))
    else:
        idx = np.arange(n)
    probs = (idx + 0.5) / n
    return np.column_stack([ppf(fit, probs), xs[idx]])


def histogram_density(data, bins=100):
    """Equal-width density histogram over [min, max] as ``(centres, densities, width)``.

    Zero-range data gives one unit-width bin centred on the value, density 1.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    x = np.asarray(data, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.array([lo]), np.array([1.0]), 1.0
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    width = (hi - lo) / bins
    density = counts / (x.size * width)
    return 0.5 * (edges[:-1] + edges[1:]), density, width
