"""Linear least squares (QR and Levenberg-Marquardt), prediction and validation."""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .features import DesignMatrix, build_design_matrix, frequency_offset

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42
_LAMBDA_FLOOR = 1e-12


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, dependent):
        self.dependent = tuple(dependent)
        super().__init__(f"design matrix is rank deficient; dependent column(s): {', '.join(self.dependent)}")


class ConvergenceError(RuntimeError):
    """Iteration limit reached; ``best`` holds the best iterate seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


def max_workers():
    """Thread cap from ``PATHLOSS_LAB_THREADS`` (default: CPU count)."""
    raw = os.environ.get("PATHLOSS_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring bad PATHLOSS_LAB_THREADS=%r", raw)
    return os.cpu_count() or 1


@dataclass
class FitResult:
    labels: tuple
    coefficients: np.ndarray
    standard_errors: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    sigma2: float
    r2: float
    rmse: float
    n_obs: int
    df_resid: int
    frequency: float = 868.0
    solver: str = "ols"
    iterations: int = 0
    rss_history: list = field(default_factory=list)

    @property
    def rss(self):
        return float(self.residuals @ self.residuals)

    def coef(self, label):
        return float(self.coefficients[self.labels.index(label)])

    def coefficient_dict(self):
        return dict(zip(self.labels, map(float, self.coefficients)))

    def to_json(self, include_covariance=True):
        out = {
            "solver": self.solver,
            "labels": list(self.labels),
            "coefficients": self.coefficient_dict(),
            "standard_errors": dict(zip(self.labels, map(float, self.standard_errors))),
            "sigma2": self.sigma2,
            "r2": self.r2,
            "rmse": self.rmse,
            "n_obs": self.n_obs,
            "df_resid": self.df_resid,
            "frequency_mhz": self.frequency,
            "iterations": self.iterations,
        }
        if include_covariance:
            out["covariance"] = self.covariance.tolist()
        return out


class _QR:
    """Pivoted economic QR of a design matrix, with a rank check."""

    def __init__(self, X, labels):
        n, p = X.shape
        if n <= p:
            raise ValueError(f"need more observations than parameters (n={n}, p={p})")
        # Column scaling keeps the rank threshold meaningful for mixed units.
        norms = np.linalg.norm(X, axis=0)
        norms[norms == 0] = 1.0
        Q, R, piv = linalg.qr(X / norms, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(n, p) * np.finfo(float).eps * diag[0] * 1e3
        rank = int(np.sum(diag > tol))
        if rank < p:
            raise RankDeficientError([labels[j] for j in piv[rank:]])
        self.Q = Q
        self.R = R
        self.piv = piv
        self.norms = norms

    def solve(self, y):
        z = self.Q.T @ y
        b = linalg.solve_triangular(self.R, z)
        beta = np.empty_like(b)
        beta[self.piv] = b
        return beta / self.norms

    def xtx_inverse(self):
        Rinv = linalg.solve_triangular(self.R, np.eye(self.R.shape[0]))
        inv_perm = Rinv @ Rinv.T
        out = np.empty_like(inv_perm)
        out[np.ix_(self.piv, self.piv)] = inv_perm
        return out / np.outer(self.norms, self.norms)


def _r2(y, resid):
    if np.ptp(y) == 0:
        return 0.0
    tss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(resid @ resid) / tss


def _summarize(design, qr, beta, solver, iterations=0, history=None):
    resid = design.y - design.X @ beta
    n, p = design.X.shape
    df = n - p
    rss = float(resid @ resid)
    sigma2 = rss / df
    cov = sigma2 * qr.xtx_inverse()
    cov = 0.5 * (cov + cov.T)
    return FitResult(
        labels=tuple(design.columns),
        coefficients=beta,
        standard_errors=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        covariance=cov,
        residuals=resid,
        sigma2=sigma2,
        r2=_r2(design.y, resid),
        rmse=math.sqrt(rss / n),
        n_obs=n,
        df_resid=df,
        frequency=design.frequency,
        solver=solver,
        iterations=iterations,
        rss_history=list(history or []),
    )


def ols_fit(design):
    """Ordinary least squares by pivoted QR; raises on rank deficiency."""
    qr = _QR(design.X, design.columns)
    beta = qr.solve(design.y)
    # one step of iterative refinement
    beta = beta + qr.solve(design.y - design.X @ beta)
    return _summarize(design, qr, beta, "ols")


def lm_fit(design, initial=None, max_iter=200, lambda0=1e-3, tol=1e-10):
    """Levenberg-Marquardt on the residual sum of squares.

    Uses Marquardt's diagonal scaling; lambda is divided by 10 after an
    accepted step and multiplied by 10 after a rejected one. Iteration stops
    when a trial step changes the RSS by less than ``tol`` (relative) and
    the step itself is negligible (or damping has been driven to its floor),
    so a heavily damped start cannot stall on tiny steps.

    ``initial`` is a mapping keyed by column label or a vector in column
    order; ``None`` starts from zero.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    labels = tuple(design.columns)
    if initial is None:
        beta = np.zeros(len(labels))
    elif isinstance(initial, dict):
        if set(initial) != set(labels):
            raise ValueError(f"initial labels {sorted(initial)} do not match columns {list(labels)}")
        beta = np.array([float(initial[c]) for c in labels])
    else:
        beta = np.asarray(initial, dtype=float).copy()
        if beta.shape != (len(labels),):
            raise ValueError(f"initial vector must have length {len(labels)}")

    X, y = design.X, design.y
    qr = _QR(X, labels)
    # In scaled, pivoted coordinates u = (beta * norms)[piv] the Jacobian is
    # Q R, so every damped subproblem reduces to a p x p least squares.
    R = qr.R
    diag = np.sum(R * R, axis=0)  # diag(J^T J) in u coordinates
    sqrt_diag = np.sqrt(diag)
    u = (beta * qr.norms)[qr.piv]
    y_proj = qr.Q.T @ y
    # RSS = ||y_proj - R u||^2 + ||y_perp||^2; the second part is fixed.
    ols_resid = y - X @ qr.solve(y)
    y_perp2 = float(ols_resid @ ols_resid)

    def rss_of(u_):
        d = y_proj - R @ u_
        return float(d @ d) + y_perp2

    rss = rss_of(u)
    lam = float(lambda0)
    history = [rss]
    accepted = 0
    p = R.shape[0]
    converged = False
    for _ in range(max_iter):
        g = y_proj - R @ u
        A = np.vstack([R, math.sqrt(lam) * np.diag(sqrt_diag)])
        rhs = np.concatenate([g, np.zeros(p)])
        step, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        trial = u + step
        # exact RSS decrease for a linear model, free of cancellation
        Rs = R @ step
        decrease = float(Rs @ (2.0 * g - Rs))
        rel = decrease / rss if rss > 0 else 0.0
        small_step = np.all(np.abs(step) <= 1e-10 * np.abs(u) + 1e-14 * np.linalg.norm(u))
        if abs(rel) < tol and (small_step or lam <= _LAMBDA_FLOOR):
            # final polish step; not counted as an accepted step
            if decrease > 0:
                u = trial
                rss = rss_of(u)
            converged = True
            break
        if decrease > 0:
            u = trial
            rss = min(rss_of(u), rss)
            history.append(rss)
            accepted += 1
            lam = max(lam / 10.0, _LAMBDA_FLOOR)
        else:
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at machine precision
                converged = True
                break
    beta = np.empty_like(u)
    beta[qr.piv] = u
    beta = beta / qr.norms
    if not converged:
        best = dict(zip(labels, map(float, beta)))
        raise ConvergenceError(f"Levenberg-Marquardt did not converge in {max_iter} iterations", best=best)
    return _summarize(design, qr, beta, "lm", iterations=accepted, history=history)


def fit(design, solver="ols", **kwargs):
    if solver == "ols":
        return ols_fit(design)
    if solver == "lm":
        return lm_fit(design, **kwargs)
    raise ValueError(f"unknown solver {solver!r}")


def predict(fit, features, frequency=None):
    """Predicted path loss in dB, the frequency term added back.

    ``features`` is a mapping keyed by coefficient label, a vector in label
    order, or a 2-D array of such rows.
    """
    freq = fit.frequency if frequency is None else frequency
    if isinstance(features, dict):
        missing = set(fit.labels) ^ set(features)
        if missing:
            raise ValueError(f"feature labels do not match fit labels: {sorted(missing)}")
        x = np.array([float(features[c]) for c in fit.labels])
    elif isinstance(features, DesignMatrix):
        if tuple(features.columns) != tuple(fit.labels):
            raise ValueError("design columns do not match fit labels")
        x = features.X
    else:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != len(fit.labels):
            raise ValueError(f"expected {len(fit.labels)} features, got {x.shape[-1]}")
    out = x @ fit.coefficients + frequency_offset(freq)
    return float(out) if np.ndim(out) == 0 else out


def evaluate(predictions, truth):
    """Return ``(rmse, r2)``; R^2 uses the total sum of squares about mean(truth)."""
    predictions = np.asarray(predictions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth differ in length")
    if truth.size < 2:
        raise ValueError("need at least two observations")
    resid = truth - predictions
    rss = float(resid @ resid)
    tss = float(np.sum((truth - truth.mean()) ** 2))
    if tss == 0.0 or np.ptp(truth) == 0:
        raise ValueError("R^2 undefined: truth has zero variance")
    return math.sqrt(rss / truth.size), 1.0 - rss / tss


def variance_reduction(r2_baseline, r2_model):
    """Percent reduction in unexplained variance going from baseline to model."""
    unexplained = 1.0 - r2_baseline
    if unexplained <= 0:
        raise ValueError("baseline explains all variance")
    return 100.0 * (unexplained - (1.0 - r2_model)) / unexplained


def split_indices(n, ratio=0.8, seed=DEFAULT_SEED):
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(math.floor(ratio * n))
    return perm[:k], perm[k:]


def train_test_split(samples, ratio=0.8, seed=DEFAULT_SEED):
    """Seeded shuffle; the first ``floor(ratio * n)`` go to training."""
    if isinstance(samples, DesignMatrix):
        tr, te = split_indices(samples.n, ratio, seed)
        return samples.take(tr), samples.take(te)
    samples = list(samples)
    tr, te = split_indices(len(samples), ratio, seed)
    return [samples[i] for i in tr], [samples[i] for i in te]


@dataclass
class HoldoutResult:
    ratio: float
    seed: int
    n_train: int
    n_test: int
    fit: FitResult
    rmse: float
    r2: float

    def to_json(self):
        return {
            "ratio": self.ratio,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "test_rmse": self.rmse,
            "test_r2": self.r2,
            "train_rmse": self.fit.rmse,
            "train_r2": self.fit.r2,
            "coefficients": self.fit.coefficient_dict(),
        }


def holdout(design, ratio=0.8, seed=DEFAULT_SEED, solver="ols"):
    train, test = train_test_split(design, ratio, seed)
    res = fit(train, solver)
    rmse, r2 = evaluate(test.X @ res.coefficients, test.y)
    return HoldoutResult(ratio, seed, train.n, test.n, res, rmse, r2)


@dataclass
class CVResult:
    k: int
    seed: int
    folds: list  # (rmse, r2, n_test)

    @property
    def rmse(self):
        return np.array([f[0] for f in self.folds])

    @property
    def r2(self):
        return np.array([f[1] for f in self.folds])

    @property
    def mean_rmse(self):
        return float(self.rmse.mean())

    @property
    def std_rmse(self):
        return float(self.rmse.std())

    @property
    def mean_r2(self):
        return float(self.r2.mean())

    @property
    def std_r2(self):
        return float(self.r2.std())

    def to_json(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [{"rmse": r, "r2": q, "n_test": m} for r, q, m in self.folds],
            "mean_rmse": self.mean_rmse,
            "std_rmse": self.std_rmse,
            "mean_r2": self.mean_r2,
            "std_r2": self.std_r2,
        }


def kfold_cv(samples, k=5, spec=None, seed=DEFAULT_SEED, radio=None, solver="ols"):
    """k-fold cross-validation with a seeded shuffle and near-equal folds.

    ``samples`` is either a :class:`DesignMatrix` or linked samples, which
    are turned into one using ``spec``. Fold assignment is fixed before any
    fold runs, so the thread count does not change the result.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if isinstance(samples, DesignMatrix):
        design = samples
    else:
        kwargs = {} if radio is None else {"radio": radio}
        design = build_design_matrix(samples, spec, **kwargs) if spec else build_design_matrix(samples, **kwargs)
    n = design.n
    if n < k:
        raise ValueError(f"need n >= k (n={n}, k={k})")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    if min(len(f) for f in folds) < design.p:
        raise ValueError(f"fold size {min(len(f) for f in folds)} smaller than parameter count {design.p}")

    def run(i):
        test_idx = folds[i]
        train_idx = np.concatenate([folds[j] for j in range(k) if j != i])
        train, test = design.take(train_idx), design.take(test_idx)
        res = fit(train, solver)
        pred = test.X @ res.coefficients
        resid = test.y - pred
        rmse = math.sqrt(float(resid @ resid) / test.n)
        if np.ptp(test.y) == 0:
            r2 = 1.0 if rmse == 0 else float("nan")
        else:
            r2 = evaluate(pred, test.y)[1]
        return rmse, r2, int(test.n)

    workers = min(k, max_workers())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]
    return CVResult(k, seed, results)
