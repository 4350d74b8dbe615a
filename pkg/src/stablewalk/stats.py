"""Statistical verification kit: ECDFs, two-sample KS, log-log regression,
bootstrap intervals and the Hill tail-index estimator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

__all__ = [
    "EcdfView",
    "KsResult",
    "LogLogFit",
    "binomial_stderr",
    "bootstrap_ci",
    "ecdf",
    "hill_estimator",
    "ks_critical_value",
    "ks_two_sample",
    "loglog_fit",
]


@dataclass(frozen=True)
class EcdfView:
    """Right-continuous empirical CDF over a sorted sample."""

    values: np.ndarray
    count: int

    def __call__(self, x):
        return np.searchsorted(self.values, x, side="right") / self.count


def ecdf(samples) -> EcdfView:
    values = np.sort(np.asarray(samples, dtype=float).ravel())
    if values.size == 0:
        raise ValueError("ECDF of an empty sample")
    return EcdfView(values=values, count=int(values.size))


@dataclass(frozen=True)
class KsResult:
    statistic: float
    pvalue: float
    n_a: int
    n_b: int

    def rejects(self, level: float = 0.01) -> bool:
        return self.statistic >= ks_critical_value(self.n_a, self.n_b, level)


def ks_two_sample(a, b) -> KsResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.

    ``D = sup |F_a - F_b|`` is evaluated exactly on the pooled sample; the
    p-value uses the Kolmogorov limit law at effective size
    ``n_a n_b / (n_a + n_b)``.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two nonempty samples")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    ne = a.size * b.size / (a.size + b.size)
    p = float(special.kolmogorov(np.sqrt(ne) * d)) if d > 0 else 1.0
    return KsResult(statistic=d, pvalue=min(max(p, 0.0), 1.0), n_a=int(a.size), n_b=int(b.size))


def ks_critical_value(n_a: int, n_b: int, level: float = 0.01) -> float:
    """Asymptotic critical value of D at the given significance level."""
    c = special.kolmogi(level)
    return float(c * np.sqrt((n_a + n_b) / (n_a * n_b)))


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    npoints: int


def loglog_fit(xs, ys, weights=None, absolute_sigma: bool = True) -> LogLogFit:
    """Weighted least squares of ``log y`` on ``log x``.

    Parameters
    ----------
    xs, ys : array_like
        Strictly positive abscissae and ordinates, at least 3 points.
    weights : array_like, optional
        Inverse variances of ``log y``. Defaults to unit weights.
    absolute_sigma : bool
        If True the parameter covariance is ``(X^T W X)^{-1}``; otherwise it
        is rescaled by the reduced chi-square of the residuals.

    Returns
    -------
    LogLogFit
        Slope, intercept (natural log) and their standard errors.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D arrays of equal length")
    if xs.size < 3:
        raise ValueError(f"log-log fit needs at least 3 points, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs strictly positive xs and ys")
    w = np.ones_like(xs) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != xs.shape or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive and finite")

    lx, ly = np.log(xs), np.log(ys)
    design = np.column_stack([lx, np.ones_like(lx)])
    normal = design.T @ (w[:, None] * design)
    coef = np.linalg.solve(normal, design.T @ (w * ly))
    cov = np.linalg.inv(normal)
    if not absolute_sigma:
        resid = ly - design @ coef
        dof = max(xs.size - 2, 1)
        cov = cov * float(np.sum(w * resid**2) / dof)
    return LogLogFit(
        slope=float(coef[0]),
        intercept=float(coef[1]),
        slope_stderr=float(np.sqrt(cov[0, 0])),
        intercept_stderr=float(np.sqrt(cov[1, 1])),
        npoints=int(xs.size),
    )


def bootstrap_ci(
    samples,
    statistic: Callable = np.mean,
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    batch: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval.

    ``statistic`` must accept an ``axis`` keyword (``np.mean``,
    ``np.median``, ...). Resampling is batched to bound memory.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("bootstrap of an empty sample")
    if resamples < 200:
        raise ValueError("bootstrap needs at least 200 resamples")
    if np.all(x == x[0]):
        c = float(statistic(x))
        return c, c
    rng = np.random.default_rng(seed)
    stats = np.empty(resamples)
    for start in range(0, resamples, batch):
        stop = min(start + batch, resamples)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        stats[start:stop] = statistic(x[idx], axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [tail, 1.0 - tail])
    return float(lo), float(hi)


def binomial_stderr(p, n):
    p = np.asarray(p, dtype=float)
    return np.sqrt(p * (1.0 - p) / n)


def hill_estimator(samples, k: int) -> tuple[float, float]:
    """Hill estimate of the tail index from the top ``k`` order statistics of
    ``|samples|``; returns ``(alpha_hat, alpha_hat / sqrt(k))``."""
    x = np.abs(np.asarray(samples, dtype=float).ravel())
    if k < 10:
        raise ValueError(f"Hill estimator needs at least 10 exceedances, got k={k}")
    if x.size <= k:
        raise ValueError("Hill estimator needs more samples than exceedances")
    top = np.sort(x)[-(k + 1):]
    threshold = top[0]
    if threshold <= 0:
        raise ValueError("Hill estimator: threshold order statistic is not positive")
    mean_log = float(np.mean(np.log(top[1:] / threshold)))
    if mean_log <= 0:
        raise ValueError("Hill estimator: degenerate sample, no tail above the threshold")
    alpha = 1.0 / mean_log
    return alpha, alpha / np.sqrt(k)
