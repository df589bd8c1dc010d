"""Monte Carlo reductions: bootstrap intervals and log-log slopes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

N_BOOT = 1000


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int

    def separated_above(self, other: Estimate) -> bool:
        """True if this interval lies strictly above ``other``."""
        return self.ci_low > other.ci_high


def mean_ci(samples, seed: int = 0, confidence: float = 0.95, n_resamples: int = N_BOOT) -> Estimate:
    """Sample mean with a percentile-bootstrap interval."""
    x = np.asarray(samples, dtype=float).ravel()
    x = x[np.isfinite(x)]
    n = x.size
    if n == 0:
        return Estimate(np.nan, np.nan, np.nan, np.nan, 0)
    m = float(x.mean())
    if n == 1 or np.all(x == x[0]):
        return Estimate(m, 0.0, m, m, n)
    res = stats.bootstrap(
        (x,),
        np.mean,
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    lo, hi = float(res.confidence_interval.low), float(res.confidence_interval.high)
    # keep the documented ordering even when the bootstrap is degenerate
    return Estimate(m, float(x.std(ddof=1) / np.sqrt(n)), min(lo, m), max(hi, m), n)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    residual: float


def loglog_slope(x, y) -> SlopeFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.any(x <= 0) or np.any(y <= 0):
        return SlopeFit(np.nan, np.nan, np.nan, np.nan)
    lx, ly = np.log(x), np.log(y)
    fit = stats.linregress(lx, ly)
    resid = ly - (fit.intercept + fit.slope * lx)
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2), float(np.sqrt(np.mean(resid ** 2))))


def strictly_decreasing(estimates: list[Estimate]) -> bool:
    """Consecutive intervals are disjoint and ordered downwards."""
    return all(a.separated_above(b) for a, b in zip(estimates, estimates[1:]))
