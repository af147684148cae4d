"""Shared estimation primitives: tail-probability records, binomial
confidence bounds, and numerically stable log-space averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class TailEstimate:
    """A probability estimate with its uncertainty and provenance.

    ``p_hat`` may be exactly zero either because no hit was observed (then
    ``upper_bound_95`` carries a Clopper-Pearson bound) or because the float
    underflowed while ``log_p`` stayed finite, or because the event is
    deterministically impossible (``diagnostics['deterministic_zero']``).
    """

    p_hat: float
    stderr: float
    log_p: float
    samples: int
    method: str
    upper_bound_95: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.p_hat <= 1.0):
            raise ValueError(f"p_hat out of [0, 1]: {self.p_hat}")
        if self.stderr < 0.0:
            raise ValueError("stderr must be nonnegative")
        if self.p_hat > 0.0:
            ref = math.log(self.p_hat)
            if abs(self.log_p - ref) > 1e-6 * max(1.0, abs(ref)):
                raise ValueError("log_p inconsistent with p_hat")

    @property
    def log_stderr(self) -> float:
        """Approximate standard error of log(p_hat)."""
        if self.p_hat <= 0.0:
            return math.inf
        return self.stderr / self.p_hat


def from_hits(hits: int, trials: int, method: str, diagnostics: Optional[dict] = None) -> TailEstimate:
    """Binomial point estimate; zero hits get an upper confidence bound
    instead of a bare 0 +- 0."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    p = hits / trials
    se = math.sqrt(p * (1.0 - p) / trials)
    return TailEstimate(
        p_hat=p,
        stderr=se,
        log_p=math.log(p) if p > 0 else -math.inf,
        samples=trials,
        method=method,
        upper_bound_95=clopper_pearson_upper(hits, trials) if hits == 0 else None,
        diagnostics=diagnostics or {},
    )


def clopper_pearson_upper(hits: int, trials: int, level: float = 0.95) -> float:
    """One-sided upper Clopper-Pearson confidence bound for a binomial p."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if hits >= trials:
        return 1.0
    return float(stats.beta.ppf(level, hits + 1, trials - hits))


def log_mean_exp(values) -> float:
    """log of the arithmetic mean of exp(values); -inf entries allowed."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty input")
    m = arr.max()
    if not np.isfinite(m):
        if m == -math.inf:
            return -math.inf
        raise ValueError("non-finite input")
    return float(m + np.log(np.mean(np.exp(arr - m))))


def log_weighted_mean_stderr(log_values) -> tuple[float, float]:
    """Mean of exp(log_values) in log space, plus the standard error of the
    log of that mean (delta method)."""
    arr = np.asarray(log_values, dtype=float)
    k = arr.size
    if k == 0:
        raise ValueError("empty input")
    log_mean = log_mean_exp(arr)
    if k == 1 or log_mean == -math.inf:
        return log_mean, math.inf
    m = arr.max()
    v = np.exp(arr - m)
    mean = v.mean()
    se = v.std(ddof=1) / math.sqrt(k)
    return log_mean, float(se / mean)
