"""Monomer charge laws and their site-level aggregates.

All built-in charge distributions are exactly centered with unit variance,
so the fourth moment is the only distribution-specific constant downstream
formulas need.  The module also houses the exact sign-sum weight function
W(l, beta) = E[exp(-beta S_l^2)], the backbone of both the charge-integrated
Gibbs chain and the tilted rare-event charge sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .lattice_walk import LocalTimeField, Trajectory, pack_sites

RADEMACHER = "rademacher"
GAUSSIAN = "gaussian"
CENTERED_UNIFORM = "centered_uniform"

# exact fourth moments; mean 0 and variance 1 hold for every kind
_FOURTH_MOMENTS = {RADEMACHER: 1.0, GAUSSIAN: 3.0, CENTERED_UNIFORM: 9.0 / 5.0}

# W(l, beta) is summed exactly up to this local time; above it the
# Gaussian limit (1 + 2 beta l)^{-1/2} takes over (documented switch)
EXACT_WEIGHT_MAX = 10_000


@dataclass(frozen=True)
class ChargeDistribution:
    kind: str
    fourth_moment: float

    @property
    def mean(self) -> float:
        return 0.0

    @property
    def variance(self) -> float:
        return 1.0

    @property
    def chi1(self) -> float:
        """E[eta^4] + 1, the per-site variance constant."""
        return self.fourth_moment + 1.0


def charge_distribution(kind: str) -> ChargeDistribution:
    if kind not in _FOURTH_MOMENTS:
        raise ValueError(f"unknown charge kind: {kind!r}")
    return ChargeDistribution(kind=kind, fourth_moment=_FOURTH_MOMENTS[kind])


def moment_summary(dist: ChargeDistribution) -> tuple[float, float, float, float]:
    """(mean, variance, fourth moment, chi1)."""
    return (dist.mean, dist.variance, dist.fourth_moment, dist.chi1)


def sample_charges(n: int, dist: ChargeDistribution, rng: np.random.Generator) -> np.ndarray:
    """One charge per monomer.  Sign charges come back as integers so all
    their downstream arithmetic stays exact."""
    if n < 1:
        raise ValueError("need at least one charge")
    if dist.kind == RADEMACHER:
        return rng.integers(0, 2, size=n).astype(np.int64) * 2 - 1
    if dist.kind == GAUSSIAN:
        return rng.standard_normal(n)
    if dist.kind == CENTERED_UNIFORM:
        half = math.sqrt(3.0)
        return rng.uniform(-half, half, size=n)
    raise ValueError(f"unknown charge kind: {dist.kind!r}")


@dataclass(frozen=True)
class LocalCharges:
    """Per-site charge totals, aligned index by index with the
    LocalTimeField of the same trajectory."""

    sites: np.ndarray
    sums: np.ndarray
    total_charge: float


def local_charges(traj: Trajectory, charges) -> LocalCharges:
    charges = np.asarray(charges)
    if charges.shape != (traj.n,):
        raise ValueError("need exactly one charge per monomer")
    pos = traj.monomer_positions()
    codes = pack_sites(pos)
    if codes is None:
        sites, inverse = np.unique(pos, axis=0, return_inverse=True)
    else:
        _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        sites = pos[first]
    sums = np.bincount(inverse, weights=charges.astype(np.float64), minlength=sites.shape[0])
    if np.issubdtype(charges.dtype, np.integer):
        sums = np.rint(sums).astype(np.int64)
    return LocalCharges(sites=sites, sums=sums, total_charge=charges.sum())


def normalized_charge_squares(field: LocalTimeField, local: LocalCharges) -> np.ndarray:
    """Per-site (charge total)^2 / (local time), aligned with field.sites.

    Under charge resampling each entry has mean exactly 1.  The two inputs
    must describe the same trajectory; mismatched site sets are rejected.
    """
    if field.sites.shape != local.sites.shape or not np.array_equal(field.sites, local.sites):
        raise ValueError("field and charges describe different site sets")
    return np.asarray(local.sums, dtype=float) ** 2 / field.counts


def sign_weight_logs(local_times_array, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """(log W(l, beta), tilted mean of S_l^2) for each l.

    W(l, beta) = E[exp(-beta S_l^2)] with S_l a sum of l independent signs.
    Exact binomial log-sum-exp up to EXACT_WEIGHT_MAX, Gaussian limit above.
    The second output equals -d/db log W, so it decreases from l at beta = 0
    toward the parity floor.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    ls = np.asarray(local_times_array, dtype=np.int64)
    log_w = np.zeros(ls.shape, dtype=float)
    tilted = np.zeros(ls.shape, dtype=float)
    flat = ls.ravel()
    lw = log_w.ravel()
    tm = tilted.ravel()
    for i, l in enumerate(flat):
        l = int(l)
        if l < 0:
            raise ValueError("local times must be nonnegative")
        if l == 0:
            continue
        if l > EXACT_WEIGHT_MAX:
            lw[i] = -0.5 * math.log1p(2.0 * beta * l)
            tm[i] = l / (1.0 + 2.0 * beta * l)
            continue
        k = np.arange(l + 1)
        s2 = (2 * k - l).astype(float) ** 2
        logs = gammaln(l + 1) - gammaln(k + 1) - gammaln(l - k + 1) - l * math.log(2.0) - beta * s2
        m = logs.max()
        w = np.exp(logs - m)
        z = w.sum()
        lw[i] = m + math.log(z)
        tm[i] = float((s2 * w).sum() / z)
    return log_w, tilted


@dataclass(frozen=True)
class WeightTable:
    """W(l, beta) for l = 0..l_max, with its derivative table.

    neg_dlog_w[l] = -d/dbeta log W(l, beta), the tilted mean of S_l^2.
    Entries above ``exact_upto`` use the Gaussian limit.
    """

    beta: float
    log_w: np.ndarray
    neg_dlog_w: np.ndarray
    exact_upto: int

    @property
    def l_max(self) -> int:
        return self.log_w.shape[0] - 1


def rademacher_weight_table(l_max: int, beta: float) -> WeightTable:
    if l_max < 0:
        raise ValueError("l_max must be nonnegative")
    ls = np.arange(l_max + 1)
    log_w, tilted = sign_weight_logs(ls, beta)
    return WeightTable(beta=float(beta), log_w=log_w, neg_dlog_w=tilted, exact_upto=min(l_max, EXACT_WEIGHT_MAX))


def tilted_sign_sum_pmf(l: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Support and pmf of S_l under the exp(-theta S^2) tilt."""
    if l < 1:
        raise ValueError("l must be positive")
    k = np.arange(l + 1)
    s = 2 * k - l
    logs = gammaln(l + 1) - gammaln(k + 1) - gammaln(l - k + 1) - theta * s.astype(float) ** 2
    logs -= logs.max()
    p = np.exp(logs)
    p /= p.sum()
    return s, p
