"""Annealed Gibbs sampling for the charged polymer at positive temperature.

Integrating the sign charges out of exp(-beta_eff H) leaves a walk marginal
proportional to prod_z W(l_z, beta_eff), where W(l, b) = E exp(-b S_l^2) is
the sign-weight of a site visited l times.  A Metropolis chain on the
increment word samples that marginal with suffix-regrow and tail-translate
moves, tracking the log weight and the tilted second moments incrementally
(with periodic exact audits).  The conditional mean energy given the walk
is sum_z E_tilt[S_l^2] - n, which is what the estimators average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .charge_field import rademacher_weight_table
from .lattice_walk import LocalTimeField, Trajectory, move_table
from .rng import spawn_rng

__all__ = [
    "GibbsConfig",
    "GibbsChain",
    "IntegrationCurvatureError",
    "log_weight",
    "mean_energy",
    "MeanEnergyResult",
    "log_partition",
    "LogPartitionResult",
    "PhaseObservables",
    "phase_scan",
    "enumerate_gibbs_law",
]


class IntegrationCurvatureError(RuntimeError):
    """Thermodynamic integration grid too coarse for the observed curvature."""


@dataclass(frozen=True)
class GibbsConfig:
    """Chain parameters; the effective inverse temperature is
    beta_raw * n**(-scaling_exponent), the window where the polymer's
    collapse transition plays out."""

    n: int
    d: int
    beta_raw: float
    scaling_exponent: float = 0.4

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two monomers")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.beta_raw < 0:
            raise ValueError("beta_raw must be nonnegative")

    @property
    def beta_eff(self) -> float:
        return self.beta_raw * self.n ** (-self.scaling_exponent)

    @classmethod
    def from_effective(cls, n: int, d: int, beta_eff: float, scaling_exponent: float = 0.4) -> "GibbsConfig":
        return cls(n=n, d=d, beta_raw=beta_eff * n**scaling_exponent, scaling_exponent=scaling_exponent)


def log_weight(field: LocalTimeField, beta_eff: float) -> float:
    """Log of the annealed walk weight prod_z W(l_z, beta_eff)."""
    from .charge_field import sign_weight_logs

    log_w, _ = sign_weight_logs(field.counts, beta_eff)
    return float(np.sum(log_w))


class GibbsChain:
    """Metropolis chain on the n-1 meaningful increments of the polymer.

    Moves: with probability 0.8 regrow a geometric-length suffix of the
    increment word uniformly, else redraw a single increment (which
    translates the downstream tail).  Both proposals are symmetric, so the
    acceptance ratio is exp(delta log weight).  The occupation field lives
    in a dict keyed by packed site codes; every move touches only the
    affected sites.
    """

    AUDIT_EVERY = 10_000
    AUDIT_TOL = 1e-9

    def __init__(self, config: GibbsConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        n, d = config.n, config.d
        self._moves = move_table(d)
        self._span = 2 * n + 1
        self._powers = np.array([self._span**k for k in range(d - 1, -1, -1)], dtype=np.int64)
        table = rademacher_weight_table(n, config.beta_eff)
        self._log_w = table.log_w
        self._tilted = table.neg_dlog_w
        # geometric regrow length, mean ~ n/8 but never below 2
        self._regrow_p = 1.0 / max(2.0, n / 8.0)
        self._idx = rng.integers(0, 2 * d + 1, size=n - 1)
        self._pos = np.zeros((n, d), dtype=np.int64)
        np.cumsum(self._moves[self._idx], axis=0, out=self._pos[1:])
        self._codes = self._pack(self._pos)
        self._field: dict[int, int] = {}
        for c in self._codes:
            self._field[int(c)] = self._field.get(int(c), 0) + 1
        self._log_weight = sum(self._log_w[l] for l in self._field.values())
        self._sum_tilted = sum(self._tilted[l] for l in self._field.values())
        self.steps = 0
        self.accepted = 0
        self.accepted_by_kind = {"regrow": 0, "translate": 0}

    def _pack(self, pos: np.ndarray) -> np.ndarray:
        return (pos + self.config.n) @ self._powers

    def _apply(self, lo: int, new_pos: np.ndarray, new_codes: np.ndarray) -> float:
        """Score the replacement of monomers lo..n-1; returns delta log
        weight and stashes the pending delta for commit()."""
        old_codes = self._codes[lo:]
        both = np.concatenate([old_codes, new_codes])
        sign = np.empty(both.shape[0], dtype=np.int64)
        sign[: old_codes.shape[0]] = -1
        sign[old_codes.shape[0] :] = 1
        uniq, inverse = np.unique(both, return_inverse=True)
        net = np.bincount(inverse, weights=sign.astype(float), minlength=uniq.shape[0])
        changed = np.flatnonzero(net != 0)
        codes = uniq[changed].tolist()
        deltas = net[changed].astype(np.int64)
        get = self._field.get
        old_counts = np.fromiter((get(c, 0) for c in codes), dtype=np.int64, count=len(codes))
        new_counts = old_counts + deltas
        d_log = float(np.sum(self._log_w[new_counts]) - np.sum(self._log_w[old_counts]))
        d_tilt = float(np.sum(self._tilted[new_counts]) - np.sum(self._tilted[old_counts]))
        self._pending = (lo, new_pos, new_codes, codes, new_counts, d_log, d_tilt)
        return d_log

    def _commit(self) -> None:
        lo, new_pos, new_codes, codes, new_counts, d_log, d_tilt = self._pending
        field = self._field
        for c, new in zip(codes, new_counts.tolist()):
            if new:
                field[c] = new
            else:
                del field[c]
        self._pos[lo:] = new_pos
        self._codes[lo:] = new_codes
        self._log_weight += d_log
        self._sum_tilted += d_tilt

    def step(self) -> bool:
        n, d = self.config.n, self.config.d
        rng = self.rng
        if rng.random() < 0.8:
            kind = "regrow"
            length = min(int(rng.geometric(self._regrow_p)), n - 1)
            j = n - 1 - length
            new_idx = rng.integers(0, 2 * d + 1, size=length)
            new_pos = np.empty((length, d), dtype=np.int64)
            np.cumsum(self._moves[new_idx], axis=0, out=new_pos)
            new_pos += self._pos[j]
            lo = j + 1
        else:
            kind = "translate"
            j = int(rng.integers(0, n - 1))
            new_move = int(rng.integers(0, 2 * d + 1))
            shift = self._moves[new_move] - self._moves[self._idx[j]]
            lo = j + 1
            new_pos = self._pos[lo:] + shift
        new_codes = self._pack(new_pos)
        d_log = self._apply(lo, new_pos, new_codes)
        accept = d_log >= 0 or rng.random() < math.exp(d_log)
        if accept:
            self._commit()
            if kind == "regrow":
                self._idx[j:] = new_idx
            else:
                self._idx[j] = new_move
            self.accepted += 1
            self.accepted_by_kind[kind] += 1
        self.steps += 1
        if self.steps % self.AUDIT_EVERY == 0:
            self._audit()
        return accept

    def _audit(self) -> None:
        codes = self._pack(self._pos)
        field: dict[int, int] = {}
        for c in codes:
            field[int(c)] = field.get(int(c), 0) + 1
        if field != self._field:
            raise RuntimeError("incremental occupation field drifted from the walk")
        log_weight = sum(self._log_w[l] for l in field.values())
        if abs(log_weight - self._log_weight) > self.AUDIT_TOL * max(1.0, abs(log_weight)):
            raise RuntimeError("incremental log weight drifted beyond audit tolerance")
        self._log_weight = log_weight
        self._sum_tilted = sum(self._tilted[l] for l in field.values())

    @property
    def log_weight_value(self) -> float:
        return self._log_weight

    def conditional_mean_energy(self) -> float:
        """E[H | walk] under the tilted charge law: sum_z E S_l^2 - n."""
        return self._sum_tilted - self.config.n

    def local_time_counts(self) -> np.ndarray:
        return np.fromiter(self._field.values(), dtype=np.int64, count=len(self._field))

    def increment_key(self) -> tuple:
        return tuple(int(i) for i in self._idx)

    def to_trajectory(self) -> Trajectory:
        steps = np.vstack([self._moves[self._idx], np.zeros((1, self.config.d), dtype=np.int64)])
        return Trajectory(start=np.zeros(self.config.d, dtype=np.int64), steps=steps)


@dataclass(frozen=True)
class MeanEnergyResult:
    value: float
    stderr: float
    equilibrated: bool
    diagnostics: dict = dc_field(default_factory=dict)


def mean_energy(
    config: GibbsConfig,
    rng: np.random.Generator,
    steps: int = 200_000,
    burn_frac: float = 0.2,
    batches: int = 20,
) -> MeanEnergyResult:
    """Gibbs-average energy by MCMC with batch-mean errors.

    At beta = 0 the free measure gives exactly zero (each site contributes
    E S_l^2 = l and the l's sum to n), so no chain is run.
    """
    if config.beta_raw == 0.0:
        return MeanEnergyResult(0.0, 0.0, True, {"exact": True})
    if steps < 10 * batches:
        raise ValueError("too few steps for batch means")
    chain = GibbsChain(config, rng)
    burn = int(steps * burn_frac)
    for _ in range(burn):
        chain.step()
    kept = steps - burn
    values = np.empty(kept)
    for i in range(kept):
        chain.step()
        values[i] = chain.conditional_mean_energy()
    batch_means = values[: kept - kept % batches].reshape(batches, -1).mean(axis=1)
    mean = float(batch_means.mean())
    se = float(batch_means.std(ddof=1) / math.sqrt(batches))
    half = batches // 2
    m1, m2 = batch_means[:half].mean(), batch_means[half:].mean()
    s1 = batch_means[:half].std(ddof=1) / math.sqrt(half)
    s2 = batch_means[half:].std(ddof=1) / math.sqrt(half)
    drift = abs(m1 - m2)
    equilibrated = bool(drift <= 3.0 * math.hypot(s1, s2) + 1e-12)
    return MeanEnergyResult(
        value=mean,
        stderr=se,
        equilibrated=equilibrated,
        diagnostics={
            "steps": steps,
            "burn": burn,
            "acceptance": chain.accepted / chain.steps,
            "split_half_drift": drift,
        },
    )


@dataclass(frozen=True)
class LogPartitionResult:
    value: float
    stderr: float
    beta_eff: float
    grid: np.ndarray
    integrand: np.ndarray
    simpson_trapezoid_gap: float


def log_partition(
    config: GibbsConfig,
    rng: np.random.Generator,
    grid_points: int = 9,
    steps: int = 120_000,
    curvature_tol: float = 0.02,
) -> LogPartitionResult:
    """log E exp(-beta_eff H) by thermodynamic integration.

    d/db log Z = -<H>_b, integrated over a uniform grid from 0 with
    Simpson's rule; the b = 0 endpoint is exactly zero.  A Simpson vs
    trapezoid comparison guards against an under-resolved grid, and the
    result must land in [0, beta_eff n] (Jensen below, H >= -n above).
    """
    if grid_points < 5 or grid_points % 2 == 0:
        raise ValueError("grid_points must be odd and at least 5")
    b_max = config.beta_eff
    grid = np.linspace(0.0, b_max, grid_points)
    integrand = np.zeros(grid_points)
    errs = np.zeros(grid_points)
    for i, b in enumerate(grid):
        if b == 0.0:
            continue  # free measure: <H> = 0 exactly
        sub = GibbsConfig.from_effective(config.n, config.d, float(b), config.scaling_exponent)
        res = mean_energy(sub, rng, steps=steps)
        integrand[i] = -res.value
        errs[i] = res.stderr
    h = grid[1] - grid[0] if grid_points > 1 else 0.0
    coeffs = np.ones(grid_points)
    coeffs[1:-1:2] = 4.0
    coeffs[2:-1:2] = 2.0
    simpson = h / 3.0 * float(np.dot(coeffs, integrand))
    trapezoid = h * float(integrand.sum() - 0.5 * (integrand[0] + integrand[-1]))
    gap = abs(simpson - trapezoid)
    stderr = h / 3.0 * math.sqrt(float(np.sum((coeffs * errs) ** 2)))
    if gap > curvature_tol * max(1.0, abs(simpson)) + 3.0 * stderr:
        raise IntegrationCurvatureError(
            f"Simpson vs trapezoid gap {gap:.3g} exceeds tolerance; refine the grid"
        )
    slack = 3.0 * stderr + 1e-9
    if not (-slack <= simpson <= b_max * config.n + slack):
        raise RuntimeError(f"log partition {simpson:.3g} outside [0, beta_eff n]")
    return LogPartitionResult(
        value=simpson,
        stderr=stderr,
        beta_eff=b_max,
        grid=grid,
        integrand=integrand,
        simpson_trapezoid_gap=gap,
    )


@dataclass(frozen=True)
class PhaseObservables:
    """One cell of a temperature scan."""

    n: int
    d: int
    beta_raw: float
    beta_eff: float
    mean_energy: float = math.nan
    mean_energy_stderr: float = math.nan
    level_event_freq: float = math.nan
    peak_event_freq: float = math.nan
    level_window: tuple = ()
    level_threshold: float = math.nan
    peak_threshold: float = math.nan
    equilibrated: bool = False
    acceptance: float = math.nan
    error: str = None


def phase_scan(
    n_values,
    beta_values,
    d: int = 3,
    master_seed: int = 0,
    scaling_exponent: float = 0.4,
    steps: int = 150_000,
    burn_frac: float = 0.2,
    level_width: float = 8.0,
    peak_factor: float = 4.0,
    sample_every: int = 50,
    task_offset: int = 0,
) -> list[PhaseObservables]:
    """Scan (n, beta) cells; each cell runs an independent seeded chain.

    Per cell we record the Gibbs mean energy and two geometry events: the
    occupation spread event (at least n^(3/5)/a^4 sites with local time in
    [n^(2/5)/a, a n^(2/5)], a = level_width) and the peak event
    (max local time >= b n^(1/5), b = peak_factor).  Cell failures are
    isolated into the record instead of aborting the scan.
    """
    out = []
    task = task_offset
    for n in n_values:
        for beta in beta_values:
            lo = n**0.4 / level_width
            hi = level_width * n**0.4
            level_thr = n**0.6 / level_width**4
            peak_thr = peak_factor * n**0.2
            try:
                cfg = GibbsConfig(n=n, d=d, beta_raw=beta, scaling_exponent=scaling_exponent)
                rng = spawn_rng(master_seed, task)
                chain = GibbsChain(cfg, rng)
                burn = int(steps * burn_frac)
                for _ in range(burn):
                    chain.step()
                kept = steps - burn
                values = np.empty(kept)
                level_hits = 0
                peak_hits = 0
                draws = 0
                for i in range(kept):
                    chain.step()
                    values[i] = chain.conditional_mean_energy()
                    if i % sample_every == 0:
                        counts = chain.local_time_counts()
                        level_hits += int(np.sum((counts >= lo) & (counts <= hi)) >= level_thr)
                        peak_hits += int(counts.max(initial=0) >= peak_thr)
                        draws += 1
                batches = 20
                bm = values[: kept - kept % batches].reshape(batches, -1).mean(axis=1)
                half = batches // 2
                drift = abs(bm[:half].mean() - bm[half:].mean())
                scale = math.hypot(
                    bm[:half].std(ddof=1) / math.sqrt(half),
                    bm[half:].std(ddof=1) / math.sqrt(half),
                )
                out.append(
                    PhaseObservables(
                        n=n,
                        d=d,
                        beta_raw=beta,
                        beta_eff=cfg.beta_eff,
                        mean_energy=float(bm.mean()),
                        mean_energy_stderr=float(bm.std(ddof=1) / math.sqrt(batches)),
                        level_event_freq=level_hits / draws,
                        peak_event_freq=peak_hits / draws,
                        level_window=(lo, hi),
                        level_threshold=level_thr,
                        peak_threshold=peak_thr,
                        equilibrated=bool(drift <= 3.0 * scale + 1e-12),
                        acceptance=chain.accepted / chain.steps,
                    )
                )
            except Exception as exc:
                eff = float(beta * n ** (-scaling_exponent)) if n >= 1 else math.nan
                out.append(
                    PhaseObservables(
                        n=n, d=d, beta_raw=beta, beta_eff=eff, error=f"{type(exc).__name__}: {exc}",
                    )
                )
            task += 1
    return out


def enumerate_gibbs_law(n: int, d: int, beta_eff: float) -> dict[tuple, float]:
    """Exact annealed Gibbs law on increment words, for tiny polymers.

    Returns the normalized probability of every (2d+1)^(n-1) increment
    tuple; used to validate the chain's stationary distribution.
    """
    from itertools import product

    words = (2 * d + 1) ** (n - 1)
    if words > 1_000_000:
        raise ValueError("state space too large to enumerate")
    moves = [tuple(row) for row in move_table(d)]
    table = rademacher_weight_table(n, beta_eff)
    weights = {}
    total = 0.0
    for seq in product(range(2 * d + 1), repeat=n - 1):
        occ: dict[tuple, int] = {}
        site = (0,) * d
        occ[site] = 1
        for m in seq:
            site = tuple(a + b for a, b in zip(site, moves[m]))
            occ[site] = occ.get(site, 0) + 1
        w = math.exp(sum(table.log_w[l] for l in occ.values()))
        weights[seq] = w
        total += w
    return {seq: w / total for seq, w in weights.items()}
