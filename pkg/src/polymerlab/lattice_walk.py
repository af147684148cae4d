"""Lazy simple random walk on Z^d and its occupation statistics.

Each step the walk holds or moves to one of the 2d nearest neighbors, all
2d+1 choices equally likely.  Everything downstream (energies, folding
strategies, Gibbs chains) consumes the bookkeeping implemented here: local
times, level sets, occupation q-norms, and ball confinement, including a
fixed-effort multilevel splitting estimator for confinement events far too
rare for rejection sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimates import TailEstimate, from_hits, log_mean_exp

__all__ = [
    "move_table",
    "Trajectory",
    "LocalTimeField",
    "ConfinementResult",
    "LatticeBall",
    "lattice_ball",
    "pack_sites",
    "sample_walk",
    "local_times",
    "q_norm",
    "level_counts",
    "range_size",
    "sample_confined_walk",
    "survival_probability",
    "confinement_rate_guess",
    "splitting_confinement_run",
]


def move_table(d: int) -> np.ndarray:
    """The 2d+1 legal increments: hold first, then -e_i, +e_i per axis."""
    if d < 1:
        raise ValueError("dimension must be at least 1")
    moves = np.zeros((2 * d + 1, d), dtype=np.int64)
    for axis in range(d):
        moves[1 + 2 * axis, axis] = -1
        moves[2 + 2 * axis, axis] = 1
    return moves


@dataclass(frozen=True)
class Trajectory:
    """A length-n polymer: a start site plus the n sampled increments.

    The monomers are the replayed positions S(0..n-1); the final increment
    only sets the walk endpoint S(n) and carries no occupation weight.
    """

    start: np.ndarray
    steps: np.ndarray

    def __post_init__(self):
        start = np.asarray(self.start, dtype=np.int64)
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 2 or steps.shape[0] < 1:
            raise ValueError("steps must be a nonempty (n, d) array")
        if start.shape != (steps.shape[1],):
            raise ValueError("start dimension does not match steps")
        # legal increments are the zero vector or a signed unit vector
        if np.abs(steps).sum(axis=1).max() > 1:
            raise ValueError("increments must be holds or unit moves")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "steps", steps)

    @property
    def n(self) -> int:
        return self.steps.shape[0]

    @property
    def d(self) -> int:
        return self.steps.shape[1]

    def positions(self) -> np.ndarray:
        """All n+1 replayed positions S(0..n)."""
        pos = np.empty((self.n + 1, self.d), dtype=np.int64)
        pos[0] = self.start
        np.cumsum(self.steps, axis=0, out=pos[1:])
        pos[1:] += self.start
        return pos

    def monomer_positions(self) -> np.ndarray:
        """The n charged positions S(0..n-1)."""
        return self.positions()[: self.n]

    @classmethod
    def from_positions(cls, positions) -> "Trajectory":
        """Rebuild from monomer positions; a hold is appended as the final
        (weightless) increment."""
        pos = np.asarray(positions, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be a nonempty (n, d) array")
        d = pos.shape[1]
        steps = np.vstack([np.diff(pos, axis=0), np.zeros((1, d), np.int64)])
        return cls(start=pos[0], steps=steps)


@dataclass(frozen=True)
class LocalTimeField:
    """Sparse local times: the distinct visited sites and their visit counts.

    Sites are ordered deterministically (by packed code, lexicographic as a
    fallback) so that parallel charge aggregation aligns index by index.
    """

    sites: np.ndarray
    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.min(initial=1) < 1:
            raise ValueError("counts must be positive")
        if int(counts.sum()) != self.total:
            raise ValueError("counts do not partition the total time")
        object.__setattr__(self, "counts", counts)

    @property
    def support_size(self) -> int:
        return self.sites.shape[0]

    def as_dict(self) -> dict:
        return {tuple(map(int, s)): int(c) for s, c in zip(self.sites, self.counts)}


@dataclass(frozen=True)
class ConfinementResult:
    """Outcome of one ball-confinement attempt."""

    survived: bool
    radius: float
    duration: int
    trajectory: Optional[Trajectory] = None


def pack_sites(coords) -> Optional[np.ndarray]:
    """Distinct int64 code per site (Horner over the observed span).

    Returns None when the span would overflow 62 bits; callers then fall
    back to row-wise unique, which is slower but dimension-agnostic.
    """
    coords = np.asarray(coords)
    if coords.ndim != 2:
        raise ValueError("expected an (m, d) array")
    if coords.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    lo = coords.min(axis=0).astype(np.int64)
    span = coords.max(axis=0).astype(np.int64) - lo + 1
    if float(np.sum(np.log2(span.astype(float) + 1.0))) >= 62.0:
        return None
    codes = np.zeros(coords.shape[0], dtype=np.int64)
    for axis in range(coords.shape[1]):
        codes *= int(span[axis])
        codes += coords[:, axis].astype(np.int64) - lo[axis]
    return codes


def sample_walk(n: int, d: int, rng: np.random.Generator) -> Trajectory:
    """Fresh n-increment lazy walk started at the origin."""
    if n < 1:
        raise ValueError("need at least one increment")
    moves = move_table(d)
    draws = rng.integers(0, 2 * d + 1, size=n)
    return Trajectory(start=np.zeros(d, dtype=np.int64), steps=moves[draws])


def _field_from_positions(pos: np.ndarray) -> LocalTimeField:
    codes = pack_sites(pos)
    if codes is None:
        sites, counts = np.unique(pos, axis=0, return_counts=True)
    else:
        _, first, counts = np.unique(codes, return_index=True, return_counts=True)
        sites = pos[first]
    return LocalTimeField(sites=sites, counts=counts.astype(np.int64), total=pos.shape[0])


def local_times(traj: Trajectory) -> LocalTimeField:
    """Visit counts of the n monomer positions; counts sum to n."""
    return _field_from_positions(traj.monomer_positions())


def q_norm(field: LocalTimeField, q: float) -> float:
    """Sum of local times raised to q.  q = 1 collapses to the total time;
    exponents below 1 are rejected (the inverse-participation reading
    assumes a convex power)."""
    if q < 1:
        raise ValueError("q must be at least 1")
    if q == 1:
        return float(field.total)
    return float(np.sum(field.counts.astype(float) ** q))


def level_counts(field: LocalTimeField, x: float, y: float) -> tuple[int, int]:
    """(number of sites, occupation mass) with local time in (x, y]."""
    if not (0 <= x < y):
        raise ValueError("need 0 <= x < y")
    mask = (field.counts > x) & (field.counts <= y)
    return int(mask.sum()), int(field.counts[mask].sum())


def range_size(field: LocalTimeField) -> int:
    """Number of distinct visited sites."""
    return field.support_size


@dataclass(frozen=True)
class LatticeBall:
    """Lattice sites of the Euclidean ball |z|_2 <= radius, with an O(1)
    site-to-index lookup over the bounding cube."""

    d: int
    radius: float
    sites: np.ndarray
    _grid: np.ndarray
    _reach: int

    @property
    def size(self) -> int:
        return self.sites.shape[0]

    def site_indices(self, positions) -> np.ndarray:
        """Index of each position within ``sites``, -1 when off the ball."""
        pos = np.asarray(positions, dtype=np.int64)
        squeeze = pos.ndim == 1
        if squeeze:
            pos = pos[None, :]
        side = 2 * self._reach + 1
        off = pos + self._reach
        inside = np.all((off >= 0) & (off < side), axis=1)
        flat = np.zeros(pos.shape[0], dtype=np.int64)
        for axis in range(self.d):
            flat = flat * side + np.where(inside, off[:, axis], 0)
        idx = np.where(inside, self._grid[flat], -1)
        return idx[0] if squeeze else idx

    def contains(self, positions) -> np.ndarray:
        return self.site_indices(positions) >= 0


def lattice_ball(d: int, radius: float) -> LatticeBall:
    """Enumerate {z in Z^d : |z|_2 <= radius}."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    reach = int(math.floor(radius))
    side = 2 * reach + 1
    if side**d > 5e7:
        raise ValueError("ball too large to enumerate")
    axes = np.arange(-reach, reach + 1, dtype=np.int64)
    grids = np.meshgrid(*([axes] * d), indexing="ij")
    cube = np.stack([g.ravel() for g in grids], axis=1)
    inside = (cube.astype(float) ** 2).sum(axis=1) <= radius**2 + 1e-9
    sites = cube[inside]
    flat_index = np.full(side**d, -1, dtype=np.int32)
    flat = np.zeros(sites.shape[0], dtype=np.int64)
    for axis in range(d):
        flat = flat * side + (sites[:, axis] + reach)
    flat_index[flat] = np.arange(sites.shape[0], dtype=np.int32)
    return LatticeBall(d=d, radius=float(radius), sites=sites, _grid=flat_index, _reach=reach)


def sample_confined_walk(duration: int, radius: float, d: int, rng: np.random.Generator) -> ConfinementResult:
    """One rejection attempt: does a fresh walk keep all of S(0..T) inside
    the ball?  The surviving trajectory is attached for reuse."""
    if duration < 1:
        raise ValueError("duration must be positive")
    ball = lattice_ball(d, radius)
    if ball.size == 0:
        return ConfinementResult(False, float(radius), duration, None)
    traj = sample_walk(duration, d, rng)
    survived = bool(np.all(ball.contains(traj.positions())))
    return ConfinementResult(survived, float(radius), duration, traj if survived else None)


_FIRST_BESSEL_ZERO = {
    # first zero of J_{d/2-1}; continuum Dirichlet gap of the ball
    3: math.pi,
    4: 3.8317059702075125,
    5: 4.493409457909064,
    6: 5.135622301840683,
    7: 5.763459196894550,
    8: 6.380161895923984,
}


def confinement_rate_guess(duration: int, radius: float, d: int) -> float:
    """Analytic guess for -log P(stay in B(radius) through T).

    Uses the Brownian Dirichlet eigenvalue of the lazy kernel with a one
    lattice-unit boundary layer.  Only a planning device for splitting
    schedules; the estimators never assert it.
    """
    if radius < 1.0:
        # single-site ball: the walk must hold still, probability (2d+1)^-(T-1)
        return max(0, duration - 1) * math.log(2 * d + 1)
    nu = d / 2.0 - 1.0
    j1 = _FIRST_BESSEL_ZERO.get(d, nu + 1.8557571 * nu ** (1.0 / 3.0) + 1.033150 * nu ** (-1.0 / 3.0))
    sigma2 = 2.0 / (2 * d + 1)  # per-coordinate step variance
    lam = 0.5 * sigma2 * (j1 / (radius + 1.0)) ** 2
    return lam * duration


class SplittingDied(Exception):
    """Raised internally when every particle leaves the ball in one level.

    Carries the partial log survival through the completed levels so callers
    can still state an honest upper confidence bound.
    """

    def __init__(self, level: int, log_partial: float = 0.0):
        super().__init__(f"all particles died at level {level}")
        self.level = level
        self.log_partial = log_partial


@dataclass
class SplittingPopulation:
    """Final state of one fixed-effort splitting run: survivor positions,
    their in-ball visit counts over the monomers S(0..T-1), and the family
    (root ancestor) of each survivor for decorrelation bookkeeping."""

    log_p: float
    positions: np.ndarray
    counts: Optional[np.ndarray]
    families: np.ndarray
    levels: int


def splitting_confinement_run(
    duration: int,
    ball: LatticeBall,
    d: int,
    rng: np.random.Generator,
    particles: int = 1024,
    levels: Optional[int] = None,
    track_counts: bool = False,
) -> SplittingPopulation:
    """One fixed-effort multilevel splitting pass through the confinement
    event, resampling survivors back to full strength at every checkpoint.

    Raises SplittingDied if a level loses every particle.
    """
    if ball.size == 0:
        raise ValueError("empty ball")
    if levels is None:
        levels = _auto_levels(duration, ball.radius, d)
    levels = max(1, min(levels, duration))
    moves = move_table(d)
    P = int(particles)
    pos = np.zeros((P, d), dtype=np.int64)
    rows = np.arange(P)
    counts = None
    if track_counts:
        counts = np.zeros((P, ball.size), dtype=np.int32)
        counts[:, ball.site_indices(np.zeros(d, np.int64))] = 1  # S(0)
    families = np.arange(P, dtype=np.int64)
    checkpoints = np.linspace(0, duration, levels + 1).round().astype(int)
    log_p = 0.0
    step = 0
    for lev in range(levels):
        alive = np.ones(P, dtype=bool)
        for _ in range(checkpoints[lev + 1] - checkpoints[lev]):
            step += 1
            pos += moves[rng.integers(0, 2 * d + 1, size=P)]
            idx = ball.site_indices(pos)
            alive &= idx >= 0
            if track_counts and step <= duration - 1:
                live = alive.nonzero()[0]
                counts[live, idx[live]] += 1
        k = int(alive.sum())
        if k == 0:
            raise SplittingDied(lev, log_p)
        log_p += math.log(k / P)
        sel = rng.choice(np.flatnonzero(alive), size=P, replace=True)
        pos = pos[sel].copy()
        families = families[sel].copy()
        if track_counts:
            counts = counts[sel].copy()
    return SplittingPopulation(log_p=log_p, positions=pos, counts=counts, families=families, levels=levels)


def _auto_levels(duration: int, radius: float, d: int) -> int:
    # one checkpoint per ~1.5 nats of predicted decay keeps the per-level
    # survivor fraction near e^{-1.5}, so fixed-effort resampling does not starve
    rate = confinement_rate_guess(duration, radius, d)
    return int(np.clip(math.ceil(rate / 1.5), 1, min(duration, 8192)))


def survival_probability(
    duration: int,
    radius: float,
    d: int,
    method: str,
    budget: int,
    rng: np.random.Generator,
    replicates: int = 4,
) -> TailEstimate:
    """P(lazy walk keeps S(0..T) inside B(radius)).

    method 'rejection' treats budget as a number of independent walks;
    method 'splitting' treats it as the particle count of each of
    ``replicates`` independent fixed-effort runs.
    """
    if duration < 1 or budget < 1:
        raise ValueError("duration and budget must be positive")
    if radius >= duration:
        # the walk cannot leave the ball within T unit moves
        return TailEstimate(1.0, 0.0, 0.0, 0, method=method, diagnostics={"certain": True})
    ball = lattice_ball(d, radius)
    if ball.size == 0:
        raise ValueError("radius excludes even the origin")
    if method == "rejection":
        moves = move_table(d)
        hits = 0
        done = 0
        chunk = max(1, min(budget, int(2e6) // max(duration, 1)))
        while done < budget:
            b = min(chunk, budget - done)
            draws = rng.integers(0, 2 * d + 1, size=(b, duration))
            pos = np.cumsum(moves[draws], axis=1)
            ok = np.all(ball.contains(pos.reshape(-1, d)).reshape(b, duration), axis=1)
            hits += int(ok.sum())
            done += b
        return from_hits(hits, budget, method="rejection")
    if method == "splitting":
        logs = []
        died = []
        levels = _auto_levels(duration, radius, d)
        for _ in range(max(1, replicates)):
            try:
                run = splitting_confinement_run(duration, ball, d, rng, particles=budget, levels=levels)
                logs.append(run.log_p)
            except SplittingDied as exc:
                died.append(exc.level)
        diag = {"levels": levels, "replicates": max(1, replicates), "died_at_levels": died}
        if not logs:
            return TailEstimate(
                0.0, 0.0, -math.inf, budget * max(1, replicates), method="splitting",
                diagnostics={**diag, "splitting_failed": True},
            )
        log_p = log_mean_exp(logs)
        p = math.exp(log_p)
        if len(logs) > 1:
            vals = np.exp(np.asarray(logs) - max(logs))
            rel = float(vals.std(ddof=1) / (vals.mean() * math.sqrt(len(logs))))
        else:
            rel = math.inf
        return TailEstimate(
            p_hat=p if p > 0 else 0.0,
            stderr=p * rel if (p > 0 and math.isfinite(rel)) else 0.0,
            log_p=log_p,
            samples=budget * max(1, replicates),
            method="splitting",
            diagnostics={**diag, "log_stderr": rel},
        )
    raise ValueError(f"unknown method: {method!r}")
