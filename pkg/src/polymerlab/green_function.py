"""Return probabilities and Green-function constants of the lazy walk.

Two independent numerical routes compute P0(S_m = 0): Fourier quadrature of
the characteristic function and direct iteration of the step stencil on a
truncated box.  Summing the series gives the expected number of returns,
whose fitted m^{-d/2} tail (with a factor-two safety margin) certifies the
truncation error; the escape probability follows.  Results are cached on
disk as small JSON tables because every tail and Gibbs experiment consumes
them.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .lattice_walk import move_table

__all__ = [
    "ReturnSeries",
    "GreenConstant",
    "return_probabilities",
    "green_constant",
    "escape_probability",
    "green_table",
    "mc_return_partial_sum",
    "mc_never_return_fraction",
]


class GridResolutionError(RuntimeError):
    """Quadrature nodes failed their self-check at some m."""


@dataclass(frozen=True)
class ReturnSeries:
    """P0(S_m = 0) for m = 1..n_max, plus method bookkeeping.

    ``leakage`` is the probability mass lost to box truncation by the
    convolution route (zero for quadrature); it upper-bounds the absolute
    error of every term.
    """

    d: int
    probs: np.ndarray
    method: str
    leakage: float = 0.0

    @property
    def n_max(self) -> int:
        return self.probs.shape[0]

    def partial_sum(self) -> float:
        return float(self.probs.sum())


@dataclass(frozen=True)
class GreenConstant:
    """Expected number of returns c_d = sum_m P0(S_m = 0).

    value = partial sum + fitted tail correction.  tail_bound is a certified
    bound on the full truncated tail (twice the fitted correction), so the
    residual error of ``value`` is at most tail_bound / 2.
    """

    d: int
    value: float
    tail_bound: float
    n_terms: int
    amplitude: float
    series: ReturnSeries

    @property
    def uncertainty(self) -> float:
        return self.tail_bound / 2.0


def _lazy_char_exponent(d: int) -> float:
    return 2 * d + 1


def _quadrature_nodes(m: int) -> int:
    # phi^m concentrates on a sqrt(1/m) neighborhood of theta = 0;
    # node count grows like sqrt(m) to keep resolving it
    return int(math.ceil(3.5 * math.sqrt(m))) + 8


def _quadrature_prob(d: int, m: int, nodes: int, cache: dict) -> float:
    # single-slot cache: node counts are nondecreasing in m, and the tensor
    # grids get large in d = 4, so only the current grid is kept alive
    if cache.get("nodes") != nodes:
        x, w = np.polynomial.legendre.leggauss(nodes)
        theta = (x + 1.0) * (math.pi / 2.0)
        cosses = np.cos(theta)
        shape = [1] * d
        acc = np.zeros([nodes] * d)
        wt = np.ones([nodes] * d)
        for axis in range(d):
            sh = shape.copy()
            sh[axis] = nodes
            acc = acc + cosses.reshape(sh)
            wt = wt * (0.5 * w).reshape(sh)
        phi = (1.0 + 2.0 * acc) / (2 * d + 1)
        cache.clear()
        cache.update(nodes=nodes, phi=phi, wt=wt)
    return float(np.sum(cache["wt"] * cache["phi"] ** m))


def _quadrature_series(d: int, n_max: int, verify: bool) -> np.ndarray:
    cache: dict = {}
    probs = np.empty(n_max)
    for m in range(1, n_max + 1):
        probs[m - 1] = _quadrature_prob(d, m, _quadrature_nodes(m), cache)
    if verify:
        for m in {1, max(1, n_max // 2), n_max}:
            finer = _quadrature_prob(d, m, _quadrature_nodes(m) + 14, cache)
            if abs(finer - probs[m - 1]) > 1e-9 * max(probs[m - 1], 1e-12):
                raise GridResolutionError(f"quadrature self-check failed at m={m}")
    return probs


def _convolution_series(d: int, n_max: int) -> tuple[np.ndarray, float]:
    reach = min(n_max, int(math.ceil(4.0 * math.sqrt(n_max))))
    side = 2 * reach + 1
    if side**d * 8 > 2e9:
        raise ValueError("convolution box too large; use quadrature")
    p = np.zeros([side] * d)
    origin = tuple([reach] * d)
    p[origin] = 1.0
    w = 1.0 / (2 * d + 1)
    probs = np.empty(n_max)
    full = slice(None)
    shifts = []
    for axis in range(d):
        dst_lo = tuple([full] * axis + [slice(0, side - 1)] + [full] * (d - axis - 1))
        src_lo = tuple([full] * axis + [slice(1, side)] + [full] * (d - axis - 1))
        shifts.append((dst_lo, src_lo))
        shifts.append((src_lo, dst_lo))
    for m in range(n_max):
        q = p * w
        for dst, src in shifts:
            q[dst] += w * p[src]
        p = q
        probs[m] = p[origin]
    leakage = max(0.0, 1.0 - float(p.sum()))
    return probs, leakage


def return_probabilities(d: int, n_max: int, method: str = "quadrature", verify: bool = True) -> ReturnSeries:
    """P0(S_m = 0) for m = 1..n_max by the requested route.

    Dimensions below 3 are rejected: the downstream constants assume a
    transient walk with a summable return series.
    """
    if d < 3:
        raise ValueError("dimension must be at least 3 (transience required)")
    if n_max < 1:
        raise ValueError("n_max must be positive")
    if method == "quadrature":
        probs = _quadrature_series(d, n_max, verify)
        return ReturnSeries(d=d, probs=probs, method="quadrature", leakage=0.0)
    if method == "convolution":
        probs, leakage = _convolution_series(d, n_max)
        return ReturnSeries(d=d, probs=probs, method="convolution", leakage=leakage)
    raise ValueError(f"unknown method: {method!r}")


def _fit_amplitude(series: ReturnSeries) -> float:
    """Amplitude A of P_m ~ A m^{-d/2}, fitted on the last decade."""
    n = series.n_max
    lo = max(1, n // 10)
    m = np.arange(lo, n + 1, dtype=float)
    vals = series.probs[lo - 1 :]
    if np.any(vals <= 0):
        raise ValueError("nonpositive return probabilities; cannot fit tail")
    return float(np.exp(np.mean(np.log(vals) + (series.d / 2.0) * np.log(m))))


def green_constant(
    d: int,
    tol: float = 0.1,
    method: str = "quadrature",
    n_min: int = 64,
    n_cap: int = 20_000,
) -> GreenConstant:
    """Expected number of returns to the origin, with a certified tail.

    A pilot series fits the m^{-d/2} amplitude; the truncation point is then
    chosen so the certified tail bound (twice the fitted tail) is below tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    series = return_probabilities(d, n_min, method=method)
    # tail(N) = A * N^{1-d/2} / (d/2 - 1); certified at twice that.  The
    # amplitude refit on the extended series can drift above the pilot fit,
    # so keep extending until the certificate actually clears tol.
    power = d / 2.0 - 1.0
    n_terms = n_min
    for _ in range(4):
        amp = _fit_amplitude(series)
        correction = amp * n_terms ** (1.0 - d / 2.0) / power
        if 2.0 * correction <= tol:
            break
        # 5% headroom on the projected tail absorbs the usual refit drift
        n_needed = int(math.ceil((2.1 * amp / (tol * power)) ** (1.0 / power)))
        n_terms = max(n_terms + 1, n_needed)
        if n_terms > n_cap:
            raise ValueError(f"tolerance {tol} needs {n_terms} terms, over the {n_cap} budget")
        series = return_probabilities(d, n_terms, method=method)
    else:
        raise ValueError(f"certificate did not stabilize below tol={tol}")
    return GreenConstant(
        d=d,
        value=series.partial_sum() + correction,
        tail_bound=2.0 * correction,
        n_terms=n_terms,
        amplitude=amp,
        series=series,
    )


def escape_probability(d: int, tol: float = 0.1, cache_dir: Optional[Path] = None) -> float:
    """Probability the walk never revisits its starting site."""
    table = green_table(d, tol=tol, cache_dir=cache_dir)
    return table["gamma0"]


def _cache_path(d: int, tol: float, cache_dir: Optional[Path]) -> Path:
    base = Path(cache_dir) if cache_dir is not None else Path.home() / ".cache" / "polymerlab"
    return base / f"green_d{d}_tol{tol:g}.json"


def green_table(
    d: int,
    tol: float = 0.1,
    cache_dir: Optional[Path] = None,
    method: str = "quadrature",
) -> dict:
    """Green constant, escape probability, and series metadata, disk-cached.

    The table is plain JSON so other tools (and humans) can read it.
    """
    path = _cache_path(d, tol, cache_dir)
    if path.exists():
        with open(path) as fh:
            table = json.load(fh)
        if table.get("d") == d and table.get("tol") == tol:
            return table
    gc = green_constant(d, tol=tol, method=method)
    table = {
        "d": d,
        "tol": tol,
        "method": method,
        "green_constant": gc.value,
        "tail_bound": gc.tail_bound,
        "n_terms": gc.n_terms,
        "amplitude": gc.amplitude,
        "gamma0": 1.0 / (1.0 + gc.value),
        "return_probs": [float(p) for p in gc.series.probs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(table, fh, sort_keys=True)
    os.replace(tmp, path)
    return table


def mc_return_partial_sum(
    d: int, n_max: int, walks: int, rng: np.random.Generator, chunk: int = 250_000
) -> tuple[float, float]:
    """Monte Carlo estimate of sum_{m<=N} P0(S_m = 0): the mean number of
    returns within the first N steps."""
    moves = move_table(d).astype(np.int16)
    totals = np.zeros(0, dtype=np.int32)
    done = 0
    while done < walks:
        b = min(chunk, walks - done)
        pos = np.zeros((b, d), dtype=np.int16)
        count = np.zeros(b, dtype=np.int32)
        for _ in range(n_max):
            pos += moves[rng.integers(0, 2 * d + 1, size=b)]
            count += np.all(pos == 0, axis=1)
        totals = np.concatenate([totals, count])
        done += b
    mean = float(totals.mean())
    return mean, float(totals.std(ddof=1) / math.sqrt(walks))


def mc_never_return_fraction(
    d: int, length: int, walks: int, rng: np.random.Generator, chunk: int = 200_000
) -> tuple[float, float]:
    """Fraction of walks with no return to the origin within ``length``
    steps.  Returned walks are retired to keep the sweep cheap."""
    moves = move_table(d).astype(np.int32)
    never = 0
    done = 0
    while done < walks:
        b = min(chunk, walks - done)
        pos = np.zeros((b, d), dtype=np.int32)
        step = 0
        while step < length and pos.shape[0] > 0:
            sub = min(256, length - step)
            returned = np.zeros(pos.shape[0], dtype=bool)
            for _ in range(sub):
                pos += moves[rng.integers(0, 2 * d + 1, size=pos.shape[0])]
                returned |= np.all(pos == 0, axis=1)
            pos = pos[~returned]
            step += sub
        never += pos.shape[0]
        done += b
    frac = never / walks
    return float(frac), float(math.sqrt(frac * (1.0 - frac) / walks))
