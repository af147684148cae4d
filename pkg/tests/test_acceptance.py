"""Acceptance gate for the polymer laboratory, one test per criterion.

Every test pins its seeds, sample sizes, and tolerances, so the whole file
is reproducible run to run.  Two criteria are expected to fail by design
and are left failing on purpose; their assertion messages carry the
analysis:

* 07a: the xi = 16 cell of the folding-strategy scan asks for a gain equal
  to the whole polymer budget, so the strategy bound is an exact zero and
  a four-point slope cannot exist.
* 10b: the measured partition-function scaling constant sits near four
  times the configured target, consistent with the energy counting ordered
  monomer pairs while the target constant assumes unordered pairs.

Heavy simulations are shared through session fixtures; nothing here
depends on a warm cache (green-function tables go to a throwaway
directory).
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from polymerlab.charge_field import charge_distribution
from polymerlab.energy import site_variance_formula
from polymerlab.experiment_cli import run_identity_suite
from polymerlab.gibbs_sampler import (
    GibbsChain,
    GibbsConfig,
    enumerate_gibbs_law,
    log_partition,
    phase_scan,
)
from polymerlab.green_function import (
    green_table,
    mc_never_return_fraction,
    mc_return_partial_sum,
    return_probabilities,
)
from polymerlab.lattice_walk import level_counts, local_times, q_norm, range_size, sample_walk
from polymerlab.rng import spawn_rng
from polymerlab.tail_estimators import (
    _interaction_parts,
    default_strategy_config,
    double_visit_strategy,
    exact_energy_distribution,
    exponent_fit,
    level_set_tail_probe,
    nagaev_envelope,
    naive_tail,
    strategy_lower_bound,
    tilted_upper_bound,
)

MASTER_SEED = 0

# wall-clock bookkeeping for the criteria that carry a runtime budget
_TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def green_cache(tmp_path_factory):
    """Throwaway cache directory so the green tables are rebuilt here."""
    return tmp_path_factory.mktemp("green_tables")


# --------------------------------------------------------------------------
# criterion 1: the energy identities hold on a large random instance grid


def test_criterion_01_energy_identities_hold():
    t0 = time.time()
    grids = [
        dict(
            n_values=[2, 16, 100],
            d_values=[3, 4, 5],
            charge_kinds=["rademacher", "gaussian"],
            samples=0,
            direct_samples=500,
        ),
        dict(
            n_values=[1000],
            d_values=[3, 4, 5],
            charge_kinds=["rademacher", "gaussian"],
            samples=0,
            direct_samples=167,
        ),
    ]
    instances = 3 * 3 * 2 * 500 + 1 * 3 * 2 * 167
    assert instances >= 10_000
    records = []
    for params in grids:
        records.extend(run_identity_suite(params, master_seed=MASTER_SEED))
    elapsed = time.time() - t0

    errors = [r for r in records if r.metric == "error"]
    assert not errors, [r.extra for r in errors]
    checked = {"identity_max_dev": 0, "split_consistency": 0, "diagonal_zero": 0, "floor_violations": 0}
    for r in records:
        head = r.metric.split("/", 1)[0]
        assert head in checked, r.metric
        checked[head] += 1
        if head == "floor_violations":
            assert r.value == 0, f"{r.metric}: {r.value} floor violations"
        else:
            assert r.value <= r.extra["tol"], f"{r.metric}: {r.value} > {r.extra['tol']}"
    # every (n, d, kind) cell reported all its identities
    assert checked["identity_max_dev"] == 24
    assert checked["split_consistency"] == 24
    assert checked["floor_violations"] == 24
    assert checked["diagonal_zero"] == 12  # sign-charge cells only
    assert elapsed < 120.0, f"identity grid took {elapsed:.0f} s"


# --------------------------------------------------------------------------
# criterion 2: naive Monte Carlo agrees with the exact small-polymer law


def test_criterion_02_monte_carlo_matches_exact_law():
    t0 = time.time()
    dist = charge_distribution("rademacher")
    worst_tv, worst_z = 0.0, 0.0
    for i, n in enumerate([2, 3, 4, 5, 6]):
        law = exact_energy_distribution(n, 3)
        vals = _interaction_parts(n, 3, dist, 1_000_000, spawn_rng(MASTER_SEED, 500 + i))
        vals = np.round(vals).astype(np.int64)
        support = sorted(law)
        exact_p = np.array([float(law[v]) for v in support])
        emp_p = np.array([(vals == v).mean() for v in support])
        tv = 0.5 * (np.abs(emp_p - exact_p).sum() + (1.0 - emp_p.sum()))
        worst_tv = max(worst_tv, float(tv))
        for t in support:
            cdf = float(sum(float(law[v]) for v in support if v <= t))
            if not 0.0 < cdf < 1.0:
                continue
            phat = float((vals <= t).mean())
            se = math.sqrt(cdf * (1.0 - cdf) / vals.size)
            worst_z = max(worst_z, abs(phat - cdf) / se)
    elapsed = time.time() - t0
    assert worst_tv < 0.005, f"worst total variation {worst_tv:.5f}"
    assert worst_z < 3.0, f"worst tail z-score {worst_z:.2f}"
    assert elapsed < 300.0, f"oracle comparison took {elapsed:.0f} s"


# --------------------------------------------------------------------------
# criterion 3: the green constant survives three independent cross-checks


def test_criterion_03_green_constant_cross_checks(green_cache):
    # (a) two independent series constructions agree term by term
    for d in (3, 4):
        quad = return_probabilities(d, 100, method="quadrature").probs
        conv = return_probabilities(d, 100, method="convolution").probs
        rel = np.max(np.abs(quad - conv) / quad)
        assert rel < 1e-6, f"d={d}: series methods disagree by {rel:.2e}"

    # (b) the partial sums match direct walk simulation within 1%
    for d, task in ((3, 600), (4, 601)):
        partial = float(return_probabilities(d, 100, method="quadrature").probs.sum())
        mc, _ = mc_return_partial_sum(d, 100, 10_000_000, spawn_rng(MASTER_SEED, task))
        rel = abs(mc - partial) / partial
        assert rel < 0.01, f"d={d}: partial sum off by {rel * 100:.2f}%"

    gamma0 = green_table(3, cache_dir=green_cache)["gamma0"]

    # (c) escape probability vs a long never-return simulation, within 2%
    frac, _ = mc_never_return_fraction(3, 32_768, 200_000, spawn_rng(MASTER_SEED, 610))
    assert abs(frac - gamma0) / gamma0 < 0.02, f"never-return fraction {frac:.5f} vs {gamma0:.5f}"

    # (d) range law: E|range|/n approaches the same constant, within 2%
    rng = spawn_rng(MASTER_SEED, 611)
    n = 50_000
    ratios = [range_size(local_times(sample_walk(n, 3, rng))) / n for _ in range(200)]
    mean_ratio = float(np.mean(ratios))
    assert abs(mean_ratio - gamma0) / gamma0 < 0.02, f"range/n {mean_ratio:.5f} vs {gamma0:.5f}"


# --------------------------------------------------------------------------
# criterion 4: level-set densities follow the geometric escape law


def test_criterion_04_level_set_geometric_law(green_cache):
    t0 = time.time()
    gamma0 = green_table(3, cache_dir=green_cache)["gamma0"]
    rng = spawn_rng(MASTER_SEED, 620)
    n, walks = 100_000, 200
    acc = np.zeros(4)
    for _ in range(walks):
        fld = local_times(sample_walk(n, 3, rng))
        for k in range(1, 5):
            acc[k - 1] += level_counts(fld, k - 1, k)[0]
    acc /= walks * n
    elapsed = time.time() - t0
    for k in range(1, 5):
        predicted = gamma0**2 * (1.0 - gamma0) ** (k - 1)
        rel = abs(acc[k - 1] - predicted) / predicted
        assert rel < 0.05, f"k={k}: density {acc[k - 1]:.5f} vs {predicted:.5f} ({rel * 100:.1f}%)"
    assert elapsed < 600.0, f"level-set scan took {elapsed:.0f} s"


# --------------------------------------------------------------------------
# criterion 5: the participation ratio stabilizes in n


def test_criterion_05_participation_ratio_stabilizes():
    rng = spawn_rng(MASTER_SEED, 621)
    means = []
    for n in (20_000, 80_000):
        vals = [q_norm(local_times(sample_walk(n, 3, rng)), 2) / n for _ in range(100)]
        means.append(float(np.mean(vals)))
    rel = abs(means[0] - means[1]) / means[1]
    assert rel < 0.05, f"participation ratio moved {rel * 100:.2f}% between sizes: {means}"


# --------------------------------------------------------------------------
# criterion 6: the per-site variance identity, exhaustively


def test_criterion_06_site_variance_identity_exhaustive():
    # sign charges: enumerate every +-1 word and compare exactly
    for l in range(1, 13):
        mean = Fraction(0)
        second = Fraction(0)
        for word in itertools.product((-1, 1), repeat=l):
            centered = sum(word) ** 2 - l
            mean += centered
            second += centered * centered
        mean /= 2**l
        second /= 2**l
        assert mean == 0
        enumerated = second  # variance, since the mean vanishes
        value, lower, upper = site_variance_formula(l, charge_distribution("rademacher"))
        assert Fraction(value) == enumerated, f"l={l}: {value} != {enumerated}"
        assert lower <= value <= upper

    # the same identity for the other charge laws, from their moments
    fourth = {"gaussian": 3.0, "centered_uniform": 9.0 / 5.0}
    for kind, mu4 in fourth.items():
        dist = charge_distribution(kind)
        for l in range(1, 13):
            value, lower, upper = site_variance_formula(l, dist)
            expected = l * (mu4 - 1.0) + 2.0 * l * (l - 1.0)
            assert value == pytest.approx(expected, rel=1e-12)
            assert lower - 1e-12 <= value <= upper + 1e-12


# --------------------------------------------------------------------------
# criterion 7: lower-tail exponents in d = 3 (xi and n scaling, both sides)

XI_GRID = [2, 4, 8, 16]
N_GRID = [1024, 2048, 4096, 8192, 16384]


@pytest.fixture(scope="session")
def d3_exponent_scans():
    t0 = time.time()
    out = {}
    n = 4096
    out["strategy_xi"] = []
    for i, xi in enumerate(XI_GRID):
        x = xi * n ** (2.0 / 3.0)
        cfg = default_strategy_config(n, 3, x)
        out["strategy_xi"].append((xi, strategy_lower_bound(n, 3, x, cfg, spawn_rng(MASTER_SEED, 300 + i))))
    out["strategy_n"] = []
    for i, nn in enumerate(N_GRID):
        x = 4 * nn ** (2.0 / 3.0)
        cfg = default_strategy_config(nn, 3, x)
        out["strategy_n"].append((nn, strategy_lower_bound(nn, 3, x, cfg, spawn_rng(MASTER_SEED, 320 + i))))
    out["tilted_xi"] = []
    for i, xi in enumerate(XI_GRID):
        x = xi * n ** (2.0 / 3.0)
        y = xi**0.2 * n ** (1.0 / 3.0)
        out["tilted_xi"].append((xi, tilted_upper_bound(n, 3, x, 0.08, y, 2000, spawn_rng(MASTER_SEED, 340 + i))))
    out["tilted_n"] = []
    for i, nn in enumerate(N_GRID):
        x = 4 * nn ** (2.0 / 3.0)
        y = 4**0.2 * nn ** (1.0 / 3.0)
        out["tilted_n"].append((nn, tilted_upper_bound(nn, 3, x, 0.08, y, 2000, spawn_rng(MASTER_SEED, 360 + i))))
    _TIMINGS["criterion_07"] = time.time() - t0
    return out


def _slope(cells):
    scales = [s for s, _ in cells]
    neglogs = [-est.log_p for _, est in cells]
    return exponent_fit(scales, neglogs, log_x=True, log_y=True).slope


def test_criterion_07a_folding_bound_xi_exponent(d3_exponent_scans):
    assert _TIMINGS["criterion_07"] < 1800.0
    cells = d3_exponent_scans["strategy_xi"]
    neglogs = [-est.log_p for _, est in cells]
    finite = [v for v in neglogs if math.isfinite(v)]
    # expected failure: at xi = 16 the requested gain x = xi n^(2/3) equals
    # n itself, the largest gain any sign configuration can produce, so the
    # strategy probability is an exact zero and no four-point slope exists
    assert len(finite) == len(cells), (
        f"only {len(finite)} of {len(cells)} scan cells have positive probability "
        f"(-log p by xi: {dict(zip(XI_GRID, neglogs))}); the xi=16 cell demands the "
        "full polymer budget and is infeasible for the folding strategy"
    )
    slope = _slope(cells)
    assert abs(slope - 0.8) <= 0.15, f"xi-exponent {slope:.3f} outside 0.8 +- 0.15"


def test_criterion_07b_folding_bound_n_exponent(d3_exponent_scans):
    assert _TIMINGS["criterion_07"] < 1800.0
    slope = _slope(d3_exponent_scans["strategy_n"])
    assert abs(slope - 1.0 / 3.0) <= 0.1, f"n-exponent {slope:.3f} outside 1/3 +- 0.1"


def test_criterion_07c_tilted_bound_xi_exponent(d3_exponent_scans):
    assert _TIMINGS["criterion_07"] < 1800.0
    slope = _slope(d3_exponent_scans["tilted_xi"])
    assert abs(slope - 0.8) <= 0.15, f"xi-exponent {slope:.3f} outside 0.8 +- 0.15"


def test_criterion_07d_tilted_bound_n_exponent(d3_exponent_scans):
    assert _TIMINGS["criterion_07"] < 1800.0
    slope = _slope(d3_exponent_scans["tilted_n"])
    assert abs(slope - 1.0 / 3.0) <= 0.1, f"n-exponent {slope:.3f} outside 1/3 +- 0.1"


# --------------------------------------------------------------------------
# criterion 8: the d = 4 regimes


def test_criterion_08a_double_visit_exponent(green_cache):
    xs, ys = [], []
    for i, n in enumerate([4096, 16384, 65536, 262144]):
        xi = n**0.2
        est = double_visit_strategy(n, 4, xi, spawn_rng(MASTER_SEED, 100 + i), walks=160, cache_dir=green_cache)
        xs.append(xi)
        ys.append(-est.log_p)
    slope = exponent_fit(xs, ys, log_x=True, log_y=True).slope
    assert abs(slope - 2.0) <= 0.2, f"double-visit exponent {slope:.3f} outside 2 +- 0.2"


def test_criterion_08b_folded_strategy_exponent():
    n = 32_768
    xs, ys = [], []
    for i, x in enumerate([256, 512, 1024, 2048]):
        cfg = default_strategy_config(n, 4, x)
        est = strategy_lower_bound(n, 4, x, cfg, spawn_rng(MASTER_SEED, 200 + i))
        xs.append(x)
        ys.append(-est.log_p)
    slope = exponent_fit(xs, ys, log_x=True, log_y=True).slope
    assert abs(slope - 2.0 / 3.0) <= 0.15, f"folded exponent {slope:.3f} outside 2/3 +- 0.15"


# --------------------------------------------------------------------------
# criterion 9: the Gibbs chain reproduces the exact annealed law


def test_criterion_09_chain_matches_exact_gibbs_law():
    cfg = GibbsConfig.from_effective(3, 3, 0.5)
    law = enumerate_gibbs_law(3, 3, 0.5)
    chain = GibbsChain(cfg, spawn_rng(MASTER_SEED, 900))
    counts: dict[tuple, int] = {}
    steps = 1_000_000
    for _ in range(steps):  # crosses 100 scheduled consistency audits
        chain.step()
        key = chain.increment_key()
        counts[key] = counts.get(key, 0) + 1
    tv = 0.5 * sum(abs(counts.get(word, 0) / steps - p) for word, p in law.items())
    outside = sum(c for w, c in counts.items() if w not in law) / steps
    chain._audit()  # and one final explicit audit
    assert outside == 0.0
    assert tv < 0.01, f"total variation {tv:.5f} after {steps} steps"
    assert 0.0 < chain.accepted / chain.steps < 1.0


# --------------------------------------------------------------------------
# criterion 10: the positive-temperature partition function


@pytest.fixture(scope="session")
def partition_scaling_runs(green_cache):
    c3 = green_table(3, cache_dir=green_cache)["green_constant"]
    t0 = time.time()
    cells = []
    for task, n in ((910, 1000), (911, 10_000)):
        cfg = GibbsConfig(n=n, d=3, beta_raw=0.2)
        cells.append((cfg, log_partition(cfg, spawn_rng(MASTER_SEED, task))))
    _TIMINGS["criterion_10_partition"] = time.time() - t0
    return {"c3": c3, "cells": cells}


def test_criterion_10a_log_partition_bounds(partition_scaling_runs):
    for cfg, res in partition_scaling_runs["cells"]:
        assert 0.0 <= res.value <= cfg.beta_eff * cfg.n, (
            f"n={cfg.n}: log partition {res.value:.4f} outside [0, {cfg.beta_eff * cfg.n:.3f}]"
        )


def test_criterion_10b_partition_scaling_constant(partition_scaling_runs):
    c3 = partition_scaling_runs["c3"]
    beta = 0.2
    target = c3 * beta**2 / 2.0
    scaled = [res.value / cfg.n**0.2 for cfg, res in partition_scaling_runs["cells"]]
    # expected failure: the measured constant lands near 4x this target
    # (both runs give scaled/target ~ 3.6-3.9, drifting toward 4).  The
    # energy sums over ordered monomer pairs, which doubles the coupling,
    # and the growth-rate reading of the constant contributes the other
    # factor of two relative to the configured target.
    trend_ok = abs(scaled[1] - target) < abs(scaled[0] - target)
    within = [abs(s / target - 1.0) <= 0.5 for s in scaled]
    assert all(within) and trend_ok, (
        f"scaled log-partition values {[f'{s:.5f}' for s in scaled]} vs target {target:.5f} "
        f"(ratios {[f'{s / target:.2f}' for s in scaled]}); the ratio drifts toward 4, "
        "consistent with an ordered-pair energy convention against an unordered-pair target"
    )


def test_criterion_10c_strong_coupling_occupies_mid_levels():
    t0 = time.time()
    freqs = {}
    for width in (2.0, 4.0, 8.0):
        (cell,) = phase_scan(
            [4096], [8.0], d=3, master_seed=MASTER_SEED, steps=150_000,
            level_width=width, task_offset=40,
        )
        assert cell.error is None, cell.error
        assert 0.0 < cell.acceptance <= 1.0
        freqs[width] = cell.level_event_freq
    _TIMINGS["criterion_10c"] = time.time() - t0
    assert max(freqs.values()) >= 0.9, f"mid-level occupation frequencies {freqs}"


def test_criterion_10d_weak_coupling_builds_no_peak():
    t0 = time.time()
    (cell,) = phase_scan(
        [4096], [0.2], d=3, master_seed=MASTER_SEED, steps=150_000,
        peak_factor=8.0, task_offset=41,
    )
    elapsed = time.time() - t0
    assert cell.error is None, cell.error
    assert cell.peak_event_freq <= 0.1, f"peak frequency {cell.peak_event_freq}"
    total = _TIMINGS.get("criterion_10_partition", 0.0) + _TIMINGS.get("criterion_10c", 0.0) + elapsed
    assert total < 2700.0, f"temperature-scan criterion took {total:.0f} s"


# --------------------------------------------------------------------------
# criterion 11: the three tail estimators are ordered, zeros stay honest


def test_criterion_11_estimator_ordering():
    dist = charge_distribution("rademacher")
    for i, n in enumerate([16, 32, 64]):
        x = math.ceil(n ** (2.0 / 3.0))
        naive = naive_tail(n, 3, dist, x, 1_000_000, spawn_rng(MASTER_SEED, 700 + i))
        cfg = default_strategy_config(n, 3, x)
        lower = strategy_lower_bound(n, 3, x, cfg, spawn_rng(MASTER_SEED, 710 + i))
        upper = tilted_upper_bound(n, 3, x, 0.08, n ** (1.0 / 3.0), 20_000, spawn_rng(MASTER_SEED, 720 + i))
        slack_lo = 3.0 * math.hypot(lower.stderr, naive.stderr)
        slack_up = 3.0 * math.hypot(naive.stderr, upper.stderr)
        assert lower.p_hat <= naive.p_hat + slack_lo, f"n={n}: lower bound above naive"
        assert naive.p_hat <= upper.p_hat + slack_up, f"n={n}: naive above upper bound"

    # a cell with zero observed hits must still report a positive bound
    zero = naive_tail(64, 3, dist, 40.0, 4000, spawn_rng(MASTER_SEED, 740))
    assert zero.p_hat == 0.0
    assert zero.upper_bound_95 is not None and zero.upper_bound_95 > 0.0
    assert zero.upper_bound_95 == pytest.approx(1.0 - 0.05 ** (1.0 / 4000), rel=1e-9)


# --------------------------------------------------------------------------
# criterion 12: exploratory diagnostics report and never gate


def test_criterion_12_diagnostics_report_without_gating():
    probe = level_set_tail_probe(10_000, 3, [2.0, 4.0, 8.0], 200, spawn_rng(MASTER_SEED, 730))
    assert sorted(probe) == ["estimates", "note", "per_sample_monotone", "y_grid"]
    assert probe["y_grid"] == [2.0, 4.0, 8.0]
    assert len(probe["estimates"]) == 3
    for est in probe["estimates"]:
        assert 0.0 <= est.p_hat <= 1.0
        assert est.samples == 200
    assert isinstance(probe["per_sample_monotone"], bool)
    assert "report only" in probe["note"]

    envelope = [
        nagaev_envelope(10_000, t, 2.0, lambda u: math.exp(-(u**2) / 2.0))
        for t in (100.0, 200.0, 400.0, 800.0)
    ]
    assert all(math.isfinite(e) and e > 0.0 for e in envelope)
    # the trend is recorded, deliberately without a numeric threshold
    assert isinstance(bool(envelope[0] > envelope[-1]), bool)
