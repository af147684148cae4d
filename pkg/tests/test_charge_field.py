"""Charge distributions, per-site charge aggregation, and the annealed
sign-weight tables W(l, beta) = E[exp(-beta S_l^2)]."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polymerlab.charge_field import (
    EXACT_WEIGHT_MAX,
    charge_distribution,
    local_charges,
    moment_summary,
    normalized_charge_squares,
    rademacher_weight_table,
    sample_charges,
    sign_weight_logs,
    tilted_sign_sum_pmf,
)
from polymerlab.lattice_walk import Trajectory, local_times
from polymerlab.rng import spawn_rng


def _held_walk(l, d=3):
    """Trajectory that sits at the origin for l monomer slots."""
    return Trajectory(start=np.zeros(d, np.int64), steps=np.zeros((l, d), np.int64))


class TestDistributions:
    def test_moment_summaries(self):
        # uniform on [-sqrt(3), sqrt(3)]: E x^4 = (sqrt 3)^4 / 5 = 9/5
        assert moment_summary(charge_distribution("rademacher")) == pytest.approx((0.0, 1.0, 1.0, 2.0))
        assert moment_summary(charge_distribution("gaussian")) == pytest.approx((0.0, 1.0, 3.0, 4.0))
        assert moment_summary(charge_distribution("centered_uniform")) == pytest.approx((0.0, 1.0, 9 / 5, 14 / 5))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            charge_distribution("cauchy")

    def test_sign_charges_are_exact_integers(self):
        eta = sample_charges(1000, charge_distribution("rademacher"), spawn_rng(21, 0))
        assert np.issubdtype(eta.dtype, np.integer)
        assert set(np.unique(eta)) == {-1, 1}

    @pytest.mark.parametrize("kind", ["rademacher", "gaussian", "centered_uniform"])
    def test_samples_match_declared_moments(self, kind):
        dist = charge_distribution(kind)
        eta = sample_charges(200_000, dist, spawn_rng(22, len(kind)))
        n = eta.size
        # sample moments within 4 sigma of the declared values
        assert abs(eta.mean()) < 4 / math.sqrt(n)
        var_se = math.sqrt((dist.fourth_moment - 1.0) / n)
        # sign charges have eta^2 = 1, so the sample variance is 1 - mean^2
        assert abs(eta.var() - 1.0) < 4 * var_se + 16 / n
        m8 = float(np.mean(eta.astype(float) ** 8))
        fourth_se = math.sqrt(max(m8 - dist.fourth_moment**2, 0.0) / n)
        assert abs(np.mean(eta.astype(float) ** 4) - dist.fourth_moment) < 4 * fourth_se + 1e-12

    def test_empty_draw_rejected(self):
        with pytest.raises(ValueError):
            sample_charges(0, charge_distribution("gaussian"), spawn_rng(0, 0))


class TestLocalCharges:
    def test_two_monomers_one_site(self):
        traj = _held_walk(2)
        lc = local_charges(traj, np.array([1, 1]))
        assert lc.sums.tolist() == [2]
        assert lc.total_charge == 2

    def test_opposite_signs_on_distinct_sites(self):
        traj = Trajectory.from_positions([[0, 0, 0], [1, 0, 0]])
        lc = local_charges(traj, np.array([1, -1]))
        got = {tuple(s): int(c) for s, c in zip(lc.sites, lc.sums)}
        assert got == {(0, 0, 0): 1, (1, 0, 0): -1}
        assert lc.total_charge == 0

    def test_sites_align_with_local_times(self):
        traj = Trajectory(start=np.zeros(3, np.int64), steps=np.array(
            [[1, 0, 0], [0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [1, 0, 0]], np.int64))
        field = local_times(traj)
        lc = local_charges(traj, np.ones(traj.n, dtype=np.int64))
        assert np.array_equal(field.sites, lc.sites)
        assert np.array_equal(lc.sums, field.counts)  # unit charges reduce to local times

    def test_charge_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            local_charges(_held_walk(3), np.array([1, -1]))

    def test_integer_charges_keep_integer_sums(self):
        lc = local_charges(_held_walk(4), np.array([1, -1, 1, 1]))
        assert np.issubdtype(lc.sums.dtype, np.integer)
        assert lc.sums.tolist() == [2]


class TestNormalizedChargeSquares:
    def test_cancelling_pair_scores_zero(self):
        traj = _held_walk(2)
        zeta = normalized_charge_squares(local_times(traj), local_charges(traj, np.array([1, -1])))
        assert zeta.tolist() == [0.0]

    @pytest.mark.parametrize("l", range(1, 13))
    def test_sign_average_is_exactly_one(self, l):
        # exhaustive over all 2^l sign words at a single site of time l:
        # mean of (sum eta)^2 / l is 1, variance is 2(l-1)/l <= chi1
        traj = _held_walk(l)
        field = local_times(traj)
        vals = []
        for word in itertools.product((-1, 1), repeat=l):
            zeta = normalized_charge_squares(field, local_charges(traj, np.array(word)))
            vals.append(float(zeta[0]))
        vals = np.array(vals)
        assert vals.mean() == pytest.approx(1.0, abs=1e-12)
        assert vals.var() == pytest.approx(2 * (l - 1) / l, abs=1e-12)
        assert vals.var() <= charge_distribution("rademacher").chi1

    def test_mismatched_site_sets_rejected(self):
        a, b = _held_walk(2), Trajectory.from_positions([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(ValueError):
            normalized_charge_squares(local_times(a), local_charges(b, np.array([1, 1])))


def _brute_weight(l, beta):
    """E[exp(-beta S_l^2)] by full 2^l enumeration."""
    acc = 0.0
    for word in itertools.product((-1, 1), repeat=l):
        acc += math.exp(-beta * sum(word) ** 2)
    return acc / 2**l


def _brute_tilted_mean(l, beta):
    """E[S^2 exp(-beta S^2)] / E[exp(-beta S^2)] by full enumeration."""
    num = den = 0.0
    for word in itertools.product((-1, 1), repeat=l):
        w = math.exp(-beta * sum(word) ** 2)
        num += sum(word) ** 2 * w
        den += w
    return num / den


class TestWeightTable:
    def test_closed_forms(self):
        beta = 0.37
        table = rademacher_weight_table(2, beta)
        assert table.log_w[0] == 0.0
        assert table.log_w[1] == pytest.approx(-beta)  # S_1^2 = 1 always
        assert table.log_w[2] == pytest.approx(math.log((1 + math.exp(-4 * beta)) / 2))

    @pytest.mark.parametrize("l", range(1, 11))
    def test_matches_exhaustive_enumeration(self, l):
        beta = 0.37
        table = rademacher_weight_table(l, beta)
        assert table.log_w[l] == pytest.approx(math.log(_brute_weight(l, beta)), abs=1e-11)
        assert table.neg_dlog_w[l] == pytest.approx(_brute_tilted_mean(l, beta), abs=1e-9)

    def test_zero_temperature_is_free(self):
        table = rademacher_weight_table(20, 0.0)
        assert np.allclose(table.log_w, 0.0)
        assert np.allclose(table.neg_dlog_w, np.arange(21))  # E S_l^2 = l

    def test_monotone_decreasing_in_beta(self):
        betas = [0.0, 0.1, 0.5, 2.0]
        logs = [rademacher_weight_table(9, b).log_w[9] for b in betas]
        assert all(a > b for a, b in zip(logs, logs[1:]))

    def test_gaussian_limit_takes_over_smoothly(self):
        beta = 0.1
        big = EXACT_WEIGHT_MAX
        log_w, tilted = sign_weight_logs(np.array([big, big + 1]), beta)
        assert log_w[1] == pytest.approx(-0.5 * math.log1p(2 * beta * (big + 1)))
        assert tilted[1] == pytest.approx((big + 1) / (1 + 2 * beta * (big + 1)))
        # the exact value just below the cutoff agrees with the limit law
        assert log_w[0] == pytest.approx(-0.5 * math.log1p(2 * beta * big), rel=1e-3)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValueError):
            sign_weight_logs(np.array([3]), -0.1)
        with pytest.raises(ValueError):
            sign_weight_logs(np.array([-1]), 0.1)
        with pytest.raises(ValueError):
            rademacher_weight_table(-1, 0.1)

    @given(st.integers(1, 40), st.floats(0.0, 3.0))
    def test_weights_are_probabilities(self, l, beta):
        log_w, tilted = sign_weight_logs(np.array([l]), beta)
        assert log_w[0] <= 1e-12
        assert 0.0 <= tilted[0] <= l + 1e-9


class TestTiltedSignSumPmf:
    @pytest.mark.parametrize("l", [1, 2, 5, 8])
    def test_matches_exhaustive_tilt(self, l):
        theta = 0.23
        support, pmf = tilted_sign_sum_pmf(l, theta)
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
        weights = {}
        for word in itertools.product((-1, 1), repeat=l):
            s = sum(word)
            weights[s] = weights.get(s, 0.0) + math.exp(-theta * s**2)
        total = sum(weights.values())
        for s, p in zip(support, pmf):
            assert p == pytest.approx(weights[int(s)] / total, abs=1e-12)

    def test_zero_tilt_is_binomial(self):
        support, pmf = tilted_sign_sum_pmf(4, 0.0)
        assert support.tolist() == [-4, -2, 0, 2, 4]
        assert pmf == pytest.approx(np.array([1, 4, 6, 4, 1]) / 16)

    def test_rejects_empty_sum(self):
        with pytest.raises(ValueError):
            tilted_sign_sum_pmf(0, 0.1)
