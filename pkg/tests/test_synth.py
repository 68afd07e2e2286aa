import math

import numpy as np
import pytest

from mcuq.core import DomainError, NoiseSpec
from mcuq.synth import (BernoulliDataset, TraceDataset, child_seed,
                        draw_noise, make_low_rank, rng_for, sample_bernoulli,
                        sample_trace, two_point_noise)


RADEMACHER = NoiseSpec("scaled-rademacher", 0.5, 0.5)


class TestMakeLowRank:
    def test_rank_one_and_entry_bound(self):
        M = make_low_rank(8, 5, 1, 2.0, seed=3)
        assert np.linalg.matrix_rank(M) == 1
        assert np.max(np.abs(M)) == 2.0

    def test_exact_singular_count(self):
        M = make_low_rank(6, 6, 3, 1.0, seed=9)
        s = np.linalg.svd(M, compute_uv=False)
        assert int(np.sum(s > 1e-10 * s[0])) == 3

    def test_deterministic(self):
        A = make_low_rank(7, 7, 2, 1.0, seed=11)
        B = make_low_rank(7, 7, 2, 1.0, seed=11)
        np.testing.assert_array_equal(A, B)

    def test_seed_changes_draw(self):
        A = make_low_rank(7, 7, 2, 1.0, seed=11)
        B = make_low_rank(7, 7, 2, 1.0, seed=12)
        assert not np.array_equal(A, B)

    def test_invalid_rank(self):
        with pytest.raises(DomainError):
            make_low_rank(4, 4, 5, 1.0, seed=0)
        with pytest.raises(DomainError):
            make_low_rank(4, 4, 0, 1.0, seed=0)


class TestDrawNoise:
    def test_rademacher_support(self):
        draws = draw_noise(NoiseSpec("scaled-rademacher", 1.0, 2.0), 1000, seed=0)
        assert set(np.unique(draws)) == {-1.0, 1.0}

    def test_mean_near_zero(self):
        draws = draw_noise(RADEMACHER, 10 ** 6, seed=1)
        assert abs(np.mean(draws)) <= 4 * 0.5 / 10 ** 3

    def test_uniform_moments_and_bound(self):
        spec = NoiseSpec("uniform", 0.5, 1.0)
        draws = draw_noise(spec, 10 ** 6, seed=2)
        assert np.max(np.abs(draws)) <= spec.U
        assert np.var(draws) == pytest.approx(0.25, rel=0.01)

    def test_uniform_needs_room(self):
        with pytest.raises(DomainError):
            draw_noise(NoiseSpec("uniform", 0.9, 1.0), 10, seed=0)

    def test_truncated_gaussian_variance(self):
        spec = NoiseSpec("truncated-gaussian", 1.0, 2.0)
        draws = draw_noise(spec, 10 ** 6, seed=3)
        assert np.max(np.abs(draws)) <= 2.0
        assert np.var(draws) == pytest.approx(1.0, rel=0.01)
        assert abs(np.mean(draws)) < 0.005

    def test_truncated_gaussian_unreachable_variance(self):
        # The family's variance supremum on [-U, U] is U^2/3.
        with pytest.raises(DomainError):
            draw_noise(NoiseSpec("truncated-gaussian", 0.99, 1.0), 10, seed=0)

    def test_two_point_moments(self):
        spec = two_point_noise(0.2)
        draws = draw_noise(spec, 10 ** 6, seed=4, mu=0.2)
        assert set(np.unique(draws)) == {0.8, -1.2}
        assert abs(np.mean(draws)) < 0.004
        assert np.var(draws) == pytest.approx(0.96, rel=0.01)

    def test_two_point_requires_consistent_mu(self):
        spec = two_point_noise(0.2)
        with pytest.raises(DomainError):
            draw_noise(spec, 10, seed=0, mu=0.5)

    def test_sigma_above_bound_rejected(self):
        with pytest.raises(DomainError):
            NoiseSpec("scaled-rademacher", 2.0, 1.0)


class TestSampleTrace:
    def test_noiseless_values_exact(self):
        M = make_low_rank(5, 5, 2, 1.0, seed=5)
        data = sample_trace(M, 50, NoiseSpec("scaled-rademacher", 0.0, 1.0), seed=6)
        np.testing.assert_array_equal(data.y, M[data.rows, data.cols])

    def test_uniform_position_frequencies(self):
        M = np.zeros((5, 5))
        data = sample_trace(M, 10 ** 5, RADEMACHER, seed=7)
        counts = np.zeros(25)
        np.add.at(counts, data.rows * 5 + data.cols, 1)
        freq = counts / data.n
        se = math.sqrt(0.04 * 0.96 / data.n)
        assert np.all(np.abs(freq - 0.04) <= 3 * se)

    def test_deterministic(self):
        M = make_low_rank(4, 4, 1, 1.0, seed=8)
        d1 = sample_trace(M, 30, RADEMACHER, seed=9)
        d2 = sample_trace(M, 30, RADEMACHER, seed=9)
        np.testing.assert_array_equal(d1.rows, d2.rows)
        np.testing.assert_array_equal(d1.y, d2.y)

    def test_repeats_happen(self):
        M = np.zeros((3, 3))
        data = sample_trace(M, 40, RADEMACHER, seed=10)
        positions = list(zip(data.rows.tolist(), data.cols.tolist()))
        assert len(set(positions)) < len(positions)

    def test_noise_bound_holds(self):
        M = make_low_rank(6, 6, 2, 1.0, seed=11)
        data = sample_trace(M, 500, NoiseSpec("uniform", 0.4, 1.0), seed=12)
        assert np.max(np.abs(data.y - M[data.rows, data.cols])) <= 1.0

    def test_csv_round_trip(self):
        M = make_low_rank(4, 6, 1, 1.0, seed=13)
        data = sample_trace(M, 25, RADEMACHER, seed=14)
        back = TraceDataset.from_csv(data.to_csv())
        assert back.m1 == 4 and back.m2 == 6
        np.testing.assert_array_equal(back.rows, data.rows)
        np.testing.assert_array_equal(back.cols, data.cols)
        np.testing.assert_array_equal(back.y, data.y)


class TestSampleBernoulli:
    def test_full_observation(self):
        M = make_low_rank(4, 4, 1, 1.0, seed=15)
        data = sample_bernoulli(M, 16, RADEMACHER, seed=16)
        assert data.n_hat == 16
        assert data.p == 1.0

    def test_noiseless_values(self):
        M = make_low_rank(5, 5, 2, 1.0, seed=17)
        data = sample_bernoulli(M, 12, NoiseSpec("scaled-rademacher", 0.0, 1.0), seed=18)
        np.testing.assert_array_equal(data.values, np.where(data.mask, M, 0.0))

    def test_each_entry_at_most_once(self):
        M = np.zeros((4, 4))
        data = sample_bernoulli(M, 8, RADEMACHER, seed=19)
        assert data.mask.dtype == bool  # the mask cannot double-count

    def test_expected_count_binomial(self):
        M = np.zeros((10, 10))
        n, reps = 40, 10 ** 4
        hats = np.array([
            sample_bernoulli(M, n, RADEMACHER, seed=child_seed(20, r)).n_hat
            for r in range(reps)
        ])
        p = n / 100
        assert abs(np.mean(hats) - n) <= 3 * math.sqrt(n * (1 - p)) / 100

    def test_n_out_of_range(self):
        with pytest.raises(DomainError):
            sample_bernoulli(np.zeros((3, 3)), 10, RADEMACHER, seed=0)

    def test_csv_round_trip(self):
        M = make_low_rank(5, 4, 1, 1.0, seed=21)
        data = sample_bernoulli(M, 10, RADEMACHER, seed=22)
        back = BernoulliDataset.from_csv(data.to_csv())
        assert back.p == data.p
        np.testing.assert_array_equal(back.mask, data.mask)
        np.testing.assert_array_equal(back.values, data.values)


class TestSeedStreams:
    def test_child_seeds_distinct(self):
        seeds = {child_seed(0, i) for i in range(100)}
        assert len(seeds) == 100

    def test_rng_streams_independent(self):
        a = rng_for(0, 1).standard_normal(5)
        b = rng_for(0, 2).standard_normal(5)
        assert not np.array_equal(a, b)
