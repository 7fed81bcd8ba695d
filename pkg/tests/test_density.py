import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oversmooth.core import (
    Alignment,
    AlignmentEntry,
    ContractError,
    SeededRng,
    Spectrogram,
)
from oversmooth.density import (
    BinOutOfRange,
    FreqPair,
    NoPairs,
    PhonemeAbsent,
    TimePair,
    dip_statistic,
    kde1d,
    kde2d,
    mean_dip,
    phoneme_joint,
    phoneme_marginal,
    silverman_bandwidth,
)


def trapezoid(values, grid):
    return float(np.trapezoid(values, grid))


class TestKde1d:
    def test_single_sample_peak(self):
        density = kde1d([0.0], bandwidth=1.0, grid=[0.0])
        assert density.values[0] == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)

    def test_symmetry(self):
        samples = [-2.0, -0.5, 0.5, 2.0]
        density = kde1d(samples, bandwidth=0.7,
                        grid=np.linspace(-5, 5, 501))
        assert np.allclose(density.values, density.values[::-1], atol=1e-9)

    def test_integral_near_one(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            density = kde1d(rng.normal(size=200))
            mass = trapezoid(density.values, density.grid)
            assert 0.98 <= mass <= 1.02

    def test_nonnegative(self):
        density = kde1d(np.random.default_rng(1).normal(size=50))
        assert np.all(density.values >= 0)

    def test_zero_variance_needs_bandwidth(self):
        with pytest.raises(ContractError):
            kde1d([1.0, 1.0, 1.0])
        density = kde1d([1.0, 1.0, 1.0], bandwidth=0.5)
        assert density.bandwidth == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            kde1d([])

    def test_silverman_formula(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=400)
        expected = 1.06 * np.std(x, ddof=1) * 400 ** (-0.2)
        assert silverman_bandwidth(x) == pytest.approx(expected, rel=1e-12)


class TestKde2d:
    def test_single_pair_peak(self):
        density = kde2d([(0.0, 0.0)], bandwidths=(1.0, 1.0))
        peak = density.values.max()
        # the auto grid has no point exactly at the origin; the nearest one
        # sits within half a grid step, so the peak is just below 1/(2*pi)
        assert peak == pytest.approx(1 / (2 * np.pi), rel=1e-2)
        assert peak <= 1 / (2 * np.pi) + 1e-12
        ix = np.argmin(np.abs(density.grid_x))
        iy = np.argmin(np.abs(density.grid_y))
        assert density.values[ix, iy] == peak

    def test_diagonal_concentration(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=300)
        density = kde2d(np.column_stack([x, x]), bandwidths=(0.1, 0.1))
        gx, gy = np.meshgrid(density.grid_x, density.grid_y, indexing="ij")
        # both kernel factors sit >= 4.5 bandwidths out once |x - y| > 9h
        far = np.abs(gx - gy) > 0.9
        assert np.all(density.values[far] < 1e-6)

    def test_integral_near_one(self):
        rng = np.random.default_rng(4)
        pairs = rng.normal(size=(300, 2))
        density = kde2d(pairs)
        dx = density.grid_x[1] - density.grid_x[0]
        dy = density.grid_y[1] - density.grid_y[0]
        mass = density.values.sum() * dx * dy
        assert 0.95 <= mass <= 1.05

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            kde2d(np.empty((0, 2)))


def corpus_from_columns(column_values, label="R", bins=4, bin_index=2):
    """One-utterance corpus with chosen values at one bin of every frame."""
    column_values = np.asarray(column_values, dtype=float)
    values = np.zeros((len(column_values), bins))
    values[:, bin_index] = column_values
    spec = Spectrogram(values)
    align = Alignment((AlignmentEntry(label, 0, len(column_values)),))
    return [(spec, align)]


class TestPhonemeMarginal:
    def test_constant_peaks_at_value(self):
        corpus = corpus_from_columns(np.full(50, 2.5))
        density = phoneme_marginal(corpus, "R", 2, bandwidth=0.3)
        peak = density.grid[np.argmax(density.values)]
        assert abs(peak - 2.5) < 0.05

    def test_bimodal_corpus_two_maxima(self):
        rng = np.random.default_rng(5)
        column = np.concatenate([
            rng.normal(-1.0, 0.1, size=200), rng.normal(1.0, 0.1, size=200)
        ])
        density = phoneme_marginal(corpus_from_columns(column), "R", 2)
        v = density.values
        local_max = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:]) & (v[1:-1] > 0.3 * v.max())
        peaks = density.grid[1:-1][local_max]
        assert any(abs(p + 1.0) < 0.3 for p in peaks)
        assert any(abs(p - 1.0) < 0.3 for p in peaks)

    def test_absent_phoneme(self):
        with pytest.raises(PhonemeAbsent):
            phoneme_marginal(corpus_from_columns(np.ones(10)), "ZZ", 2)

    def test_bin_out_of_range(self):
        with pytest.raises(BinOutOfRange):
            phoneme_marginal(corpus_from_columns(np.ones(10)), "R", 9)

    def test_pools_across_utterances(self):
        corpus = corpus_from_columns(np.full(30, -1.0)) + corpus_from_columns(
            np.full(30, 1.0)
        )
        density = phoneme_marginal(corpus, "R", 2, bandwidth=0.2)
        assert trapezoid(density.values, density.grid) == pytest.approx(1.0, abs=0.02)


class TestPhonemeJoint:
    def test_equal_bins_concentrate_on_diagonal(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(80, 4))
        base[:, 3] = base[:, 2]
        spec = Spectrogram(base)
        align = Alignment((AlignmentEntry("R", 0, 80),))
        density = phoneme_joint([(spec, align)], "R", FreqPair(2, 3),
                                bandwidths=(0.1, 0.1))
        gx, gy = np.meshgrid(density.grid_x, density.grid_y, indexing="ij")
        assert np.all(density.values[np.abs(gx - gy) > 0.9] < 1e-6)

    def test_iid_noise_uncorrelated(self):
        rng = np.random.default_rng(7)
        spec = Spectrogram(rng.normal(size=(10_500, 4)))
        align = Alignment((AlignmentEntry("R", 0, 10_500),))
        density = phoneme_joint([(spec, align)], "R", TimePair(2, 1))
        dx = density.grid_x[1] - density.grid_x[0]
        dy = density.grid_y[1] - density.grid_y[0]
        w = density.values * dx * dy
        w = w / w.sum()
        gx, gy = np.meshgrid(density.grid_x, density.grid_y, indexing="ij")
        ex, ey = (w * gx).sum(), (w * gy).sum()
        cov = (w * (gx - ex) * (gy - ey)).sum()
        sx = np.sqrt((w * (gx - ex) ** 2).sum())
        sy = np.sqrt((w * (gy - ey) ** 2).sum())
        assert abs(cov / (sx * sy)) < 0.1

    def test_time_pairs_respect_span_boundaries(self):
        values = np.zeros((4, 2))
        values[:, 0] = [0.0, 1.0, 10.0, 11.0]
        spec = Spectrogram(values)
        align = Alignment((AlignmentEntry("R", 0, 2), AlignmentEntry("R", 2, 4)))
        density = phoneme_joint([(spec, align)], "R", TimePair(0, 1),
                                bandwidths=(0.5, 0.5))
        # pairs are (0,1) and (10,11); never (1,10)
        ix = np.argmin(np.abs(density.grid_x - 1.0))
        iy = np.argmin(np.abs(density.grid_y - 10.0))
        assert density.values[ix, iy] < 1e-8

    def test_single_short_span_no_pairs(self):
        spec = Spectrogram(np.zeros((1, 2)))
        align = Alignment((AlignmentEntry("R", 0, 1),))
        with pytest.raises(NoPairs):
            phoneme_joint([(spec, align)], "R", TimePair(0, 1))


def dip_two_point_oracle():
    """Grid search over piecewise-linear unimodal CDFs against the {0, 1}
    ECDF; knots at (-1, 0, 1, 2) with values (0, g0, g1, 1)."""
    xs = np.linspace(-1.5, 2.5, 2001)
    ecdf = np.where(xs < 0, 0.0, np.where(xs < 1, 0.5, 1.0))
    best = np.inf
    for g0 in np.linspace(0, 1, 201):
        for g1 in np.linspace(g0, 1, 201 - int(200 * g0)):
            slopes = (g0, g1 - g0, 1 - g1)
            valley = slopes[0] > slopes[1] < slopes[2]
            if valley:  # not convex-then-concave
                continue
            g = np.interp(xs, [-1, 0, 1, 2], [0, g0, g1, 1])
            best = min(best, np.max(np.abs(ecdf - g)))
    return best


class TestDipStatistic:
    def test_two_points_quarter(self):
        assert dip_statistic([0.0, 1.0]).dip == pytest.approx(0.25, abs=1e-9)

    def test_two_points_matches_grid_oracle(self):
        oracle = dip_two_point_oracle()
        assert dip_statistic([0.0, 1.0]).dip == pytest.approx(oracle, abs=2e-3)

    def test_three_points(self):
        assert dip_statistic([0.0, 1.0, 5.0]).dip == pytest.approx(1 / 6, abs=1e-9)

    def test_normal_small_dip(self):
        rng = SeededRng(100)
        hits = sum(
            dip_statistic(rng.normal(size=1000)).dip < 0.02 for _ in range(20)
        )
        assert hits >= 19

    def test_bimodal_large_dip(self):
        rng = SeededRng(101)
        hits = 0
        for _ in range(20):
            sample = np.concatenate(
                [rng.normal(-3, 1, size=500), rng.normal(3, 1, size=500)]
            )
            hits += dip_statistic(sample).dip > 0.05
        assert hits >= 19

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-2048, 2048), min_size=2, max_size=120),
           st.integers(-2, 3), st.integers(-64, 64))
    def test_affine_invariance_exact(self, quantized, log_scale, offset):
        x = np.array(quantized, dtype=np.float64) / 256.0
        a = 2.0**log_scale
        assert dip_statistic(a * x + offset).dip == dip_statistic(x).dip

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2,
                    max_size=200))
    def test_theoretical_bounds(self, samples):
        result = dip_statistic(samples)
        n = result.n
        assert 0.5 / n - 1e-12 <= result.dip <= 0.25 + 1e-12

    def test_duplication_stability(self):
        rng = SeededRng(102)
        x = rng.normal(size=300)
        d1 = dip_statistic(x).dip
        d3 = dip_statistic(np.tile(x, 3)).dip
        assert abs(d3 - d1) < 2 / 300

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            dip_statistic([1.0])

    def test_all_equal_lower_bound(self):
        result = dip_statistic(np.full(40, 7.0))
        assert result.dip == pytest.approx(0.5 / 40)


class TestMeanDip:
    def test_single_cell_equals_dip(self):
        column = np.concatenate([np.zeros(20), np.ones(20)])
        corpus = corpus_from_columns(column)
        result = mean_dip(corpus, bins=[2], phonemes=["R"])
        expected = dip_statistic(column).dip
        assert result.mean == pytest.approx(expected, abs=1e-12)

    def test_bimodal_cells_large(self):
        rng = SeededRng(103)
        column = np.concatenate(
            [rng.normal(-3, 1, size=250), rng.normal(3, 1, size=250)]
        )
        corpus = corpus_from_columns(column)
        result = mean_dip(corpus, bins=[2], phonemes=["R"])
        assert result.mean > 0.05

    def test_skips_small_cells(self):
        corpus = corpus_from_columns(np.ones(30) * 0.5)
        result = mean_dip(corpus, bins=[2], phonemes=["R", "ZZ"])
        assert ("ZZ", 2) in result.skipped
        assert ("R", 2) in result.cells

    def test_all_empty_is_error(self):
        corpus = corpus_from_columns(np.ones(5))
        with pytest.raises(ContractError):
            mean_dip(corpus, bins=[2], phonemes=["ZZ"])
