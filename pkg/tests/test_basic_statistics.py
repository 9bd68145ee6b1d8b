"""
Tests for image statistics and the EMA recurrence
"""
import numpy as np
import pytest

from backend.analysis.basic_statistics import (
    HYPERPARAMETER_RANGES,
    EmaScalarPair,
    ImageBuffer,
    Region,
    ScalarStats,
    batch_stats,
    check_range,
    ema_update,
    local_stats,
)
from backend.errors import ArgumentError, BoundsError, StateError


class TestImageBuffer:
    """ImageBuffer construction"""

    def test_rejects_wrong_length(self):
        with pytest.raises(ArgumentError):
            ImageBuffer(width=2, height=2, data=np.zeros(3))

    def test_rejects_empty(self):
        with pytest.raises(ArgumentError):
            ImageBuffer(width=0, height=1, data=np.zeros(0))

    def test_row_major_layout(self):
        image = ImageBuffer(width=3, height=2, data=np.arange(6) / 10)
        assert image.data[1, 0] == pytest.approx(0.3)


class TestLocalStats:
    """Mean and population std over a region"""

    def test_two_by_two_full_region(self, two_by_two):
        stats = local_stats(two_by_two, two_by_two.full_region())
        assert stats.mean == pytest.approx(0.5, abs=1e-9)
        assert stats.std == pytest.approx(0.353553, abs=1e-6)

    def test_constant_image(self):
        image = ImageBuffer.from_array(np.full((5, 7), 0.3))
        stats = local_stats(image, Region(1, 1, 4, 3))
        assert stats.mean == pytest.approx(0.3)
        assert stats.std == 0.0

    def test_single_pixel(self):
        stats = local_stats(ImageBuffer.from_array(np.array([[0.7]])), Region(0, 0, 1, 1))
        assert stats == ScalarStats(0.7, 0.0)

    @pytest.mark.parametrize("region", [Region(0, 0, 0, 1), Region(0, 0, 3, 1), Region(-1, 0, 1, 1)])
    def test_bad_region(self, two_by_two, region):
        with pytest.raises(BoundsError):
            local_stats(two_by_two, region)

    def test_std_shift_invariant(self, rng):
        data = rng.uniform(0, 0.5, (6, 6))
        a = local_stats(ImageBuffer.from_array(data), Region(0, 0, 6, 6))
        b = local_stats(ImageBuffer.from_array(data + 0.25), Region(0, 0, 6, 6))
        assert a.std == pytest.approx(b.std, abs=1e-12)


class TestBatchStats:
    """Mean of per-image means and stds"""

    def test_singleton_matches_local(self, two_by_two):
        assert batch_stats([two_by_two]) == local_stats(two_by_two, two_by_two.full_region())

    def test_two_constant_images(self):
        images = [ImageBuffer.from_array(np.full((2, 2), c)) for c in (0.2, 0.6)]
        stats = batch_stats(images)
        assert stats.mean == pytest.approx(0.4)
        assert stats.std == 0.0

    def test_mixed_batch(self, two_by_two):
        stats = batch_stats([two_by_two, ImageBuffer.from_array(np.full((3, 3), 0.5))])
        assert stats.mean == pytest.approx(0.5, abs=1e-9)
        assert stats.std == pytest.approx(0.176777, abs=1e-6)

    def test_copies_match_local(self, rng):
        image = ImageBuffer.from_array(rng.uniform(size=(4, 5)))
        stats = batch_stats([image, image])
        single = local_stats(image, image.full_region())
        assert stats.mean == single.mean
        assert stats.std == single.std

    def test_empty_batch(self):
        with pytest.raises(ArgumentError):
            batch_stats([])


class TestEmaUpdate:
    """The EMA recurrence and its seeding"""

    @pytest.mark.parametrize(
        "prev, observed, rho, expected",
        [(0.5, 0.7, 0.1, 0.52), (0.3, 0.3, 0.07, 0.3), (0.0, 1.0, 1.0, 1.0)],
    )
    def test_examples(self, prev, observed, rho, expected):
        assert ema_update(prev, observed, rho) == pytest.approx(expected, abs=1e-12)

    def test_fixed_point_is_exact(self, rng):
        for value in rng.uniform(size=100):
            assert ema_update(value, value, 0.05) == value

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_rejects_rho(self, rho):
        with pytest.raises(ArgumentError):
            ema_update(0.0, 1.0, rho)

    def test_geometric_convergence(self):
        rho, b, value = 0.05, 1.0, 0.0
        for t in range(1, 201):
            value = ema_update(value, b, rho)
            assert abs(value - b) == pytest.approx((1 - rho) ** t, rel=0, abs=1e-12)

    def test_bounded_by_hull(self, rng):
        value = 0.5
        observations = rng.uniform(size=50)
        for obs in observations:
            value = ema_update(value, obs, 0.1)
            assert min(0.5, observations.min()) <= value <= max(0.5, observations.max())


class TestEmaScalarPair:
    """Reference statistics state"""

    def test_first_update_seeds(self):
        state = EmaScalarPair(rho=0.05).update(ScalarStats(0.4, 0.1))
        assert (state.mu_ref, state.sigma_ref, state.initialized) == (0.4, 0.1, True)

    def test_chain(self):
        state = EmaScalarPair(rho=0.1).update(ScalarStats(0.3, 0.0)).update(ScalarStats(0.7, 0.0))
        assert state.mu_ref == pytest.approx(0.34, abs=1e-12)

    @pytest.mark.parametrize("rho", [0.005, 0.2])
    def test_rho_interval(self, rho):
        with pytest.raises(ArgumentError):
            EmaScalarPair(rho=rho)

    def test_require_initialized(self):
        with pytest.raises(StateError):
            EmaScalarPair().require_initialized()

    def test_dict_round_trip(self):
        state = EmaScalarPair(0.4, 0.2, 0.07, True)
        assert EmaScalarPair.from_dict(state.to_dict()) == state

    def test_unsafe_rho(self):
        state = EmaScalarPair(rho=0.5, unsafe_ranges=True).update(ScalarStats(0.2, 0.1))
        assert state.unsafe_ranges and state.rho == 0.5
        assert EmaScalarPair.from_dict(state.to_dict()) == state


class TestCheckRange:
    """Named hyperparameter intervals"""

    @pytest.mark.parametrize("name", sorted(HYPERPARAMETER_RANGES))
    def test_bounds_inclusive(self, name):
        lo, hi = HYPERPARAMETER_RANGES[name]
        check_range(name, lo)
        check_range(name, hi)
        with pytest.raises(ArgumentError):
            check_range(name, hi * 1.5)

    def test_unsafe_skips_interval(self):
        check_range("delta", 500.0, unsafe=True)
        check_range("lambda1", 0.0, unsafe=True)

    @pytest.mark.parametrize("name, value", [("rho", 0.0), ("rho", 1.01), ("delta", -1.0), ("gamma", -0.5), ("lam", -2.0)])
    def test_unsafe_hard_domain(self, name, value):
        with pytest.raises(ArgumentError):
            check_range(name, value, unsafe=True)
