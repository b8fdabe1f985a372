import numpy as np
import pytest

from sdcount import gridmaps, groundtruth


class TestRenderDensity:
    def test_no_points(self):
        d = groundtruth.render_density([], 32, 48, sigma=4.0)
        assert d.shape == (32, 48)
        assert d.sum() == 0.0

    def test_single_interior_point_conserves_mass(self):
        d = groundtruth.render_density([(128.0, 128.0)], 256, 256, sigma=8.0)
        assert abs(d.sum() - 1.0) <= 0.01

    def test_two_separated_points(self):
        d = groundtruth.render_density(
            [(64.0, 64.0), (192.0, 192.0)], 256, 256, sigma=8.0
        )
        assert abs(d.sum() - 2.0) <= 0.02

    def test_border_point_loses_mass(self):
        d = groundtruth.render_density([(0.0, 0.0)], 64, 64, sigma=8.0)
        assert 0.0 < d.sum() < 1.0

    def test_adaptive_sigma_shrinks_with_density(self):
        tight = [(32.0 + dx, 32.0 + dy) for dx in (0, 3) for dy in (0, 3)]
        loose = [(16.0, 16.0), (48.0, 16.0), (16.0, 48.0), (48.0, 48.0)]
        s_tight = groundtruth._point_sigmas(np.array(tight), None, 0.3, 3)
        s_loose = groundtruth._point_sigmas(np.array(loose), None, 0.3, 3)
        assert s_tight.max() < s_loose.min()

    def test_single_point_adaptive_uses_clamp_ceiling(self):
        s = groundtruth._point_sigmas(np.array([[10.0, 10.0]]), None, 0.3, 3)
        assert s[0] == groundtruth.SIGMA_MAX

    def test_adaptive_rendering_conserves_interior_mass(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(100, 156, (12, 2))  # tight interior cluster
        d = groundtruth.render_density(pts, 256, 256)
        assert abs(d.sum() - 12.0) <= 0.12

    def test_errors(self):
        with pytest.raises(ValueError):
            groundtruth.render_density([], 0, 10, sigma=1.0)
        with pytest.raises(ValueError):
            groundtruth.render_density([(1.0, 1.0)], 8, 8, sigma=0.0)
        with pytest.raises(ValueError):
            groundtruth.render_density([(9.0, 1.0)], 8, 8, sigma=1.0)


class TestPatchCounts:
    def test_uniform_density(self):
        d = np.full((128, 128), 1.0 / 4096.0)
        np.testing.assert_allclose(groundtruth.patch_counts(d, 64), np.ones((2, 2)))

    def test_zero_map(self):
        np.testing.assert_array_equal(
            groundtruth.patch_counts(np.zeros((64, 64)), 32), np.zeros((2, 2))
        )

    def test_full_image_patch(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0, 1, (64, 64))
        out = groundtruth.patch_counts(d, 64)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(d.sum(), rel=1e-12)

    def test_mass_conservation(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d = rng.uniform(0, 1, (128, 128))
            g = groundtruth.patch_counts(d, 16)
            assert abs(g.sum() - d.sum()) <= 1e-9 * d.sum()

    def test_pyramid_consistency(self):
        rng = np.random.default_rng(2)
        d = rng.uniform(0, 1, (256, 256))
        coarse = groundtruth.patch_counts(d, 64)
        fine = groundtruth.patch_counts(d, 32)
        agg = gridmaps.block_sum2(fine)
        assert np.max(np.abs(agg - coarse)) <= 1e-9 * max(1.0, coarse.max())

    def test_indivisible(self):
        with pytest.raises(ValueError):
            groundtruth.patch_counts(np.zeros((100, 100)), 64)


class TestPartition:
    def test_one_linear_class_count(self):
        p = groundtruth.build_partition(22.0, groundtruth.ONE_LINEAR)
        assert p.n_classes == 46

    def test_two_linear_class_count(self):
        p = groundtruth.build_partition(22.0, groundtruth.TWO_LINEAR)
        assert p.n_classes == 55

    def test_minimal_partition(self):
        p = groundtruth.build_partition(0.5, groundtruth.ONE_LINEAR)
        assert p.n_classes == 3
        assert groundtruth.count_to_class(0.0, p) == 0
        assert groundtruth.count_to_class(0.3, p) == 1
        assert groundtruth.count_to_class(0.7, p) == 2

    def test_non_half_multiple_rejected(self):
        with pytest.raises(ValueError):
            groundtruth.build_partition(10.3)

    def test_count_to_class_examples(self):
        one = groundtruth.build_partition(22.0, groundtruth.ONE_LINEAR)
        two = groundtruth.build_partition(22.0, groundtruth.TWO_LINEAR)
        assert groundtruth.count_to_class(0.0, one) == 0
        assert groundtruth.count_to_class(0.7, one) == 2  # (0.5, 1]
        assert groundtruth.count_to_class(0.07, two) == 2  # (0.05, 0.1]

    def test_class_to_count_examples(self):
        one = groundtruth.build_partition(22.0, groundtruth.ONE_LINEAR)
        assert groundtruth.class_to_count(0, one) == 0.0
        assert groundtruth.class_to_count(2, one) == pytest.approx(0.75)
        assert groundtruth.class_to_count(one.overflow_class, one) == 22.0
        with pytest.raises(ValueError):
            groundtruth.class_to_count(one.n_classes, one)

    def test_totality_and_round_trip(self):
        rng = np.random.default_rng(3)
        for scheme in (groundtruth.ONE_LINEAR, groundtruth.TWO_LINEAR):
            p = groundtruth.build_partition(10.0, scheme)
            b = p.boundaries
            for c in rng.uniform(0, 15, 300):
                m = groundtruth.count_to_class(c, p)
                # membership in exactly the claimed interval
                if m == 0:
                    assert c == 0.0
                elif m == p.overflow_class:
                    assert c > p.c_max
                else:
                    assert b[m - 1] < c <= b[m]
                    width = b[m] - b[m - 1]
                    back = groundtruth.class_to_count(m, p)
                    assert abs(back - c) <= width / 2 + 1e-12

    def test_negative_count_rejected(self):
        p = groundtruth.build_partition(1.0)
        with pytest.raises(ValueError):
            groundtruth.count_to_class(-0.1, p)
        with pytest.raises(ValueError):
            groundtruth.count_to_class(float("nan"), p)


class TestQuantileCmax:
    def test_nearest_rank(self):
        assert groundtruth.quantile_cmax(np.arange(1.0, 101.0), 0.95) == 95.0

    def test_single_value_rounds_up(self):
        assert groundtruth.quantile_cmax([7.2], 0.95) == 7.5
        assert groundtruth.quantile_cmax([7.5], 0.95) == 7.5

    def test_all_equal(self):
        assert groundtruth.quantile_cmax([3.0] * 10, 0.5) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            groundtruth.quantile_cmax([], 0.95)


class TestGtUpsamplingMap:
    def test_direct_division(self):
        u = groundtruth.gt_upsampling_map([[4.0]], [[1.0, 3.0], [0.0, 0.0]])
        np.testing.assert_allclose(u, [[0.25, 0.75], [0.0, 0.0]])

    def test_zero_denominator_rule(self):
        u = groundtruth.gt_upsampling_map([[0.0]], np.zeros((2, 2)))
        np.testing.assert_array_equal(u, np.full((2, 2), 0.25))

    def test_consistent_grids_give_normalized_blocks(self):
        rng = np.random.default_rng(4)
        fine = rng.uniform(0, 5, (6, 8))
        coarse = gridmaps.block_sum2(fine)
        u = groundtruth.gt_upsampling_map(coarse, fine)
        sums = gridmaps.block_sum2(u)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            groundtruth.gt_upsampling_map(np.ones((2, 2)), np.ones((2, 2)))


class TestDivisionLabels:
    def test_strict_threshold(self):
        flags = groundtruth.division_labels([[25.0, 3.0], [22.0, 22.5]], 22.0)
        np.testing.assert_array_equal(flags, [[True, False], [False, True]])

    def test_all_below_and_all_above(self):
        assert not groundtruth.division_labels(np.full((3, 3), 5.0), 22.0).any()
        assert groundtruth.division_labels(np.full((3, 3), 23.0), 22.0).all()


class TestAnnotationCsv:
    def test_round_trip(self, tmp_path):
        pts = np.array([[1.25, 3.5], [100.125, 0.0]])
        path = tmp_path / "ann.csv"
        groundtruth.write_annotations(path, pts)
        assert path.read_text().splitlines()[0] == "x,y"
        back = groundtruth.read_annotations(path)
        np.testing.assert_array_equal(back, pts)

    def test_empty(self, tmp_path):
        path = tmp_path / "ann.csv"
        groundtruth.write_annotations(path, np.zeros((0, 2)))
        assert groundtruth.read_annotations(path).shape == (0, 2)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0\n")
        with pytest.raises(ValueError):
            groundtruth.read_annotations(path)
