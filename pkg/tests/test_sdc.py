import numpy as np
import pytest

from sdcount import gridmaps, sdc


def normalized_map(rng, h, w):
    return gridmaps.spatial_softmax2(rng.normal(0, 1, (h, w)))


class TestGuidedUpsample:
    def test_uniform(self):
        out = sdc.guided_upsample([[4.0]], np.full((2, 2), 0.25))
        np.testing.assert_allclose(out, np.ones((2, 2)))

    def test_concentrated(self):
        out = sdc.guided_upsample([[4.0]], [[0.5, 0.5], [0.0, 0.0]])
        np.testing.assert_allclose(out, [[2.0, 2.0], [0.0, 0.0]])

    def test_conserves_total(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            prev = rng.uniform(0, 30, (3, 5))
            u = normalized_map(rng, 6, 10)
            out = sdc.guided_upsample(prev, u)
            assert abs(out.sum() - prev.sum()) <= 1e-9 * max(1.0, prev.sum())

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            sdc.guided_upsample([[4.0]], np.full((2, 2), 0.3))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            sdc.guided_upsample([[4.0]], np.full((4, 4), 0.25))


class TestMergeStep:
    def test_full_replacement(self):
        rng = np.random.default_rng(1)
        c = rng.uniform(0, 9, (4, 4))
        out = sdc.merge_step(
            rng.uniform(0, 9, (2, 2)), c, np.ones((4, 4)), normalized_map(rng, 4, 4)
        )
        np.testing.assert_allclose(out, c)

    def test_no_division_preserves_total(self):
        prev = np.array([[4.0]])
        out = sdc.merge_step(
            prev, np.zeros((2, 2)), np.zeros((2, 2)), np.full((2, 2), 0.25)
        )
        np.testing.assert_allclose(out, gridmaps.kron_upsample2(prev) / 4.0)
        assert out.sum() == pytest.approx(4.0)

    def test_cellwise_blend(self):
        out = sdc.merge_step(
            [[4.0]],
            np.full((2, 2), 2.0),
            [[1.0, 0.0], [0.0, 1.0]],
            np.full((2, 2), 0.25),
        )
        np.testing.assert_allclose(out, [[2.0, 1.0], [1.0, 2.0]])

    def test_monotone_linear_in_mask(self):
        rng = np.random.default_rng(2)
        prev = rng.uniform(0, 9, (2, 2))
        c = rng.uniform(0, 9, (4, 4))
        u = normalized_map(rng, 4, 4)
        w = rng.uniform(0, 1, (4, 4))
        outs = []
        for wv in (0.2, 0.5, 0.8):
            w[1, 2] = wv
            outs.append(sdc.merge_step(prev, c, w, u)[1, 2])
        # exact linearity: midpoint of endpoints equals middle evaluation
        assert outs[1] == pytest.approx(0.5 * (outs[0] + outs[2]), abs=1e-12)

    def test_interpolation_bound(self):
        rng = np.random.default_rng(3)
        c_max = 6.0
        prev = rng.uniform(0, 4 * c_max, (2, 3))
        c = rng.uniform(0, c_max, (4, 6))
        w = rng.uniform(0, 1, (4, 6))
        u = normalized_map(rng, 4, 6)
        hat = sdc.guided_upsample(prev, u)
        out = sdc.merge_step(prev, c, w, u)
        lo = np.minimum((1 - w) * hat, (1 - w) * hat + w * c)
        hi = np.maximum((1 - w) * hat, (1 - w) * hat + w * c)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
        assert np.all(out <= np.maximum(hat, c_max) + 1e-12)


def constant_model(counts_by_stage, masks_by_stage, upmaps_by_stage):
    def counter(_f, i):
        return counts_by_stage[i]

    def decider(_f, i):
        return masks_by_stage[i]

    def upsampler(_f, i):
        return upmaps_by_stage[i]

    return counter, decider, upsampler


class TestRun:
    def test_zero_stages(self):
        c0 = np.array([[5.0]])
        trace = sdc.run(constant_model([c0], [None], [None]), [None], 0)
        assert len(trace.divs) == 1
        np.testing.assert_array_equal(trace.divs[0], c0)
        assert trace.stages[0].mask is None and trace.stages[0].upmap is None

    def test_full_division_returns_stage_counts(self):
        rng = np.random.default_rng(4)
        c0 = rng.uniform(0, 9, (1, 1))
        c1 = rng.uniform(0, 9, (2, 2))
        model = constant_model(
            [c0, c1], [None, np.ones((2, 2))], [None, np.full((2, 2), 0.25)]
        )
        trace = sdc.run(model, [None, None], 1)
        np.testing.assert_allclose(trace.divs[1], c1)

    def test_conservation_chain_two_stages(self):
        rng = np.random.default_rng(5)
        counts = [rng.uniform(0, 9, (2, 2)), rng.uniform(0, 9, (4, 4)),
                  rng.uniform(0, 9, (8, 8))]
        masks = [None, np.zeros((4, 4)), np.zeros((8, 8))]
        upmaps = [None, normalized_map(rng, 4, 4), normalized_map(rng, 8, 8)]
        trace = sdc.run(constant_model(counts, masks, upmaps), [None] * 3, 2)
        total0 = counts[0].sum()
        for div in trace.divs:
            assert abs(div.sum() - total0) <= 1e-9 * total0

    def test_dims_double_per_stage(self):
        rng = np.random.default_rng(6)
        counts = [rng.uniform(0, 9, (2 << i, 3 << i)) for i in range(3)]
        masks = [None] + [rng.uniform(0, 1, c.shape) for c in counts[1:]]
        upmaps = [None] + [normalized_map(rng, *c.shape) for c in counts[1:]]
        trace = sdc.run(constant_model(counts, masks, upmaps), [None] * 3, 2)
        for i, div in enumerate(trace.divs):
            assert div.shape == (2 << i, 3 << i)

    def test_negative_stage_count_rejected(self):
        with pytest.raises(ValueError):
            sdc.run(constant_model([np.ones((1, 1))], [None], [None]), [None], -1)

    def test_wrong_stage_shape_rejected(self):
        c0 = np.ones((2, 2))
        bad_c1 = np.ones((3, 3))
        model = constant_model(
            [c0, bad_c1], [None, np.ones((3, 3))], [None, np.full((3, 3), 0.25)]
        )
        with pytest.raises(ValueError):
            sdc.run(model, [None, None], 1)


class TestImageCount:
    def test_simple_sum(self):
        trace = sdc.SdcTrace(
            stages=[sdc.StagePrediction(counts=np.array([[2.0, 1.0], [1.0, 2.0]]))],
            divs=[np.array([[2.0, 1.0], [1.0, 2.0]])],
        )
        assert sdc.image_count(trace) == 6.0

    def test_zero(self):
        trace = sdc.SdcTrace(
            stages=[sdc.StagePrediction(counts=np.zeros((2, 2)))],
            divs=[np.zeros((2, 2))],
        )
        assert sdc.image_count(trace) == 0.0

    def test_single_patch_no_division(self):
        c0 = np.array([[7.25]])
        trace = sdc.run(constant_model([c0], [None], [None]), [None], 0)
        assert sdc.image_count(trace) == pytest.approx(7.25)


class TestTraceSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        counts = [rng.uniform(0, 9, (2, 2)), rng.uniform(0, 9, (4, 4))]
        masks = [None, rng.uniform(0, 1, (4, 4))]
        upmaps = [None, normalized_map(rng, 4, 4)]
        trace = sdc.run(constant_model(counts, masks, upmaps), [None, None], 1)
        out = tmp_path / "trace"
        sdc.save_trace(trace, out)
        names = sorted(p.name for p in out.iterdir())
        assert names == ["c_0.grid", "c_1.grid", "div_0.grid", "div_1.grid",
                         "u_1.grid", "w_1.grid"]
        back = sdc.load_trace(out)
        for a, b in zip(trace.divs, back.divs):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(trace.stages[1].mask, back.stages[1].mask)
