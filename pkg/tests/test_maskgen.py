import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from addnet.errors import DegenerateHull, IncompatibleResolution
from addnet.facegen import random_landmarks, template_landmarks
from addnet.geometry import Landmark68
from addnet.maskgen import (
    AttentionMask,
    EmptyMaskWarning,
    ORGAN_GROUPS,
    build_mask_pyramid,
    convex_hull,
    default_sigma,
    generate_attention_mask,
    gaussian_kernel1d,
    make_face_mask,
    make_organ_mask,
    rasterize_hull_mask,
    smooth_mask,
)

from oracles import hull_oracle, naive_convolve, organ_oracle, region_expectations, sampled_gaussian


class TestRasterize:
    def test_square_quarter_of_image(self):
        corners = [(25, 25), (74, 25), (74, 74), (25, 74)]
        mask = rasterize_hull_mask(corners, (100, 100))
        assert mask.sum() == 2500
        assert mask[25:75, 25:75].all()
        np.testing.assert_array_equal(mask, hull_oracle(corners, (100, 100)))

    def test_collinear_raises(self):
        with pytest.raises(DegenerateHull):
            rasterize_hull_mask([(0, 0), (5, 5), (10, 10)], (20, 20))

    def test_too_few_points_raise(self):
        with pytest.raises(DegenerateHull):
            convex_hull([(1, 1), (1, 1), (2, 3)])

    def test_hull_covering_image(self):
        mask = rasterize_hull_mask([(-5, -5), (50, -5), (50, 40), (-5, 40)], (30, 20))
        assert mask.shape == (20, 30)
        assert mask.all()

    def test_random_hulls_match_oracle(self, rng):
        for _ in range(50):
            pts = rng.uniform(-10, 70, size=(rng.integers(3, 12), 2))
            np.testing.assert_array_equal(rasterize_hull_mask(pts, (64, 48)), hull_oracle(pts, (64, 48)))


class TestFaceAndOrganMasks:
    size = (96, 96)

    def test_face_mask_matches_oracle(self):
        lm = template_landmarks(self.size)
        mask = make_face_mask(lm, self.size)
        assert mask.any()
        np.testing.assert_array_equal(mask, hull_oracle(lm.points, self.size))

    def test_face_mask_contains_centroid(self, rng):
        lm = random_landmarks(rng, self.size)
        cx, cy = np.rint(lm.points.mean(axis=0)).astype(int)
        assert make_face_mask(lm, self.size)[cy, cx] == 1

    def test_landmarks_outside_image_give_empty_mask_with_warning(self):
        lm = Landmark68(template_landmarks(self.size).points + 500)
        with pytest.warns(EmptyMaskWarning):
            mask = make_face_mask(lm, self.size)
        assert not mask.any()

    def test_organ_mask_strict_subset_of_face(self):
        lm = template_landmarks(self.size)
        organs = make_organ_mask(lm, self.size)
        face = make_face_mask(lm, self.size)
        np.testing.assert_array_equal(organs, organ_oracle(lm, self.size))
        assert organs.any()
        assert np.all(face[organs == 1] == 1)
        assert face.sum() > organs.sum()

    def test_collinear_organs_give_empty_mask_and_three_warnings(self):
        pts = template_landmarks(self.size).points.copy()
        for idx in ORGAN_GROUPS.values():
            n = len(idx)
            pts[list(idx)] = np.column_stack([np.linspace(10, 50, n), np.linspace(20, 40, n)])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            organs = make_organ_mask(Landmark68(pts), self.size)
        assert not organs.any()
        assert sum(issubclass(w.category, EmptyMaskWarning) for w in caught) == 3

    def test_overlapping_organs_union_once(self):
        pts = template_landmarks(self.size).points.copy()
        # drag the nose tip down into the mouth
        pts[27:36, 1] += 25
        organs = make_organ_mask(Landmark68(pts), self.size)
        nose = rasterize_hull_mask(pts[27:36], self.size)
        mouth = rasterize_hull_mask(pts[48:68], self.size)
        assert (nose & mouth).any()
        assert organs.max() == 1
        np.testing.assert_array_equal(organs, organ_oracle(Landmark68(pts), self.size))


class TestSmooth:
    def test_constant_preservation(self):
        np.testing.assert_allclose(smooth_mask(np.ones((20, 30)), 2.5), 1.0, atol=1e-12)
        np.testing.assert_array_equal(smooth_mask(np.zeros((20, 30)), 2.5), 0.0)

    def test_delta_gives_sampled_kernel(self):
        img = np.zeros((33, 33))
        img[16, 16] = 1.0
        out = smooth_mask(img, 2.0)
        g = sampled_gaussian(2.0)
        oracle = naive_convolve(img, g)
        np.testing.assert_allclose(out, oracle, atol=1e-15)
        np.testing.assert_allclose(out[10:23, 10:23], g, atol=1e-15)

    def test_matches_naive_convolution_with_borders(self, rng):
        img = (rng.random((14, 17)) > 0.5).astype(float)
        np.testing.assert_allclose(smooth_mask(img, 1.3), naive_convolve(img, sampled_gaussian(1.3)), atol=1e-12)

    def test_kernel_normalised(self):
        assert gaussian_kernel1d(3.7).sum() == pytest.approx(1.0, abs=1e-15)
        assert len(gaussian_kernel1d(3.7)) == 2 * math.ceil(3 * 3.7) + 1
        with pytest.raises(ValueError):
            gaussian_kernel1d(0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.3, 4.0))
    def test_monotone(self, seed, sigma):
        r = np.random.default_rng(seed)
        lo = r.random((16, 16)) * 0.5
        hi = lo + r.random((16, 16)) * 0.5
        assert np.all(smooth_mask(hi, sigma) >= smooth_mask(lo, sigma) - 1e-12)


class TestAttentionMask:
    def test_fixture_region_values(self):
        size, sigma = (160, 160), 1.5
        lm = template_landmarks(size)
        mask = generate_attention_mask(lm, size, sigma).values
        deep_organ, deep_face, outside = region_expectations(lm, size, sigma)
        assert deep_organ.any() and deep_face.any() and outside.any()
        np.testing.assert_allclose(mask[deep_organ], 1.0, atol=1e-6)
        np.testing.assert_allclose(mask[deep_face], 0.5, atol=1e-6)
        np.testing.assert_allclose(mask[outside], 0.0, atol=1e-6)

    def test_empty_landmarks_give_zero_mask(self):
        lm = Landmark68(template_landmarks((40, 40)).points - 1000)
        with pytest.warns(EmptyMaskWarning):
            mask = generate_attention_mask(lm, (40, 40))
        assert not mask.values.any()

    def test_random_landmarks_stay_in_unit_interval(self, rng):
        for _ in range(100):
            lm = random_landmarks(rng, (48, 40), jitter=0.03, pose=0.3)
            v = generate_attention_mask(lm, (48, 40)).values
            assert v.shape == (40, 48)
            assert v.min() >= 0.0 and v.max() <= 1.0

    def test_default_sigma_is_proportional(self):
        assert default_sigma((224, 100)) == pytest.approx(2.0)

    def test_region_ordering(self, rng):
        lm = random_landmarks(rng, (128, 128), jitter=0.002)
        v = generate_attention_mask(lm, (128, 128), 1.0).values
        deep_organ, deep_face, outside = region_expectations(lm, (128, 128), 1.0)
        assert v[deep_organ].min() >= v[deep_face].max() >= v[outside].max()

    def test_uint8_round_trip(self):
        m = AttentionMask(np.array([[0.0, 0.5, 1.0]]))
        np.testing.assert_array_equal(m.to_uint8(), [[0, 128, 255]])
        assert AttentionMask.from_uint8(m.to_uint8()).values[0, 2] == 1.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            AttentionMask(np.array([[1.5]]))


class TestPyramid:
    def test_constant_pools_to_constant(self):
        base = AttentionMask(np.full((224, 224), 0.37))
        pyr = build_mask_pyramid(base, [(112, 112)])
        assert pyr.resolutions() == [(224, 224), (112, 112)]
        np.testing.assert_allclose(pyr.levels[1].values, 0.37, atol=1e-15)

    def test_checkerboard_pools_to_half(self):
        board = (np.indices((224, 224)).sum(axis=0) % 2).astype(float)
        pyr = build_mask_pyramid(AttentionMask(board), [(112, 112)])
        np.testing.assert_array_equal(pyr.level_for((112, 112)).values, 0.5)

    def test_incompatible_target(self):
        with pytest.raises(IncompatibleResolution):
            build_mask_pyramid(AttentionMask(np.zeros((224, 224))), [(100, 100)])

    def test_levels_strictly_decreasing_and_deduplicated(self):
        pyr = build_mask_pyramid(AttentionMask(np.zeros((64, 64))), [(8, 8), (32, 32), (8, 8), (16, 16)])
        assert pyr.resolutions() == [(64, 64), (32, 32), (16, 16), (8, 8)]
        with pytest.raises(IncompatibleResolution):
            pyr.level_for((4, 4))

    def test_non_square_factors(self, rng):
        base = AttentionMask(rng.random((12, 18)))
        lvl = build_mask_pyramid(base, [(6, 3)]).level_for((6, 3))
        # direct tile average: each output pixel averages a 4 (rows) x 3 (cols) tile
        expect = np.array([[base.values[4 * r:4 * r + 4, 3 * c:3 * c + 3].mean() for c in range(6)] for r in range(3)])
        np.testing.assert_allclose(lvl.values, expect, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8]))
    def test_pooling_preserves_mean(self, seed, factor):
        v = np.random.default_rng(seed).random((32, 32))
        lvl = build_mask_pyramid(AttentionMask(v), [(32 // factor, 32 // factor)]).levels[-1]
        assert lvl.values.mean() == pytest.approx(v.mean(), abs=1e-12)
