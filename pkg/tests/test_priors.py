import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudoblur.errors import DegenerateInputError, InvalidInputError
from pseudoblur.imaging import UNIT, ImageTensor
from pseudoblur.priors import (N_KEYPOINTS, KeypointSet, PriorConfig, body_joint_map, convex_hull,
                               difference_map, draw_thick_segment, fill_convex_polygon, human_prior,
                               stick_figure_joints, synthetic_keypoints)
from pseudoblur.synthesis import generate_pair, make_blur_pair, random_scene_params


def figure_kps(center=(34.0, 32.0), scale=18.0):
    return KeypointSet(stick_figure_joints(center, scale, np.full(8, 0.2)))


def in_triangle(p, a, b, c):
    def side(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])
    d1, d2, d3 = side(a, b, p), side(b, c, p), side(c, a, p)
    neg = d1 < 0 or d2 < 0 or d3 < 0
    pos = d1 > 0 or d2 > 0 or d3 > 0
    return not (neg and pos)


class TestKeypoints:
    def test_text_roundtrip(self, tmp_path):
        kps = KeypointSet(np.arange(28, dtype=float).reshape(14, 2) / 3, np.arange(14) % 3 != 0)
        kps.save(tmp_path / "k.txt")
        back = KeypointSet.load(tmp_path / "k.txt")
        np.testing.assert_allclose(back.points, kps.points, atol=1e-4)
        assert np.array_equal(back.valid, kps.valid)

    def test_wrong_count(self):
        with pytest.raises(InvalidInputError):
            KeypointSet(np.zeros((13, 2)))

    def test_bounds(self):
        kps = KeypointSet(np.full((14, 2), 70.0))
        with pytest.raises(InvalidInputError):
            kps.check_bounds((64, 64))

    def test_bbox_exclusive_ends(self):
        pts = np.zeros((14, 2))
        pts[1] = (10.0, 20.0)
        assert KeypointSet(pts).bbox((32, 32)) == (0, 0, 11, 21)


class TestRasterization:
    def test_hull_drops_interior(self):
        pts = np.array([[0, 0], [0, 4], [4, 4], [4, 0], [2, 2], [1, 3]], dtype=float)
        assert len(convex_hull(pts)) == 4

    def test_triangle_fill_matches_brute_force(self):
        a, b, c = (2.3, 3.1), (17.8, 6.2), (9.4, 18.7)
        mask = fill_convex_polygon(convex_hull(np.array([a, b, c])), (22, 22))
        brute = np.array([[in_triangle((r, q), a, b, c) for q in range(22)] for r in range(22)])
        assert np.array_equal(mask, brute)

    def test_thick_horizontal_segment_area(self):
        # rows 4..6 over columns 5..15 plus a 3-pixel cap each side
        mask = draw_thick_segment((12, 22), (5.0, 5.0), (5.0, 15.0), 3.0)
        assert mask.sum() == 33 + 6

    def test_collinear_band_only(self):
        pts = np.zeros((14, 2))
        pts[:, 0] = 10.0
        pts[:, 1] = np.linspace(3, 20, 14)
        m = body_joint_map(KeypointSet(pts), (24, 24), 3.0)
        # the hull degenerates to a segment; the skeleton lines give a thin band
        assert m.data.sum() > 0
        assert set(np.nonzero(m.data)[0]) <= {9, 10, 11}


class TestBodyJointMap:
    def test_too_few_valid(self):
        valid = np.zeros(N_KEYPOINTS, bool)
        valid[:2] = True
        with pytest.raises(DegenerateInputError):
            body_joint_map(KeypointSet(np.full((14, 2), 5.0), valid), (16, 16))

    def test_covers_every_joint(self):
        kps = figure_kps()
        m = body_joint_map(kps, (64, 64))
        for r, c in kps.points:
            assert m.data[int(round(r)), int(round(c))] == 1

    @given(st.integers(-6, 6), st.integers(-6, 6))
    @settings(max_examples=20, deadline=None)
    def test_translation_equivariance(self, dr, dc):
        kps = figure_kps()
        a = body_joint_map(kps, (64, 64)).data
        b = body_joint_map(kps.translate(dr, dc), (64, 64)).data
        assert np.array_equal(np.roll(a, (dr, dc), axis=(0, 1)), b)

    def test_thicker_lines_superset(self):
        kps = figure_kps()
        thin = body_joint_map(kps, (64, 64), 1.0).data
        thick = body_joint_map(kps, (64, 64), 5.0).data
        assert np.all(thick >= thin)


class TestDifferenceMap:
    def _pair(self, seed=0):
        return generate_pair(seed, 0, size=64)

    def test_identical_inputs_empty(self):
        p = self._pair()
        assert difference_map(p.B, p.B, p.keypoints).data.sum() == 0

    def test_zero_outside_keypoint_box(self):
        p = self._pair(1)
        m = difference_map(p.S, p.B, p.keypoints, threshold=0.0).data
        top, left, bottom, right = p.keypoints.bbox(m.shape)
        outside = m.copy()
        outside[top:bottom, left:right] = 0
        assert outside.sum() == 0

    @given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    @settings(max_examples=15, deadline=None)
    def test_monotone_in_threshold(self, t1, t2):
        p = self._pair(2)
        lo, hi = sorted((t1, t2))
        a = difference_map(p.S, p.B, p.keypoints, threshold=lo).data
        b = difference_map(p.S, p.B, p.keypoints, threshold=hi).data
        assert np.all(b <= a)

    def test_pooling_dilates(self):
        D = np.full((32, 32, 3), 0.5, np.float32)
        R = D.copy()
        R[16, 16] = 1.0
        kps = KeypointSet(np.array([[0.0, 0.0], [31.0, 31.0]] + [[16.0, 16.0]] * 12))
        m1 = difference_map(ImageTensor(D, UNIT), ImageTensor(R, UNIT), kps, pool_kernel=1).data
        m7 = difference_map(ImageTensor(D, UNIT), ImageTensor(R, UNIT), kps, pool_kernel=7).data
        assert m7.sum() > m1.sum() > 0
        assert np.all(m7 >= m1)

    def test_shape_mismatch(self):
        p = self._pair()
        small = ImageTensor(p.B.data[:32], UNIT)
        with pytest.raises(InvalidInputError):
            difference_map(small, p.B, p.keypoints)


class TestHumanPrior:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_partition(self, seed):
        pair = make_blur_pair(random_scene_params(np.random.default_rng(seed), 48))
        mu, mv = human_prior(pair.S, pair.B, pair.keypoints)
        assert np.array_equal(mu.data + mv.data, np.ones((48, 48), np.uint8))
        assert not np.any(mu.data & mv.data)

    def test_body_inside_mu(self):
        pair = generate_pair(3, 0, size=64)
        mu, _ = human_prior(pair.S, pair.B, pair.keypoints)
        joints = body_joint_map(pair.keypoints, (64, 64)).data
        assert np.all(mu.data >= joints)

    def test_config_threshold_effect(self):
        pair = generate_pair(4, 0, size=64)
        loose, _ = human_prior(pair.S, pair.B, pair.keypoints, PriorConfig(edge_threshold=0.0))
        strict, _ = human_prior(pair.S, pair.B, pair.keypoints, PriorConfig(edge_threshold=10.0))
        assert loose.data.sum() >= strict.data.sum()


def test_synthetic_keypoints_flag_out_of_frame():
    params = random_scene_params(np.random.default_rng(0), 64)
    from dataclasses import replace
    shifted = replace(params, figure_center=(params.figure_center[0], 2.0))
    kps = synthetic_keypoints(shifted)
    assert not kps.valid.all()
    assert np.all(kps.valid_points[:, 1] >= 0)
