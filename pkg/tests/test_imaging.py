import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudoblur.errors import InvalidInputError
from pseudoblur.imaging import (PSNR_CAP, SIGNED, UNIT, BinaryMask, ImageTensor, average_frames,
                                crop_bbox, downsample_2x, max_pool, psnr, read_png, rgb_to_y,
                                sobel_edges, ssim, write_png, zero_outside_bbox)


def rand_img(rng, h=8, w=8, c=3, tag=UNIT):
    lo = 0.0 if tag == UNIT else -1.0
    return ImageTensor(rng.uniform(lo, 1.0, size=(h, w, c)), tag)


class TestContainers:
    def test_clamps_on_construction(self):
        img = ImageTensor(np.array([[[-0.5, 0.5, 1.5]]]), UNIT)
        assert img.data.min() == 0.0 and img.data.max() == 1.0

    def test_rejects_bad_channels(self):
        with pytest.raises(InvalidInputError):
            ImageTensor(np.zeros((4, 4, 2)))

    def test_range_conversion_roundtrip(self):
        img = rand_img(np.random.default_rng(0), tag=SIGNED)
        np.testing.assert_allclose(img.to_unit().to_signed().data, img.data, atol=1e-6)

    def test_mask_rejects_non_binary(self):
        with pytest.raises(InvalidInputError):
            BinaryMask(np.array([[0, 2]]))

    def test_mask_invert_complement(self):
        m = BinaryMask(np.random.default_rng(1).integers(0, 2, size=(6, 7)))
        assert np.array_equal(m.data + m.invert().data, np.ones((6, 7)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_mask_partition_of_image(self, seed):
        rng = np.random.default_rng(seed)
        img = rand_img(rng)
        m = BinaryMask(rng.integers(0, 2, size=(8, 8)))
        total = m.apply(img).data + m.invert().apply(img).data
        np.testing.assert_array_equal(total, img.data)


class TestLuma:
    def test_white_and_black(self):
        assert np.allclose(rgb_to_y(ImageTensor(np.ones((3, 3, 3)))).data, 1.0, atol=1e-6)
        assert np.array_equal(rgb_to_y(ImageTensor(np.zeros((3, 3, 3)))).data, np.zeros((3, 3, 1)))

    def test_pure_red(self):
        img = np.zeros((2, 2, 3))
        img[..., 0] = 1.0
        expected = 1.0 * 0.299 + 0.0 * 0.587 + 0.0 * 0.114
        np.testing.assert_allclose(rgb_to_y(ImageTensor(img)).data, expected, rtol=1e-6)

    def test_matches_scalar_evaluation(self):
        rng = np.random.default_rng(3)
        img = rand_img(rng, 4, 5)
        y = rgb_to_y(img).data
        for i in range(4):
            for j in range(5):
                r, g, b = (float(v) for v in img.data[i, j])
                assert y[i, j, 0] == pytest.approx(0.299 * r + 0.587 * g + 0.114 * b, abs=1e-6)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            rgb_to_y(ImageTensor(np.zeros((3, 3, 1))))
        with pytest.raises(InvalidInputError):
            rgb_to_y(ImageTensor(np.zeros((3, 3, 3)), SIGNED))


def sobel_oracle(m):
    """Hand-written per-pixel 3x3 Sobel with replicate border."""
    h, w = m.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for a in range(3):
                for b in range(3):
                    v = m[min(max(i + a - 1, 0), h - 1), min(max(j + b - 1, 0), w - 1)]
                    gx += kx[a][b] * v
                    gy += kx[b][a] * v
            out[i, j] = math.hypot(gx, gy)
    return out


class TestSobel:
    def test_constant_is_zero(self):
        assert np.array_equal(sobel_edges(np.full((6, 6), 0.4)), np.zeros((6, 6)))

    def test_vertical_step(self):
        m = np.zeros((5, 5))
        m[:, 3:] = 1.0
        e = sobel_edges(m)
        # columns 2 and 3 straddle the step: |Gx| = 1 + 2 + 1 = 4
        np.testing.assert_allclose(e[:, 2], 4.0)
        np.testing.assert_allclose(e[:, 3], 4.0)
        np.testing.assert_allclose(e[:, 0], 0.0)
        assert e.max() == 4.0

    def test_impulse_stencil(self):
        m = np.zeros((5, 5))
        m[2, 2] = 1.0
        e = sobel_edges(m)
        s2 = math.sqrt(2.0)
        expected = np.array([[s2, 2.0, s2], [2.0, 0.0, 2.0], [s2, 2.0, s2]])
        np.testing.assert_allclose(e[1:4, 1:4], expected, rtol=1e-6)
        assert e[0].max() == 0.0 and e[:, 0].max() == 0.0

    def test_matches_oracle_random(self):
        m = np.random.default_rng(5).uniform(size=(7, 9))
        np.testing.assert_allclose(sobel_edges(m), sobel_oracle(m), rtol=1e-5, atol=1e-6)

    def test_rejects_multichannel(self):
        with pytest.raises(InvalidInputError):
            sobel_edges(ImageTensor(np.zeros((4, 4, 3))))


class TestMaxPool:
    def test_kernel_one_identity(self):
        m = np.random.default_rng(0).uniform(size=(5, 6)).astype(np.float32)
        assert np.array_equal(max_pool(m, 1), m)

    def test_impulse_dilates_to_block(self):
        m = np.zeros((7, 7), np.uint8)
        m[3, 3] = 1
        out = max_pool(m, 3)
        assert out.sum() == 9 and out[2:5, 2:5].all()

    def test_gap_filled(self):
        m = np.zeros((5, 5), np.uint8)
        m[2, 1] = m[2, 3] = 1
        out = max_pool(m, 3)
        brute = np.zeros_like(m)
        for i in range(5):
            for j in range(5):
                brute[i, j] = m[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2].max()
        assert np.array_equal(out, brute)
        assert out[2, 2] == 1

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidInputError):
            max_pool(np.zeros((4, 4)), 2)


class TestDownsample:
    def test_constant(self):
        out = downsample_2x(ImageTensor(np.full((4, 6, 3), 0.3)))
        assert out.shape == (2, 3, 3)
        np.testing.assert_allclose(out.data, 0.3, rtol=1e-6)

    def test_checkerboard(self):
        out = downsample_2x(ImageTensor(np.array([[0.0, 1.0], [1.0, 0.0]])))
        assert out.data.shape == (1, 1, 1) and out.data[0, 0, 0] == 0.5

    def test_ramp_block_means(self):
        ramp = np.arange(16, dtype=np.float64).reshape(4, 4) / 15.0
        out = downsample_2x(ImageTensor(ramp)).data[:, :, 0]
        expected = np.array([[ramp[0:2, 0:2].mean(), ramp[0:2, 2:4].mean()],
                             [ramp[2:4, 0:2].mean(), ramp[2:4, 2:4].mean()]])
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_odd_rejected(self):
        with pytest.raises(InvalidInputError):
            downsample_2x(ImageTensor(np.zeros((3, 4, 1))))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=30, deadline=None)
    def test_mean_preserved(self, seed, hh, hw):
        img = rand_img(np.random.default_rng(seed), 2 * hh, 2 * hw)
        assert abs(downsample_2x(img).data.mean() - img.data.mean()) < 1e-6


class TestAverageFrames:
    def test_identical_frames(self):
        f = rand_img(np.random.default_rng(1))
        assert average_frames([f] * 7) == f

    def test_two_constants(self):
        out = average_frames([ImageTensor(np.zeros((3, 3, 3))), ImageTensor(np.ones((3, 3, 3)))])
        assert np.all(out.data == 0.5)

    def test_translated_shape_matches_pixel_mean(self):
        frames = []
        for k in range(7):
            a = np.zeros((6, 12, 1))
            a[2:4, k:k + 3] = 1.0
            frames.append(ImageTensor(a))
        out = average_frames(frames).data
        for i in range(6):
            for j in range(12):
                acc = 0.0
                for f in frames:
                    acc += float(f.data[i, j, 0])
                assert out[i, j, 0] == np.float32(acc / 7)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        frames = [rand_img(rng) for _ in range(5)]
        a = average_frames(frames).data
        b = average_frames(frames[::-1]).data
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_mismatch(self):
        with pytest.raises(InvalidInputError):
            average_frames([ImageTensor(np.zeros((3, 3, 3))), ImageTensor(np.zeros((4, 3, 3)))])
        with pytest.raises(InvalidInputError):
            average_frames([ImageTensor(np.zeros((3, 3, 3)))])


class TestPSNR:
    def test_identical_capped(self):
        img = rand_img(np.random.default_rng(0))
        assert psnr(img, img) == PSNR_CAP

    def test_uniform_offset(self):
        a = ImageTensor(np.full((8, 8, 3), 0.2))
        b = ImageTensor(np.full((8, 8, 3), 0.3))
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-4)

    def test_random_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rand_img(rng), rand_img(rng)
        total, n = 0.0, 0
        for x, y in zip(a.data.ravel(), b.data.ravel()):
            total += (float(x) - float(y)) ** 2
            n += 1
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (total / n)), rel=1e-9)

    def test_signed_inputs_converted(self):
        a = ImageTensor(np.full((4, 4, 3), -1.0), SIGNED)
        b = ImageTensor(np.full((4, 4, 3), -0.8), SIGNED)  # unit 0.0 vs 0.1
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-4)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        base = ImageTensor(rng.uniform(0.3, 0.7, size=(16, 16, 3)))
        noise = rng.uniform(-1, 1, size=base.shape)
        values = [psnr(base, ImageTensor(base.data + amp * noise)) for amp in (0.01, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            psnr(ImageTensor(np.zeros((4, 4, 3))), ImageTensor(np.zeros((4, 5, 3))))


class TestSSIM:
    def test_identical(self):
        img = rand_img(np.random.default_rng(0), 16, 16)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_black_white_closed_form(self):
        a = ImageTensor(np.zeros((12, 12, 1)))
        b = ImageTensor(np.ones((12, 12, 1)))
        c1 = 0.01 ** 2
        # mu_a = 0, mu_b = 1, all variances 0: luminance term only survives
        assert ssim(a, b) == pytest.approx(c1 / (1.0 + c1), rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = rand_img(rng, 16, 16), rand_img(rng, 16, 16)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_skimage(self):
        from skimage.metrics import structural_similarity
        rng = np.random.default_rng(9)
        a = rand_img(rng, 24, 24, 1)
        b = ImageTensor(np.clip(a.data + rng.normal(0, 0.1, a.shape), 0, 1))
        ref = structural_similarity(a.data[..., 0].astype(np.float64), b.data[..., 0].astype(np.float64),
                                    data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, full=True)[1][5:-5, 5:-5].mean()
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            ssim(ImageTensor(np.zeros((8, 8, 3))), ImageTensor(np.zeros((8, 8, 3))))


class TestBoxes:
    def test_full_box_identity(self):
        img = rand_img(np.random.default_rng(0), 5, 6)
        assert crop_bbox(img, (0, 0, 5, 6)) == img

    def test_single_pixel(self):
        img = rand_img(np.random.default_rng(0), 5, 6)
        out = crop_bbox(img, (2, 3, 3, 4))
        assert out.shape == (1, 1, 3)
        assert np.array_equal(out.data[0, 0], img.data[2, 3])

    def test_zero_outside(self):
        out = zero_outside_bbox(BinaryMask.ones((10, 10)), (2, 3, 7, 8))
        assert out.data.sum() == 5 * 5
        assert out.data[2:7, 3:8].all()

    def test_out_of_bounds(self):
        with pytest.raises(InvalidInputError):
            crop_bbox(ImageTensor(np.zeros((4, 4, 3))), (0, 0, 5, 4))
        with pytest.raises(InvalidInputError):
            zero_outside_bbox(BinaryMask.ones((4, 4)), (2, 2, 2, 3))


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    write_png(ImageTensor(arr), tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    np.testing.assert_allclose(back.data, arr, atol=1e-7)
