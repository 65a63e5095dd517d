"""Tests for soft localization, differentiable crops and overlap."""

import numpy as np
import pytest

from featpipe.geometry import (
    bilinear_sample,
    crop,
    proposal_overlap,
    rot_crop,
    softargmax,
)
from featpipe.grad import ShapeError, Tensor, finite_diff_check


class TestSoftargmax:
    def test_constant_map_gives_exact_center(self):
        out = softargmax(np.zeros((9, 9)), beta=10.0)
        np.testing.assert_allclose(out.data, [4.0, 4.0], atol=1e-12)

    def test_rectangular_constant_map(self):
        out = softargmax(np.ones((5, 11)), beta=10.0)
        np.testing.assert_allclose(out.data, [5.0, 2.0], atol=1e-12)

    def test_single_spike_returns_x_y(self):
        """Spike at row 2, column 3 localizes to (x, y) = (3, 2)."""
        s = np.zeros((9, 9))
        s[2, 3] = 100.0
        out = softargmax(s, beta=10.0)
        np.testing.assert_allclose(out.data, [3.0, 2.0], atol=1e-6)

    def test_sharpness_convergence(self):
        """With a clear margin, beta=100 lands within 0.05 px of the argmax."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            s = rng.uniform(0.0, 1.0, size=(17, 17))
            i, j = np.unravel_index(np.argmax(s), s.shape)
            second = np.partition(s.reshape(-1), -2)[-2]
            if s[i, j] - second < 0.5:
                s[i, j] = second + 0.6
            out = softargmax(s, beta=100.0).data
            assert abs(out[0] - j) <= 0.05
            assert abs(out[1] - i) <= 0.05

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        s0 = rng.normal(size=(7, 8))

        def fn(t):
            out = softargmax(t, beta=10.0)
            return (out * np.array([1.3, -0.7])).sum()

        assert finite_diff_check(fn, s0, eps=1e-5) < 1e-4

    def test_empty_map_rejected(self):
        with pytest.raises(ShapeError):
            softargmax(np.zeros((0, 4)))


class TestCrop:
    def test_identity_window(self):
        """A 4-crop at (2.5, 2.5) of a 6x6 grid copies rows/cols 1..4."""
        rng = np.random.default_rng(2)
        p = rng.normal(size=(6, 6))
        out = crop(p, np.array([2.5, 2.5]), 4)
        np.testing.assert_allclose(out.data[0], p[1:5, 1:5], rtol=1e-12)

    def test_full_patch_identity(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=(8, 8))
        out = crop(p, np.array([3.5, 3.5]), 8)
        np.testing.assert_allclose(out.data[0], p, rtol=1e-12)

    def test_out_of_bounds_is_zero(self):
        p = np.ones((6, 6))
        out = crop(p, np.array([-10.0, -10.0]), 4)
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 4)))

    def test_half_integer_center_copies_exactly(self):
        p = np.zeros((4, 4))
        p[1, 1] = 4.0
        # a half-integer center aligns the even crop with the pixel grid
        out = crop(p, np.array([1.5, 1.5]), 2)
        np.testing.assert_allclose(out.data[0], [[4.0, 0.0], [0.0, 0.0]], rtol=1e-12)
        # an integer center samples midway between pixels: the impulse
        # contributes a quarter to each of the four surrounding taps
        out2 = crop(p, np.array([1.0, 1.0]), 2)
        np.testing.assert_allclose(out2.data[0], np.ones((2, 2)), rtol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        p0 = rng.normal(size=(8, 8))
        xy0 = np.array([3.3, 4.1])
        coeff = rng.normal(size=(1, 4, 4))

        def wrt_p(t):
            return (crop(t, Tensor(xy0), 4) * coeff).sum()

        def wrt_xy(t):
            return (crop(Tensor(p0), t, 4) * coeff).sum()

        assert finite_diff_check(wrt_p, p0) < 1e-4
        assert finite_diff_check(wrt_xy, xy0, eps=1e-5) < 1e-4

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(3, 1, 10, 10))
        xy = rng.uniform(3, 6, size=(3, 2))
        out = crop(p, xy, 4).data
        for b in range(3):
            single = crop(p[b, 0], xy[b], 4).data
            np.testing.assert_allclose(out[b], single, rtol=1e-12)


class TestRotCrop:
    def test_zero_angle_equals_crop(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(9, 9))
        xy = np.array([4.2, 3.9])
        a = crop(p, xy, 4).data
        b = rot_crop(p, xy, 0.0, 4).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_two_pi_periodic(self):
        rng = np.random.default_rng(7)
        p = rng.normal(size=(9, 9))
        xy = np.array([4.0, 4.0])
        a = rot_crop(p, xy, 0.7, 4).data
        b = rot_crop(p, xy, 0.7 + 2 * np.pi, 4).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_quarter_turn_on_symmetric_pattern(self):
        """A 4-fold symmetric patch is invariant under a quarter turn."""
        rng = np.random.default_rng(8)
        q = rng.normal(size=(8, 8))
        p = (q + np.rot90(q, 1) + np.rot90(q, 2) + np.rot90(q, 3)) / 4.0
        xy = np.array([3.5, 3.5])
        a = rot_crop(p, xy, 0.0, 6).data
        b = rot_crop(p, xy, np.pi / 2.0, 6).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_quarter_turn_moves_content(self):
        p = np.zeros((9, 9))
        p[4, 7] = 1.0  # offset (+3, 0) from center (4, 4)
        out = rot_crop(p, np.array([4.0, 4.0]), np.pi / 2.0, 9).data[0]
        # content at direction (1, 0) moves to direction (0, 1): row 7
        assert out[7, 4] == pytest.approx(1.0, abs=1e-9)
        assert out[4, 7] == pytest.approx(0.0, abs=1e-9)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        p0 = rng.normal(size=(10, 10))
        xy0 = np.array([4.6, 4.2])
        coeff = rng.normal(size=(1, 4, 4))

        def wrt_p(t):
            return (rot_crop(t, Tensor(xy0), Tensor(0.4), 4) * coeff).sum()

        def wrt_xy(t):
            return (rot_crop(Tensor(p0), t, Tensor(0.4), 4) * coeff).sum()

        def wrt_theta(t):
            return (rot_crop(Tensor(p0), Tensor(xy0), t, 4) * coeff).sum()

        assert finite_diff_check(wrt_p, p0) < 1e-4
        assert finite_diff_check(wrt_xy, xy0, eps=1e-5) < 1e-4
        assert finite_diff_check(wrt_theta, np.array(0.4), eps=1e-5) < 1e-4


class TestBilinearSample:
    def test_exact_on_grid_points(self):
        rng = np.random.default_rng(10)
        p = rng.normal(size=(5, 5))
        v = bilinear_sample(p, np.array([2.0, 3.0]))
        np.testing.assert_allclose(v.item(), p[3, 2], rtol=1e-12)

    def test_midpoint_average(self):
        p = np.array([[0.0, 2.0], [4.0, 6.0]])
        v = bilinear_sample(p, np.array([0.5, 0.5]))
        np.testing.assert_allclose(v.item(), 3.0, rtol=1e-12)

    def test_gradient_to_image(self):
        rng = np.random.default_rng(11)
        p0 = rng.normal(size=(5, 5))

        def fn(t):
            return bilinear_sample(t, np.array([1.7, 2.3]))

        assert finite_diff_check(fn, p0) < 1e-4


class TestProposalOverlap:
    def test_identical_squares(self):
        iou, l1 = proposal_overlap(np.array([5.0, 5.0]), np.array([5.0, 5.0]), 64.0)
        assert iou.item() == pytest.approx(1.0, abs=1e-12)
        assert l1.item() == pytest.approx(0.0, abs=1e-12)

    def test_half_side_offset(self):
        """Offset by s/2 along one axis: IoU is exactly 1/3."""
        s = 64.0
        iou, l1 = proposal_overlap(np.array([0.0, 0.0]), np.array([s / 2, 0.0]), s)
        np.testing.assert_allclose(iou.item(), 1.0 / 3.0, rtol=1e-12)
        np.testing.assert_allclose(l1.item(), s / 2, rtol=1e-12)

    def test_disjoint(self):
        iou, l1 = proposal_overlap(np.array([0.0, 0.0]), np.array([200.0, 0.0]), 64.0)
        assert iou.item() == 0.0
        assert l1.item() == 200.0

    def test_symmetry(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            a = rng.uniform(-30, 30, size=2)
            b = rng.uniform(-30, 30, size=2)
            i1, d1 = proposal_overlap(a, b, 20.0)
            i2, d2 = proposal_overlap(b, a, 20.0)
            np.testing.assert_allclose(i1.item(), i2.item(), rtol=1e-12)
            np.testing.assert_allclose(d1.item(), d2.item(), rtol=1e-12)

    def test_matches_area_oracle(self):
        rng = np.random.default_rng(13)
        s = 16.0
        for _ in range(50):
            a = rng.uniform(-20, 20, size=2)
            b = rng.uniform(-20, 20, size=2)
            iou, _ = proposal_overlap(a, b, s)
            wx = max(0.0, s - abs(a[0] - b[0]))
            wy = max(0.0, s - abs(a[1] - b[1]))
            inter = wx * wy
            expect = inter / (2 * s * s - inter)
            np.testing.assert_allclose(iou.item(), expect, rtol=1e-12)

    def test_iou_gradient(self):
        def fn(t):
            iou, _ = proposal_overlap(t, np.array([8.0, 3.0]), 16.0)
            return iou

        assert finite_diff_check(fn, np.array([1.0, -2.0]), eps=1e-5) < 1e-4
