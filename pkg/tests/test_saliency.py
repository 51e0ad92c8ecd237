"""Saliency map, average filter, and box localisation tests."""
import numpy as np
import pytest

from patchbench.model_zoo import GradientRequest, input_gradient, predict
from patchbench.saliency import (Box, SaliencyMap, SmoothGradConfig,
                                 average_filter, default_box_side,
                                 default_filter_side, locate_max_box,
                                 locate_min_box, smoothgrad)

from conftest import channel_sum_classifier


def brute_force_windowed_mean(values, side):
    """Nested-loop mean with replicate padding (independent oracle)."""
    h, w = values.shape
    r = side // 2
    out = np.zeros_like(values, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    acc += values[ii, jj]
            out[i, j] = acc / (side * side)
    return out


class TestSmoothGrad:
    def test_single_sample_no_noise_equals_plain_gradient(self, tiny_classifier):
        rng = np.random.default_rng(0)
        image = rng.random((64, 64, 3)).astype(np.float32)
        label = predict(tiny_classifier, image).label
        smap = smoothgrad(tiny_classifier, image, label, SmoothGradConfig(1, 0.0, 0))
        grad = input_gradient(tiny_classifier, GradientRequest(image, label))
        expected = np.abs(grad).mean(axis=2)
        assert np.max(np.abs(smap.values - expected)) <= 1e-6

    def test_linear_model_map_is_abs_weights(self):
        clf = channel_sum_classifier(16)
        rng = np.random.default_rng(1)
        image = rng.random((16, 16, 3)).astype(np.float32)
        for n, sigma in ((1, 0.0), (5, 0.1), (20, 0.3)):
            smap = smoothgrad(clf, image, 2, SmoothGradConfig(n, sigma, seed=3))
            # gradient of logit 2 is the indicator of the blue channel -> mean 1/3
            assert np.allclose(smap.values, 1.0 / 3.0, atol=1e-6)

    def test_reproducible_given_seed(self, tiny_classifier):
        rng = np.random.default_rng(2)
        image = rng.random((64, 64, 3)).astype(np.float32)
        cfg = SmoothGradConfig(8, 0.1, seed=11)
        a = smoothgrad(tiny_classifier, image, 0, cfg)
        b = smoothgrad(tiny_classifier, image, 0, cfg)
        assert np.array_equal(a.values, b.values)

    def test_seed_stability_correlation(self, tiny_classifier, toy_test_dataset):
        """Different noise seeds give different but highly correlated maps."""
        cors = []
        for i in range(20):
            image = toy_test_dataset.images[i]
            label = predict(tiny_classifier, image).label
            a = smoothgrad(tiny_classifier, image, label, SmoothGradConfig(50, 0.1, 1))
            b = smoothgrad(tiny_classifier, image, label, SmoothGradConfig(50, 0.1, 2))
            assert not np.array_equal(a.values, b.values)
            cors.append(np.corrcoef(a.values.ravel(), b.values.ravel())[0, 1])
        assert np.mean(cors) >= 0.9

    def test_class_out_of_range_rejected(self, tiny_classifier):
        image = np.zeros((64, 64, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            smoothgrad(tiny_classifier, image, 10, SmoothGradConfig(1, 0.0, 0))


class TestAverageFilter:
    def test_constant_map_unchanged(self):
        smap = SaliencyMap(np.full((20, 20), 0.7), 0)
        for side in (1, 3, 7):
            out = average_filter(smap, side)
            assert np.allclose(out.values, 0.7, atol=1e-12)

    def test_interior_impulse(self):
        values = np.zeros((21, 21))
        values[10, 10] = 1.0
        out = average_filter(SaliencyMap(values, 0), 5)
        covered = out.values[8:13, 8:13]
        assert np.allclose(covered, 1.0 / 25.0, atol=1e-12)
        outside = out.values.copy()
        outside[8:13, 8:13] = 0.0
        assert np.all(outside == 0.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        values = rng.random((16, 16))
        out = average_filter(SaliencyMap(values, 0), 5)
        oracle = brute_force_windowed_mean(values, 5)
        assert np.max(np.abs(out.values - oracle)) <= 1e-6

    def test_matches_brute_force_border_heavy(self):
        rng = np.random.default_rng(4)
        values = rng.random((9, 9))
        out = average_filter(SaliencyMap(values, 0), 7)
        oracle = brute_force_windowed_mean(values, 7)
        assert np.max(np.abs(out.values - oracle)) <= 1e-6

    def test_rejects_even_or_oversized_filter(self):
        smap = SaliencyMap(np.zeros((8, 8)), 0)
        with pytest.raises(ValueError):
            average_filter(smap, 4)
        with pytest.raises(ValueError):
            average_filter(smap, 9)

    def test_mean_preserved_on_interior_dominated_maps(self):
        # all mass at least half a window away from the border: padding is inert
        rng = np.random.default_rng(5)
        values = np.zeros((64, 64))
        values[2:-2, 2:-2] = rng.random((60, 60))
        out = average_filter(SaliencyMap(values, 0), 5)
        rel = abs(out.values.mean() - values.mean()) / values.mean()
        assert rel <= 1e-4


class TestBoxes:
    def test_interior_max_gives_centered_box(self):
        values = np.zeros((32, 32))
        values[17, 12] = 5.0
        box = locate_max_box(SaliencyMap(values, 0), 10, 10)
        assert (box.top, box.left) == (12, 7)
        assert (box.height, box.width) == (10, 10)

    def test_corner_max_clamps(self):
        values = np.zeros((32, 32))
        values[0, 0] = 1.0
        box = locate_max_box(SaliencyMap(values, 0), 10, 10)
        assert (box.top, box.left) == (0, 0)

    def test_tie_break_row_major(self):
        values = np.zeros((12, 12))
        values[2, 3] = 7.0
        values[5, 1] = 7.0
        box = locate_max_box(SaliencyMap(values, 0), 4, 4)
        assert (box.top, box.left) == (0, 1)  # centered on (2, 3)

    def test_min_box_duality_with_negated_map(self):
        rng = np.random.default_rng(6)
        values = rng.random((24, 24))
        flipped = values.max() - values  # nonnegative, argmax <-> argmin swapped
        a = locate_min_box(SaliencyMap(values, 0), 6, 8)
        b = locate_max_box(SaliencyMap(flipped, 0), 6, 8)
        assert (a.top, a.left) == (b.top, b.left)

    def test_min_box_matches_exhaustive_scan(self):
        rng = np.random.default_rng(7)
        values = rng.random((20, 20))
        box = locate_min_box(SaliencyMap(values, 0), 5, 5)
        r, c = np.unravel_index(np.argmin(values), values.shape)
        top = min(max(r - 2, 0), 15)
        left = min(max(c - 2, 0), 15)
        assert (box.top, box.left) == (top, left)

    def test_interior_min_gives_centered_box(self):
        values = np.ones((30, 30))
        values[20, 9] = 0.0
        box = locate_min_box(SaliencyMap(values, 0), 8, 8)
        assert (box.top, box.left) == (16, 5)

    def test_box_must_fit(self):
        with pytest.raises(ValueError):
            locate_max_box(SaliencyMap(np.zeros((8, 8)), 0), 9, 3)

    def test_box_validation(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 5)
        with pytest.raises(ValueError):
            Box(-1, 0, 2, 2)

    def test_iou(self):
        a = Box(0, 0, 4, 4)
        assert a.iou(Box(0, 0, 4, 4)) == 1.0
        assert a.iou(Box(4, 4, 4, 4)) == 0.0
        assert a.iou(Box(2, 2, 4, 4)) == pytest.approx(4 / 28)


def test_reference_geometry_scaling():
    # 224-pixel reference constants: filter 51, box 102
    assert default_filter_side(224) == 51
    assert default_box_side(224) == 102
    assert default_filter_side(64) == 15
    assert default_box_side(64) == 29
