"""Hold-out construction, transplantation, and detection-rule tests."""
import numpy as np
import pytest

from patchbench.detector import (DetectionConfig, DetectionOutcome, HoldoutEntry,
                                 HoldoutSet, build_holdout, detect,
                                 load_holdout, restrict_outcome,
                                 sample_without_replacement, save_holdout,
                                 transplant)
from patchbench.saliency import Box, SmoothGradConfig
from patchbench.seeding import derive_rng

from conftest import channel_sum_classifier


def small_config(k=2):
    return DetectionConfig(k=k, box_height=6, box_width=6,
                           smoothgrad=SmoothGradConfig(n=1, sigma=0.0, seed=0),
                           filter_side=3)


class TestSampling:
    def test_matches_reference_fisher_yates(self):
        # independent reimplementation of the pinned algorithm
        rng = np.random.default_rng(7)
        got = sample_without_replacement(rng, 1000, 100)

        ref_rng = np.random.default_rng(7)
        pool = list(range(1000))
        chosen = []
        for i in range(100):
            j = int(ref_rng.integers(i, 1000))
            pool[i], pool[j] = pool[j], pool[i]
            chosen.append(pool[i])
        assert list(got) == chosen
        assert len(set(got)) == 100

    def test_identity_when_pool_equals_size(self):
        rng = np.random.default_rng(0)
        got = sample_without_replacement(rng, 25, 25)
        assert sorted(got) == list(range(25))

    def test_uniform_coverage(self):
        hits = np.zeros(20)
        for seed in range(500):
            rng = np.random.default_rng(seed)
            hits[sample_without_replacement(rng, 20, 5)] += 1
        freq = hits / 500.0
        assert abs(freq.mean() - 0.25) < 1e-9
        assert freq.std() < 0.05


class TestBuildHoldout:
    def test_pool_too_small_rejected(self, probe_classifier):
        pool = np.zeros((3, 16, 16, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            build_holdout(pool, 5, probe_classifier, small_config(), seed=0)

    def test_identity_sample_and_determinism(self, probe_classifier):
        rng = np.random.default_rng(1)
        pool = rng.random((6, 16, 16, 3)).astype(np.float32)
        a = build_holdout(pool, 6, probe_classifier, small_config(), seed=5)
        b = build_holdout(pool, 6, probe_classifier, small_config(), seed=9)
        # pool of exactly holdout_size: same set of images under any seed
        imgs_a = {img.tobytes() for img in (e.image for e in a.entries)}
        assert imgs_a == {pool[i].tobytes() for i in range(6)}
        c = build_holdout(pool, 6, probe_classifier, small_config(), seed=5)
        for e1, e2 in zip(a.entries, c.entries):
            assert np.array_equal(e1.image, e2.image)
            assert e1.predicted_label == e2.predicted_label
            assert e1.min_box == e2.min_box

    def test_min_boxes_precomputed_and_valid(self, probe_classifier):
        rng = np.random.default_rng(2)
        pool = rng.random((10, 16, 16, 3)).astype(np.float32)
        holdout = build_holdout(pool, 4, probe_classifier, small_config(), seed=3)
        assert len(holdout) == 4
        for e in holdout.entries:
            assert e.min_box.height == 6 and e.min_box.width == 6
            assert 0 <= e.min_box.top <= 10 and 0 <= e.min_box.left <= 10


class TestTransplant:
    def test_constant_region_copied(self):
        rng = np.random.default_rng(0)
        src = np.full((12, 12, 3), 0.5, dtype=np.float32)
        dst = rng.random((12, 12, 3)).astype(np.float32)
        out = transplant(src, Box(1, 1, 4, 4), dst, Box(6, 6, 4, 4))
        assert np.all(out[6:10, 6:10] == 0.5)

    def test_identity_transplant(self):
        rng = np.random.default_rng(1)
        x = rng.random((10, 10, 3)).astype(np.float32)
        out = transplant(x, Box(2, 3, 4, 5), x, Box(2, 3, 4, 5))
        assert np.array_equal(out, x)

    def test_hand_computed_four_by_four(self):
        src = np.arange(4 * 4 * 3, dtype=np.float32).reshape(4, 4, 3) / 100.0
        dst = np.zeros((4, 4, 3), dtype=np.float32)
        out = transplant(src, Box(0, 0, 2, 2), dst, Box(2, 2, 2, 2))
        expected = dst.copy()
        expected[2:4, 2:4] = src[0:2, 0:2]
        assert np.array_equal(out, expected)
        # untouched pixels bit-identical
        assert np.array_equal(out[0:2, :], dst[0:2, :])

    def test_dimension_mismatch_rejected(self):
        a = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            transplant(a, Box(0, 0, 3, 3), a, Box(0, 0, 3, 4))

    def test_never_modifies_outside_dst_box(self):
        rng = np.random.default_rng(2)
        src = rng.random((15, 15, 3)).astype(np.float32)
        dst = rng.random((15, 15, 3)).astype(np.float32)
        dst_box = Box(4, 7, 5, 6)
        out = transplant(src, Box(0, 0, 5, 6), dst, dst_box)
        outside = np.ones((15, 15), dtype=bool)
        outside[dst_box.slices] = False
        assert np.array_equal(out[outside], dst[outside])


def _manual_holdout(entries_images, probe, box):
    from patchbench.model_zoo import predict
    entries = [HoldoutEntry(img, predict(probe, img).label, box)
               for img in entries_images]
    return HoldoutSet(entries, seed=0, config=small_config())


class TestDetect:
    """The channel-sum probe makes every prediction analytic: logit c = sum of
    channel c. A constant saliency map puts the suspicious box at the top-left
    corner, so tests place their evidence there."""

    def _red_corner_image(self):
        # strong red mass inside the (0,0) 6x6 box -> predicted red everywhere
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 0] = 0.05
        img[0:6, 0:6, 0] = 1.0
        return img

    def _green_image(self, level):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 1] = level
        return img

    def test_flagged_when_all_transplants_match(self, probe_classifier):
        img = self._red_corner_image()  # red sum = 36 + 0.05*220 = 47
        # weak green hold-outs: transplanted red box (sum 36+) beats green 0.1*256=25.6
        holdout = _manual_holdout([self._green_image(0.1), self._green_image(0.12)],
                                  probe_classifier, Box(5, 5, 6, 6))
        out = detect(probe_classifier, img, holdout, small_config(k=2),
                     derive_rng(0, 1))
        assert out.original_label == 0
        assert out.transplant_labels == [0, 0]
        assert out.flagged

    def test_not_flagged_when_transplants_differ(self, probe_classifier):
        img = self._red_corner_image()
        # strong green hold-outs: green 0.9*220 = 198 >> transplanted red 36
        holdout = _manual_holdout([self._green_image(0.9), self._green_image(0.95)],
                                  probe_classifier, Box(5, 5, 6, 6))
        out = detect(probe_classifier, img, holdout, small_config(k=2),
                     derive_rng(0, 2))
        assert out.transplant_labels == [1, 1]
        assert not out.flagged

    def test_and_rule_requires_all_matches(self, probe_classifier):
        img = self._red_corner_image()
        # one weak (flips to red) and one strong (stays green) hold-out
        holdout = _manual_holdout([self._green_image(0.1), self._green_image(0.9)],
                                  probe_classifier, Box(5, 5, 6, 6))
        out = detect(probe_classifier, img, holdout, small_config(k=2),
                     derive_rng(0, 3))
        assert sorted(out.transplant_labels) == [0, 1]
        assert not out.flagged

    def test_outcome_invariant(self):
        with pytest.raises(ValueError):
            DetectionOutcome(True, Box(0, 0, 2, 2), 1, [1, 2])

    def test_restrict_outcome_matches_direct_calls(self, tiny_classifier,
                                                   toy_test_dataset):
        pool = toy_test_dataset.images[:12]
        config3 = DetectionConfig.for_side(
            64, k=3, smoothgrad_config=SmoothGradConfig(n=4, sigma=0.1, seed=0))
        holdout = build_holdout(pool, 8, tiny_classifier, config3, seed=1)
        from dataclasses import replace
        image = toy_test_dataset.images[20]
        full = detect(tiny_classifier, image, holdout, config3, derive_rng(9, 0))
        for k in (1, 2, 3):
            direct = detect(tiny_classifier, image, holdout,
                            replace(config3, k=k), derive_rng(9, 0))
            sliced = restrict_outcome(full, k)
            assert direct.flagged == sliced.flagged
            assert direct.transplant_labels == sliced.transplant_labels
            assert direct.suspicious_box == sliced.suspicious_box

    def test_k_monotonicity_of_flagging(self, tiny_classifier, toy_test_dataset):
        """AND-vote over nested prefixes: flags can only turn off as k grows."""
        pool = toy_test_dataset.images[:12]
        config3 = DetectionConfig.for_side(
            64, k=3, smoothgrad_config=SmoothGradConfig(n=4, sigma=0.1, seed=0))
        holdout = build_holdout(pool, 8, tiny_classifier, config3, seed=1)
        for i in range(20, 35):
            out = detect(tiny_classifier, toy_test_dataset.images[i], holdout,
                         config3, derive_rng(4, i))
            flags = [restrict_outcome(out, k).flagged for k in (1, 2, 3)]
            assert flags[0] >= flags[1] >= flags[2]


class TestHoldoutIO:
    def test_round_trip(self, probe_classifier, tmp_path):
        rng = np.random.default_rng(3)
        pool = rng.random((8, 16, 16, 3)).astype(np.float32)
        holdout = build_holdout(pool, 5, probe_classifier, small_config(), seed=2)
        path = str(tmp_path / "holdout.bin")
        save_holdout(holdout, path)
        loaded = load_holdout(path)
        assert len(loaded) == 5
        assert loaded.seed == 2
        assert loaded.config == holdout.config
        for a, b in zip(holdout.entries, loaded.entries):
            assert np.array_equal(a.image, b.image)
            assert a.predicted_label == b.predicted_label
            assert a.min_box == b.min_box
