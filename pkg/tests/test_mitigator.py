"""Masking, inpainting, and mitigation-rule tests."""
import numpy as np
import pytest

from patchbench.mitigator import (InpaintBackend, InpaintBackendUnavailable,
                                  MaskSpec, MitigationResult, inpaint, mitigate,
                                  random_mask)
from patchbench.saliency import Box

from conftest import channel_sum_classifier


def make_image(rng, side=16):
    return rng.random((side, side, 3)).astype(np.float32)


class TestRandomMask:
    def test_full_masking_covers_box(self):
        rng = np.random.default_rng(0)
        img = make_image(rng)
        box = Box(2, 3, 5, 4)
        masked, mask = random_mask(img, box, MaskSpec(100.0, seed=1))
        assert int(mask.sum()) == box.area
        assert np.all(mask[box.slices] == 1)
        assert np.all(masked[box.slices] == 0.5)

    def test_zero_masking_is_identity(self):
        rng = np.random.default_rng(1)
        img = make_image(rng)
        masked, mask = random_mask(img, Box(0, 0, 8, 8), MaskSpec(0.0, seed=1))
        assert np.array_equal(masked, img)
        assert mask.sum() == 0

    def test_exact_popcount_half(self):
        rng = np.random.default_rng(2)
        img = make_image(rng, side=20)
        masked, mask = random_mask(img, Box(4, 4, 10, 10), MaskSpec(50.0, seed=9))
        assert int(mask.sum()) == 50

    def test_round_half_up(self):
        rng = np.random.default_rng(3)
        img = make_image(rng)
        # 3x3 box, p=50 -> 4.5 pixels -> rounds up to 5
        _, mask = random_mask(img, Box(0, 0, 3, 3), MaskSpec(50.0, seed=0))
        assert int(mask.sum()) == 5

    def test_pixels_outside_box_untouched(self):
        rng = np.random.default_rng(4)
        img = make_image(rng)
        box = Box(5, 6, 6, 7)
        masked, mask = random_mask(img, box, MaskSpec(80.0, seed=2))
        outside = np.ones(img.shape[:2], dtype=bool)
        outside[box.slices] = False
        assert np.array_equal(masked[outside], img[outside])
        assert mask[outside].sum() == 0

    def test_masks_nested_across_p(self):
        """Same seed: the p=25 mask is a subset of p=50, which is a subset of p=100."""
        rng = np.random.default_rng(5)
        img = make_image(rng)
        box = Box(2, 2, 8, 8)
        masks = [random_mask(img, box, MaskSpec(p, seed=7))[1]
                 for p in (25.0, 50.0, 100.0)]
        assert np.all(masks[0] <= masks[1])
        assert np.all(masks[1] <= masks[2])

    def test_uniformity_of_selection(self):
        # every box pixel selected equally often across seeds
        img = np.zeros((10, 10, 3), dtype=np.float32)
        box = Box(0, 0, 10, 10)
        counts = np.zeros((10, 10))
        for seed in range(400):
            _, mask = random_mask(img, box, MaskSpec(30.0, seed=seed))
            counts += mask
        freq = counts / 400.0
        assert abs(freq.mean() - 0.3) < 0.01
        assert freq.std() < 0.06


class TestInpaint:
    def test_empty_mask_returns_input_bit_exact(self):
        rng = np.random.default_rng(0)
        img = make_image(rng)
        out = inpaint(InpaintBackend(), img, np.zeros((16, 16), dtype=np.uint8))
        assert np.array_equal(out, img)

    def test_constant_image_fills_constant(self):
        img = np.full((16, 16, 3), 0.37, dtype=np.float32)
        masked, mask = random_mask(img, Box(4, 4, 8, 8), MaskSpec(100.0, seed=0))
        out = inpaint(InpaintBackend(), masked, mask)
        assert np.max(np.abs(out - 0.37)) <= 1e-4

    def test_linear_ramp_reconstructed(self):
        """Harmonic fill reproduces a linear ramp (ramps are harmonic)."""
        yy = np.linspace(0.1, 0.9, 24)[:, None]
        xx = np.linspace(0.2, 0.8, 24)[None, :]
        ramp = (0.5 * yy + 0.5 * xx)
        img = np.repeat(ramp[:, :, None], 3, axis=2).astype(np.float32)
        masked, mask = random_mask(img, Box(8, 8, 8, 8), MaskSpec(100.0, seed=0))
        out = inpaint(InpaintBackend(), masked, mask)
        mae = np.abs(out[mask == 1] - img[mask == 1]).mean()
        assert mae <= 0.02

    def test_unmasked_pixels_bit_identical(self):
        rng = np.random.default_rng(1)
        img = make_image(rng, side=24)
        masked, mask = random_mask(img, Box(3, 5, 9, 7), MaskSpec(60.0, seed=3))
        out = inpaint(InpaintBackend(), masked, mask)
        keep = mask == 0
        assert np.array_equal(out[keep], masked[keep])
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_neural_plugin_unavailable(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        mask = np.ones((8, 8), dtype=np.uint8)
        with pytest.raises(InpaintBackendUnavailable):
            inpaint(InpaintBackend("neural-plugin"), img, mask)

    def test_neural_plugin_callable_used_and_contract_enforced(self):
        rng = np.random.default_rng(2)
        img = make_image(rng)
        masked, mask = random_mask(img, Box(2, 2, 6, 6), MaskSpec(100.0, seed=0))
        backend = InpaintBackend("neural-plugin",
                                 plugin=lambda im, m: np.full_like(im, 0.25))
        out = inpaint(backend, masked, mask)
        assert np.all(out[mask == 1] == 0.25)
        # the plugin tried to change unmasked pixels; the contract restores them
        assert np.array_equal(out[mask == 0], masked[mask == 0])

    def test_whole_image_mask_is_deterministic(self):
        rng = np.random.default_rng(3)
        img = make_image(rng, side=8)
        mask = np.ones((8, 8), dtype=np.uint8)
        a = inpaint(InpaintBackend(), img, mask)
        b = inpaint(InpaintBackend(), img, mask)
        assert np.array_equal(a, b)


class TestMitigate:
    def test_zero_masking_never_adversarial(self, probe_classifier):
        rng = np.random.default_rng(0)
        img = make_image(rng)
        result = mitigate(probe_classifier, img, Box(0, 0, 8, 8),
                          MaskSpec(0.0, seed=1), InpaintBackend())
        assert not result.is_adversarial
        assert result.labels["original"] == result.labels["inpainted"]
        assert result.final_label == result.labels["original"]

    def test_label_flip_marks_adversarial(self, probe_classifier):
        # red wins only thanks to an intense box; masking+inpainting removes it
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 1] = 0.2          # mild green everywhere
        img[0:6, 0:6, 0] = 1.0      # intense red box: sum R = 36 > sum G = 51.2? no ->
        img[0:6, 0:6, 1] = 0.0      # carve green out of the box; R=36, G=0.2*220=44
        img[0:8, 0:8, 0] = 1.0      # enlarge: R=64 > G=0.2*192=38.4 -> label red
        img[0:8, 0:8, 1] = 0.0
        from patchbench.model_zoo import predict
        assert predict(probe_classifier, img).label == 0
        result = mitigate(probe_classifier, img, Box(0, 0, 8, 8),
                          MaskSpec(100.0, seed=2), InpaintBackend())
        assert result.is_adversarial
        assert result.final_label == result.labels["inpainted"]
        assert result.final_label != 0

    def test_rectified_when_label_survives(self, probe_classifier):
        # uniform green image: masking a box and inpainting keeps green dominant
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[:, :, 1] = 0.8
        result = mitigate(probe_classifier, img, Box(4, 4, 8, 8),
                          MaskSpec(50.0, seed=3), InpaintBackend())
        assert not result.is_adversarial
        assert result.final_label == 1

    def test_deterministic_given_seed(self, probe_classifier):
        rng = np.random.default_rng(4)
        img = make_image(rng)
        a = mitigate(probe_classifier, img, Box(2, 2, 8, 8), MaskSpec(75.0, 5),
                     InpaintBackend())
        b = mitigate(probe_classifier, img, Box(2, 2, 8, 8), MaskSpec(75.0, 5),
                     InpaintBackend())
        assert a.final_label == b.final_label
        assert np.array_equal(a.inpainted_image, b.inpainted_image)

    def test_result_invariant_enforced(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            MitigationResult(1, True, img, img,
                             {"original": 1, "inpainted": 1})


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(101.0)
    with pytest.raises(ValueError):
        MaskSpec(-0.5)
