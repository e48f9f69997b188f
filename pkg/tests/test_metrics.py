"""PSNR/SSIM tests, including the cross-check against an independently
implemented SSIM (scikit-image)."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity as sk_ssim

from voxelmark.metrics import psnr, ssim
from voxelmark.ops import ShapeMismatch


class TestPsnr:
    def test_identical_capped(self):
        img = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert psnr(img, img.copy()) == 100.0

    def test_known_mse(self):
        a = np.zeros((3, 10, 10))
        b = np.full((3, 10, 10), 0.1)     # MSE 0.01 -> 20 dB
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(3, 8, 8))
        b = rng.uniform(size=(3, 8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))


def sk_reference(a, b):
    """Independent SSIM: scikit-image with the matching window settings."""
    return sk_ssim(a.transpose(1, 2, 0), b.transpose(1, 2, 0),
                   channel_axis=2, data_range=1.0, gaussian_weights=True,
                   sigma=1.5, use_sample_covariance=False)


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(0).uniform(size=(3, 16, 16))
        assert ssim(img, img.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_negative(self):
        rng = np.random.default_rng(1)
        a = (rng.uniform(size=(3, 24, 24)) > 0.5).astype(np.float64)
        assert ssim(a, 1.0 - a) < 0.0

    def test_constant_offset_matches_reference(self):
        a = np.full((3, 16, 16), 0.5)
        b = np.full((3, 16, 16), 0.6)
        assert ssim(a, b) == pytest.approx(sk_reference(a, b), abs=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_random_images_match_reference(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(3, 20, 24))
        b = np.clip(a + rng.normal(size=a.shape) * 0.1, 0.0, 1.0)
        assert ssim(a, b) == pytest.approx(sk_reference(a, b), abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(3, 16, 16))
        b = rng.uniform(size=(3, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_maximum_only_at_equality(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(3, 16, 16))
        b = np.clip(a + rng.normal(size=a.shape) * 0.05, 0.0, 1.0)
        assert ssim(a, b) < 1.0

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_grayscale_input(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(16, 16))
        assert ssim(a, a.copy()) == pytest.approx(1.0)
