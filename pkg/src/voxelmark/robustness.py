"""Image degradations, robustness sweeps, the LSB refit experiment and the
ablation runner.

``jpeg_like`` emulates JPEG's information loss (color transform, 8x8 block
DCT, table quantization with the libjpeg quality scaling) without entropy
coding, which is lossless and therefore irrelevant to detector robustness.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .detector import forward_detector
from .field import render
from .lsb import lsb_embed, lsb_extract
from .metrics import psnr, ssim
from .scenes import SceneDataset
from .storage import float_to_u8, u8_to_float
from .training import stage1_fit, train_stega
from .verification import evaluate_stega, payload_similarity


@dataclass
class DegradeSpec:
    kind: str                  # "gaussian_blur" or "jpeg_like"
    sigma: float = 0.0         # blur std in pixels
    quality: int = 100         # jpeg quality 1..100

    def __post_init__(self):
        if self.kind not in ("gaussian_blur", "jpeg_like"):
            raise ValueError(f"unknown degradation {self.kind!r}")
        if self.kind == "gaussian_blur" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "jpeg_like" and not 1 <= self.quality <= 100:
            raise ValueError("quality must be in [1, 100]")

    def label(self):
        if self.kind == "gaussian_blur":
            return f"blur_sigma={self.sigma:g}"
        return f"jpeg_q={self.quality}"


# ---------------------------------------------------------------------------
# gaussian blur
# ---------------------------------------------------------------------------

def _blur_axis(img, taps, axis):
    r = (taps.size - 1) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, taps.size,
                                                   axis=axis)
    return win @ taps


def gaussian_blur(image, sigma):
    """Separable Gaussian blur, kernel truncated at 3 sigma, reflect pad."""
    if sigma == 0.0:
        return np.asarray(image, dtype=np.float64).copy()
    r = int(np.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    taps /= taps.sum()
    out = _blur_axis(np.asarray(image, dtype=np.float64), taps, axis=1)
    return _blur_axis(out, taps, axis=2)


# ---------------------------------------------------------------------------
# jpeg-like quantization
# ---------------------------------------------------------------------------

# ITU T.81 Annex K reference quantization tables.
_LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
_CHROMA_Q = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)


def _scaled_table(base, quality):
    # libjpeg quality scaling
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def _dct_matrix():
    n = 8
    k = np.arange(n)
    mat = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / (2 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0] = np.sqrt(1.0 / n)
    return mat


_DCT = _dct_matrix()


def _rgb_to_ycbcr(img):
    r, g, b = img
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return np.stack([y, cb, cr])


def _ycbcr_to_rgb(img):
    y, cb, cr = img[0], img[1] - 0.5, img[2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def jpeg_like(image, quality):
    """Block-DCT quantization round trip; no entropy coding, no subsampling."""
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    ph = (-h) % 8
    pw = (-w) % 8
    ycc = _rgb_to_ycbcr(img)
    ycc = np.pad(ycc, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = ycc.shape[1:]
    out = np.empty_like(ycc)
    for ch in range(3):
        table = _scaled_table(_LUMA_Q if ch == 0 else _CHROMA_Q, quality)
        blocks = ycc[ch].reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        blocks = blocks * 255.0 - 128.0
        coeff = np.einsum("ij,bcjk,lk->bcil", _DCT, blocks, _DCT)
        coeff = np.round(coeff / table) * table
        rec = np.einsum("ji,bcjk,kl->bcil", _DCT, coeff, _DCT)
        rec = (rec + 128.0) / 255.0
        out[ch] = rec.transpose(0, 2, 1, 3).reshape(hh, ww)
    rgb = _ycbcr_to_rgb(out[:, :h, :w])
    return np.clip(rgb, 0.0, 1.0)


def degrade(image, spec):
    """Apply one degradation; deterministic, shape preserving, output [0,1]."""
    if spec.kind == "gaussian_blur":
        return np.clip(gaussian_blur(image, spec.sigma), 0.0, 1.0)
    return jpeg_like(image, spec.quality)


# ---------------------------------------------------------------------------
# sweeps and experiments
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["spec", "render_ssim", "recovery_similarity",
                 "classifier_accuracy"]

DEFAULT_JPEG_QUALITIES = (90, 70, 50, 30)
DEFAULT_BLUR_SIGMAS = (0.5, 1.0, 1.5, 2.0)


def robustness_sweep(theta, theta0, psi, payload, poses, settings, specs):
    """Degrade every rendered probe image before detection, per spec.

    Returns one row per spec: mean rendered-image SSIM against the frozen
    render, mean payload recovery similarity, and classifier accuracy over
    live (marked) and frozen (unmarked) degraded renders.
    """
    renders = [render(theta, cam, settings)[0] for cam in poses]
    frozen = [render(theta0, cam, settings)[0] for cam in poses]
    rows = []
    for spec in specs:
        sims, rssims = [], []
        correct = 0
        total = 0
        for live, base in zip(renders, frozen):
            live_d = degrade(live, spec)
            base_d = degrade(base, spec)
            g_live, pred, _ = forward_detector(psi, live_d)
            g_base, _, _ = forward_detector(psi, base_d)
            sims.append(payload_similarity(pred, payload))
            rssims.append(ssim(live_d, base))
            if g_live is not None:
                correct += int(g_live.marked_probability > 0.5)
                correct += int(g_base.marked_probability <= 0.5)
                total += 2
        rows.append({
            "spec": spec.label(),
            "render_ssim": float(np.mean(rssims)),
            "recovery_similarity": float(np.mean(sims)),
            "classifier_accuracy": correct / total if total else float("nan"),
        })
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def lsb_through_nerf_experiment(dataset, secret, nbits, config):
    """Embed a secret in all training images, refit the field, try to
    extract the secret from the renderings.

    Returns recovery SSIMs from the stego images themselves (near perfect
    by construction) and from the refit field's renderings (where the
    low-bit signal has been smoothed away), plus the carrier distortion.
    """
    secret_u8 = float_to_u8(secret)
    stego_frames = []
    carrier_psnrs = []
    for cam, img in dataset.frames:
        stego = lsb_embed(float_to_u8(img), secret_u8, nbits)
        carrier_psnrs.append(psnr(img, u8_to_float(stego)))
        stego_frames.append((cam, u8_to_float(stego)))
    stego_dataset = SceneDataset(stego_frames, scene_id=dataset.scene_id + "_lsb")

    secret_f = u8_to_float(secret_u8)
    train_ssims = [
        ssim(u8_to_float(lsb_extract(float_to_u8(img), nbits)), secret_f)
        for _, img in stego_frames]

    theta = stage1_fit(stego_dataset, config)
    render_ssims = []
    for cam, _ in stego_frames:
        image, _ = render(theta, cam, config.render)
        extracted = u8_to_float(lsb_extract(float_to_u8(image), nbits))
        render_ssims.append(ssim(extracted, secret_f))
    return {
        "nbits": nbits,
        "carrier_psnr": float(np.mean(carrier_psnrs)),
        "train_view_recovery_ssim": float(np.mean(train_ssims)),
        "rendered_view_recovery_ssim": float(np.mean(render_ssims)),
    }


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_classifier", "no_classifier_guided",
                     "no_gradient_masking", "no_soft_masking")


def ablation_config(variant, config):
    """Config switches realizing one ablation variant."""
    if variant == "full":
        return config
    if variant == "no_classifier":
        return replace(config, use_classifier=False, classifier_guided=False,
                       lambda0=0.0)
    if variant == "no_classifier_guided":
        return replace(config, classifier_guided=False)
    if variant == "no_gradient_masking":
        return replace(config, mask_mode="off")
    if variant == "no_soft_masking":
        return replace(config, mask_mode="binary")
    raise ValueError(f"unknown ablation variant {variant!r}")


def ablation_run(variant, dataset_train, dataset_eval, theta0, payload,
                 config):
    """Train one variant with the shared seed and report its metrics row."""
    cfg = ablation_config(variant, config)
    thetas, psi, _ = train_stega([(dataset_train, theta0, payload)], None,
                                 cfg, mode="single")
    ev = evaluate_stega(thetas[0], theta0, psi, dataset_eval, payload,
                        cfg.render)
    return {
        "variant": variant,
        "render_psnr": ev.psnr_live,
        "render_ssim": ev.ssim_live,
        "hidden_accuracy": (float("nan") if not cfg.use_classifier
                            else ev.classifier_accuracy),
        "hidden_similarity": ev.mean_similarity,
    }


ABLATION_COLUMNS = ["variant", "render_psnr", "render_ssim",
                    "hidden_accuracy", "hidden_similarity"]


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
