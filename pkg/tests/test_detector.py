"""Detector tests: neutral initialization anchors, guided decoding, VJPs
against finite differences for every config variant, checkpoints."""

import numpy as np
import pytest

from voxelmark.detector import (ConfigError, DetectorConfig, DetectorParams,
                                HiddenPayload, classify, decode, detector_vjp,
                                forward_detector, init_detector,
                                load_detector, save_detector)
from voxelmark.ops import ShapeMismatch, finite_diff_check

SMALL = dict(channels=(2, 3, 4))


def generic_params(cfg, seed, scale=0.3):
    """Detector at a generic point: all parameters nonzero, so no ReLU
    pre-activation sits exactly on its kink during finite differencing."""
    rng = np.random.default_rng(seed)
    psi = init_detector(cfg)
    for k in psi.arrays:
        psi.arrays[k] = psi.arrays[k] + rng.normal(size=psi.arrays[k].shape) \
            * scale
    return psi, rng


class TestHiddenPayload:
    def test_image_kind(self):
        p = HiddenPayload("image2d", image=np.zeros((3, 8, 8)))
        assert p.data.shape == (3, 8, 8)

    def test_vector_kind(self):
        p = HiddenPayload("vector1d", vector=np.zeros(16))
        assert p.data.shape == (16,)

    def test_exactly_one_populated(self):
        with pytest.raises(ValueError):
            HiddenPayload("image2d", image=np.zeros((3, 4, 4)),
                          vector=np.zeros(4))
        with pytest.raises(ValueError):
            HiddenPayload("vector1d")


class TestNeutralInitialization:
    def test_untrained_classifier_is_half(self):
        psi = init_detector(DetectorConfig(**SMALL))
        out, _ = classify(psi, np.random.default_rng(0).uniform(size=(3, 8, 8)))
        assert out.probs[0] == 0.5
        assert out.marked_probability == 0.5

    def test_untrained_decoder_is_half(self):
        psi = init_detector(DetectorConfig(**SMALL))
        img = np.random.default_rng(1).uniform(size=(3, 8, 8))
        guid, _ = classify(psi, img)
        pred, _ = decode(psi, img, guid)
        np.testing.assert_array_equal(pred, np.full((3, 8, 8), 0.5))

    def test_deterministic_forward(self):
        psi, rng = generic_params(DetectorConfig(**SMALL), 2)
        img = rng.uniform(size=(3, 8, 8))
        o1, p1, _ = forward_detector(psi, img)
        o2, p2, _ = forward_detector(psi, img.copy())
        np.testing.assert_array_equal(o1.logits, o2.logits)
        np.testing.assert_array_equal(p1, p2)

    def test_head_scale_breaks_neutrality(self):
        psi = init_detector(DetectorConfig(**SMALL), head_scale=0.05)
        out, _ = classify(psi, np.random.default_rng(0).uniform(size=(3, 8, 8)))
        assert out.probs[0] != 0.5


class TestDecode:
    def test_output_shape_matches_payload(self):
        psi, rng = generic_params(DetectorConfig(**SMALL), 3)
        img = rng.uniform(size=(3, 12, 16))
        guid, _ = classify(psi, img)
        pred, _ = decode(psi, img, guid)
        assert pred.shape == (3, 12, 16)

        cfg1d = DetectorConfig(payload_kind="vector1d", payload_dim=20,
                               **SMALL)
        psi1d, _ = generic_params(cfg1d, 4)
        guid, _ = classify(psi1d, img)
        vec, _ = decode(psi1d, img, guid)
        assert vec.shape == (20,)

    def test_guidance_is_live(self):
        # perturbing the guidance probabilities must change the output
        psi, rng = generic_params(DetectorConfig(**SMALL), 5)
        img = rng.uniform(size=(3, 8, 8))
        guid, _ = classify(psi, img)
        pred1, _ = decode(psi, img, guid)
        bumped = type(guid)(logits=guid.logits + 1.0,
                            probs=np.clip(guid.probs + 0.3, 0.0, 1.0))
        pred2, _ = decode(psi, img, bumped)
        assert np.max(np.abs(pred1 - pred2)) > 0.0

    def test_outputs_in_unit_interval(self):
        psi, rng = generic_params(DetectorConfig(**SMALL), 6, scale=1.5)
        img = rng.uniform(size=(3, 8, 8))
        guid, _ = classify(psi, img)
        pred, _ = decode(psi, img, guid)
        assert pred.min() >= 0.0 and pred.max() <= 1.0

    def test_guided_requires_guidance(self):
        psi, rng = generic_params(DetectorConfig(**SMALL), 7)
        with pytest.raises(ConfigError):
            decode(psi, rng.uniform(size=(3, 8, 8)), None)

    def test_no_classifier_config(self):
        cfg = DetectorConfig(use_classifier=False, classifier_guided=False,
                             **SMALL)
        psi, rng = generic_params(cfg, 8)
        img = rng.uniform(size=(3, 8, 8))
        with pytest.raises(ConfigError):
            classify(psi, img)
        pred, _ = decode(psi, img, None)
        assert pred.shape == (3, 8, 8)

    def test_bad_image_shape(self):
        psi, _ = generic_params(DetectorConfig(**SMALL), 9)
        with pytest.raises(ShapeMismatch):
            classify(psi, np.zeros((3, 7, 8)))


def _fd_case(cfg, seed):
    psi, rng = generic_params(cfg, seed)
    img = rng.uniform(0.1, 0.9, size=(3, 8, 8))
    if cfg.payload_kind == "image2d":
        probe_pred = rng.normal(size=(3, 8, 8))
    else:
        probe_pred = rng.normal(size=(cfg.payload_dim,))
    probe_logits = rng.normal(size=(cfg.n_logits,)) \
        if cfg.use_classifier else None
    return psi, img, probe_pred, probe_logits


def _loss(psi, img, probe_pred, probe_logits):
    guid, pred, tape = forward_detector(psi, img)
    val = float(np.sum(pred * probe_pred))
    if probe_logits is not None:
        val += float(np.sum(guid.logits * probe_logits))
    return val, tape, guid


class TestDetectorVjp:
    VARIANTS = {
        "guided_binary": DetectorConfig(**SMALL),
        "multiclass": DetectorConfig(n_classes=4, **SMALL),
        "vector1d": DetectorConfig(payload_kind="vector1d", payload_dim=12,
                                   **SMALL),
        "unshared_trunk": DetectorConfig(shared_trunk=False, **SMALL),
        "unguided": DetectorConfig(classifier_guided=False, **SMALL),
        "no_classifier": DetectorConfig(use_classifier=False,
                                        classifier_guided=False, **SMALL),
    }

    def test_zero_upstream_gives_zero_grads(self):
        cfg = DetectorConfig(**SMALL)
        psi, rng = generic_params(cfg, 0)
        img = rng.uniform(size=(3, 8, 8))
        _, _, tape = forward_detector(psi, img)
        gpsi, gimg = detector_vjp(psi, tape, np.zeros((3, 8, 8)),
                                  np.zeros(1))
        assert not gpsi.any() and not gimg.any()

    def test_grad_image_nonzero_generic(self):
        cfg = DetectorConfig(**SMALL)
        psi, img, probe_pred, probe_logits = _fd_case(cfg, 1)
        _, tape, _ = _loss(psi, img, probe_pred, probe_logits)
        _, gimg = detector_vjp(psi, tape, probe_pred, probe_logits)
        assert np.abs(gimg).max() > 0.0

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences_wrt_params(self, name, seed):
        cfg = self.VARIANTS[name]
        psi, img, probe_pred, probe_logits = _fd_case(cfg, seed)

        def f(vec):
            p = DetectorParams.from_vector(cfg, vec)
            val, tape, _ = _loss(p, img, probe_pred, probe_logits)
            gpsi, _ = detector_vjp(p, tape, probe_pred, probe_logits)
            return val, gpsi

        assert finite_diff_check(f, psi.to_vector(), 1e-5) <= 1e-5

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences_wrt_image(self, name, seed):
        cfg = self.VARIANTS[name]
        psi, img, probe_pred, probe_logits = _fd_case(cfg, seed)

        def f(x):
            val, tape, _ = _loss(psi, x, probe_pred, probe_logits)
            _, gimg = detector_vjp(psi, tape, probe_pred, probe_logits)
            return val, gimg

        assert finite_diff_check(f, img, 1e-5) <= 1e-5

    def test_guidance_path_matters(self):
        # dropping the guidance contribution must change grad_image
        cfg = DetectorConfig(**SMALL)
        psi, img, probe_pred, _ = _fd_case(cfg, 3)
        guid, pred, tape = forward_detector(psi, img)
        _, g_full = detector_vjp(psi, tape, probe_pred, None)
        tape_decode_only = type(tape)(classify_cache=None,
                                      decode_cache=tape.decode_cache)
        _, g_no_guid = detector_vjp(psi, tape_decode_only, probe_pred, None)
        assert np.max(np.abs(g_full - g_no_guid)) > 0.0


class TestDetectorCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        cfg = DetectorConfig(n_classes=4, payload_kind="vector1d",
                             payload_dim=6, **SMALL)
        psi, _ = generic_params(cfg, 10)
        save_detector(tmp_path / "d.vxd", psi)
        loaded = load_detector(tmp_path / "d.vxd")
        assert loaded.config == cfg
        np.testing.assert_array_equal(loaded.to_vector(), psi.to_vector())

    def test_vector_round_trip(self):
        cfg = DetectorConfig(**SMALL)
        psi, _ = generic_params(cfg, 11)
        again = DetectorParams.from_vector(cfg, psi.to_vector())
        for k in psi.arrays:
            np.testing.assert_array_equal(again.arrays[k], psi.arrays[k])

    def test_param_count_deterministic(self):
        cfg = DetectorConfig(**SMALL)
        assert init_detector(cfg).to_vector().size == cfg.num_params


class TestConfigValidation:
    def test_guided_needs_classifier(self):
        with pytest.raises(ConfigError):
            DetectorConfig(use_classifier=False, classifier_guided=True)

    def test_vector_needs_dim(self):
        with pytest.raises(ConfigError):
            DetectorConfig(payload_kind="vector1d")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            DetectorConfig(payload_kind="audio")
