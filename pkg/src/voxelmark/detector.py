"""Payload decoder and marked/unmarked classifier, built on ops kernels.

A three-level encoder-decoder (channels 8/16/32, 3x3 kernels, skip
connections) decodes the hidden payload from a rendered image; a
classifier head (global average pool, then linear) decides whether the
rendering carries a payload at all. The classifier's probabilities are
optionally fed back to the decoder as constant extra input channels
("guided" mode), so the decoder can gate its output on the easier
classification decision. Non-image payloads use a linear head on the
pooled bottleneck instead of the up path.

The classifier shares the encoder trunk with the decoder by default
(separate stems, shared deeper convs); ``shared_trunk=False`` gives it a
fully independent encoder. All gradients, including the path through the
guidance channels back into the classifier and from there into the input
image, are computed explicitly in :func:`detector_vjp`.
"""

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .ops import (ShapeMismatch, activation, activation_vjp, conv2d,
                  conv2d_vjp, resample2d, resample2d_vjp, sigmoid)
from .storage import load_arrays, pack_json, save_arrays, unpack_json

DETECTOR_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised when an operation conflicts with the detector configuration."""


@dataclass
class HiddenPayload:
    kind: str                      # "image2d" or "vector1d"
    image: np.ndarray = None       # (3,H,W) in [0,1] when image2d
    vector: np.ndarray = None      # (D,) in [0,1] when vector1d
    label: int = 0                 # identity index for multi-identity mode

    def __post_init__(self):
        if self.kind == "image2d":
            if self.image is None or self.vector is not None:
                raise ValueError("image2d payload must set image only")
            self.image = np.asarray(self.image, dtype=np.float64)
        elif self.kind == "vector1d":
            if self.vector is None or self.image is not None:
                raise ValueError("vector1d payload must set vector only")
            self.vector = np.asarray(self.vector, dtype=np.float64)
        else:
            raise ValueError(f"unknown payload kind {self.kind!r}")

    @property
    def data(self):
        return self.image if self.kind == "image2d" else self.vector


@dataclass
class ClassifierOutput:
    logits: np.ndarray     # (1,) binary or (C,) multi-class
    probs: np.ndarray      # sigmoid(logit) or softmax(logits)

    @property
    def marked_probability(self):
        """P(marked) in the binary case; 1 - P(outside) otherwise."""
        if self.logits.shape == (1,):
            return float(self.probs[0])
        return float(1.0 - self.probs[-1])


@dataclass
class DetectorConfig:
    channels: tuple = (8, 16, 32)
    n_classes: int = 2             # 2 = binary (single logit), else M+1
    use_classifier: bool = True
    classifier_guided: bool = True
    shared_trunk: bool = True
    payload_kind: str = "image2d"
    payload_dim: int = 0           # D for vector1d payloads
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ConfigError("detector expects exactly three encoder levels")
        if self.payload_kind not in ("image2d", "vector1d"):
            raise ConfigError(f"unknown payload kind {self.payload_kind!r}")
        if self.payload_kind == "vector1d" and self.payload_dim < 1:
            raise ConfigError("vector1d payloads need payload_dim >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.classifier_guided and not self.use_classifier:
            raise ConfigError("guided decoding requires the classifier")

    @property
    def n_logits(self):
        return 1 if self.n_classes == 2 else self.n_classes

    @property
    def guidance_channels(self):
        if self.use_classifier and self.classifier_guided:
            return self.n_logits if self.n_classes > 2 else 1
        return 0

    def param_shapes(self):
        """Ordered parameter name -> shape map; fixes the flat layout."""
        c1, c2, c3 = self.channels
        g = self.guidance_channels
        shapes = {
            "stem_dec_w": (c1, 3 + g, 3, 3), "stem_dec_b": (c1,),
            "enc2_w": (c2, c1, 3, 3), "enc2_b": (c2,),
            "enc3_w": (c3, c2, 3, 3), "enc3_b": (c3,),
        }
        if self.payload_kind == "image2d":
            shapes.update({
                "dec2_w": (c2, c3 + c2, 3, 3), "dec2_b": (c2,),
                "dec1_w": (c1, c2 + c1, 3, 3), "dec1_b": (c1,),
                "out_w": (3, c1, 1, 1), "out_b": (3,),
            })
        else:
            shapes.update({
                "vec_w": (self.payload_dim, c3), "vec_b": (self.payload_dim,),
            })
        if self.use_classifier:
            shapes.update({"stem_cls_w": (c1, 3, 3, 3), "stem_cls_b": (c1,)})
            if not self.shared_trunk:
                shapes.update({
                    "cls_enc2_w": (c2, c1, 3, 3), "cls_enc2_b": (c2,),
                    "cls_enc3_w": (c3, c2, 3, 3), "cls_enc3_b": (c3,),
                })
            shapes.update({
                "cls_w": (self.n_logits, c3), "cls_b": (self.n_logits,),
            })
        return shapes

    @property
    def num_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_json(self):
        return {"format_version": DETECTOR_FORMAT_VERSION,
                "channels": list(self.channels), "n_classes": self.n_classes,
                "use_classifier": self.use_classifier,
                "classifier_guided": self.classifier_guided,
                "shared_trunk": self.shared_trunk,
                "payload_kind": self.payload_kind,
                "payload_dim": self.payload_dim, "seed": self.seed}

    @classmethod
    def from_json(cls, obj):
        if obj.get("format_version") != DETECTOR_FORMAT_VERSION:
            raise ValueError(
                f"unsupported detector version {obj.get('format_version')}")
        return cls(channels=tuple(obj["channels"]), n_classes=obj["n_classes"],
                   use_classifier=obj["use_classifier"],
                   classifier_guided=obj["classifier_guided"],
                   shared_trunk=obj["shared_trunk"],
                   payload_kind=obj["payload_kind"],
                   payload_dim=obj["payload_dim"], seed=obj["seed"])


# Final heads start at zero so an untrained detector is exactly neutral:
# classifier probability 0.5 and decoded payload 0.5 everywhere.
_ZERO_INIT = ("out_w", "out_b", "vec_w", "vec_b", "cls_w", "cls_b")


@dataclass
class DetectorParams:
    config: DetectorConfig
    arrays: dict = dc_field(repr=False)

    def to_vector(self):
        shapes = self.config.param_shapes()
        return np.concatenate([self.arrays[k].ravel() for k in shapes])

    @classmethod
    def from_vector(cls, config, vec):
        vec = np.asarray(vec, dtype=np.float64)
        shapes = config.param_shapes()
        n = config.num_params
        if vec.shape != (n,):
            raise ShapeMismatch(f"expected vector of length {n}, got {vec.shape}")
        arrays = {}
        pos = 0
        for k, s in shapes.items():
            size = int(np.prod(s))
            arrays[k] = vec[pos:pos + size].reshape(s).copy()
            pos += size
        return cls(config, arrays)

    def copy(self):
        return DetectorParams(self.config,
                              {k: v.copy() for k, v in self.arrays.items()})


def init_detector(config, head_scale=0.0):
    """Kaiming-uniform conv kernels, zero biases, neutral final heads.

    With the default ``head_scale=0`` the final heads are exactly zero, so
    the untrained detector outputs 0.5 everywhere and classifies at
    probability exactly 0.5. Joint training needs a nonzero ``head_scale``:
    zero heads make the field gradient vanish identically at the start of
    stage 2 (the live and frozen renders coincide and nothing breaks the
    symmetry), so training configs perturb the heads uniformly in
    [-head_scale, head_scale].
    """
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name in _ZERO_INIT:
            arrays[name] = rng.uniform(-head_scale, head_scale, size=shape) \
                if head_scale > 0.0 else np.zeros(shape)
        elif name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return DetectorParams(config, arrays)


def save_detector(path, params):
    save_arrays(path, meta=pack_json(params.config.to_json()),
                params=params.to_vector())


def load_detector(path):
    data = load_arrays(path)
    config = DetectorConfig.from_json(unpack_json(data["meta"]))
    return DetectorParams.from_vector(config, data["params"])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _check_image(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeMismatch(f"expected (3,H,W) image, got {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ShapeMismatch(
            f"image sides must be divisible by 4, got {x.shape[1:]}")
    return x


def _encode(arrays, x, stem, trunk2, trunk3):
    """Shared three-level encoder; returns activations and caches."""
    caches = {}
    h1, caches["c1"] = conv2d(x, arrays[stem + "_w"], arrays[stem + "_b"], pad=1)
    e1, caches["a1"] = activation(h1, "relu")
    q1, caches["d1"] = resample2d(e1, "down2")
    h2, caches["c2"] = conv2d(q1, arrays[trunk2 + "_w"], arrays[trunk2 + "_b"], pad=1)
    e2, caches["a2"] = activation(h2, "relu")
    q2, caches["d2"] = resample2d(e2, "down2")
    h3, caches["c3"] = conv2d(q2, arrays[trunk3 + "_w"], arrays[trunk3 + "_b"], pad=1)
    e3, caches["a3"] = activation(h3, "relu")
    return e1, e2, e3, caches


def _encode_vjp(arrays, caches, grad_e1, grad_e2, grad_e3, stem, trunk2, trunk3,
                grads):
    """Backward through _encode; accumulates into ``grads``, returns grad_x."""
    g = activation_vjp(caches["a3"], grad_e3)
    g, gw, gb = conv2d_vjp(caches["c3"], g)
    grads[trunk3 + "_w"] += gw
    grads[trunk3 + "_b"] += gb
    g = resample2d_vjp(caches["d2"], g)
    if grad_e2 is not None:
        g = g + grad_e2
    g = activation_vjp(caches["a2"], g)
    g, gw, gb = conv2d_vjp(caches["c2"], g)
    grads[trunk2 + "_w"] += gw
    grads[trunk2 + "_b"] += gb
    g = resample2d_vjp(caches["d1"], g)
    if grad_e1 is not None:
        g = g + grad_e1
    g = activation_vjp(caches["a1"], g)
    g, gw, gb = conv2d_vjp(caches["c1"], g)
    grads[stem + "_w"] += gw
    grads[stem + "_b"] += gb
    return g


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class ClassifyCache:
    enc_caches: dict
    features: np.ndarray       # pooled bottleneck (C3,)
    spatial: tuple             # bottleneck (H/4, W/4)
    output: ClassifierOutput


def classify(params, image):
    """Marked/unmarked (or identity-class) prediction for one image."""
    cfg = params.config
    if not cfg.use_classifier:
        raise ConfigError("this detector was built without a classifier")
    x = _check_image(image)
    trunk2, trunk3 = (("enc2", "enc3") if cfg.shared_trunk
                      else ("cls_enc2", "cls_enc3"))
    _, _, e3, caches = _encode(params.arrays, x, "stem_cls", trunk2, trunk3)
    f = e3.mean(axis=(1, 2))
    logits = params.arrays["cls_w"] @ f + params.arrays["cls_b"]
    probs = sigmoid(logits) if cfg.n_logits == 1 else _softmax(logits)
    out = ClassifierOutput(logits=logits, probs=probs)
    return out, ClassifyCache(caches, f, e3.shape[1:], out)


@dataclass
class DecodeCache:
    enc_caches: dict
    dec_caches: dict
    skip_shapes: tuple
    input_channels: int
    guided: bool
    pred: np.ndarray


def decode(params, image, guidance):
    """Recover the payload prediction from one image.

    ``guidance`` is the ClassifierOutput for the *same* image when the
    config is classifier-guided, else None. Output is in [0,1] via a final
    sigmoid, shaped like the configured payload (image or vector).
    """
    cfg = params.config
    x = _check_image(image)
    if cfg.guidance_channels:
        if guidance is None:
            raise ConfigError("guided detector needs the classifier output")
        gch = np.broadcast_to(
            guidance.probs[:cfg.guidance_channels, None, None],
            (cfg.guidance_channels, x.shape[1], x.shape[2]))
        xin = np.concatenate([x, gch], axis=0)
    else:
        xin = x
    e1, e2, e3, enc_caches = _encode(params.arrays, xin, "stem_dec",
                                     "enc2", "enc3")
    dec_caches = {}
    arrays = params.arrays
    if cfg.payload_kind == "image2d":
        u2, dec_caches["u2"] = resample2d(e3, "up2")
        cat2 = np.concatenate([u2, e2], axis=0)
        h4, dec_caches["c4"] = conv2d(cat2, arrays["dec2_w"], arrays["dec2_b"],
                                      pad=1)
        d2, dec_caches["a4"] = activation(h4, "relu")
        u1, dec_caches["u1"] = resample2d(d2, "up2")
        cat1 = np.concatenate([u1, e1], axis=0)
        h5, dec_caches["c5"] = conv2d(cat1, arrays["dec1_w"], arrays["dec1_b"],
                                      pad=1)
        d1, dec_caches["a5"] = activation(h5, "relu")
        h6, dec_caches["c6"] = conv2d(d1, arrays["out_w"], arrays["out_b"])
        pred, dec_caches["a6"] = activation(h6, "sigmoid")
    else:
        f = e3.mean(axis=(1, 2))
        dec_caches["vec_f"] = f
        dec_caches["vec_spatial"] = e3.shape[1:]
        z = arrays["vec_w"] @ f + arrays["vec_b"]
        pred, dec_caches["a6"] = activation(z, "sigmoid")
    cache = DecodeCache(enc_caches, dec_caches,
                        (e1.shape[0], e2.shape[0], e3.shape[0]),
                        xin.shape[0], cfg.guidance_channels > 0, pred)
    return pred, cache


@dataclass
class DetectorTape:
    """Caches of one classify+decode pair on a single image."""
    classify_cache: ClassifyCache = None
    decode_cache: DecodeCache = None


def detector_vjp(params, tape, grad_payload=None, grad_logits=None):
    """Gradients of the decode/classify pair w.r.t. parameters and image.

    ``grad_payload`` is the upstream gradient on the decode output;
    ``grad_logits`` the upstream gradient on the raw classifier logits
    (loss Jacobians through sigmoid/softmax already applied by the
    caller). The guidance path from the decoder back through the
    classifier probabilities is handled here. Returns
    (flat parameter gradient, gradient w.r.t. the input image).
    """
    cfg = params.config
    arrays = params.arrays
    grads = {k: np.zeros_like(v) for k, v in arrays.items()}
    grad_image = None
    grad_probs_guid = None

    dc = tape.decode_cache
    if dc is not None and grad_payload is not None:
        g = activation_vjp(dc.dec_caches["a6"], grad_payload)
        if cfg.payload_kind == "image2d":
            g, gw, gb = conv2d_vjp(dc.dec_caches["c6"], g)
            grads["out_w"] += gw
            grads["out_b"] += gb
            g = activation_vjp(dc.dec_caches["a5"], g)
            g, gw, gb = conv2d_vjp(dc.dec_caches["c5"], g)
            grads["dec1_w"] += gw
            grads["dec1_b"] += gb
            c2n, c3n = dc.skip_shapes[1], dc.skip_shapes[2]
            grad_u1, grad_e1 = g[:g.shape[0] - dc.skip_shapes[0]], \
                g[g.shape[0] - dc.skip_shapes[0]:]
            g = resample2d_vjp(dc.dec_caches["u1"], grad_u1)
            g = activation_vjp(dc.dec_caches["a4"], g)
            g, gw, gb = conv2d_vjp(dc.dec_caches["c4"], g)
            grads["dec2_w"] += gw
            grads["dec2_b"] += gb
            grad_u2, grad_e2 = g[:c3n], g[c3n:c3n + c2n]
            grad_e3 = resample2d_vjp(dc.dec_caches["u2"], grad_u2)
        else:
            grads["vec_w"] += np.outer(g, dc.dec_caches["vec_f"])
            grads["vec_b"] += g
            grad_f = arrays["vec_w"].T @ g
            h3, w3 = dc.dec_caches["vec_spatial"]
            grad_e3 = np.broadcast_to(grad_f[:, None, None] / (h3 * w3),
                                      (grad_f.size, h3, w3)).copy()
            grad_e1 = grad_e2 = None
        grad_xin = _encode_vjp(arrays, dc.enc_caches, grad_e1, grad_e2,
                               grad_e3, "stem_dec", "enc2", "enc3", grads)
        grad_image = grad_xin[:3]
        if dc.guided:
            grad_probs_guid = grad_xin[3:].sum(axis=(1, 2))

    cc = tape.classify_cache
    if cc is not None and (grad_logits is not None
                           or grad_probs_guid is not None):
        out = cc.output
        gl = np.zeros_like(out.logits)
        if grad_logits is not None:
            gl += np.asarray(grad_logits, dtype=np.float64)
        if grad_probs_guid is not None:
            if cfg.n_logits == 1:
                gl += grad_probs_guid * out.probs * (1.0 - out.probs)
            else:
                p = out.probs
                gl += p * (grad_probs_guid - p @ grad_probs_guid)
        grads["cls_w"] += np.outer(gl, cc.features)
        grads["cls_b"] += gl
        grad_f = arrays["cls_w"].T @ gl
        h3, w3 = cc.spatial
        grad_e3 = np.broadcast_to(grad_f[:, None, None] / (h3 * w3),
                                  (grad_f.size, h3, w3)).copy()
        trunk2, trunk3 = (("enc2", "enc3") if cfg.shared_trunk
                          else ("cls_enc2", "cls_enc3"))
        gx = _encode_vjp(arrays, cc.enc_caches, None, None, grad_e3,
                         "stem_cls", trunk2, trunk3, grads)
        grad_image = gx if grad_image is None else grad_image + gx
    elif grad_logits is not None and cc is None:
        raise ConfigError("grad_logits given but no classify cache on tape")

    shapes = cfg.param_shapes()
    flat = np.concatenate([grads[k].ravel() for k in shapes])
    if grad_image is None:
        grad_image = np.zeros((3, 1, 1))
    return flat, grad_image


def forward_detector(params, image):
    """Convenience forward: classifier output (or None), payload prediction
    and the tape for :func:`detector_vjp`."""
    cfg = params.config
    tape = DetectorTape()
    guidance = None
    if cfg.use_classifier:
        guidance, tape.classify_cache = classify(params, image)
    dec_guidance = guidance if cfg.guidance_channels else None
    pred, tape.decode_cache = decode(params, image, dec_guidance)
    return guidance, pred, tape


def make_guided_variant(config, **overrides):
    return replace(config, **overrides)
