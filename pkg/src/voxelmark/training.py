"""Two-stage optimization: photometric fitting, then joint payload embedding.

Stage 1 fits the voxel field to the training images with plain (optionally
momentum-accelerated) full-image gradient descent and freezes the result.
Stage 2 initializes the live field from the frozen one and jointly trains
field and detector against four loss terms:

  * payload recovery on live renders (mean absolute error to the payload),
  * empty-decode on frozen renders (the false-positive guard),
  * classifier cross-entropy separating live from frozen renders,
  * photometric identity (mean absolute error between live and frozen
    renders).

The field update is Hadamard-multiplied by an importance-derived mask so
the hidden signal is steered into parameters whose magnitude in the frozen
field is small: importance w = (|theta0| + eps)^alpha, mask m = w^-1
normalized to sum 1. The detector updates unmasked. Multi-scene modes
share one detector across per-scene fields; multi-identity mode embeds one
payload per camera cluster plus an explicit "outside" class.
"""

import csv
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .detector import (ClassifierOutput, DetectorConfig, DetectorParams,
                       HiddenPayload, detector_vjp, forward_detector,
                       init_detector)
from .field import (RenderSettings, VoxelRadianceField, flatten_params,
                    render, render_vjp)
from .ops import sigmoid, softplus


class StegaTrainingError(RuntimeError):
    """Raised on divergence or inconsistent training configuration."""


@dataclass
class TrainConfig:
    # loss weights for the stage-2 combination
    lambda0: float = 0.01     # classifier cross-entropy
    lambda1: float = 0.5      # payload recovery on live renders
    lambda2: float = 0.5      # empty decode on frozen renders
    lambda3: float = 1.0      # photometric identity
    alpha: float = 3.0        # importance exponent for the mask
    eta0: float = 3000.0      # stage-2 field learning rate
    eta1: float = 0.02        # stage-2 detector learning rate
    epochs_stage1: int = 60
    epochs_stage2: int = 55
    stage1_lr: float = 1.0e4
    stage1_momentum: float = 0.9
    mask_mode: str = "soft"   # soft | binary | off
    binary_keep_fraction: float = 0.5
    epsilon_w: float = 1e-8
    mask_rescale: bool = True
    seed: int = 0
    grid_resolution: tuple = (64, 64, 64)
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    init_sigma_raw: float = -2.0
    init_rgb_raw: float = 0.0
    use_classifier: bool = True
    classifier_guided: bool = True
    shared_trunk: bool = True
    detector_channels: tuple = (8, 16, 32)
    detector_head_scale: float = 0.05
    psi_optimizer: str = "adam"    # "adam" or "sgd" for the detector
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cluster_m: int = 3        # multi-identity anchors
    cluster_k: int = 20       # neighbours per anchor
    render: RenderSettings = dc_field(default_factory=RenderSettings)

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.eta0 <= 0 or self.eta1 <= 0 or self.stage1_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.mask_mode not in ("soft", "binary", "off"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.psi_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown psi_optimizer {self.psi_optimizer!r}")
        if isinstance(self.render, dict):
            self.render = RenderSettings(**self.render)
        self.grid_resolution = tuple(int(n) for n in self.grid_resolution)
        self.detector_channels = tuple(int(c) for c in self.detector_channels)

    def to_json(self):
        d = asdict(self)
        d["render"] = {"n_samples": self.render.n_samples,
                       "t_near": self.render.t_near,
                       "t_far": self.render.t_far,
                       "background": list(self.render.background)}
        d["bbox"] = [list(self.bbox[0]), list(self.bbox[1])]
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        if "bbox" in obj:
            obj["bbox"] = (tuple(obj["bbox"][0]), tuple(obj["bbox"][1]))
        return cls(**obj)


# ---------------------------------------------------------------------------
# importance mask
# ---------------------------------------------------------------------------

@dataclass
class MaskVector:
    m: np.ndarray
    mode: str


def compute_mask(theta0_flat, alpha, epsilon_w=1e-8, mode="soft",
                 keep_fraction=0.5):
    """Per-parameter gradient mask from the frozen field's magnitudes.

    soft: m_i proportional to (|theta0_i| + epsilon_w)^-alpha, normalized
    to sum 1. binary: the ``keep_fraction`` of coordinates with smallest
    importance get 1, the rest 0. off: all ones.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    theta0_flat = np.asarray(theta0_flat, dtype=np.float64)
    n = theta0_flat.size
    if mode == "off":
        return MaskVector(np.ones(n), "off")
    w = (np.abs(theta0_flat) + epsilon_w) ** alpha
    inv = 1.0 / w
    if mode == "soft":
        return MaskVector(inv / inv.sum(), "soft")
    if mode == "binary":
        k = int(np.floor(keep_fraction * n))
        order = np.argsort(w, kind="stable")
        m = np.zeros(n)
        m[order[:k]] = 1.0
        return MaskVector(m, "binary")
    raise ValueError(f"unknown mask mode {mode!r}")


def step_mask(mask, config, n_params):
    """Effective per-coordinate step multiplier for a mask vector.

    A soft mask sums to 1, which scales every step by ~1/N; with
    ``mask_rescale`` (the default) it is multiplied by N so that a uniform
    field yields multiplier 1 per coordinate and eta0 keeps its usual
    meaning.
    """
    if mask.mode == "soft" and config.mask_rescale:
        return mask.m * n_params
    return mask.m


# ---------------------------------------------------------------------------
# stage 1: photometric fit
# ---------------------------------------------------------------------------

def stage1_fit(dataset, config, log=None):
    """Fit a fresh field to the dataset; returns the frozen stage-1 field.

    Full-image gradient descent on the mean squared photometric error, one
    step per training frame, frames visited in a seeded random order each
    epoch. Raises StegaTrainingError if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise StegaTrainingError("empty dataset")
    theta = VoxelRadianceField.constant(
        config.grid_resolution, config.bbox,
        sigma_raw=config.init_sigma_raw, rgb_raw=config.init_rgb_raw)
    nvox = int(np.prod(config.grid_resolution))
    velocity = np.zeros(theta.num_params)
    rng = np.random.default_rng(config.seed)
    for epoch in range(config.epochs_stage1):
        for idx in rng.permutation(len(dataset)):
            cam, target = dataset.frames[idx]
            image, cache = render(theta, cam, config.render)
            diff = image - target
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise StegaTrainingError(
                    f"stage-1 loss diverged at epoch {epoch}, frame {idx}")
            grad = render_vjp(cache, 2.0 * diff / diff.size)
            velocity = config.stage1_momentum * velocity + grad
            theta.sigma_raw -= config.stage1_lr * \
                velocity[:nvox].reshape(theta.sigma_raw.shape)
            theta.rgb_raw -= config.stage1_lr * \
                velocity[nvox:].reshape(theta.rgb_raw.shape)
            if log is not None:
                log.append({"epoch": epoch, "pose": int(idx), "mse": loss})
    return theta


# ---------------------------------------------------------------------------
# stage 2: joint steganographic training
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_dec_plus: float
    l_dec_minus: float
    l_dec_c: float
    l_rgb: float
    total: float


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, vec):
        return cls(np.zeros_like(vec), np.zeros_like(vec))

    def step(self, grad, lr, beta1, beta2, eps):
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        mhat = self.m / (1.0 - beta1 ** self.t)
        vhat = self.v / (1.0 - beta2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class StegaState:
    theta: VoxelRadianceField
    theta0: VoxelRadianceField
    theta0_renders: list               # one (3,H,W) image per train pose
    cameras: list
    psi: DetectorParams
    mask: MaskVector
    step_scale: np.ndarray             # mask after rescale policy
    payloads: list                     # HiddenPayload per identity
    pose_labels: np.ndarray = None     # per-pose cluster id; None = binary
    rng: np.random.Generator = None
    psi_opt: AdamState = None          # set when psi_optimizer == "adam"
    loss_history: list = dc_field(default_factory=list)


def _ce_binary(logit_pos, logit_neg):
    """-log sigmoid(z+) - log(1 - sigmoid(z-)), stable via softplus."""
    return float(softplus(-logit_pos) + softplus(logit_neg))


def _ce_multi(probs, label):
    return float(-np.log(max(probs[label], 1e-300)))


def _ce_grad(output: ClassifierOutput, label, marked):
    """d(cross-entropy)/d(logits) for one sample."""
    if output.logits.shape == (1,):
        p = output.probs[0]
        return np.array([p - 1.0]) if marked else np.array([p])
    onehot = np.zeros_like(output.probs)
    onehot[label] = 1.0
    return output.probs - onehot


def stega_losses(state, pose_index, payload, config):
    """All stage-2 loss terms for one training pose, plus gradient tapes.

    Returns (LossBreakdown, tape) where the tape carries everything
    :func:`stega_step_from_tape` needs to update field and detector without
    re-rendering.
    """
    cam = state.cameras[pose_index]
    x0 = state.theta0_renders[pose_index]
    x, rcache = render(state.theta, cam, config.render)

    label = 0 if state.pose_labels is None else int(state.pose_labels[pose_index])
    n_ident = len(state.payloads)
    outside = state.pose_labels is not None and label >= n_ident
    out_pos, pred_pos, tape_pos = forward_detector(state.psi, x)
    out_neg, pred_neg, tape_neg = forward_detector(state.psi, x0)

    if outside:
        target_pos = np.zeros_like(pred_pos)
        l_plus = 0.0
        l_extra_minus = float(np.mean(np.abs(pred_pos)))
    else:
        target_pos = payload.data
        l_plus = float(np.mean(np.abs(pred_pos - target_pos)))
        l_extra_minus = 0.0
    l_minus = float(np.mean(np.abs(pred_neg))) + l_extra_minus

    if config.use_classifier:
        if out_pos.logits.shape == (1,):
            l_c = _ce_binary(out_pos.logits[0], out_neg.logits[0])
        else:
            outside_label = out_pos.probs.size - 1
            l_c = _ce_multi(out_pos.probs, label if not outside else outside_label) \
                + _ce_multi(out_neg.probs, outside_label)
    else:
        l_c = 0.0

    l_rgb = float(np.mean(np.abs(x - x0)))
    total = (config.lambda0 * l_c + config.lambda1 * l_plus
             + config.lambda2 * l_minus + config.lambda3 * l_rgb)
    breakdown = LossBreakdown(l_plus, l_minus, l_c, l_rgb, total)
    tape = {"x": x, "x0": x0, "rcache": rcache,
            "out_pos": out_pos, "pred_pos": pred_pos, "tape_pos": tape_pos,
            "out_neg": out_neg, "pred_neg": pred_neg, "tape_neg": tape_neg,
            "target_pos": target_pos, "outside": outside, "label": label}
    return breakdown, tape


def stega_grads(state, pose_index, payload, config):
    """Loss breakdown plus exact gradients w.r.t. flat theta and psi."""
    breakdown, tape = stega_losses(state, pose_index, payload, config)
    x, x0 = tape["x"], tape["x0"]
    outside = tape["outside"]

    lam_pos = config.lambda2 if outside else config.lambda1
    g_pred_pos = lam_pos * np.sign(tape["pred_pos"] - tape["target_pos"]) \
        / tape["pred_pos"].size
    g_pred_neg = config.lambda2 * np.sign(tape["pred_neg"]) \
        / tape["pred_neg"].size

    g_logits_pos = g_logits_neg = None
    if config.use_classifier:
        out_pos, out_neg = tape["out_pos"], tape["out_neg"]
        if out_pos.logits.shape == (1,):
            g_logits_pos = config.lambda0 * _ce_grad(out_pos, None, marked=True)
            g_logits_neg = config.lambda0 * _ce_grad(out_neg, None, marked=False)
        else:
            outside_label = out_pos.probs.size - 1
            pos_label = outside_label if outside else tape["label"]
            g_logits_pos = config.lambda0 * _ce_grad(out_pos, pos_label, True)
            g_logits_neg = config.lambda0 * _ce_grad(out_neg, outside_label, False)

    g_psi_pos, g_x_pos = detector_vjp(state.psi, tape["tape_pos"],
                                      g_pred_pos, g_logits_pos)
    g_psi_neg, _ = detector_vjp(state.psi, tape["tape_neg"],
                                g_pred_neg, g_logits_neg)
    g_x = g_x_pos + config.lambda3 * np.sign(x - x0) / x.size
    g_theta = render_vjp(tape["rcache"], g_x)
    return breakdown, g_theta, g_psi_pos + g_psi_neg


def _apply_psi_delta(psi, delta):
    shapes = psi.config.param_shapes()
    pos = 0
    for k, s in shapes.items():
        size = int(np.prod(s))
        psi.arrays[k] -= delta[pos:pos + size].reshape(s)
        pos += size


def stage2_step(state, pose_index, payload, config):
    """One joint step: masked field update, unmasked detector update.

    The field follows the literal masked rule, theta -= eta0 * (grad (.) m);
    the detector takes eta1-scaled steps, plain or Adam-normalized per
    ``config.psi_optimizer``. Mutates ``state.theta`` and ``state.psi`` in
    place; the frozen field, its cached renders and the mask are never
    touched.
    """
    breakdown, g_theta, g_psi = stega_grads(state, pose_index, payload, config)
    if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_psi))):
        raise StegaTrainingError(f"non-finite gradient at pose {pose_index}")
    masked = g_theta * state.step_scale
    nvox = state.theta.sigma_raw.size
    state.theta.sigma_raw -= config.eta0 * \
        masked[:nvox].reshape(state.theta.sigma_raw.shape)
    state.theta.rgb_raw -= config.eta0 * \
        masked[nvox:].reshape(state.theta.rgb_raw.shape)
    if config.psi_optimizer == "adam":
        delta = state.psi_opt.step(g_psi, config.eta1, config.adam_beta1,
                                   config.adam_beta2, config.adam_eps)
    else:
        delta = config.eta1 * g_psi
    _apply_psi_delta(state.psi, delta)
    return breakdown


def build_detector_config(config, payloads, n_classes=2):
    p0 = payloads[0]
    return DetectorConfig(
        channels=config.detector_channels, n_classes=n_classes,
        use_classifier=config.use_classifier,
        classifier_guided=config.classifier_guided,
        shared_trunk=config.shared_trunk,
        payload_kind=p0.kind,
        payload_dim=0 if p0.kind == "image2d" else p0.vector.size,
        seed=config.seed)


def prepare_state(dataset, theta0, payloads, psi, config, pose_labels=None,
                  rng=None, psi_opt=None):
    """Freeze theta0, cache its renders, compute the mask, seed the rng.

    ``psi_opt`` shares one Adam accumulator across states when several
    scenes train the same detector.
    """
    theta0_renders = [render(theta0, cam, config.render)[0]
                      for cam in dataset.cameras]
    mask = compute_mask(flatten_params(theta0), config.alpha,
                        epsilon_w=config.epsilon_w, mode=config.mask_mode,
                        keep_fraction=config.binary_keep_fraction)
    if psi_opt is None and config.psi_optimizer == "adam":
        psi_opt = AdamState.like(psi.to_vector())
    return StegaState(
        theta=theta0.copy(), theta0=theta0, theta0_renders=theta0_renders,
        cameras=list(dataset.cameras), psi=psi, mask=mask,
        step_scale=step_mask(mask, config, theta0.num_params),
        payloads=list(payloads), pose_labels=pose_labels,
        rng=rng if rng is not None else np.random.default_rng(config.seed),
        psi_opt=psi_opt)


def assign_clusters(poses, m, k, seed, anchors=None):
    """Label each pose with an anchor cluster id in 0..m-1, or m ("outside").

    Anchors are drawn without replacement from the pose list (or given
    explicitly); each anchor then claims its k nearest still-unassigned
    poses by camera-position distance, anchors processed in selection
    order, distance ties broken by pose index.
    """
    positions = np.stack([p.position for p in poses])
    n = positions.shape[0]
    if m < 1 or k < 1:
        raise ValueError("need m >= 1 and k >= 1")
    if m * (k + 1) > n:
        raise ValueError(
            f"m*(k+1) = {m * (k + 1)} exceeds the {n} available poses")
    rng = np.random.default_rng(seed)
    if anchors is None:
        anchors = rng.choice(n, size=m, replace=False)
    else:
        anchors = np.asarray(anchors, dtype=np.int64)
        if anchors.size != m or len(set(anchors.tolist())) != m:
            raise ValueError("anchors must be m distinct pose indices")
    labels = np.full(n, m, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    for c, a in enumerate(anchors):
        labels[a] = c
        assigned[a] = True
    for c, a in enumerate(anchors):
        d = np.linalg.norm(positions - positions[a], axis=1)
        d[assigned] = np.inf
        order = np.argsort(d, kind="stable")
        take = order[:k]
        labels[take] = c
        assigned[take] = True
    return labels


MODES = ("single", "one_for_all", "one_for_one", "multi_identity")


def train_stega(scenes, psi, config, mode="single", log_path=None):
    """Run the stage-2 loop over one or more scenes.

    ``scenes`` is a list of (SceneDataset, theta0, payload) entries where
    payload is one HiddenPayload (or a list of them in multi_identity
    mode). All scenes share the detector. Every epoch samples one scene
    and walks its training poses in a seeded random order. Returns
    (list of embedded fields, detector, report dict).
    """
    if mode not in MODES:
        raise StegaTrainingError(f"unknown mode {mode!r}")
    if not scenes:
        raise StegaTrainingError("no scenes given")
    if mode in ("single", "multi_identity") and len(scenes) != 1:
        raise StegaTrainingError(f"{mode} mode expects exactly one scene")

    rng = np.random.default_rng(config.seed)
    states = []
    psi_opt = None
    if psi is not None and config.psi_optimizer == "adam":
        psi_opt = AdamState.like(psi.to_vector())
    n_classes = 2
    if mode == "multi_identity":
        dataset, theta0, payloads = scenes[0]
        if not isinstance(payloads, (list, tuple)):
            raise StegaTrainingError(
                "multi_identity mode needs one payload per identity")
        payloads = list(payloads)
        if len(payloads) != config.cluster_m:
            raise StegaTrainingError(
                f"expected {config.cluster_m} payloads, got {len(payloads)}")
        labels = assign_clusters(dataset.cameras, config.cluster_m,
                                 config.cluster_k, config.seed)
        n_classes = config.cluster_m + 1
        if psi is None:
            psi = init_detector(build_detector_config(config, payloads,
                                                      n_classes),
                                head_scale=config.detector_head_scale)
        if psi_opt is None and config.psi_optimizer == "adam":
            psi_opt = AdamState.like(psi.to_vector())
        states.append(prepare_state(dataset, theta0, payloads, psi, config,
                                    pose_labels=labels, rng=rng,
                                    psi_opt=psi_opt))
    else:
        payload_list = []
        for entry in scenes:
            dataset, theta0, payload = entry
            if isinstance(payload, (list, tuple)):
                raise StegaTrainingError(
                    f"{mode} mode expects one payload per scene entry")
            payload_list.append(payload)
        if mode == "one_for_all":
            first = payload_list[0]
            for p in payload_list[1:]:
                if p.kind != first.kind or not np.array_equal(p.data, first.data):
                    raise StegaTrainingError(
                        "one_for_all mode expects the identical payload in "
                        "every scene entry")
        if psi is None:
            psi = init_detector(build_detector_config(config, payload_list),
                                head_scale=config.detector_head_scale)
        if psi_opt is None and config.psi_optimizer == "adam":
            psi_opt = AdamState.like(psi.to_vector())
        for (dataset, theta0, _), payload in zip(scenes, payload_list):
            states.append(prepare_state(dataset, theta0, [payload], psi,
                                        config, rng=rng, psi_opt=psi_opt))

    rows = []
    for epoch in range(config.epochs_stage2):
        s_idx = int(rng.integers(len(states))) if len(states) > 1 else 0
        state = states[s_idx]
        for pose_index in rng.permutation(len(state.cameras)):
            pose_index = int(pose_index)
            if state.pose_labels is None:
                payload = state.payloads[0]
            else:
                label = int(state.pose_labels[pose_index])
                payload = state.payloads[min(label, len(state.payloads) - 1)]
            breakdown = stage2_step(state, pose_index, payload, config)
            rows.append({"epoch": epoch, "scene": s_idx, "pose": pose_index,
                         "l_dec_plus": breakdown.l_dec_plus,
                         "l_dec_minus": breakdown.l_dec_minus,
                         "l_dec_c": breakdown.l_dec_c,
                         "l_rgb": breakdown.l_rgb,
                         "total": breakdown.total})
    if log_path is not None:
        write_loss_log(log_path, rows)
    report = {"mode": mode, "epochs": config.epochs_stage2,
              "final_losses": rows[-1] if rows else None, "steps": len(rows)}
    return [s.theta for s in states], psi, report


LOSS_LOG_COLUMNS = ["epoch", "scene", "pose", "l_dec_plus", "l_dec_minus",
                    "l_dec_c", "l_rgb", "total"]


def write_loss_log(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
