"""Dataset ingestion and desk-scale synthetic scene generation.

Datasets live on disk as a ``manifest.json`` (field of view plus one 4x4
world-from-camera transform per frame, Blender convention) next to 8-bit
RGB PNGs. Synthetic scenes voxelize colored spheres and boxes into a
ground-truth field and render it from a ring or hemisphere of cameras, so
every generated dataset has a known-good field of the same capacity as
the one later fitted to it.
"""

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import Camera, InvalidCamera, look_at, validate_pose
from .field import RenderSettings, VoxelRadianceField, EMPTY_SIGMA_RAW, render
from .storage import read_png, write_png

DATASET_FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset directories."""


@dataclass
class SceneDataset:
    frames: list                 # [(Camera, (3,H,W) float image in [0,1])]
    scene_id: str = "scene"

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("empty dataset")
        shapes = {img.shape for _, img in self.frames}
        if len(shapes) != 1:
            raise DatasetError(f"frames disagree on image shape: {shapes}")
        for _, img in self.frames:
            if img.min() < 0.0 or img.max() > 1.0:
                raise DatasetError("image values must lie in [0,1]")

    def __len__(self):
        return len(self.frames)

    @property
    def cameras(self):
        return [cam for cam, _ in self.frames]

    @property
    def images(self):
        return [img for _, img in self.frames]


def save_dataset(path, dataset):
    """Write manifest.json plus one PNG per frame."""
    os.makedirs(path, exist_ok=True)
    frames_meta = []
    for i, (cam, img) in enumerate(dataset.frames):
        name = f"frame_{i:04d}.png"
        write_png(os.path.join(path, name), img)
        frames_meta.append({"file": name, "transform": cam.pose.tolist()})
    cam0 = dataset.frames[0][0]
    manifest = {"format_version": DATASET_FORMAT_VERSION,
                "scene_id": dataset.scene_id,
                "fov_x": cam0.fov_x,
                "width": cam0.width, "height": cam0.height,
                "frames": frames_meta}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(path):
    """Read a dataset directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"missing manifest: {manifest_path}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}")
    frames_meta = manifest.get("frames", [])
    if not frames_meta:
        raise DatasetError("empty dataset")
    fov_x = float(manifest["fov_x"])
    frames = []
    for entry in frames_meta:
        file_path = os.path.join(path, entry["file"])
        if not os.path.exists(file_path):
            raise DatasetError(f"missing image file: {file_path}")
        img = read_png(file_path)
        pose = np.asarray(entry["transform"], dtype=np.float64)
        try:
            validate_pose(pose, tol=1e-3)
        except InvalidCamera as e:
            raise DatasetError(f"frame {entry['file']}: {e}")
        cam = Camera(width=img.shape[2], height=img.shape[1],
                     fov_x=fov_x, pose=pose)
        frames.append((cam, img))
    return SceneDataset(frames, scene_id=manifest.get("scene_id", "scene"))


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class Sphere:
    center: tuple
    radius: float
    density: float
    color: tuple


@dataclass
class Box:
    lo: tuple
    hi: tuple
    density: float
    color: tuple


@dataclass
class SyntheticSceneSpec:
    primitives: list
    resolution: tuple = (64, 64, 64)
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    n_train_views: int = 16
    n_test_views: int = 8
    layout: str = "ring"           # "ring" or "hemisphere"
    camera_distance: float = 3.0
    camera_height: float = 0.9
    image_size: int = 64
    fov_x: float = 0.9
    seed: int = 0
    render: RenderSettings = dc_field(default_factory=RenderSettings)
    scene_id: str = "synthetic"

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("need at least one primitive")
        if self.n_train_views + self.n_test_views < 2:
            raise ValueError("need at least two views")
        if self.layout not in ("ring", "hemisphere"):
            raise ValueError(f"unknown camera layout {self.layout!r}")


def _inv_softplus(y):
    # inverse of ln(1+e^x); y must be positive
    return float(np.log(np.expm1(y)))


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-4, 1.0 - 1e-4)
    return np.log(p / (1.0 - p))


def voxelize_primitives(spec):
    """Bake the spec's primitives into a ground-truth field."""
    nx, ny, nz = spec.resolution
    bbox = np.asarray(spec.bbox, dtype=np.float64)
    axes = [np.linspace(bbox[0][d], bbox[1][d], n)
            for d, n in enumerate((nx, ny, nz))]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)

    sigma_raw = np.full((nx, ny, nz), EMPTY_SIGMA_RAW)
    rgb_raw = np.zeros((3, nx, ny, nz))
    for prim in spec.primitives:
        if isinstance(prim, Sphere):
            inside = np.linalg.norm(pts - np.asarray(prim.center), axis=-1) \
                <= prim.radius
        elif isinstance(prim, Box):
            lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
            inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
        else:
            raise TypeError(f"unknown primitive type {type(prim).__name__}")
        sigma_raw[inside] = _inv_softplus(prim.density)
        color_raw = _logit(prim.color)
        for ch in range(3):
            rgb_raw[ch][inside] = color_raw[ch]
    return VoxelRadianceField((nx, ny, nz), bbox, sigma_raw, rgb_raw)


def _camera_ring(spec, n_views, rng):
    center = np.asarray(spec.bbox, dtype=np.float64).mean(axis=0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    cams = []
    for i in range(n_views):
        az = phase + 2.0 * np.pi * i / n_views
        if spec.layout == "ring":
            elev = np.arctan2(spec.camera_height, spec.camera_distance)
        else:
            # hemisphere: sweep elevation between ~10 and ~60 degrees
            elev = 0.17 + 0.88 * ((i * 7) % n_views) / max(n_views - 1, 1)
        eye = center + spec.camera_distance * np.array([
            np.cos(az) * np.cos(elev),
            np.sin(az) * np.cos(elev),
            np.sin(elev)])
        pose = look_at(eye, center)
        cams.append(Camera(width=spec.image_size, height=spec.image_size,
                           fov_x=spec.fov_x, pose=pose))
    return cams


def generate_synthetic_scene(spec):
    """Returns (ground-truth field, train dataset, test dataset).

    Pure function of the spec: the same spec (seed included) always
    produces bit-identical fields and datasets.
    """
    rng = np.random.default_rng(spec.seed)
    gt_field = voxelize_primitives(spec)
    n_total = spec.n_train_views + spec.n_test_views
    cams = _camera_ring(spec, n_total, rng)
    order = rng.permutation(n_total)
    train_idx = np.sort(order[:spec.n_train_views])
    test_idx = np.sort(order[spec.n_train_views:])

    frames = []
    for cam in cams:
        img, _ = render(gt_field, cam, spec.render)
        frames.append((cam, np.clip(img, 0.0, 1.0)))
    train = SceneDataset([frames[i] for i in train_idx],
                         scene_id=spec.scene_id)
    test = SceneDataset([frames[i] for i in test_idx],
                        scene_id=spec.scene_id + "_test")
    return gt_field, train, test


# ---------------------------------------------------------------------------
# payload helpers
# ---------------------------------------------------------------------------

def bilinear_resize(image, out_h, out_w):
    """Resize a (3,H,W) image with bilinear sampling (pixel centers aligned)."""
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros(out_h, np.int64)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros(out_w, np.int64)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def make_test_payload(size):
    """Synthetic logo-like payload image: high contrast, mean near one half.

    All levels are multiples of 64/255, so the top two bits of every
    channel survive low-bit-depth round trips exactly. Two properties
    matter for joint training: a mid-gray mean, and no exactly-zero pixels.
    With zero pixels and equal payload/empty loss weights, the L1 pressure
    on the decoder output never balances while live and frozen renders are
    still indistinguishable, and the shared output path dives into sigmoid
    saturation before the classifier can separate them. A minimum level of
    64/255 makes that transient collapse stop in the healthy sigmoid range.
    """
    lv = np.array([64, 128, 192]) / 255.0
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cx = cy = (size - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)
    stripe = ((xx // max(size // 8, 1)) % 2) == 0
    img = np.empty((3, size, size))
    img[0] = np.where(stripe, lv[2], lv[0])
    img[1] = np.where(yy > xx, lv[2], lv[1])
    img[2] = np.where(stripe ^ (yy > xx), lv[0], lv[2])
    ring = (r < size * 0.42) & (r >= size * 0.18)
    img[0][ring] = lv[0]
    img[1][ring] = lv[2]
    img[2][ring] = lv[1]
    disk = r < size * 0.18
    img[0][disk] = lv[2]
    img[1][disk] = lv[0]
    img[2][disk] = lv[0]
    return img


def load_payload_image(path, out_h, out_w):
    """Load a PNG payload and resize it to the render resolution."""
    img = read_png(path)
    if img.shape[1] == out_h and img.shape[2] == out_w:
        return img
    return np.clip(bilinear_resize(img, out_h, out_w), 0.0, 1.0)


def save_payload_image(path, payload_image):
    write_png(path, payload_image)
