"""Explicit voxel-grid radiance field with differentiable volume rendering.

The field stores pre-activation density (``sigma_raw``) and color
(``rgb_raw``) on a dense node-centered grid spanning an axis-aligned
bounding box. Density goes through softplus and color through sigmoid, so
every parameter keeps a strictly nonzero gradient; rendering composites
uniform deterministic ray samples front to back with an opaque background
term. ``render_vjp`` maps per-pixel loss gradients back to the full flat
parameter vector.

Flat parameter layout (fixed): sigma_raw raveled row-major first, then
rgb_raw raveled row-major (channel index outermost). Element 0 is
``sigma_raw[0, 0, 0]``.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import camera_rays
from .ops import ShapeMismatch, sigmoid, softplus
from .storage import load_arrays, pack_json, save_arrays, unpack_json

FIELD_FORMAT_VERSION = 1

# Raw density low enough that softplus is numerically zero.
EMPTY_SIGMA_RAW = -40.0


@dataclass
class RenderSettings:
    n_samples: int = 64
    t_near: float = 0.5
    t_far: float = 5.5
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.t_near < self.t_far:
            raise ValueError("need t_near < t_far")
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or bg.min() < 0.0 or bg.max() > 1.0:
            raise ValueError("background must be RGB in [0,1]^3")
        self.background = tuple(float(v) for v in bg)


@dataclass
class VoxelRadianceField:
    resolution: tuple                 # (nx, ny, nz)
    bbox: np.ndarray = dc_field(repr=False)   # (2,3): min corner, max corner
    sigma_raw: np.ndarray = dc_field(repr=False)
    rgb_raw: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        nx, ny, nz = self.resolution
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if not np.all(self.bbox[1] > self.bbox[0]):
            raise ValueError("bbox max must exceed bbox min per axis")
        self.sigma_raw = np.asarray(self.sigma_raw, dtype=np.float64)
        self.rgb_raw = np.asarray(self.rgb_raw, dtype=np.float64)
        if self.sigma_raw.shape != (nx, ny, nz):
            raise ShapeMismatch(
                f"sigma_raw shape {self.sigma_raw.shape} != {(nx, ny, nz)}")
        if self.rgb_raw.shape != (3, nx, ny, nz):
            raise ShapeMismatch(
                f"rgb_raw shape {self.rgb_raw.shape} != {(3, nx, ny, nz)}")

    @property
    def num_params(self):
        nx, ny, nz = self.resolution
        return 4 * nx * ny * nz

    @classmethod
    def constant(cls, resolution, bbox, sigma_raw=-2.0, rgb_raw=0.0):
        nx, ny, nz = (int(n) for n in resolution)
        return cls(resolution=(nx, ny, nz), bbox=bbox,
                   sigma_raw=np.full((nx, ny, nz), float(sigma_raw)),
                   rgb_raw=np.full((3, nx, ny, nz), float(rgb_raw)))

    def copy(self):
        return VoxelRadianceField(self.resolution, self.bbox.copy(),
                                  self.sigma_raw.copy(), self.rgb_raw.copy())


def flatten_params(field):
    """Flat parameter vector: sigma block first, then rgb channel-major."""
    return np.concatenate([field.sigma_raw.ravel(), field.rgb_raw.ravel()])


def unflatten_params(template, vec):
    """Rebuild a field with ``template``'s geometry from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    n = template.num_params
    if vec.shape != (n,):
        raise ShapeMismatch(f"expected flat vector of length {n}, got {vec.shape}")
    nx, ny, nz = template.resolution
    nvox = nx * ny * nz
    return VoxelRadianceField(
        template.resolution, template.bbox.copy(),
        vec[:nvox].reshape(nx, ny, nz).copy(),
        vec[nvox:].reshape(3, nx, ny, nz).copy())


def _grid_coords(field, pts):
    """World points (..., 3) to continuous grid coordinates plus inside mask."""
    res = np.asarray(field.resolution, dtype=np.float64)
    lo, hi = field.bbox[0], field.bbox[1]
    inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
    g = (pts - lo) / (hi - lo) * (res - 1.0)
    g = np.clip(g, 0.0, res - 1.0)
    return g, inside


def _interp_geometry(field, pts):
    """Trilinear geometry for a batch of points.

    Returns (corners, weights, inside): flat voxel indices (..., 8), the
    matching trilinear weights (..., 8) and the inside-bbox mask (...,).
    """
    nx, ny, nz = field.resolution
    g, inside = _grid_coords(field, pts)
    i0 = np.minimum(g.astype(np.int64), (np.array([nx, ny, nz]) - 2))
    f = g - i0
    base = (i0[..., 0] * ny + i0[..., 1]) * nz + i0[..., 2]
    offsets = np.array([(di * ny + dj) * nz + dk
                        for di in (0, 1) for dj in (0, 1) for dk in (0, 1)],
                       dtype=np.int64)
    corners = base[..., None] + offsets
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wz = np.stack([1.0 - fz, fz], axis=-1)
    weights = (wx[..., :, None, None] * wy[..., None, :, None]
               * wz[..., None, None, :]).reshape(*f.shape[:-1], 8)
    return corners, weights, inside


def sample_field(field, point):
    """Activated density and color at one world point.

    Outside the bbox the density is exactly 0 and the returned color is a
    meaningless placeholder (0.5 per channel).
    """
    pt = np.asarray(point, dtype=np.float64).reshape(3)
    corners, weights, inside = _interp_geometry(field, pt)
    if not inside:
        return 0.0, np.full(3, 0.5)
    sraw = float(field.sigma_raw.ravel()[corners] @ weights)
    rgb_flat = field.rgb_raw.reshape(3, -1)
    rgbraw = rgb_flat[:, corners] @ weights
    return float(softplus(sraw)), sigmoid(rgbraw)


@dataclass
class RenderCache:
    resolution: tuple
    image_shape: tuple
    delta: float
    background: np.ndarray
    corners: np.ndarray      # (P,S,8) int64
    weights: np.ndarray      # (P,S,8)
    inside: np.ndarray       # (P,S) bool
    sraw: np.ndarray         # (P,S) interpolated raw density
    color: np.ndarray        # (P,S,3) activated color
    alpha: np.ndarray        # (P,S)
    t_excl: np.ndarray       # (P,S) transmittance before each sample
    t_final: np.ndarray      # (P,)


def render(field, camera, settings):
    """Render the field from a camera; returns ((3,H,W) image, cache).

    Marches ``n_samples`` midpoint samples per ray between t_near and
    t_far, composites front to back and finishes with an opaque background
    sample. Purely deterministic: no jitter anywhere.
    """
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    p = h * w
    s = settings.n_samples
    delta = (settings.t_far - settings.t_near) / s
    t = settings.t_near + (np.arange(s) + 0.5) * delta
    pts = (origins.reshape(p, 1, 3)
           + t[None, :, None] * dirs.reshape(p, 1, 3))

    corners, weights, inside = _interp_geometry(field, pts)
    sigma_flat = field.sigma_raw.ravel()
    rgb_flat = field.rgb_raw.reshape(3, -1)
    sraw = np.einsum("psc,psc->ps", sigma_flat[corners], weights)
    rgbraw = np.einsum("kpsc,psc->psk", rgb_flat[:, corners], weights)

    sigma = softplus(sraw) * inside
    color = sigmoid(rgbraw)
    alpha = -np.expm1(-sigma * delta)
    surv = np.cumprod(1.0 - alpha, axis=1)
    t_excl = np.concatenate([np.ones((p, 1)), surv[:, :-1]], axis=1)
    t_final = surv[:, -1]
    contrib = t_excl * alpha
    bg = np.asarray(settings.background, dtype=np.float64)
    pix = np.einsum("ps,psk->pk", contrib, color) + t_final[:, None] * bg
    image = pix.T.reshape(3, h, w)

    cache = RenderCache(field.resolution, (3, h, w), delta, bg, corners,
                        weights, inside, sraw, color, alpha, t_excl, t_final)
    return image, cache


def render_vjp(cache, grad_image):
    """Gradient of the rendered image w.r.t. the flat field parameters."""
    g = np.asarray(grad_image, dtype=np.float64)
    if g.shape != cache.image_shape:
        raise ShapeMismatch(
            f"grad_image shape {g.shape} != render output {cache.image_shape}")
    nx, ny, nz = cache.resolution
    nvox = nx * ny * nz
    p, s = cache.sraw.shape
    gp = g.reshape(3, p).T                                   # (P,3)

    contrib = cache.t_excl * cache.alpha                     # (P,S)
    u = np.einsum("pk,psk->ps", gp, cache.color)
    u_bg = gp @ cache.background                             # (P,)

    # d(pixel)/d(sigma_i): delta * (T_{i+1} u_i - suffix_i) where suffix_i
    # collects every later sample plus the background term.
    wu = contrib * u
    suffix_incl = np.cumsum(wu[:, ::-1], axis=1)[:, ::-1]
    suffix = suffix_incl - wu + cache.t_final[:, None] * u_bg[:, None]
    t_next = cache.t_excl * (1.0 - cache.alpha)
    grad_sigma = cache.delta * (t_next * u - suffix)

    grad_sraw = grad_sigma * sigmoid(cache.sraw) * cache.inside
    grad_rgbraw = (contrib[:, :, None] * gp[:, None, :]
                   * cache.color * (1.0 - cache.color)
                   * cache.inside[:, :, None])               # (P,S,3)

    idx = cache.corners.ravel()
    grad_flat = np.empty(4 * nvox)
    grad_flat[:nvox] = np.bincount(
        idx, weights=(grad_sraw[:, :, None] * cache.weights).ravel(),
        minlength=nvox)
    for ch in range(3):
        grad_flat[(1 + ch) * nvox:(2 + ch) * nvox] = np.bincount(
            idx, weights=(grad_rgbraw[:, :, ch, None] * cache.weights).ravel(),
            minlength=nvox)
    return grad_flat


def save_field(path, field):
    """Write a field checkpoint; byte-identical for identical fields."""
    meta = {"format_version": FIELD_FORMAT_VERSION,
            "resolution": list(field.resolution)}
    save_arrays(path, meta=pack_json(meta), bbox=field.bbox,
                sigma_raw=field.sigma_raw, rgb_raw=field.rgb_raw)


def load_field(path):
    data = load_arrays(path)
    meta = unpack_json(data["meta"])
    if meta.get("format_version") != FIELD_FORMAT_VERSION:
        raise ValueError(
            f"unsupported field checkpoint version {meta.get('format_version')}")
    return VoxelRadianceField(tuple(meta["resolution"]), data["bbox"],
                              data["sigma_raw"], data["rgb_raw"])
