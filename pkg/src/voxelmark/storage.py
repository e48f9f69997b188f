"""Deterministic on-disk containers: npz-compatible archives and PNG I/O.

``np.savez`` stamps the current time into the zip entries, which breaks
byte-identical reruns. ``save_arrays`` writes the same .npy members through
``zipfile`` with a fixed timestamp so identical arrays always produce
identical files; ``np.load`` reads them back unchanged.
"""

import json
import zipfile

import numpy as np
from PIL import Image

_EPOCH = (1980, 1, 1, 0, 0, 0)   # zip format cannot store earlier dates


def save_arrays(path, **arrays):
    """Write arrays to an uncompressed npz archive with fixed timestamps."""
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            with zf.open(info, mode="w") as f:
                np.lib.format.write_array(f, np.asarray(arrays[name]),
                                          allow_pickle=False)


def load_arrays(path):
    """Read an archive written by :func:`save_arrays` into a dict."""
    out = {}
    with np.load(path, allow_pickle=False) as data:
        for name in data.files:
            out[name] = data[name]
    return out


def pack_json(obj):
    """Encode a JSON-serializable object as a uint8 array for archiving."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)


def unpack_json(arr):
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))


def float_to_u8(image):
    """[0,1] float image to uint8 with round-half-away quantization."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return (x * 255.0 + 0.5).astype(np.uint8)


def u8_to_float(image):
    return np.asarray(image, dtype=np.float64) / 255.0


def write_png(path, image):
    """Write a (3,H,W) float [0,1] or uint8 image as an 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = float_to_u8(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {arr.shape}")
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_png(path):
    """Read a PNG as a (3,H,W) float image in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8_to_float(arr.transpose(2, 0, 1))
