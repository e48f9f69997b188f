"""Least-significant-bit image steganography baseline.

Embeds the top bits of a secret image into the low bits of a carrier of
the same shape. Bit-exact by construction on the retained bits; exists
here to demonstrate how pixel-level embedding dies when a radiance field
is refit on the stego images.
"""

import numpy as np

from .ops import ShapeMismatch


def _check(image, nbits):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got dtype {arr.dtype}")
    if not 1 <= nbits <= 7:
        raise ValueError(f"nbits must be in [1, 7], got {nbits}")
    return arr


def lsb_embed(carrier, secret, nbits=2):
    """Replace the ``nbits`` low bits of carrier with secret's top bits."""
    c = _check(carrier, nbits)
    s = _check(secret, nbits)
    if c.shape != s.shape:
        raise ShapeMismatch(
            f"carrier shape {c.shape} != secret shape {s.shape}")
    keep = np.uint8(0xFF << nbits)
    return (c & keep) | (s >> (8 - nbits))


def lsb_extract(image, nbits=2):
    """Shift the ``nbits`` low bits back into the top positions, zero-fill."""
    x = _check(image, nbits)
    mask = np.uint8((1 << nbits) - 1)
    return (x & mask) << (8 - nbits)
