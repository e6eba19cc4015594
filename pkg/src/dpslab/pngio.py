"""8-bit PNG round trip for [0,1] float arrays (grayscale)."""

import numpy as np
from PIL import Image


def write_png_gray(x, path):
    """Quantize a [0,1] float image to 8-bit grayscale and save it."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {x.shape}")
    q = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def read_png_gray(path):
    """Load a PNG as a float image scaled to [0,1]; color inputs are averaged."""
    im = Image.open(path)
    arr = np.asarray(im, dtype=float)
    if arr.ndim == 3:
        arr = arr[:, :, :3].mean(axis=2)
    return arr / 255.0
