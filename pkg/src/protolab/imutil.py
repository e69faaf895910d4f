"""Small shared image utilities: dtype conversion, resizing, background estimation."""

from __future__ import annotations

import numpy as np

RESOLUTION = 128


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float64 [0,1]; float input passes through as float64."""
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float [0,1] -> uint8 with round-half-up; uint8 passes through."""
    if image.dtype == np.uint8:
        return image
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D grid (or HxWxC) using half-pixel center alignment.

    Output pixel center (i+0.5)/out maps to input coordinate (i+0.5)*in/out - 0.5,
    clamped at the borders. Constant inputs stay exactly constant.
    """
    values = np.asarray(values, dtype=np.float64)
    in_h, in_w = values.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return values.copy()

    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)

    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if values.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]

    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def estimate_background(image: np.ndarray, corner: int = 3) -> np.ndarray:
    """Median colour of the four corner patches, as float RGB in [0,1].

    Rendered scenes keep shapes away from the corners, so this recovers the
    background tint; on arbitrary images it is a robust guess.
    """
    img = to_float(image)
    c = corner
    patches = np.concatenate(
        [
            img[:c, :c].reshape(-1, img.shape[-1]),
            img[:c, -c:].reshape(-1, img.shape[-1]),
            img[-c:, :c].reshape(-1, img.shape[-1]),
            img[-c:, -c:].reshape(-1, img.shape[-1]),
        ]
    )
    return np.median(patches, axis=0)
