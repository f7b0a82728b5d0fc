"""Shared low-level image operations (numpy, float64)."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centers (edge-clamped).

    Accepts (H, W) or (H, W, C) arrays; constant images stay constant.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid target size ({out_h}, {out_w})")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return bilinear_resize(img[:, :, None], out_h, out_w)[:, :, 0]
    if img.ndim != 3:
        raise ValueError(f"expected 2D or 3D image, got ndim={img.ndim}")
    h, w, _ = img.shape
    if h == 0 or w == 0:
        raise ValueError("empty image")
    if (h, w) == (out_h, out_w):
        return img.copy()

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def to_gray(image: np.ndarray) -> np.ndarray:
    """Channel-mean grayscale; passthrough for 2D input."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img.mean(axis=2)
