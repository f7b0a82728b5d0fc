"""Image quality metrics: PSNR, windowed SSIM, and an LPIPS-style
perceptual distance over fixed convolutional features.

All math runs in float64 numpy so results can be checked against scalar
oracles at tight tolerances.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .imageops import to_gray

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricsRow:
    pair_id: str
    psnr: float  # dB; math.inf for identical pairs
    ssim: float
    lpips: float


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping window x window tiles (uniform
    weighting); color inputs are channel-mean grayscaled first."""
    a = to_gray(np.asarray(a, dtype=np.float64))
    b = to_gray(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    vals = []
    for i in range(0, h - window + 1, window):
        for j in range(0, w - window + 1, window):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            mu_a, mu_b = pa.mean(), pb.mean()
            var_a = ((pa - mu_a) ** 2).mean()
            var_b = ((pb - mu_b) ** 2).mean()
            cov = ((pa - mu_a) * (pb - mu_b)).mean()
            num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
            vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# LPIPS-style perceptual distance over a fixed random feature stack.
# Not calibrated to human judgments; external weights can be supplied for
# fidelity runs via weights_from_arrays / a checkpoint file.

DEFAULT_FEATURE_SEED = 1234
DEFAULT_LAYER_WIDTHS = (8, 12, 16)


def _make_random_filters(seed: int, widths=DEFAULT_LAYER_WIDTHS):
    rng = np.random.default_rng(seed)
    filters = []
    in_c = 3
    for out_c in widths:
        k = rng.standard_normal((out_c, in_c, 2, 2))
        # horizontal symmetrization keeps the distance exactly invariant
        # under simultaneous horizontal flips of both inputs
        k = (k + k[:, :, :, ::-1]) / 2.0
        k /= np.sqrt((k**2).sum(axis=(1, 2, 3), keepdims=True))
        filters.append(k)
        in_c = out_c
    return filters


_FILTER_CACHE: dict = {}


def default_filters(seed: int = DEFAULT_FEATURE_SEED):
    if seed not in _FILTER_CACHE:
        _FILTER_CACHE[seed] = _make_random_filters(seed)
    return _FILTER_CACHE[seed]


def _conv_stride2(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 convolution (stride 2); x is (C, H, W)."""
    out_c, in_c, kh, kw = kernel.shape
    _, h, w = x.shape
    oh, ow = h // 2, w // 2
    patches = x[:, : 2 * oh, : 2 * ow].reshape(in_c, oh, 2, ow, 2)
    return np.einsum("cipjq,ocpq->oij", patches, kernel)


def _feature_stack(image: np.ndarray, filters) -> list:
    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)  # C, H, W
    feats = []
    for k in filters:
        x = np.maximum(_conv_stride2(x, k), 0.0)
        feats.append(x)
    return feats


def perceptual_distance(a: np.ndarray, b: np.ndarray, filters=None) -> float:
    """Sum over layers of spatially averaged squared differences between
    channel-unit-normalized feature maps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if filters is None:
        filters = default_filters()
    total = 0.0
    for fa, fb in zip(_feature_stack(a, filters), _feature_stack(b, filters)):
        na = fa / np.sqrt((fa**2).sum(axis=0, keepdims=True) + 1e-10)
        nb = fb / np.sqrt((fb**2).sum(axis=0, keepdims=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(axis=0).mean())
    return total


def filters_from_arrays(arrays: dict) -> list:
    """Build a perceptual backend from externally supplied kernels named
    lpips/layer0, lpips/layer1, ... (each out_c x in_c x kh x kw)."""
    keys = sorted(k for k in arrays if k.startswith("lpips/layer"))
    if not keys:
        raise IOError("no lpips/layer* arrays found in weights container")
    return [np.asarray(arrays[k], dtype=np.float64) for k in keys]


def score_pairs(pairs, ids=None) -> list:
    """Score (restored, reference) image pairs; returns MetricsRow list."""
    rows = []
    for i, (a, b) in enumerate(pairs):
        pid = ids[i] if ids is not None else str(i)
        rows.append(MetricsRow(pid, psnr(a, b), ssim(a, b), perceptual_distance(a, b)))
    return rows


def write_metrics_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr", "ssim", "lpips"])
        for r in rows:
            p = "inf" if np.isinf(r.psnr) else f"{r.psnr:.6f}"
            writer.writerow([r.pair_id, p, f"{r.ssim:.6f}", f"{r.lpips:.6f}"])
