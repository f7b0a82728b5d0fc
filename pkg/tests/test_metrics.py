import math

import numpy as np
import pytest

from retinaregen.metrics import (
    MetricsRow,
    default_filters,
    filters_from_arrays,
    perceptual_distance,
    psnr,
    ssim,
    write_metrics_csv,
)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


# ---------------------------------------------------------------------------
# scalar brute-force oracles

def psnr_oracle(a, b, max_val=1.0):
    total = 0.0
    n = 0
    flat_a, flat_b = a.ravel(), b.ravel()
    for x, y in zip(flat_a, flat_b):
        total += (x - y) ** 2
        n += 1
    mse = total / n
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def ssim_oracle(a, b, window=8):
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    h, w = a.shape
    vals = []
    for i in range(0, h - window + 1, window):
        for j in range(0, w - window + 1, window):
            pa = a[i : i + window, j : j + window].ravel()
            pb = b[i : i + window, j : j + window].ravel()
            n = len(pa)
            mu_a = sum(pa) / n
            mu_b = sum(pb) / n
            var_a = sum((x - mu_a) ** 2 for x in pa) / n
            var_b = sum((x - mu_b) ** 2 for x in pb) / n
            cov = sum((x - mu_a) * (y - mu_b) for x, y in zip(pa, pb)) / n
            vals.append(
                ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                / ((mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
            )
    return sum(vals) / len(vals)


def conv_stride2_oracle(x, kernel):
    out_c, in_c, kh, kw = kernel.shape
    _, h, w = x.shape
    oh, ow = h // 2, w // 2
    out = np.zeros((out_c, oh, ow))
    for o in range(out_c):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(in_c):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += x[c, 2 * i + ki, 2 * j + kj] * kernel[o, c, ki, kj]
                out[o, i, j] = acc
    return out


def perceptual_oracle(a, b, filters):
    def stack(img):
        x = img.transpose(2, 0, 1)
        feats = []
        for k in filters:
            x = np.maximum(conv_stride2_oracle(x, k), 0.0)
            feats.append(x)
        return feats

    total = 0.0
    for fa, fb in zip(stack(a), stack(b)):
        c, h, w = fa.shape
        layer = 0.0
        for i in range(h):
            for j in range(w):
                norm_a = math.sqrt(sum(fa[k, i, j] ** 2 for k in range(c)) + 1e-10)
                norm_b = math.sqrt(sum(fb[k, i, j] ** 2 for k in range(c)) + 1e-10)
                layer += sum(
                    (fa[k, i, j] / norm_a - fb[k, i, j] / norm_b) ** 2 for k in range(c)
                )
        total += layer / (h * w)
    return total


# ---------------------------------------------------------------------------

def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == math.inf


def test_psnr_analytic_20db():
    a = np.zeros((16, 16, 3))
    b = np.full((16, 16, 3), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-12


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((5, 5)))


def test_psnr_matches_oracle_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-9


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).random((16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_zero_vs_one():
    a = np.zeros((8, 8))
    b = np.ones((8, 8))
    expected = SSIM_C1 / (1 + SSIM_C1)
    assert abs(ssim(a, b) - expected) < 1e-12
    assert abs(expected - 9.999e-5) < 1e-8


def test_ssim_window_error():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_ssim_matches_oracle_random_pairs():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-9


def test_ssim_in_range():
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = ssim(rng.random((16, 16)), rng.random((16, 16)))
        assert -1.0 <= v <= 1.0


def test_perceptual_zero_on_identical():
    a = np.random.default_rng(5).random((16, 16, 3))
    assert perceptual_distance(a, a) == 0.0


def test_perceptual_symmetric_and_nonnegative():
    rng = np.random.default_rng(6)
    for _ in range(5):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        d = perceptual_distance(a, b)
        assert d >= 0.0
        assert abs(d - perceptual_distance(b, a)) < 1e-12


def test_perceptual_matches_oracle():
    rng = np.random.default_rng(7)
    filters = default_filters()
    for _ in range(3):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert abs(perceptual_distance(a, b) - perceptual_oracle(a, b, filters)) < 1e-9


def test_perceptual_monotone_under_noise():
    rng = np.random.default_rng(8)
    images = [rng.random((16, 16, 3)) for _ in range(20)]
    means = []
    for level in np.linspace(0.02, 0.4, 10):
        dists = [
            perceptual_distance(im, np.clip(im + rng.normal(0, level, im.shape), 0, 1))
            for im in images
        ]
        means.append(np.mean(dists))
    assert all(b >= a - 1e-6 for a, b in zip(means, means[1:]))


def test_metrics_flip_invariance():
    rng = np.random.default_rng(9)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    af, bf = a[:, ::-1, :].copy(), b[:, ::-1, :].copy()
    assert abs(psnr(a, b) - psnr(af, bf)) < 1e-12
    assert abs(ssim(a, b) - ssim(af, bf)) < 1e-12
    assert abs(perceptual_distance(a, b) - perceptual_distance(af, bf)) < 1e-9


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(10)
    a = rng.random((32, 32, 3)) * 0.5 + 0.25
    vals = [psnr(a, a + rng.normal(0, s, a.shape)) for s in np.linspace(0.01, 0.3, 15)]
    assert all(y < x for x, y in zip(vals, vals[1:]))


def test_external_filter_backend():
    filters = default_filters()
    arrays = {f"lpips/layer{i}": k for i, k in enumerate(filters)}
    loaded = filters_from_arrays(arrays)
    a = np.random.default_rng(11).random((16, 16, 3))
    b = np.random.default_rng(12).random((16, 16, 3))
    assert perceptual_distance(a, b, loaded) == perceptual_distance(a, b, filters)
    with pytest.raises(IOError):
        filters_from_arrays({"other": np.zeros(3)})


def test_metrics_csv_format(tmp_path):
    rows = [MetricsRow("a", math.inf, 1.0, 0.0), MetricsRow("b", 20.0, 0.5, 0.25)]
    path = str(tmp_path / "metrics.csv")
    write_metrics_csv(rows, path)
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "id,psnr,ssim,lpips"
    assert lines[1] == "a,inf,1.000000,0.000000"
    assert lines[2] == "b,20.000000,0.500000,0.250000"
