"""Synthetic fundus-like corpus with controllable degradations.

Clean images use a fixed anatomical layout (fundus circle, optic disc,
macula) so that readability labels are a pure function of the degradation
spec; only vessel geometry and texture vary per sample.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .labels import LABEL_NAMES, ReadabilityLabels

# Anatomical layout, as fractions of the image side. Fixed so labels depend
# only on the degradation spec.
FUNDUS_CENTER = (0.5, 0.5)
FUNDUS_RADIUS = 0.48
DISC_CENTER = (0.50, 0.70)  # (row, col) fractions
DISC_RADII = (0.085, 0.10)
MACULA_CENTER = (0.50, 0.36)
MACULA_RADIUS = 0.09

OCCLUSION_VALUE = 0.05


@dataclass(frozen=True)
class LabelThresholds:
    """Degradation levels beyond which a region stops being readable."""

    valid_brightness_min: float = 0.35
    retina_blur_max: float = 1.5
    retina_noise_max: float = 0.20
    region_blur_max: float = 3.0  # disc and macula tolerate more blur


@dataclass
class DegradationSpec:
    blur_sigma: float = 0.0
    occlusion_boxes: list = field(default_factory=list)  # (x, y, w, h) pixels
    brightness_scale: float = 1.0
    noise_std: float = 0.0

    def validate(self, size: int) -> None:
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not (0.0 < self.brightness_scale <= 1.0):
            raise ValueError(
                f"brightness_scale must be in (0, 1], got {self.brightness_scale}"
            )
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        for box in self.occlusion_boxes:
            x, y, w, h = box
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > size or y + h > size:
                raise ValueError(f"occlusion box {box} outside {size}x{size} bounds")

    @property
    def is_identity(self) -> bool:
        return (
            self.blur_sigma == 0
            and not self.occlusion_boxes
            and self.brightness_scale == 1.0
            and self.noise_std == 0
        )


@dataclass
class FundusSample:
    image: np.ndarray  # degraded, H x W x 3 in [0, 1]
    labels: ReadabilityLabels
    degradation: DegradationSpec
    id: str
    clean: np.ndarray | None = None  # ground truth before degradation


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list


def _region_box(center, radius_rc, size: int):
    """Pixel bounding box (x0, y0, x1, y1) of an elliptical region."""
    ry, rx = radius_rc if isinstance(radius_rc, tuple) else (radius_rc, radius_rc)
    cy, cx = center[0] * size, center[1] * size
    return (cx - rx * size, cy - ry * size, cx + rx * size, cy + ry * size)


def _box_overlaps(box, region) -> bool:
    x, y, w, h = box
    rx0, ry0, rx1, ry1 = region
    return x < rx1 and x + w > rx0 and y < ry1 and y + h > ry0


def derive_labels(
    spec: DegradationSpec, size: int, thresholds: LabelThresholds = LabelThresholds()
) -> ReadabilityLabels:
    """Labels are deterministic given the spec and the fixed layout."""
    disc = _region_box(DISC_CENTER, DISC_RADII, size)
    macula = _region_box(MACULA_CENTER, MACULA_RADIUS, size)
    disc_hit = any(_box_overlaps(b, disc) for b in spec.occlusion_boxes)
    macula_hit = any(_box_overlaps(b, macula) for b in spec.occlusion_boxes)
    return ReadabilityLabels(
        valid=spec.brightness_scale >= thresholds.valid_brightness_min,
        macula=spec.blur_sigma <= thresholds.region_blur_max and not macula_hit,
        optic_disc=spec.blur_sigma <= thresholds.region_blur_max and not disc_hit,
        retina=(
            spec.blur_sigma <= thresholds.retina_blur_max
            and spec.noise_std <= thresholds.retina_noise_max
        ),
    )


def render_clean_fundus(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural clean image: fundus disc, bright optic disc, dark macula,
    vessel-like curves radiating from the disc."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3), dtype=np.float64)
    img[..., 0] = 0.02
    img[..., 1] = 0.02
    img[..., 2] = 0.03

    cy, cx = FUNDUS_CENTER
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inside = r < FUNDUS_RADIUS
    vignette = np.clip(1.0 - (r / FUNDUS_RADIUS) ** 2, 0.0, 1.0)
    base = np.stack(
        [0.72 * vignette + 0.10, 0.32 * vignette + 0.05, 0.12 * vignette + 0.03],
        axis=-1,
    )
    img = np.where(inside[..., None], base, img)

    # slight reddish texture so images are not identical
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0)
    texture = 0.03 * texture / (np.abs(texture).max() + 1e-12)
    img[..., 0] += texture * inside
    img[..., 1] += 0.5 * texture * inside

    # bright optic disc (ellipse)
    dy, dx = DISC_CENTER
    ry, rx = DISC_RADII
    disc = ((yy - dy) / ry) ** 2 + ((xx - dx) / rx) ** 2
    disc_mask = np.clip(1.0 - disc, 0.0, 1.0)
    img[..., 0] += 0.25 * disc_mask
    img[..., 1] += 0.45 * disc_mask
    img[..., 2] += 0.35 * disc_mask

    # darker macula
    my, mx = MACULA_CENTER
    mac = np.sqrt((yy - my) ** 2 + (xx - mx) ** 2) / MACULA_RADIUS
    mac_mask = np.clip(1.0 - mac, 0.0, 1.0)
    img[..., 0] -= 0.20 * mac_mask
    img[..., 1] -= 0.12 * mac_mask

    # vessels: quadratic curves leaving the disc center
    n_vessels = int(rng.integers(4, 7))
    thickness = max(1.0, size / 64.0)
    vessel = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_vessels):
        ang = rng.uniform(0, 2 * math.pi)
        bend = rng.uniform(-1.2, 1.2)
        length = rng.uniform(0.35, 0.55)
        steps = 4 * size
        ts = np.linspace(0.0, 1.0, steps)
        py = dy + ts * length * math.sin(ang) + bend * ts**2 * 0.15 * math.cos(ang)
        px = dx + ts * length * math.cos(ang) - bend * ts**2 * 0.15 * math.sin(ang)
        iy = np.clip((py * size).astype(int), 0, size - 1)
        ix = np.clip((px * size).astype(int), 0, size - 1)
        vessel[iy, ix] = 1.0
    vessel = gaussian_filter(vessel, sigma=thickness / 2.0)
    vessel = np.clip(vessel / (vessel.max() + 1e-12), 0, 1) * inside
    img[..., 0] -= 0.30 * vessel
    img[..., 1] -= 0.20 * vessel
    img[..., 2] -= 0.05 * vessel

    return np.clip(img, 0.0, 1.0)


def degrade(image: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Apply blur, then brightness scaling, then occlusion, then additive
    Gaussian noise (fixed order), clamping to [0, 1]."""
    size = image.shape[0]
    spec.validate(size)
    out = np.asarray(image, dtype=np.float64).copy()
    if spec.blur_sigma > 0:
        for c in range(out.shape[2]):
            out[..., c] = gaussian_filter(out[..., c], sigma=spec.blur_sigma, mode="nearest")
    if spec.brightness_scale != 1.0:
        out *= spec.brightness_scale
    for x, y, w, h in spec.occlusion_boxes:
        out[int(y) : int(y + h), int(x) : int(x + w), :] = OCCLUSION_VALUE
    if spec.noise_std > 0:
        rng = np.random.default_rng(seed)
        out += rng.normal(0.0, spec.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


#: Default per-label positive rates used when sampling degradations.
DEFAULT_POSITIVE_RATES = {"valid": 0.85, "macula": 0.75, "optic_disc": 0.70, "retina": 0.75}


def _sample_spec(rng: np.random.Generator, size: int, pos_rates: dict) -> DegradationSpec:
    """Draw a degradation whose label flips are independent Bernoulli events.

    Each flip uses a mechanism that crosses exactly one label threshold, so
    realized positive rates match the configured ones.
    """
    spec = DegradationSpec(
        blur_sigma=float(rng.uniform(0.0, 0.6)),
        brightness_scale=float(rng.uniform(0.80, 1.0)),
        noise_std=float(rng.uniform(0.0, 0.05)),
    )
    th = LabelThresholds()
    if rng.random() > pos_rates["valid"]:
        spec.brightness_scale = float(rng.uniform(0.12, 0.28))
    if rng.random() > pos_rates["retina"]:
        if rng.random() < 0.5:
            spec.blur_sigma = float(rng.uniform(1.8, 2.8))  # below region_blur_max
        else:
            spec.noise_std = float(rng.uniform(0.24, 0.38))
    if rng.random() > pos_rates["optic_disc"]:
        bw = int(round(0.18 * size))
        cx = DISC_CENTER[1] * size - bw / 2
        cy = DISC_CENTER[0] * size - bw / 2
        jx = float(rng.uniform(-0.02, 0.02)) * size
        jy = float(rng.uniform(-0.02, 0.02)) * size
        x = min(max(0.0, cx + jx), size - bw)
        y = min(max(0.0, cy + jy), size - bw)
        spec.occlusion_boxes.append((x, y, float(bw), float(bw)))
    if rng.random() > pos_rates["macula"]:
        bw = int(round(0.16 * size))
        cx = MACULA_CENTER[1] * size - bw / 2
        cy = MACULA_CENTER[0] * size - bw / 2
        jx = float(rng.uniform(-0.02, 0.02)) * size
        jy = float(rng.uniform(-0.02, 0.02)) * size
        x = min(max(0.0, cx + jx), size - bw)
        y = min(max(0.0, cy + jy), size - bw)
        spec.occlusion_boxes.append((x, y, float(bw), float(bw)))
    assert derive_labels(spec, size, th) is not None
    return spec


def generate_synthetic_fundus(
    seed: int,
    count: int,
    size: int,
    pos_rates: dict | None = None,
    degrade_fraction: float = 1.0,
) -> list:
    """Deterministic synthetic corpus. `degrade_fraction` of samples get a
    sampled degradation; the rest keep the identity spec."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    rates = dict(DEFAULT_POSITIVE_RATES)
    if pos_rates:
        rates.update(pos_rates)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        clean = render_clean_fundus(rng, size)
        if rng.random() < degrade_fraction:
            spec = _sample_spec(rng, size, rates)
        else:
            spec = DegradationSpec()
        noise_seed = int(rng.integers(0, 2**31 - 1))
        image = degrade(clean, spec, noise_seed) if not spec.is_identity else clean.copy()
        samples.append(
            FundusSample(
                image=image,
                labels=derive_labels(spec, size),
                degradation=spec,
                id=f"syn-{seed}-{i:05d}",
                clean=clean,
            )
        )
    return samples


def split_dataset(samples, ratios, seed: int) -> DatasetSplit:
    """Shuffle by seed and partition with largest-remainder rounding
    (ties broken train > val > test)."""
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(samples)
    exact = [r_train * n, r_val * n, r_test * n]
    sizes = [int(math.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    leftover = n - sum(sizes)
    # priority index breaks remainder ties: train first, then val, then test
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(leftover):
        sizes[order[i % 3]] += 1
    perm = np.random.default_rng(seed).permutation(n).tolist()
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(train=perm[:a], val=perm[a:b], test=perm[b:])


def compute_class_weights(labels):
    """Balanced per-label weights w_pos = N/(2 N_pos), w_neg = N/(2 N_neg).

    Returns (weights, warnings): weights is a (4, 2) array of (w_pos, w_neg)
    rows in serialized label order; warnings flags labels that were
    single-class (weights forced to (1, 1))."""
    mat = np.stack([l.to_array() for l in labels])
    n = mat.shape[0]
    weights = np.ones((4, 2), dtype=np.float64)
    warnings = [False] * 4
    for j in range(4):
        n_pos = float(mat[:, j].sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            warnings[j] = True
            continue
        weights[j] = (n / (2.0 * n_pos), n / (2.0 * n_neg))
    return weights, warnings


def save_corpus(samples, out_dir: str) -> str:
    """Persist images as 8-bit PNG plus a JSONL manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for s in samples:
            path = os.path.join(img_dir, f"{s.id}.png")
            save_png(s.image, path)
            clean_path = None
            if s.clean is not None:
                clean_path = os.path.join(img_dir, f"{s.id}.clean.png")
                save_png(s.clean, clean_path)
            row = {
                "id": s.id,
                "labels": {k: bool(getattr(s.labels, k)) for k in LABEL_NAMES},
                "degradation": asdict(s.degradation),
                "path": path,
                "clean_path": clean_path,
            }
            fh.write(json.dumps(row) + "\n")
    return manifest


def load_corpus(manifest_path: str) -> list:
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            row = json.loads(line)
            spec = DegradationSpec(**{
                **row["degradation"],
                "occlusion_boxes": [tuple(b) for b in row["degradation"]["occlusion_boxes"]],
            })
            samples.append(
                FundusSample(
                    image=load_png(row["path"]),
                    labels=ReadabilityLabels(**row["labels"]),
                    degradation=spec,
                    id=row["id"],
                    clean=load_png(row["clean_path"]) if row.get("clean_path") else None,
                )
            )
    return samples


def save_png(image: np.ndarray, path: str) -> None:
    # quantization contract: stored value = round(p * 255) / 255
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0
