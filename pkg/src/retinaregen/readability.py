"""Multi-label readability classifier: screening before restoration and
re-verification after it. Four sigmoid outputs in the fixed order
(valid, macula, optic_disc, retina).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .imageops import bilinear_resize
from .labels import LABEL_NAMES, ReadabilityLabels

PROB_CLAMP = 1e-7


@dataclass
class ClassifierConfig:
    input_size: int = 224
    channels: int = 3
    base: str = "inception_small"  # or "plain_cnn"
    learning_rate: float = 0.0001
    optimizer: str = "rmsprop"
    epochs: int = 10
    batch_size: int = 16
    class_weights: np.ndarray | None = None  # (4, 2) rows of (w_pos, w_neg)
    width: int = 16
    flip_prob: float = 0.5
    brightness_range: tuple = (0.9, 1.1)
    contrast_range: tuple = (0.9, 1.1)
    seed: int = 0


def preprocess(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to target x target; values stay in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    return np.clip(bilinear_resize(img, target, target), 0.0, 1.0)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    brightness_range=(0.9, 1.1),
    contrast_range=(0.9, 1.1),
) -> np.ndarray:
    """Random horizontal flip plus brightness/contrast jitter, clamped."""
    out = np.asarray(image, dtype=np.float64)
    if rng.random() < flip_prob:
        out = out[:, ::-1, :]
    scale = rng.uniform(*brightness_range)
    contrast = rng.uniform(*contrast_range)
    out = out * scale
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


class InceptionBlock(nn.Module):
    """Parallel 1x1 / 3x3 / 5x5 / pool-project branches, concatenated."""

    def __init__(self, in_c, out_c):
        super().__init__()
        b = out_c // 4
        self.b1 = nn.Conv2d(in_c, b, 1)
        self.b3 = nn.Conv2d(in_c, b, 3, padding=1)
        self.b5 = nn.Conv2d(in_c, b, 5, padding=2)
        self.bp = nn.Conv2d(in_c, out_c - 3 * b, 1)

    def forward(self, x):
        pooled = F.avg_pool2d(x, 3, stride=1, padding=1)
        return F.relu(
            torch.cat([self.b1(x), self.b3(x), self.b5(x), self.bp(pooled)], dim=1)
        )


class ReadabilityModel(nn.Module):
    """Outputs per-label probabilities, shape (batch, 4)."""

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        w = config.width
        if config.base == "inception_small":
            self.features = nn.Sequential(
                InceptionBlock(config.channels, w),
                nn.MaxPool2d(2),
                InceptionBlock(w, 2 * w),
                nn.MaxPool2d(2),
                InceptionBlock(2 * w, 4 * w),
                nn.MaxPool2d(2),
            )
            feat_c = 4 * w
        elif config.base == "plain_cnn":
            self.features = nn.Sequential(
                nn.Conv2d(config.channels, w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
            )
            feat_c = 4 * w
        else:
            raise ValueError(f"unknown base {config.base!r}")
        self.head = nn.Linear(feat_c, 4)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W), got {tuple(x.shape)}")
        h = self.features(x)
        h = h.mean(dim=(-2, -1))  # global average pooling
        return torch.sigmoid(self.head(h))


def weighted_bce_loss(probs: torch.Tensor, targets: torch.Tensor, class_weights) -> torch.Tensor:
    """Mean over batch and labels of w(target) * BCE(p, target);
    class_weights rows are (w_pos, w_neg) per label."""
    if torch.isnan(probs).any() or torch.isnan(targets).any():
        raise FloatingPointError("NaN in BCE inputs")
    p = torch.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    cw = torch.as_tensor(np.asarray(class_weights), dtype=p.dtype, device=p.device)
    w = targets * cw[:, 0] + (1.0 - targets) * cw[:, 1]
    bce = -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p))
    return (w * bce).mean()


def _to_batch(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def train_readability(config: ClassifierConfig, split, samples):
    """Train on split.train, track val loss per epoch. Returns
    (model, history) with history = {"train_loss": [...], "val_loss": [...]}."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = ReadabilityModel(config)
    if config.optimizer != "rmsprop":
        raise ValueError(f"unsupported optimizer {config.optimizer!r}")
    opt = torch.optim.RMSprop(model.parameters(), lr=config.learning_rate)
    weights = config.class_weights
    if weights is None:
        weights = np.ones((4, 2))

    def prepared(idx, train: bool):
        imgs, labs = [], []
        for i in idx:
            img = preprocess(samples[i].image, config.input_size)
            if train:
                img = augment(img, rng, config.flip_prob,
                              config.brightness_range, config.contrast_range)
            imgs.append(img)
            labs.append(samples[i].labels.to_array())
        return _to_batch(imgs), torch.from_numpy(np.stack(labs))

    history = {"train_loss": [], "val_loss": []}
    train_idx = list(split.train)
    for _ in range(config.epochs):
        model.train()
        rng.shuffle(train_idx)
        losses = []
        for s in range(0, len(train_idx), config.batch_size):
            xb, yb = prepared(train_idx[s : s + config.batch_size], train=True)
            opt.zero_grad()
            loss = weighted_bce_loss(model(xb), yb, weights)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["train_loss"].append(float(np.mean(losses)))
        model.eval()
        if split.val:
            with torch.no_grad():
                xv, yv = prepared(list(split.val), train=False)
                history["val_loss"].append(float(weighted_bce_loss(model(xv), yv, weights)))
    model.eval()
    return model, history


def classify(model: ReadabilityModel, image: np.ndarray) -> np.ndarray:
    """Probabilities for a single H x W x 3 image."""
    with torch.no_grad():
        x = _to_batch([preprocess(image, model.config.input_size)])
        return model(x).numpy()[0]


def predict_labels(model: ReadabilityModel, image: np.ndarray, threshold: float = 0.5) -> ReadabilityLabels:
    return ReadabilityLabels.from_array(classify(model, image) >= threshold)


# ---------------------------------------------------------------------------
# Evaluation

def roc_points(scores: np.ndarray, targets: np.ndarray):
    """ROC over 256 evenly spaced thresholds plus the exact score values.
    Returns (fpr, tpr) sorted by ascending fpr, tpr."""
    thresholds = np.unique(np.concatenate([np.linspace(0, 1, 256), scores, [np.inf]]))
    pos = targets == 1
    n_pos, n_neg = pos.sum(), (~pos).sum()
    pts = []
    for th in thresholds:
        pred = scores >= th
        tp = np.sum(pred & pos)
        fp = np.sum(pred & ~pos)
        pts.append((fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0))
    pts.sort()
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def roc_auc(scores: np.ndarray, targets: np.ndarray) -> float | None:
    """Trapezoidal AUC over exact score thresholds; equals the pairwise
    ranking statistic with ties counted 0.5. None if single-class."""
    pos = targets == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    t_sorted = pos[order]
    fpr = [0.0]
    tpr = [0.0]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            tp += bool(t_sorted[j])
            fp += not t_sorted[j]
            j += 1
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        i = j
    return float(np.trapezoid(tpr, fpr))


def pr_points(scores: np.ndarray, targets: np.ndarray):
    thresholds = np.unique(np.concatenate([np.linspace(0, 1, 256), scores]))
    pos = targets == 1
    pts = []
    for th in thresholds:
        pred = scores >= th
        tp = np.sum(pred & pos)
        fp = np.sum(pred & ~pos)
        precision = tp / (tp + fp) if (tp + fp) else 1.0
        recall = tp / pos.sum() if pos.sum() else 0.0
        pts.append((recall, precision))
    pts.sort()
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


@dataclass
class LabelReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list  # [[tn, fp], [fn, tp]]
    auc: float | None
    warning: str | None = None


@dataclass
class ReadabilityReport:
    per_label: dict = field(default_factory=dict)  # name -> LabelReport
    n_samples: int = 0


def evaluate_readability(model: ReadabilityModel, samples, out_dir: str | None = None) -> ReadabilityReport:
    """Threshold-0.5 metrics, confusion matrices, ROC/AUC, PR curves per
    label; optionally writes readability_report.json plus per-label CSVs."""
    if not samples:
        raise ValueError("empty test set")
    with torch.no_grad():
        x = _to_batch([preprocess(s.image, model.config.input_size) for s in samples])
        scores = model(x).numpy()
    targets = np.stack([s.labels.to_array() for s in samples])
    report = ReadabilityReport(n_samples=len(samples))
    for j, name in enumerate(LABEL_NAMES):
        sc, tg = scores[:, j], targets[:, j]
        pred = sc >= 0.5
        pos = tg == 1
        tp = int(np.sum(pred & pos))
        fp = int(np.sum(pred & ~pos))
        fn = int(np.sum(~pred & pos))
        tn = int(np.sum(~pred & ~pos))
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        auc = roc_auc(sc, tg)
        report.per_label[name] = LabelReport(
            accuracy=(tp + tn) / len(samples),
            precision=precision,
            recall=recall,
            f1=f1,
            confusion=[[tn, fp], [fn, tp]],
            auc=auc,
            warning=None if auc is not None else "single-class label; AUC undefined",
        )
        if out_dir:
            fpr, tpr = roc_points(sc, tg)
            with open(os.path.join(out_dir, f"roc_{name}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["fpr", "tpr"])
                w.writerows(zip(fpr, tpr))
            rec, prec = pr_points(sc, tg)
            with open(os.path.join(out_dir, f"pr_{name}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["recall", "precision"])
                w.writerows(zip(rec, prec))
    if out_dir:
        payload = {
            "n_samples": report.n_samples,
            "per_label": {
                k: {
                    "accuracy": v.accuracy, "precision": v.precision,
                    "recall": v.recall, "f1": v.f1,
                    "confusion": v.confusion, "auc": v.auc, "warning": v.warning,
                }
                for k, v in report.per_label.items()
            },
        }
        with open(os.path.join(out_dir, "readability_report.json"), "w") as fh:
            json.dump(payload, fh, indent=2)
    return report
