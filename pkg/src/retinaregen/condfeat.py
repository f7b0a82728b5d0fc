"""Conditional feature extraction: a small residual backbone (with desk-
scale variants of the usual CNN families), 1x1 channel compression with
normalization + ReLU, multi-head self-attention over flattened spatial
tokens, and mean-pooling into a static condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

EXTRACTOR_KINDS = (
    "self_attention_only",
    "alexnet_like",
    "res18",
    "res34",
    "res50",
    "vgg_like",
    "resnext_like",
    "mobilenet_like",
)


@dataclass
class AttentionConfig:
    embed_dim: int = 256
    heads: int = 8

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


@dataclass
class FeatureMap:
    tensor: torch.Tensor  # (channels, h, w)
    provenance: str = ""


@dataclass
class ConditionalFeature:
    map: FeatureMap
    n_sources: int


class ResidualBlock(nn.Module):
    def __init__(self, in_c, out_c, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_c, out_c, 1, stride=stride)
            if (stride != 1 or in_c != out_c)
            else nn.Identity()
        )

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(h + self.skip(x))


class BottleneckBlock(nn.Module):
    def __init__(self, in_c, out_c, stride=1, groups=1):
        super().__init__()
        mid = max(out_c // 4, 4)
        self.conv1 = nn.Conv2d(in_c, mid, 1)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=groups)
        self.conv3 = nn.Conv2d(mid, out_c, 1)
        self.skip = (
            nn.Conv2d(in_c, out_c, 1, stride=stride)
            if (stride != 1 or in_c != out_c)
            else nn.Identity()
        )

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = self.conv3(h)
        return F.relu(h + self.skip(x))


class DepthwiseBlock(nn.Module):
    def __init__(self, in_c, out_c, stride=1):
        super().__init__()
        self.dw = nn.Conv2d(in_c, in_c, 3, stride=stride, padding=1, groups=in_c)
        self.pw = nn.Conv2d(in_c, out_c, 1)

    def forward(self, x):
        return F.relu(self.pw(F.relu(self.dw(x))))


def _residual_stages(widths, blocks, block_cls=ResidualBlock, groups=1):
    layers = []
    in_c = widths[0]
    for stage, (w, n) in enumerate(zip(widths[1:], blocks)):
        for b in range(n):
            stride = 2 if (b == 0 and stage > 0) else 1
            if block_cls is BottleneckBlock:
                layers.append(block_cls(in_c, w, stride=stride, groups=groups))
            else:
                layers.append(block_cls(in_c, w, stride=stride))
            in_c = w
    return nn.Sequential(*layers)


def make_backbone(kind: str, out_channels: int) -> nn.Module:
    """Desk-scale analogue of the named family; total stride 4 for all
    kinds, tapped at the third stage."""
    if kind not in EXTRACTOR_KINDS:
        raise ValueError(f"unknown extractor kind {kind!r}")
    w = max(out_channels // 4, 8)
    stem = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU())
    widths = (w, w, 2 * w, out_channels)
    if kind == "self_attention_only":
        return nn.Sequential(
            nn.Conv2d(3, out_channels, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1),
            nn.ReLU(),
        )
    if kind == "alexnet_like":
        return nn.Sequential(
            nn.Conv2d(3, w, 7, stride=2, padding=3),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(2 * w, out_channels, 3, padding=1),
            nn.ReLU(),
        )
    if kind == "vgg_like":
        return nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, out_channels, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
        )
    if kind == "mobilenet_like":
        return nn.Sequential(
            stem,
            DepthwiseBlock(w, 2 * w, stride=2),
            DepthwiseBlock(2 * w, out_channels, stride=2),
        )
    if kind == "resnext_like":
        return nn.Sequential(stem, _residual_stages(widths, (1, 1, 1), BottleneckBlock, groups=4))
    if kind == "res50":
        return nn.Sequential(stem, _residual_stages(widths, (1, 2, 1), BottleneckBlock))
    if kind == "res18":
        return nn.Sequential(stem, _residual_stages(widths, (1, 1, 1)))
    # res34: deeper layout of the same residual stages
    return nn.Sequential(stem, _residual_stages(widths, (2, 3, 2)))


class ChannelCompressor(nn.Module):
    """1x1 conv to the embedding width, per-channel standardization over
    spatial positions (eps = 1e-5), then ReLU."""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        if in_channels < embed_dim:
            raise ValueError(f"cannot compress {in_channels} channels to {embed_dim}")
        self.proj = nn.Conv2d(in_channels, embed_dim, 1)

    def forward(self, x):
        h = self.proj(x)
        mu = h.mean(dim=(-2, -1), keepdim=True)
        var = h.var(dim=(-2, -1), unbiased=False, keepdim=True)
        return F.relu((h - mu) / torch.sqrt(var + 1e-5))


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over flattened h*w tokens, added
    residually onto the input map."""

    def __init__(self, config: AttentionConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax weights, shape (batch, heads, tokens, tokens)."""
        tokens = self._tokens(x)
        q, k, _ = self._qkv(tokens)
        d_head = self.config.embed_dim // self.config.heads
        scores = q @ k.transpose(-2, -1) / math.sqrt(d_head)
        return torch.softmax(scores, dim=-1)

    def _tokens(self, x):
        b, c, h, w = x.shape
        if c != self.config.embed_dim:
            raise ValueError(f"expected {self.config.embed_dim} channels, got {c}")
        return x.flatten(2).transpose(1, 2)  # (b, h*w, c)

    def _qkv(self, tokens):
        b, n, d = tokens.shape
        heads = self.config.heads
        d_head = d // heads
        def split(t):
            return t.reshape(b, n, heads, d_head).transpose(1, 2)
        return split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self._tokens(x)
        q, k, v = self._qkv(tokens)
        d_head = c // self.config.heads
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d_head), dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.out(attended)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ConditionalFeatureExtractor(nn.Module):
    def __init__(
        self,
        kind: str = "res34",
        attention: AttentionConfig = AttentionConfig(),
        backbone_channels: int | None = None,
    ):
        super().__init__()
        self.kind = kind
        channels = backbone_channels or attention.embed_dim
        self.backbone = make_backbone(kind, channels)
        self.compress = ChannelCompressor(channels, attention.embed_dim)
        self.attn = MultiHeadSelfAttention(attention)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (batch, 3, H, W) -> attention-enhanced maps
        (batch, embed_dim, H/4, W/4)."""
        return self.attn(self.compress(self.backbone(images)))


def build_static_condition(extractor, images: torch.Tensor) -> ConditionalFeature:
    """Elementwise mean of per-image enhanced maps; order-independent."""
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError("need at least one readable image, batched (N, 3, H, W)")
    maps = extractor(images)
    pooled = maps.mean(dim=0)
    return ConditionalFeature(
        map=FeatureMap(tensor=pooled, provenance="pooled"), n_sources=images.shape[0]
    )
