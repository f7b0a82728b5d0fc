"""Fusion of the static condition map with the diffusion state: channel
projection, resolution matching (bilinear or learned upsampling), and
static or dynamic weighted addition.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

STRATEGY_KEYS = (
    "upsample_static",
    "upsample_dynamic",
    "bilinear_static",
    "bilinear_dynamic",
)


@dataclass(frozen=True)
class FusionStrategy:
    resize: str  # learned_upsample | bilinear
    weighting: str  # static | dynamic

    @classmethod
    def from_key(cls, key: str) -> "FusionStrategy":
        if key not in STRATEGY_KEYS:
            raise ValueError(f"unknown fusion strategy {key!r}; expected one of {STRATEGY_KEYS}")
        resize, weighting = key.split("_")
        return cls(resize="bilinear" if resize == "bilinear" else "learned_upsample",
                   weighting=weighting)

    @property
    def key(self) -> str:
        prefix = "bilinear" if self.resize == "bilinear" else "upsample"
        return f"{prefix}_{self.weighting}"


def match_resolution(c_map: torch.Tensor, target_hw, mode: str = "bilinear",
                     upsampler: nn.Module | None = None) -> torch.Tensor:
    """Resize a (B, C, h, w) map to target spatial dims. Bilinear mode is
    parameter-free; learned mode applies the provided transposed-conv
    upsampler then bilinear-trims to the exact target."""
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ValueError(f"invalid target {target_hw}")
    if mode == "bilinear":
        if c_map.shape[-2:] == (th, tw):
            return c_map
        return F.interpolate(c_map, size=(th, tw), mode="bilinear", align_corners=False)
    if mode == "learned_upsample":
        if upsampler is None:
            raise ValueError("learned_upsample mode requires an upsampler module")
        out = upsampler(c_map)
        if out.shape[-2:] != (th, tw):
            out = F.interpolate(out, size=(th, tw), mode="bilinear", align_corners=False)
        return out
    raise ValueError(f"unknown resize mode {mode!r}")


def fuse(c_matched: torch.Tensor, x: torch.Tensor, w_c, w_x) -> torch.Tensor:
    if c_matched.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(c_matched.shape)} vs {tuple(x.shape)}")
    return w_c * c_matched + w_x * x


class ConditionFuser(nn.Module):
    """Projects the condition to image channels, matches resolution, and
    adds it onto the diffusion state with static (1, 1) or learned-gate
    weights."""

    def __init__(self, strategy: FusionStrategy, cond_channels: int, image_channels: int = 3):
        super().__init__()
        self.strategy = strategy
        self.project = nn.Conv2d(cond_channels, image_channels, 1)
        if strategy.resize == "learned_upsample":
            self.upsampler = nn.Sequential(
                nn.ConvTranspose2d(image_channels, image_channels, 4, stride=2, padding=1),
                nn.ReLU(),
                nn.ConvTranspose2d(image_channels, image_channels, 4, stride=2, padding=1),
            )
        else:
            self.upsampler = None
        if strategy.weighting == "dynamic":
            self.gate = nn.Parameter(torch.zeros(()))
        else:
            self.gate = None

    def weights(self):
        if self.gate is None:
            return 1.0, 1.0
        w_c = torch.sigmoid(self.gate)
        return w_c, 1.0 - w_c

    def forward(self, c_map: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """c_map: (C, h, w) or (B, C, h, w); x: (B, 3, H, W)."""
        if c_map.ndim == 3:
            c_map = c_map.unsqueeze(0)
        c = self.project(c_map)
        c = match_resolution(c, x.shape[-2:], mode=self.strategy.resize,
                             upsampler=self.upsampler)
        if c.shape[0] == 1 and x.shape[0] > 1:
            c = c.expand(x.shape[0], -1, -1, -1)
        w_c, w_x = self.weights()
        return fuse(c, x, w_c, w_x)
