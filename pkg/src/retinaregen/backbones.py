"""Noise-prediction backbones: U-Net, U-Net++, residual/dense U-Net
variants, and a VAE trunk used as the denoiser. Every model maps
(x, t) -> predicted noise with the same shape as x; the timestep enters
through a sinusoidal embedding added at each stage.
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from .vae import Vae, VaeConfig, reparameterize

BACKBONE_KINDS = ("unet", "unet_pp", "resnet_unet", "densenet_unet", "vae")

TIME_EMBED_DIM = 32


def sinusoidal_time_embedding(t, dim: int = TIME_EMBED_DIM, device=None) -> torch.Tensor:
    """(batch, dim) embedding of integer timesteps."""
    t = torch.as_tensor(t, dtype=torch.float32, device=device).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ConvBlock(nn.Module):
    """Two 3x3 convs with a per-stage time bias."""

    def __init__(self, in_c, out_c):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.time = nn.Linear(TIME_EMBED_DIM, out_c)

    def forward(self, x, temb):
        h = F.relu(self.conv1(x))
        h = h + self.time(temb)[:, :, None, None]
        return F.relu(self.conv2(h))


class ResBlock(nn.Module):
    def __init__(self, in_c, out_c):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, padding=1)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, padding=1)
        self.time = nn.Linear(TIME_EMBED_DIM, out_c)
        self.skip = nn.Conv2d(in_c, out_c, 1) if in_c != out_c else nn.Identity()

    def forward(self, x, temb):
        h = F.relu(self.conv1(x))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(h)
        return F.relu(h + self.skip(x))


class DenseBlock(nn.Module):
    """Two growth steps with channel concatenation, then a 1x1 transition."""

    def __init__(self, in_c, out_c):
        super().__init__()
        growth = max(out_c // 2, 8)
        self.conv1 = nn.Conv2d(in_c, growth, 3, padding=1)
        self.conv2 = nn.Conv2d(in_c + growth, growth, 3, padding=1)
        self.trans = nn.Conv2d(in_c + 2 * growth, out_c, 1)
        self.time = nn.Linear(TIME_EMBED_DIM, growth)

    def forward(self, x, temb):
        h1 = F.relu(self.conv1(x)) + self.time(temb)[:, :, None, None]
        cat1 = torch.cat([x, h1], dim=1)
        h2 = F.relu(self.conv2(cat1))
        return F.relu(self.trans(torch.cat([cat1, h2], dim=1)))


class EncoderDecoderDenoiser(nn.Module):
    """Two-level U-Net skeleton; the block class sets the variant."""

    def __init__(self, block_cls, width: int = 32, in_channels: int = 3):
        super().__init__()
        w = width
        self.enc1 = block_cls(in_channels, w)
        self.enc2 = block_cls(w, 2 * w)
        self.mid = block_cls(2 * w, 2 * w)
        self.dec2 = block_cls(4 * w, w)
        self.dec1 = block_cls(2 * w, w)
        self.out = nn.Conv2d(w, in_channels, 1)

    def forward(self, x, t):
        temb = sinusoidal_time_embedding(t, device=x.device)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = temb.expand(x.shape[0], -1)
        e1 = self.enc1(x, temb)
        e2 = self.enc2(F.avg_pool2d(e1, 2), temb)
        m = self.mid(F.avg_pool2d(e2, 2), temb)
        u2 = F.interpolate(m, scale_factor=2, mode="nearest")
        d2 = self.dec2(torch.cat([u2, e2], dim=1), temb)
        u1 = F.interpolate(d2, scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([u1, e1], dim=1), temb)
        return self.out(d1)


class UNetPlusPlusDenoiser(nn.Module):
    """Depth-2 nested U-Net: dense skip node x01 re-convolves the
    (x00, up(x10)) pair before the final decoder node."""

    def __init__(self, width: int = 32, in_channels: int = 3):
        super().__init__()
        w = width
        self.x00 = ConvBlock(in_channels, w)
        self.x10 = ConvBlock(w, 2 * w)
        self.x20 = ConvBlock(2 * w, 2 * w)
        self.x01 = ConvBlock(3 * w, w)
        self.x11 = ConvBlock(4 * w, 2 * w)
        self.x02 = ConvBlock(4 * w, w)
        self.out = nn.Conv2d(w, in_channels, 1)

    def forward(self, x, t):
        temb = sinusoidal_time_embedding(t, device=x.device)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = temb.expand(x.shape[0], -1)
        up = lambda z: F.interpolate(z, scale_factor=2, mode="nearest")
        x00 = self.x00(x, temb)
        x10 = self.x10(F.avg_pool2d(x00, 2), temb)
        x20 = self.x20(F.avg_pool2d(x10, 2), temb)
        x01 = self.x01(torch.cat([x00, up(x10)], dim=1), temb)
        x11 = self.x11(torch.cat([x10, up(x20)], dim=1), temb)
        x02 = self.x02(torch.cat([x00, x01, up(x11)], dim=1), temb)
        return self.out(x02)


class VaeDenoiser(nn.Module):
    """Noise predictor routed through the VAE trunk: conditioned noisy
    input -> encoder -> reparameterized latent -> raw decoder output as a
    clean-signal estimate s, from which the noise estimate follows via the
    forward-corruption identity eps = (x - sqrt(abar_t) s) / sqrt(1 - abar_t).
    A latent bottleneck cannot represent per-pixel noise directly, but the
    clean signal is compressible, so this keeps the trunk learnable.

    `last_params` keeps the most recent posterior so the training loop can
    add the KL term; at eval time the latent uses the posterior mean."""

    def __init__(self, vae_config: VaeConfig, alpha_bar=None):
        super().__init__()
        self.vae = Vae(vae_config)
        self.time = nn.Linear(TIME_EMBED_DIM, vae_config.latent_dim)
        self.last_params = None
        self.alpha_bar = None if alpha_bar is None else torch.as_tensor(
            alpha_bar, dtype=torch.float32)

    def set_schedule(self, alpha_bar) -> None:
        self.alpha_bar = torch.as_tensor(alpha_bar, dtype=torch.float32)

    def forward(self, x, t):
        if self.alpha_bar is None:
            raise RuntimeError("VaeDenoiser needs set_schedule() before use")
        temb = sinusoidal_time_embedding(t, device=x.device)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = temb.expand(x.shape[0], -1)
        params = self.vae.encode(x)
        self.last_params = params
        if self.training:
            eps = torch.randn_like(params.mu)
            z = reparameterize(params, eps)
        else:
            z = params.mu
        z = z + self.time(temb)
        signal = self.vae.decode_raw(z)
        t_idx = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        abar = self.alpha_bar[t_idx].reshape(-1, 1, 1, 1).to(x.dtype)
        return (x - torch.sqrt(abar) * signal) / torch.sqrt(1.0 - abar).clamp_min(1e-6)


def make_denoiser(kind: str, image_size: int, width: int = 32, in_channels: int = 3) -> nn.Module:
    if kind == "unet":
        return EncoderDecoderDenoiser(ConvBlock, width, in_channels)
    if kind == "unet_pp":
        return UNetPlusPlusDenoiser(width, in_channels)
    if kind == "resnet_unet":
        return EncoderDecoderDenoiser(ResBlock, width, in_channels)
    if kind == "densenet_unet":
        return EncoderDecoderDenoiser(DenseBlock, width, in_channels)
    if kind == "vae":
        cfg = VaeConfig(
            image_size=image_size,
            in_channels=in_channels,
            channels=(width, 2 * width, 4 * width),
            latent_dim=4 * width,
        )
        return VaeDenoiser(cfg)
    raise ValueError(f"unknown backbone kind {kind!r}; expected one of {BACKBONE_KINDS}")
