"""Convolutional VAE: three strided conv layers down, reparameterized
latent, fully connected + three transposed conv layers up, sigmoid output.

Reconstruction loss is the standard non-negative binary cross-entropy
(sum over pixels by default); the KL term pulls the posterior toward a
standard normal prior. Reductions are configurable (sum|mean).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

LOG_VAR_CLAMP = 20.0
BCE_EPS = 1e-7


@dataclass
class VaeConfig:
    image_size: int = 64
    in_channels: int = 3
    channels: tuple = (32, 64, 128)  # one entry per strided conv layer
    latent_dim: int = 128
    kl_weight: float = 1.0
    reduction: str = "sum"


@dataclass
class LatentParams:
    mu: torch.Tensor  # (batch, latent_dim)
    log_var: torch.Tensor


class Vae(nn.Module):
    def __init__(self, config: VaeConfig = VaeConfig()):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(config.in_channels, c0, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.feat_size = config.image_size // 8
        flat = c2 * self.feat_size**2
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_log_var = nn.Linear(flat, config.latent_dim)
        self.fc_decode = nn.Linear(config.latent_dim, flat)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c0, config.in_channels, 4, stride=2, padding=1),
        )

    def encode(self, x: torch.Tensor) -> LatentParams:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2] != self.config.image_size:
            raise ValueError(f"expected (B, {self.config.in_channels}, {self.config.image_size}, "
                             f"{self.config.image_size}), got {tuple(x.shape)}")
        h = self.encoder(x).flatten(1)
        log_var = torch.clamp(self.fc_log_var(h), -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return LatentParams(mu=self.fc_mu(h), log_var=log_var)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent length {z.shape[-1]} != {self.config.latent_dim}")
        c2 = self.config.channels[-1]
        h = self.fc_decode(z).reshape(-1, c2, self.feat_size, self.feat_size)
        return torch.sigmoid(self.decoder(h))

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Decoder trunk without the output sigmoid (used when the VAE
        serves as an unbounded noise predictor)."""
        c2 = self.config.channels[-1]
        h = self.fc_decode(z).reshape(-1, c2, self.feat_size, self.feat_size)
        return self.decoder(h)

    def forward(self, x, eps=None):
        params = self.encode(x)
        if eps is None:
            eps = torch.randn_like(params.mu)
        z = reparameterize(params, eps)
        return self.decode(z), params


def reparameterize(params: LatentParams, eps: torch.Tensor) -> torch.Tensor:
    return params.mu + eps * torch.exp(params.log_var / 2.0)


def bce_recon_loss(x_hat: torch.Tensor, x: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    x_hat = torch.clamp(x_hat, BCE_EPS, 1.0 - BCE_EPS)
    ll = x * torch.log(x_hat) + (1.0 - x) * torch.log(1.0 - x_hat)
    loss = -ll.sum() if reduction == "sum" else -ll.mean()
    if torch.isnan(loss):
        raise FloatingPointError("NaN in BCE inputs")
    return loss


def kl_loss(params: LatentParams, reduction: str = "sum") -> torch.Tensor:
    term = torch.exp(params.log_var) + params.mu**2 - 1.0 - params.log_var
    return 0.5 * (term.sum() if reduction == "sum" else term.mean())


def vae_loss(x_hat, x, params: LatentParams, kl_weight: float = 1.0, reduction: str = "sum"):
    return bce_recon_loss(x_hat, x, reduction) + kl_weight * kl_loss(params, reduction)
