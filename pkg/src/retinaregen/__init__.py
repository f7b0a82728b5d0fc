"""RetinaRegen-style hybrid restoration: readability screening,
conditional feature extraction, conditional diffusion, VAE decoding."""

__version__ = "0.1.0"
