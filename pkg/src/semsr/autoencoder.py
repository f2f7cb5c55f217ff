"""Convolutional VAE mapping pixels in [0, 1] to a low-resolution latent grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Downsample, ResBlock, Upsample, norm


@dataclass
class AutoencoderConfig:
    downscale_factor: int = 8
    latent_channels: int = 4
    base_width: int = 16
    kl_weight: float = 1e-6
    norm_groups: int = 8
    image_channels: int = 3
    # multiplies encoder means so diffusion latents have roughly unit variance
    scaling_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        f = self.downscale_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downscale_factor must be a power of 2, got {f}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")

    @property
    def num_down(self) -> int:
        return int(math.log2(self.downscale_factor))

    def widths(self) -> list[int]:
        return [self.base_width * min(2 ** i, 2) for i in range(self.num_down + 1)]


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or AutoencoderConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self._build(cfg)
        finally:
            torch.random.set_rng_state(gen_state)

    def _build(self, cfg):
        w, g = cfg.widths(), cfg.norm_groups

        enc = [nn.Conv2d(cfg.image_channels, w[0], 3, padding=1)]
        for i in range(cfg.num_down):
            enc += [ResBlock(w[i], w[i + 1], groups=g), Downsample(w[i + 1])]
        enc += [ResBlock(w[-1], w[-1], groups=g), norm(w[-1], g), nn.SiLU(),
                nn.Conv2d(w[-1], 2 * cfg.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_channels, w[-1], 3, padding=1), ResBlock(w[-1], w[-1], groups=g)]
        for i in reversed(range(cfg.num_down)):
            dec += [Upsample(w[i + 1]), ResBlock(w[i + 1], w[i], groups=g)]
        dec += [norm(w[0], g), nn.SiLU(), nn.Conv2d(w[0], cfg.image_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (mean, logvar) of the latent posterior for images in [0, 1]."""
        f = self.cfg.downscale_factor
        if img.shape[-1] % f or img.shape[-2] % f:
            raise ValueError(f"spatial dims {tuple(img.shape[-2:])} not divisible by {f}")
        if not torch.isfinite(img).all():
            raise ValueError("non-finite input image")
        moments = self.encoder(img * 2.0 - 1.0)
        mean, logvar = moments.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Unclamped reconstruction in [0, 1] units, used for training."""
        if z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} latent channels, got {z.shape[1]}")
        return (self.decoder(z) + 1.0) / 2.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)

    def encode_latent(self, img: torch.Tensor) -> torch.Tensor:
        """Scaled posterior mean, the latent the diffusion model works in."""
        return self.encode(img)[0] * self.cfg.scaling_factor

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode(z / self.cfg.scaling_factor)

    @torch.no_grad()
    def calibrate_scaling(self, images: torch.Tensor) -> float:
        """Set ``scaling_factor`` to 1 / std of the encoder means on ``images``."""
        std = self.encode(images)[0].std().item()
        self.cfg.scaling_factor = 1.0 / max(std, 1e-8)
        return self.cfg.scaling_factor

    def forward(self, img, noise=None):
        mean, logvar = self.encode(img)
        z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise
        return self.decode_raw(z), mean, logvar


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-element mean of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return torch.mean(0.5 * (mean ** 2 + torch.expm1(logvar) - logvar))


def vae_loss(img, mean, logvar, recon, kl_weight: float = 1e-6) -> torch.Tensor:
    recon_term = F.mse_loss(recon, img)
    kl_term = kl_divergence(mean, logvar)
    loss = recon_term + kl_weight * kl_term
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite VAE loss")
    return loss


def train_autoencoder(model: Autoencoder, images: torch.Tensor, steps: int, lr: float = 3e-3,
                      batch_size: int = 8, seed: int = 0, log_every: int = 0,
                      on_epoch=None, cosine: bool = True) -> list[float]:
    """Adam over shuffled mini-batches; returns per-step loss.

    ``on_epoch(epoch)`` is called after each pass over ``images``. With
    ``cosine`` the learning rate decays to a tenth of ``lr`` over ``steps``.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1), eta_min=0.1 * lr) if cosine else None
    losses = []
    n = images.shape[0]
    step = epoch = 0
    model.train()
    while step < steps:
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            batch = images[perm[i:i + batch_size]]
            noise = torch.randn(batch.shape[0], model.cfg.latent_channels,
                                *[s // model.cfg.downscale_factor for s in batch.shape[-2:]],
                                generator=gen, dtype=batch.dtype)
            recon, mean, logvar = model(batch, noise)
            loss = vae_loss(batch, mean, logvar, recon, model.cfg.kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(loss.item())
            step += 1
            if step >= steps:
                break
        epoch += 1
        if on_epoch is not None:
            on_epoch(epoch)
    model.eval()
    return losses
