"""Latent codecs mapping pixel videos to the compact space the diffusion
model works in.

``PatchifyCodec`` is an exact, parameter-free space-to-depth transform used
by unit tests (factor 1 gives the identity). ``ConvAutoencoder`` is the small
trained codec used by the pipeline: three stride-2 stages for an 8x spatial
reduction, trained with plain reconstruction loss, with a global latent scale
so diffusion sees roughly unit-variance latents.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class PatchifyCodec(nn.Module):
    """Lossless block rearrangement: [F, C, H, W] -> [F, C*s*s, H/s, W/s]."""

    def __init__(self, factor: int = 8, channels: int = 3):
        super().__init__()
        self.factor = factor
        self.channels = channels
        self.latent_channels = channels * factor * factor
        self.latent_scale = 1.0

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        s = self.factor
        f, c, h, w = frames.shape
        if h % s or w % s:
            raise ValueError(f"frame size {(h, w)} not divisible by {s}")
        x = frames.reshape(f, c, h // s, s, w // s, s)
        return x.permute(0, 1, 3, 5, 2, 4).reshape(f, c * s * s, h // s, w // s)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        s = self.factor
        f, cs, h, w = latents.shape
        c = cs // (s * s)
        x = latents.reshape(f, c, s, s, h, w)
        return x.permute(0, 1, 4, 2, 5, 3).reshape(f, c, h * s, w * s)


class ConvAutoencoder(nn.Module):
    """8x-downsampling convolutional autoencoder over individual frames."""

    def __init__(self, latent_channels: int = 8, width: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.width = width
        self.latent_scale = 1.0
        act = nn.SiLU()
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), act,
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), act,
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1), act,
            nn.Conv2d(width * 2, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, width * 2, 3, padding=1), act,
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width * 2, width * 2, 3, padding=1), act,
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width * 2, width, 3, padding=1), act,
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.enc(frames) / self.latent_scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.dec(latents * self.latent_scale)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.dec(self.enc(frames))


def train_codec(
    codec: ConvAutoencoder,
    frames: torch.Tensor,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 0,
) -> list[float]:
    """Fit the autoencoder on a stack of frames [N, 3, H, W].

    After training, ``latent_scale`` is set to the per-element latent std so
    encoded videos are roughly unit variance.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    losses = []
    codec.train()
    for step in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        batch = frames[idx]
        recon = codec(batch)
        loss = F.mse_loss(recon, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"codec step {step + 1}/{steps} loss {loss.item():.5f}")
    codec.eval()
    with torch.no_grad():
        sample = frames[: min(64, frames.shape[0])]
        lat = codec.enc(sample)
        codec.latent_scale = float(lat.std().clamp_min(1e-6))
    return losses
