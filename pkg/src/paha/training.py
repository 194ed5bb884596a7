"""Training loop for the unified video denoiser with parts-aware loss
re-weighting.

The weighted objective normalises by the total mask mass, so a uniform mask
reproduces the plain noise-prediction MSE exactly and a global rescaling of
the mask leaves the loss unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .network import DenoiserNetwork
from .schedule import NoiseSchedule


def weighted_mse(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mask-weighted squared error, normalised by total mask mass.

    pred/target: [..., F, C, h, w]; weights: [..., F, h, w] broadcast over
    channels. Frames may carry zero weight (conditioning slots), but the
    spatial re-weighting mask itself must be strictly positive.
    """
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    w = weights.unsqueeze(-3)  # broadcast across channels
    num = (w * (pred - target) ** 2).sum()
    den = weights.sum() * pred.shape[-3]
    return num / den


@dataclass
class DiffusionBatch:
    """One training batch in latent space.

    ``videos`` [B, F, C, h, w] clean latents; ``refs`` [B, C, h, w] reference
    latents; ``audio`` [B, F, d] windowed features; ``masks`` [B, F, h, w]
    strictly positive re-weighting maps at latent resolution.
    """

    videos: torch.Tensor
    refs: torch.Tensor
    audio: torch.Tensor
    masks: torch.Tensor


def par_loss(
    net: DenoiserNetwork,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    t: torch.Tensor,
    eps: torch.Tensor,
    conditioned_first: torch.Tensor | None = None,
) -> torch.Tensor:
    """Re-weighted noise-prediction loss for a batch at given steps/noise.

    ``conditioned_first`` is a bool [B] mask; those samples keep a clean
    frame 0 (first-frame conditioning) which is then excluded from the loss,
    as is the reference slot for every sample.
    """
    if batch.masks.min() <= 0:
        raise ValueError("re-weighting mask must be strictly positive")
    b, f, c, h, w = batch.videos.shape
    lam = torch.as_tensor(schedule.lam, dtype=batch.videos.dtype)[t].view(b, 1, 1, 1, 1)
    sig = torch.as_tensor(schedule.sigma, dtype=batch.videos.dtype)[t].view(b, 1, 1, 1, 1)
    z_t = lam * batch.videos + sig * eps

    weights = batch.masks.clone()
    if conditioned_first is not None and conditioned_first.any():
        z_t = z_t.clone()
        z_t[conditioned_first, 0] = batch.videos[conditioned_first, 0]
        weights[conditioned_first, 0] = 0.0

    merged = torch.cat([batch.refs.unsqueeze(1), z_t], dim=1)
    audio_m = torch.cat([torch.zeros_like(batch.audio[:, :1]), batch.audio], dim=1)
    eps_hat = net(merged, audio_m, t)[:, 1:]
    return weighted_mse(eps_hat, eps, weights)


def par_train_step(
    net: DenoiserNetwork,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    first_frame_prob: float = 0.5,
) -> float:
    """One optimisation step on a batch; returns the scalar loss.

    Steps and noise are drawn per sample; a fraction of samples trains in
    first-frame-conditioned mode so the unified input works both ways at
    inference time.
    """
    b = batch.videos.shape[0]
    t = torch.randint(0, schedule.steps, (b,), generator=generator)
    eps = torch.randn(batch.videos.shape, generator=generator)
    cond = torch.rand(b, generator=generator) < first_frame_prob
    loss = par_loss(net, batch, schedule, t, eps, conditioned_first=cond)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def train_diffusion(
    net: DenoiserNetwork,
    videos: torch.Tensor,
    audio: torch.Tensor,
    masks: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int = 500,
    batch_size: int = 8,
    lr: float = 2e-3,
    first_frame_prob: float = 0.5,
    seed: int = 0,
    log_every: int = 0,
) -> list[float]:
    """Train on an in-memory latent dataset; returns the per-step losses.

    The reference latent for each drawn sample is a random frame of the same
    clip, so inference-time reference conditioning (any frame, or a previous
    segment's boundary frame) stays in distribution.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    n = videos.shape[0]
    losses: list[float] = []
    net.train()
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        ref_idx = torch.randint(0, videos.shape[1], (batch_size,), generator=gen)
        batch = DiffusionBatch(
            videos=videos[idx],
            refs=videos[idx, ref_idx],
            audio=audio[idx],
            masks=masks[idx],
        )
        losses.append(
            par_train_step(net, batch, schedule, opt, gen, first_frame_prob=first_frame_prob)
        )
        if log_every and (step + 1) % log_every == 0:
            tail = np.mean(losses[-log_every:])
            print(f"diffusion step {step + 1}/{steps} loss {tail:.4f}")
    net.eval()
    return losses
