"""Unified video denoiser: one network sees the reference latent and the
noisy video frames stacked along time, so no separate reference branch is
needed.

Layout convention is [B, F, C, h, w]. Spatial convolutions fold frames into
the batch; temporal attention mixes frames at each spatial position; audio
cross-attention lets every spatial token attend over the frame's windowed
audio features. The encoder half is a standalone module because the
audio-visual classifiers reuse it (weights copied, then fine-tuned).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

_NORM_GROUPS = 8


@dataclass
class LatentVideo:
    """A latent-space video clip."""

    data: torch.Tensor  # [F, C, h, w]
    frame_rate: float = 25.0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"latent video must be [F>=1, C, h, w], got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent video contains non-finite values")


def merge_reference(ref: torch.Tensor, video: torch.Tensor) -> torch.Tensor:
    """Stack the reference latent in front of the video frames.

    [C, h, w] + [F, C, h, w] -> [F+1, C, h, w], slot 0 holding the reference.
    """
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"video must be [F>=1, C, h, w], got {tuple(video.shape)}")
    if ref.shape != video.shape[1:]:
        raise ValueError(f"reference {tuple(ref.shape)} does not match frames {tuple(video.shape[1:])}")
    return torch.cat([ref.unsqueeze(0), video], dim=0)


def split_reference(merged: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of :func:`merge_reference`."""
    if merged.ndim != 4 or merged.shape[0] < 2:
        raise ValueError("merged latent must hold a reference plus at least one frame")
    return merged[0], merged[1:]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps, [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(device=t.device, dtype=torch.get_default_dtype())
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb.to(t.device)


class FiLMResBlock(nn.Module):
    """Spatial residual block with timestep scale/shift conditioning."""

    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_NORM_GROUPS, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_NORM_GROUPS, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.film = nn.Linear(t_dim, 2 * c_out)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        # x: [BF, C, h, w], t_emb: [BF, t_dim]
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.film(t_emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(self.act(h))
        return self.skip(x) + h


class TemporalAttention(nn.Module):
    """Self-attention across frames, independently per spatial position."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, F, C, h, w]
        b, f, c, h, w = x.shape
        tok = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, f, c)
        y = self.norm(tok)
        y, _ = self.attn(y, y, y, need_weights=False)
        tok = tok + y
        return tok.reshape(b, h, w, f, c).permute(0, 3, 4, 1, 2)


class AudioCrossAttention(nn.Module):
    """Spatial tokens attend over their frame's windowed audio tokens."""

    def __init__(self, channels: int, audio_width: int, heads: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=audio_width, vdim=audio_width, batch_first=True
        )

    def forward(self, x: torch.Tensor, audio_tokens: torch.Tensor) -> torch.Tensor:
        # x: [B, F, C, h, w]; audio_tokens: [B, F, n_tok, audio_width]
        b, f, c, h, w = x.shape
        q = x.permute(0, 1, 3, 4, 2).reshape(b * f, h * w, c)
        kv = audio_tokens.reshape(b * f, audio_tokens.shape[2], audio_tokens.shape[3])
        y, _ = self.attn(self.norm(q), kv, kv, need_weights=False)
        q = q + y
        return q.reshape(b, f, h, w, c).permute(0, 1, 4, 2, 3)


class UnifiedBlock(nn.Module):
    """Spatial ResBlock + temporal attention + audio cross-attention."""

    def __init__(self, c_in: int, c_out: int, t_dim: int, audio_width: int, heads: int):
        super().__init__()
        self.res = FiLMResBlock(c_in, c_out, t_dim)
        self.temporal = TemporalAttention(c_out, heads)
        self.audio = AudioCrossAttention(c_out, audio_width, heads)

    def forward(self, x, t_emb, audio_tokens):
        b, f, c, h, w = x.shape
        y = self.res(x.reshape(b * f, c, h, w), t_emb.repeat_interleave(f, dim=0))
        y = y.reshape(b, f, -1, h, w)
        y = self.temporal(y)
        y = self.audio(y, audio_tokens)
        return y


class VideoEncoder(nn.Module):
    """Encoder half of the denoiser; also the classifiers' feature trunk.

    Produces [B, F, 2*width, h/2, w/2] features from a noisy latent video,
    its windowed audio track and a diffusion step index.
    """

    def __init__(
        self,
        latent_channels: int,
        audio_dim: int,
        window: int,
        base_width: int = 48,
        heads: int = 4,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.audio_dim = audio_dim
        self.window = window
        self.base_width = base_width
        self.heads = heads
        self.feature_channels = base_width * 2
        t_dim = base_width * 2
        self.t_dim = t_dim
        audio_width = base_width

        self.time_mlp = nn.Sequential(
            nn.Linear(base_width, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )
        n_tok = 2 * window + 1
        if audio_dim % n_tok:
            raise ValueError(
                f"windowed audio dim {audio_dim} not divisible by {n_tok} window slots"
            )
        self.audio_proj = nn.Linear(audio_dim // n_tok, audio_width)
        self.in_conv = nn.Conv2d(latent_channels, base_width, 3, padding=1)
        self.block1 = UnifiedBlock(base_width, base_width, t_dim, audio_width, heads)
        self.down = nn.Conv2d(base_width, base_width, 3, stride=2, padding=1)
        self.block2 = UnifiedBlock(base_width, self.feature_channels, t_dim, audio_width, heads)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        w = self.time_mlp[0].weight
        emb = timestep_embedding(t, self.base_width).to(dtype=w.dtype, device=w.device)
        return self.time_mlp(emb)

    def embed_audio(self, audio: torch.Tensor) -> torch.Tensor:
        # audio: [B, F, (2m+1)*d_a] -> [B, F, 2m+1, audio_width]
        b, f, d = audio.shape
        n_tok = 2 * self.window + 1
        return self.audio_proj(audio.reshape(b, f, n_tok, d // n_tok))

    def forward(self, z, audio, t, return_skip: bool = False):
        """z: [B, F, C, h, w]; audio: [B, F, (2m+1)*d_a]; t: [B] int steps."""
        if audio.shape[1] != z.shape[1]:
            raise ValueError(
                f"audio covers {audio.shape[1]} frames but video has {z.shape[1]}"
            )
        b, f, c, h, w = z.shape
        t_emb = self.embed_time(t)
        tokens = self.embed_audio(audio)
        x = self.in_conv(z.reshape(b * f, c, h, w)).reshape(b, f, -1, h, w)
        x1 = self.block1(x, t_emb, tokens)
        xd = self.down(x1.reshape(b * f, -1, h, w)).reshape(b, f, -1, h // 2, w // 2)
        x2 = self.block2(xd, t_emb, tokens)
        if return_skip:
            return x2, x1, t_emb, tokens
        return x2


class DenoiserNetwork(nn.Module):
    """Noise predictor over merged (reference + video) latent stacks."""

    def __init__(
        self,
        latent_channels: int,
        audio_dim: int,
        window: int = 2,
        base_width: int = 48,
        heads: int = 4,
    ):
        super().__init__()
        self.encoder = VideoEncoder(latent_channels, audio_dim, window, base_width, heads)
        w2 = self.encoder.feature_channels
        t_dim = self.encoder.t_dim
        audio_width = base_width
        self.mid = UnifiedBlock(w2, w2, t_dim, audio_width, heads)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec = UnifiedBlock(w2 + base_width, base_width, t_dim, audio_width, heads)
        self.out_norm = nn.GroupNorm(_NORM_GROUPS, base_width)
        self.out_conv = nn.Conv2d(base_width, latent_channels, 3, padding=1)

    @property
    def latent_channels(self) -> int:
        return self.encoder.latent_channels

    def forward(self, z: torch.Tensor, audio: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = z.shape
        if h % 2 or w % 2:
            raise ValueError(f"latent size {(h, w)} must be even")
        x2, x1, t_emb, tokens = self.encoder(z, audio, t, return_skip=True)
        xm = self.mid(x2, t_emb, tokens)
        xu = self.up(xm.reshape(b * f, -1, h // 2, w // 2)).reshape(b, f, -1, h, w)
        xc = torch.cat([xu, x1], dim=2)
        xo = self.dec(xc, t_emb, tokens)
        y = self.out_conv(torch.nn.functional.silu(self.out_norm(xo.reshape(b * f, -1, h, w))))
        return y.reshape(b, f, c, h, w)


def predict_noise(
    net: DenoiserNetwork, z: torch.Tensor, audio: torch.Tensor, t: int | torch.Tensor
) -> torch.Tensor:
    """Single-video noise prediction: z [F, C, h, w], audio [F, d] -> [F, C, h, w]."""
    if z.shape[0] != audio.shape[0]:
        raise ValueError(f"video has {z.shape[0]} frames, audio {audio.shape[0]}")
    tt = torch.as_tensor([int(t)], dtype=torch.long, device=z.device)
    return net(z.unsqueeze(0), audio.unsqueeze(0), tt).squeeze(0)
