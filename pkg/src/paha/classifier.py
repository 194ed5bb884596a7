"""Regional audio-visual sync classifiers.

Each classifier reuses the diffusion encoder as its feature trunk (weights
copied from a trained denoiser, then fine-tuned), pools every frame's feature
map to one token with global max pooling, adds modal/temporal embeddings,
prepends a learnable [CLS] token together with the projected audio tokens and
scores the sequence with a small transformer. The sync score is a sigmoid of
an MLP readout of the [CLS] output alone.

Pooling shrinks the transformer input from h*w*t_v + t_a + 1 tokens to
t_v + t_a + 1; rotary phases over (frame, row, column) are written into the
feature map before pooling so spatial layout survives the max.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn

from .network import DenoiserNetwork, VideoEncoder
from .runs import NumericError

KINDS = ("face", "non-face")
PROB_EPS = 1e-7


def rotary_angles(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Phase table for 1D rotary encoding: [len(positions), dim // 2]."""
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float64) * 2.0 / dim)
    return positions.to(torch.float64)[:, None] * freqs[None, :]


def _rotate_half_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs of x [..., d] by angles [..., d//2]."""
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope_3d(feats: torch.Tensor) -> torch.Tensor:
    """Rotary-encode (frame, row, column) positions into a feature map.

    feats: [B, F, c, h, w]. Channels split into three groups, one per axis;
    a remainder smaller than one pair is left unrotated.
    """
    b, f, c, h, w = feats.shape
    group = (c // 3) // 2 * 2  # even-sized per-axis channel group
    if group == 0:
        return feats
    x = feats.permute(0, 1, 3, 4, 2)  # [B, F, h, w, c]
    out = x.clone()
    axes = ((torch.arange(f), 1), (torch.arange(h), 2), (torch.arange(w), 3))
    for gi, (positions, dim_idx) in enumerate(axes):
        lo = gi * group
        ang = rotary_angles(positions, group).to(feats.device)  # [n, group/2]
        shape = [1, 1, 1, 1, group // 2]
        shape[dim_idx] = len(positions)
        out[..., lo : lo + group] = _rotate_half_pairs(
            x[..., lo : lo + group], ang.view(shape)
        )
    return out.permute(0, 1, 4, 2, 3)


class EncodingSet(nn.Module):
    """Learnable modal/temporal embeddings plus the rotary spatial phases.

    Row 0 of ``modal`` marks audio tokens, row 1 visual tokens.
    """

    MODAL_AUDIO = 0
    MODAL_VISUAL = 1

    def __init__(self, width: int, max_video: int = 128, max_audio: int = 128):
        super().__init__()
        self.width = width
        self.max_video = max_video
        self.max_audio = max_audio
        self.modal = nn.Parameter(torch.randn(2, width) * 0.02)
        self.temporal_video = nn.Parameter(torch.randn(max_video, width) * 0.02)
        self.temporal_audio = nn.Parameter(torch.randn(max_audio, width) * 0.02)


def global_max_pool(feats: torch.Tensor) -> torch.Tensor:
    """Spatial max per frame: [B, F, c, h, w] -> [B, F, c]."""
    return feats.amax(dim=(-2, -1))


def encode_video_tokens(
    encoder: VideoEncoder,
    enc: EncodingSet,
    video: torch.Tensor,
    audio: torch.Tensor,
    t: torch.Tensor,
    n_steps: int,
) -> torch.Tensor:
    """One token per frame from the diffusion encoder's feature map.

    video: [B, F, C, h, w] noised latents; audio: [B, F, d] windowed features
    (consumed by the encoder's cross-attention); t: [B] diffusion steps.
    """
    if video.shape[1] > enc.max_video:
        raise ValueError(f"{video.shape[1]} frames exceed capacity {enc.max_video}")
    if torch.any(t < 0) or torch.any(t >= n_steps):
        raise ValueError(f"timestep outside schedule of {n_steps} steps")
    feats = encoder(video, audio, t)  # [B, F, c, h', w']
    pooled = global_max_pool(apply_rope_3d(feats))
    f = pooled.shape[1]
    return pooled + enc.modal[EncodingSet.MODAL_VISUAL] + enc.temporal_video[:f]


def encode_audio_tokens(
    proj: nn.Linear, enc: EncodingSet, audio: torch.Tensor
) -> torch.Tensor:
    """Project per-frame audio features to token width and tag them.

    audio: [B, F, d] -> [B, F, c]. The projection carries no bias, so silent
    audio yields exactly the modal + temporal embedding columns.
    """
    if audio.shape[1] > enc.max_audio:
        raise ValueError(f"{audio.shape[1]} audio rows exceed capacity {enc.max_audio}")
    f = audio.shape[1]
    return proj(audio) + enc.modal[EncodingSet.MODAL_AUDIO] + enc.temporal_audio[:f]


def assemble_sequence(
    v_tokens: torch.Tensor, a_tokens: torch.Tensor, cls: torch.Tensor
) -> torch.Tensor:
    """[CLS] + video tokens + audio tokens -> [B, t_v + t_a + 1, c]."""
    if v_tokens.shape[-1] != a_tokens.shape[-1] or v_tokens.shape[-1] != cls.shape[-1]:
        raise ValueError("token widths differ")
    b = v_tokens.shape[0]
    head = cls.reshape(1, 1, -1).expand(b, 1, -1)
    return torch.cat([head, v_tokens, a_tokens], dim=1)


def bce_loss(s: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on probabilities, clamped away from {0, 1}."""
    s = s.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = y.to(s.dtype)
    return (-(y * torch.log(s) + (1.0 - y) * torch.log(1.0 - s))).mean()


class SyncClassifier(nn.Module):
    """Scores how well a (noised video latent, clean audio) pair lines up."""

    def __init__(
        self,
        latent_channels: int,
        audio_dim: int,
        window: int,
        n_steps: int,
        kind: str = "non-face",
        base_width: int = 48,
        layers: int = 4,
        heads: int = 4,
        encoder_heads: int | None = None,
        max_video: int = 128,
        max_audio: int = 128,
    ):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.kind = kind
        self.n_steps = n_steps
        self.encoder = VideoEncoder(
            latent_channels, audio_dim, window, base_width, encoder_heads or heads
        )
        width = self.encoder.feature_channels
        self.width = width
        self.enc_set = EncodingSet(width, max_video, max_audio)
        self.audio_proj = nn.Linear(audio_dim, width, bias=False)
        self.cls_token = nn.Parameter(torch.randn(width) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=2 * width,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=layers, enable_nested_tensor=False
        )
        self.head = nn.Sequential(
            nn.Linear(width, width), nn.SiLU(), nn.Linear(width, 1)
        )

    @classmethod
    def from_denoiser(cls, net: DenoiserNetwork, kind: str, n_steps: int, **kwargs) -> "SyncClassifier":
        """Build a classifier whose trunk starts from the denoiser's encoder."""
        enc = net.encoder
        obj = cls(
            latent_channels=enc.latent_channels,
            audio_dim=enc.audio_dim,
            window=enc.window,
            n_steps=n_steps,
            kind=kind,
            base_width=enc.base_width,
            encoder_heads=enc.heads,
            **kwargs,
        )
        obj.encoder.load_state_dict(copy.deepcopy(enc.state_dict()))
        return obj

    def forward_tokens(self, video: torch.Tensor, audio: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Final-layer token outputs [B, t_v + t_a + 1, width]."""
        v_tok = encode_video_tokens(self.encoder, self.enc_set, video, audio, t, self.n_steps)
        a_tok = encode_audio_tokens(self.audio_proj, self.enc_set, audio)
        seq = assemble_sequence(v_tok, a_tok, self.cls_token)
        return self.transformer(seq)

    def head_score(self, tokens: torch.Tensor) -> torch.Tensor:
        """Sigmoid score from the [CLS] position only."""
        return torch.sigmoid(self.head(tokens[:, 0]).squeeze(-1))

    def forward(self, video: torch.Tensor, audio: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.head_score(self.forward_tokens(video, audio, t))

    def score(self, video: torch.Tensor, audio: torch.Tensor, t: int) -> torch.Tensor:
        """Single-pair score in (0, 1): video [F, C, h, w], audio [F, d]."""
        tt = torch.as_tensor([int(t)], dtype=torch.long, device=video.device)
        return self(video.unsqueeze(0), audio.unsqueeze(0), tt).squeeze(0)


def sync_gradient(
    classifier: SyncClassifier,
    z: torch.Tensor,
    audio: torch.Tensor,
    t: int,
    region_mask: torch.Tensor,
) -> torch.Tensor:
    """Gradient of log score w.r.t. the latent, zeroed outside the region.

    Returns the ascent direction of the sync score; the guidance loop decides
    the sign it applies. z: [F, C, h, w]; region_mask broadcasts as
    [F, 1, h, w] or [h, w].
    """
    if classifier.training:
        raise RuntimeError("sync_gradient requires the classifier in eval mode")
    z_in = z.detach().clone().requires_grad_(True)
    s = classifier.score(z_in, audio, t)
    log_s = torch.log(s.clamp(PROB_EPS, 1.0 - PROB_EPS))
    (grad,) = torch.autograd.grad(log_s, z_in)
    if not torch.isfinite(grad).all():
        raise NumericError(
            f"non-finite sync gradient at t={t} (score={float(s):.6f}, "
            f"|z|max={float(z.abs().max()):.3f})"
        )
    mask = region_mask.to(grad.dtype)
    if mask.ndim == 2:
        mask = mask.reshape(1, 1, *mask.shape)
    elif mask.ndim == 3:
        mask = mask.unsqueeze(1)  # [F, 1, h, w]
    return grad * mask
