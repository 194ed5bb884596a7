"""Deterministic latent-video sampling.

The solver performs plain DDIM updates (no stochastic term) over an
inference sub-schedule. Conditioning slots, the reference latent and, in
first-frame mode, video frame 0, are re-pinned to their clean values after
every update so they survive the whole trajectory bit-exactly. All solver
invocations run through one instrumented entry point so call counts and wall
times can be reported per run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .network import DenoiserNetwork, merge_reference
from .runs import NumericError
from .schedule import InferenceSchedule


@dataclass
class UnifiedInput:
    """Initial sampler state: pure noise, or noise with frame 0 conditioned."""

    video: torch.Tensor  # [F, C, h, w]
    mode: str  # "noise" | "first-frame"
    first_frame: torch.Tensor | None = None


def make_unified_input(
    frames: int,
    channels: int,
    height: int,
    width: int,
    seed: int,
    first_frame: torch.Tensor | None = None,
) -> UnifiedInput:
    """Draw the initial noise video, optionally pinning frame 0 to a latent."""
    gen = torch.Generator().manual_seed(seed)
    video = torch.randn(frames, channels, height, width, generator=gen)
    if first_frame is None:
        return UnifiedInput(video=video, mode="noise")
    if first_frame.shape != video.shape[1:]:
        raise ValueError(
            f"first frame {tuple(first_frame.shape)} does not match {tuple(video.shape[1:])}"
        )
    video[0] = first_frame
    return UnifiedInput(video=video, mode="first-frame", first_frame=first_frame.clone())


def ddim_step(
    z: torch.Tensor,
    eps: torch.Tensor,
    lam_cur: float,
    sig_cur: float,
    lam_prev: float,
    sig_prev: float,
) -> torch.Tensor:
    """One deterministic update: denoise to x0, re-noise at the next level."""
    x0_hat = (z - sig_cur * eps) / lam_cur
    return lam_prev * x0_hat + sig_prev * eps


@dataclass
class SolverStats:
    solver_calls: int = 0
    gradient_calls: int = 0
    guided_steps: int = 0
    step_seconds: list[float] = field(default_factory=list)


class Sampler:
    """Stateful DDIM solver for one conditioned video."""

    def __init__(
        self,
        net: DenoiserNetwork,
        inference: InferenceSchedule,
        reference: torch.Tensor,  # [C, h, w] clean reference latent
        audio: torch.Tensor,  # [F, d] windowed per-frame features
        first_frame: torch.Tensor | None = None,
    ):
        self.net = net
        self.inference = inference
        self.reference = reference
        self.first_frame = first_frame
        # conditioning slot for the reference gets a silent audio row
        self.audio_merged = torch.cat([torch.zeros_like(audio[:1]), audio], dim=0)
        self.stats = SolverStats()

    def pin(self, video: torch.Tensor) -> torch.Tensor:
        """Re-inject conditioned frames into a video latent."""
        if self.first_frame is not None:
            video = video.clone()
            video[0] = self.first_frame
        return video

    def solve(self, video: torch.Tensor, level: int) -> torch.Tensor:
        """Advance a video latent from ``level`` to ``level - 1``."""
        inf = self.inference
        t_in = inf.level_step(level)  # also validates the range
        video = self.pin(video)
        merged = merge_reference(self.reference, video)
        start = time.perf_counter()
        with torch.no_grad():
            eps = self.net(
                merged.unsqueeze(0),
                self.audio_merged.unsqueeze(0),
                torch.as_tensor([t_in], dtype=torch.long),
            ).squeeze(0)
        out = ddim_step(
            video,
            eps[1:],
            float(inf.lam[level]),
            float(inf.sigma[level]),
            float(inf.lam[level - 1]),
            float(inf.sigma[level - 1]),
        )
        self.stats.solver_calls += 1
        self.stats.step_seconds.append(time.perf_counter() - start)
        out = self.pin(out)
        if not torch.isfinite(out).all():
            raise NumericError(
                f"solver produced non-finite latents at level {level} (t={t_in})"
            )
        return out

    def plain_trajectory(self, video: torch.Tensor) -> torch.Tensor:
        """Run the full unguided chain from the noisiest level to clean."""
        for level in range(self.inference.n_steps, 0, -1):
            video = self.solve(video, level)
        return video
