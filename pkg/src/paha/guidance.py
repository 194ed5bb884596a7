"""Classifier-guided sampling: sequential and differential modes.

A guided step advances the latent one level with the solver, then pushes it
along the (masked) score-ascent directions of the non-face and face
classifiers in that order, composing the two singly-guided states as
``star = face + nonface - base``. Sequential guidance feeds ``star`` into
the next solver advance (one solver call per guided step). Differential
guidance instead advances all three chain states and recombines them,
compensating each classifier's spill-over into the other's region at the
cost of three solver calls per guided step.

Guided steps always occupy the noisiest end of the trajectory: the first
``ceil(rate * n_steps)`` advances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .classifier import SyncClassifier, sync_gradient
from .runs import MissingArtifactError
from .sampler import Sampler, make_unified_input
from .schedule import InferenceSchedule


@dataclass
class GuidanceConfig:
    mode: str = "off"  # off | sg | dg
    rate: float = 0.5
    n_steps: int = 20
    lambda_face: float = 0.1
    lambda_nonface: float = 1.0
    lambda_diff: float = 0.25
    sign: str = "ascend"  # ascend raises the classifier score
    dg_strict_noop: bool = False  # rescale DG output by 1/(1+lambda_diff)

    def __post_init__(self):
        if self.mode not in ("off", "sg", "dg"):
            raise ValueError(f"mode must be off|sg|dg, got {self.mode!r}")
        if self.sign not in ("ascend", "descend"):
            raise ValueError(f"sign must be ascend|descend, got {self.sign!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")

    def guided_steps(self) -> int:
        if self.mode == "off":
            return 0
        return math.ceil(self.rate * self.n_steps)


@dataclass
class RegionMasks:
    """Complementary face / non-face partitions at latent resolution."""

    face: torch.Tensor  # [F, h, w] in {0, 1}
    nonface: torch.Tensor

    def __post_init__(self):
        if self.face.shape != self.nonface.shape:
            raise ValueError("face and non-face masks must share a shape")
        if not torch.all(self.face + self.nonface == 1.0):
            raise ValueError("face + nonface must partition the frame (sum to 1)")

    @classmethod
    def from_face(cls, face: torch.Tensor) -> "RegionMasks":
        face = (face > 0.5).to(torch.float32)
        return cls(face=face, nonface=1.0 - face)

    def channelwise(self, which: str) -> torch.Tensor:
        m = self.face if which == "face" else self.nonface
        return m.unsqueeze(1)  # broadcast over channels


@dataclass
class Classifiers:
    face: SyncClassifier
    nonface: SyncClassifier


@dataclass
class GuidanceChain:
    """The per-step states of guided sampling, all at the same level."""

    base: torch.Tensor  # plain solver output
    nonface: torch.Tensor  # after the non-face gradient
    face: torch.Tensor  # after the face gradient (applied to base)
    star: torch.Tensor  # composed guided state
    level: int


def apply_guidance(
    sampler: Sampler,
    z: torch.Tensor,
    level: int,
    classifiers: Classifiers,
    masks: RegionMasks,
    cfg: GuidanceConfig,
) -> GuidanceChain:
    """Regional gradient application at one level; two gradient calls.

    Order follows the sampling algorithm: the non-face classifier sees the
    plain state, the face classifier sees the non-face-guided state, and both
    corrections are applied to the plain state before composition.
    """
    inf = sampler.inference
    t = inf.timestep_at(level)
    sigma = float(inf.sigma[level])
    direction = 1.0 if cfg.sign == "ascend" else -1.0

    g_nf = sync_gradient(classifiers.nonface, z, sampler.audio_merged[1:], t, masks.nonface)
    z_nf = sampler.pin(z + direction * cfg.lambda_nonface * sigma * g_nf)

    g_f = sync_gradient(classifiers.face, z_nf, sampler.audio_merged[1:], t, masks.face)
    z_face = sampler.pin(z + direction * cfg.lambda_face * sigma * g_f)

    # grouped so a vanishing face (or non-face) correction cancels exactly
    star = sampler.pin(z_nf + (z_face - z))
    sampler.stats.gradient_calls += 2
    sampler.stats.guided_steps += 1
    return GuidanceChain(base=z, nonface=z_nf, face=z_face, star=star, level=level)


def sg_step(
    sampler: Sampler,
    z_prev: torch.Tensor,
    level_from: int,
    classifiers: Classifiers,
    masks: RegionMasks,
    cfg: GuidanceConfig,
) -> GuidanceChain:
    """One guided step from a plain state: solver advance plus gradients."""
    z = sampler.solve(z_prev, level_from)
    return apply_guidance(sampler, z, level_from - 1, classifiers, masks, cfg)


def dg_step(
    sampler: Sampler,
    chain: GuidanceChain,
    masks: RegionMasks,
    cfg: GuidanceConfig,
) -> torch.Tensor:
    """Differential advance consuming a guided chain; three solver calls.

    The star state is advanced as usual; the two singly-guided states are
    also advanced and their contributions added on the opposite region,
    weighted by ``lambda_diff``, to compensate cross-region interference.
    """
    level = chain.level
    z_star = sampler.solve(chain.star, level)
    z_nf = sampler.solve(chain.nonface, level)
    z_face = sampler.solve(chain.face, level)
    out = z_star + cfg.lambda_diff * (
        z_nf * masks.channelwise("face") + z_face * masks.channelwise("nonface")
    )
    if cfg.dg_strict_noop:
        out = out / (1.0 + cfg.lambda_diff)
    return sampler.pin(out)


def sample_video(
    net,
    inference: InferenceSchedule,
    cfg: GuidanceConfig,
    reference: torch.Tensor,
    audio: torch.Tensor,
    seed: int,
    classifiers: Classifiers | None = None,
    masks: RegionMasks | None = None,
    first_frame: torch.Tensor | None = None,
) -> tuple[torch.Tensor, Sampler]:
    """Run the full (optionally guided) trajectory for one video.

    Returns the clean latent video and the sampler, whose stats carry the
    solver/gradient call counts and per-call wall times for the run report.
    Decoding to pixels is a separate concern.
    """
    if cfg.mode != "off":
        if classifiers is None or masks is None:
            raise MissingArtifactError(
                "guided modes need both classifiers and region masks"
            )
    frames = audio.shape[0]
    sampler = Sampler(net, inference, reference, audio, first_frame=first_frame)
    start = make_unified_input(
        frames, reference.shape[0], reference.shape[1], reference.shape[2],
        seed=seed, first_frame=first_frame,
    )
    z = start.video
    n = inference.n_steps
    guided = cfg.guided_steps()
    chain: GuidanceChain | None = None
    for k in range(n):
        level = n - k
        if chain is None:
            z = sampler.solve(z, level)
        elif cfg.mode == "dg":
            z = dg_step(sampler, chain, masks, cfg)
        else:
            z = sampler.solve(chain.star, level)
        chain = None
        if k < guided:
            chain = apply_guidance(sampler, z, level - 1, classifiers, masks, cfg)
    if chain is not None:
        z = chain.star
    return z, sampler


def generate_long(
    net,
    inference: InferenceSchedule,
    cfg: GuidanceConfig,
    reference: torch.Tensor,
    audio: torch.Tensor,
    segment_len: int,
    seed: int,
    classifiers: Classifiers | None = None,
    face_mask_track: torch.Tensor | None = None,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Chain fixed-length segments into one long latent video.

    Each segment after the first is conditioned on the previous segment's
    final frame, which therefore appears bit-identically as its frame 0; the
    concatenated output drops that duplicate. Audio must cover at least two
    segments.
    """
    if segment_len < 2:
        raise ValueError("segment_len must be at least 2")
    total = audio.shape[0]
    n_segments = (total - 1) // (segment_len - 1)
    if n_segments < 2:
        raise ValueError(
            f"audio covers {total} frames; need at least {2 * segment_len - 1} "
            f"for two segments of {segment_len}"
        )
    segments = []
    first_frame = None
    for s in range(n_segments):
        lo = s * (segment_len - 1)
        sl = slice(lo, lo + segment_len)
        masks = None
        if cfg.mode != "off":
            if face_mask_track is None:
                raise MissingArtifactError("guided modes need a face mask track")
            masks = RegionMasks.from_face(face_mask_track[sl])
        z, _ = sample_video(
            net, inference, cfg, reference, audio[sl],
            seed=seed + s, classifiers=classifiers, masks=masks,
            first_frame=first_frame,
        )
        segments.append(z)
        first_frame = z[-1]
    full = torch.cat([segments[0]] + [seg[1:] for seg in segments[1:]], dim=0)
    return full, segments
