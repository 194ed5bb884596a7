"""Self-distilled training data for the sync classifiers.

Positives are real clips; negatives are videos the trained backbone
generates for the same audio and a randomly chosen reference frame, so every
negative shares its positive's condition bit-for-bit. Region masking and
length variation are applied on the fly while training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .classifier import SyncClassifier, bce_loss
from .data import LatentClip
from .network import DenoiserNetwork
from .sampler import Sampler, make_unified_input
from .schedule import InferenceSchedule, NoiseSchedule

log = logging.getLogger("paha")

REAL, GENERATED = 1, 0


@dataclass
class SamplePair:
    """One classifier training sample (clean latent; noised per batch)."""

    video: torch.Tensor  # [F, C, h, w]
    audio: torch.Tensor  # [F, d]
    label: int  # 1 real, 0 generated
    face_mask: torch.Tensor  # [F, h, w] in {0, 1}
    region_mask: torch.Tensor | None = None  # retained-region map once masked
    ref_index: int = 0

    @property
    def frames(self) -> int:
        return self.video.shape[0]


def sample_reference_index(n_frames: int, rng: np.random.Generator) -> int:
    """Uniform reference-frame choice; index 0 (the first frame) is always a
    candidate."""
    return int(rng.integers(0, n_frames))


def make_negative_samples(
    net: DenoiserNetwork,
    inference: InferenceSchedule,
    clips: list[LatentClip],
    seed: int = 0,
) -> list[tuple[SamplePair, SamplePair]]:
    """Generate one fake video per real clip, pairing them one-to-one.

    Each pair shares the clip's audio exactly; the generated half is labeled
    0 and conditioned on a uniformly drawn reference frame of that clip.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    net.eval()
    for k, clip in enumerate(clips):
        ref_idx = sample_reference_index(clip.video.shape[0], rng)
        sampler = Sampler(net, inference, clip.video[ref_idx], clip.audio)
        start = make_unified_input(
            clip.video.shape[0], *clip.video.shape[1:], seed=seed * 100003 + k
        )
        fake = sampler.plain_trajectory(start.video)
        real = SamplePair(
            video=clip.video.clone(),
            audio=clip.audio.clone(),
            label=REAL,
            face_mask=clip.face_mask.clone(),
            ref_index=ref_idx,
        )
        gen = SamplePair(
            video=fake,
            audio=clip.audio.clone(),
            label=GENERATED,
            face_mask=clip.face_mask.clone(),
            ref_index=ref_idx,
        )
        pairs.append((real, gen))
    return pairs


def apply_region_masking(
    pair: SamplePair,
    classifier_kind: str,
    rng: np.random.Generator,
    p: float = 0.8,
) -> SamplePair:
    """Zero out the regions the classifier should ignore, with probability p.

    The non-face classifier drops face pixels; the face classifier keeps only
    face pixels. A missing (empty) face box simply leaves nothing to mask for
    the non-face kind and everything masked for the face kind; this is logged
    once per call.
    """
    if classifier_kind not in ("face", "non-face"):
        raise ValueError(f"unknown classifier kind {classifier_kind!r}")
    if rng.random() >= p:
        return pair
    face = pair.face_mask
    if face.sum() == 0:
        log.warning("sample has an empty face region; masking treats it as such")
    retained = face if classifier_kind == "face" else 1.0 - face
    video = pair.video * retained.unsqueeze(1)
    return replace(pair, video=video, region_mask=retained)


@dataclass
class LengthSample:
    """A cropped view of a pair used for one training draw."""

    pair_index: int
    start: int
    length: int
    ref_index: int


def augment_lengths(
    pairs: list[tuple[SamplePair, SamplePair]],
    lengths: tuple[int, ...],
    n_samples: int,
    rng: np.random.Generator,
) -> list[LengthSample]:
    """Draw length-varied crops uniformly across the schedule.

    Pairs shorter than a drawn length are skipped with a log entry. Both
    halves of a pair are always cropped identically, so each drawn sample
    yields one real and one generated example.
    """
    out = []
    skipped = 0
    while len(out) < n_samples:
        idx = int(rng.integers(0, len(pairs)))
        length = int(lengths[rng.integers(0, len(lengths))])
        f = pairs[idx][0].frames
        if f < length:
            skipped += 1
            if skipped in (1, 100, 10000):
                log.warning("clip too short for length %d, skipping (x%d)", length, skipped)
            if skipped > 100 * max(n_samples, 1):
                raise ValueError("no clips long enough for the length schedule")
            continue
        start = int(rng.integers(0, f - length + 1))
        ref = sample_reference_index(f, rng)
        out.append(LengthSample(pair_index=idx, start=start, length=length, ref_index=ref))
    return out


def crop(pair: SamplePair, start: int, length: int) -> SamplePair:
    return replace(
        pair,
        video=pair.video[start : start + length],
        audio=pair.audio[start : start + length],
        face_mask=pair.face_mask[start : start + length],
    )


def train_classifier(
    classifier: SyncClassifier,
    pairs: list[tuple[SamplePair, SamplePair]],
    schedule: NoiseSchedule,
    steps: int = 400,
    batch_pairs: int = 4,
    lr: float = 1e-3,
    mask_prob: float = 0.8,
    lengths: tuple[int, ...] = (2, 4, 6, 8),
    seed: int = 0,
    freeze_encoder: bool = False,
    log_every: int = 0,
) -> list[float]:
    """BCE training over noised real/generated pairs.

    Every batch picks one clip length, draws ``batch_pairs`` pairs at that
    length (both halves used, so the batch is balanced), applies the region
    masking policy and noises each video at an independent uniform step.
    """
    rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)
    if freeze_encoder:
        for p in classifier.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in classifier.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    classifier.train()
    usable_lengths = tuple(l for l in lengths if l <= pairs[0][0].frames) or (
        pairs[0][0].frames,
    )
    for step in range(steps):
        length = int(usable_lengths[rng.integers(0, len(usable_lengths))])
        draws = augment_lengths(pairs, (length,), batch_pairs, rng)
        videos, audios, ts, labels = [], [], [], []
        for d in draws:
            for half in pairs[d.pair_index]:
                sample = crop(half, d.start, d.length)
                sample = apply_region_masking(sample, classifier.kind, rng, p=mask_prob)
                t = int(rng.integers(0, schedule.steps))
                eps = torch.randn(sample.video.shape, generator=torch_gen)
                videos.append(schedule.add_noise(sample.video, eps, t))
                audios.append(sample.audio)
                ts.append(t)
                labels.append(half.label)
        s = classifier(
            torch.stack(videos), torch.stack(audios), torch.as_tensor(ts, dtype=torch.long)
        )
        loss = bce_loss(s, torch.as_tensor(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"classifier[{classifier.kind}] step {step + 1}/{steps} "
                  f"loss {np.mean(losses[-log_every:]):.4f}")
    classifier.eval()
    return losses


EVAL_T_FRACTIONS = (0.1, 0.3, 0.5, 0.7)


def pair_score(
    classifier: SyncClassifier,
    video: torch.Tensor,
    audio: torch.Tensor,
    schedule: NoiseSchedule,
    seed: int = 0,
    t_fractions: tuple[float, ...] = EVAL_T_FRACTIONS,
) -> float:
    """Deterministic pair-level score: mean over a fixed timestep grid.

    The classifier is consulted along the whole trajectory during guidance;
    a pair-level decision averages its score over a spread of noise levels,
    with noise drawn from a fixed seed so evaluation is reproducible.
    """
    gen = torch.Generator().manual_seed(seed)
    scores = []
    with torch.no_grad():
        for frac in t_fractions:
            t = min(int(frac * schedule.steps), schedule.steps - 1)
            eps = torch.randn(video.shape, generator=gen)
            z_t = schedule.add_noise(video, eps, t)
            scores.append(float(classifier.score(z_t, audio, t)))
    return float(np.mean(scores))


def held_out_accuracy(
    classifier: SyncClassifier,
    pairs: list[tuple[SamplePair, SamplePair]],
    schedule: NoiseSchedule,
    seed: int = 0,
) -> dict:
    """Accuracy and score gap on unmasked pairs under the grid protocol."""
    classifier.eval()
    real_scores, gen_scores = [], []
    for k, (real, gen) in enumerate(pairs):
        real_scores.append(pair_score(classifier, real.video, real.audio, schedule, seed + k))
        gen_scores.append(pair_score(classifier, gen.video, gen.audio, schedule, seed + k))
    correct = sum(s > 0.5 for s in real_scores) + sum(s <= 0.5 for s in gen_scores)
    return {
        "accuracy": correct / (2 * len(pairs)),
        "mean_real": float(np.mean(real_scores)),
        "mean_generated": float(np.mean(gen_scores)),
        "gap": float(np.mean(real_scores) - np.mean(gen_scores)),
    }
