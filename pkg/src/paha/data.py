"""Clip loading and face-region geometry shared across the pipeline.

A dataset directory holds one subdirectory per clip with pixel frames, pose
keypoints, a waveform and per-frame face boxes. Loading returns in-memory
clips; `encode_clips` maps them into latent space with a codec and attaches
windowed audio features plus latent-resolution face masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import AudioFeatureExtractor, LogMelEnergyExtractor, load_wav, window_audio
from .par_mask import PoseSequence, load_pose_jsonl
from .runs import MissingArtifactError
from .tensorio import load_tensor


@dataclass
class FaceBox:
    """Axis-aligned pixel-space face bounds, inclusive of x0/y0, exclusive of x1/y1."""

    x0: float
    y0: float
    x1: float
    y1: float


def save_face_boxes(boxes: list[FaceBox], path: str | Path) -> None:
    with open(path, "w") as fh:
        for idx, b in enumerate(boxes):
            rec = {"frame_index": idx, "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_face_boxes(path: str | Path) -> list[FaceBox]:
    recs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                recs.append(json.loads(line))
    recs.sort(key=lambda r: r["frame_index"])
    return [FaceBox(r["x0"], r["y0"], r["x1"], r["y1"]) for r in recs]


def latent_face_masks(
    boxes: list[FaceBox],
    latent_h: int,
    latent_w: int,
    factor: int,
    dilate: int = 2,
) -> torch.Tensor:
    """Rasterise pixel face boxes onto the latent grid, dilated and binarised.

    Returns a float tensor [F, h, w] of {0, 1}; empty boxes give empty masks.
    """
    out = torch.zeros(len(boxes), latent_h, latent_w)
    for f, b in enumerate(boxes):
        if b.x1 <= b.x0 or b.y1 <= b.y0:
            continue
        x0 = int(np.floor(b.x0 / factor)) - dilate
        y0 = int(np.floor(b.y0 / factor)) - dilate
        x1 = int(np.ceil(b.x1 / factor)) + dilate
        y1 = int(np.ceil(b.y1 / factor)) + dilate
        out[f, max(y0, 0) : min(y1, latent_h), max(x0, 0) : min(x1, latent_w)] = 1.0
    return out


@dataclass
class Clip:
    """One pixel-space clip as stored on disk."""

    frames: torch.Tensor  # [F, 3, H, W] in [0, 1]
    pose: PoseSequence
    waveform: np.ndarray
    sample_rate: int
    face_boxes: list[FaceBox]
    fps: float
    name: str


@dataclass
class LatentClip:
    """A clip mapped into the diffusion working space."""

    video: torch.Tensor  # [F, C, h, w]
    audio: torch.Tensor  # [F, (2m+1) * d_a] windowed features
    face_mask: torch.Tensor  # [F, h, w] in {0, 1}
    name: str


def load_dataset(root: str | Path, limit: int | None = None) -> list[Clip]:
    root = Path(root)
    index = root / "index.json"
    if not index.exists():
        raise MissingArtifactError(f"no dataset index at {index}")
    meta = json.loads(index.read_text())
    clips = []
    names = meta["clips"][:limit] if limit else meta["clips"]
    for name in names:
        cdir = root / name
        frames = torch.from_numpy(load_tensor(cdir / "frames.tnsr")).float() / 255.0
        wav, sr = load_wav(cdir / "audio.wav")
        pose = load_pose_jsonl(
            cdir / "pose.jsonl",
            width=frames.shape[-1],
            height=frames.shape[-2],
            fps=meta["fps"],
        )
        boxes = load_face_boxes(cdir / "faceboxes.jsonl")
        clips.append(
            Clip(
                frames=frames,
                pose=pose,
                waveform=wav,
                sample_rate=sr,
                face_boxes=boxes,
                fps=meta["fps"],
                name=name,
            )
        )
    return clips


def encode_clips(
    clips: list[Clip],
    codec,
    window: int,
    extractor: AudioFeatureExtractor | None = None,
    dilate: int = 2,
) -> list[LatentClip]:
    """Map pixel clips to latent clips with windowed audio and face masks."""
    extractor = extractor or LogMelEnergyExtractor()
    out = []
    for clip in clips:
        with torch.no_grad():
            video = codec.encode(clip.frames)
        feats = extractor.extract(
            clip.waveform, clip.sample_rate, clip.frames.shape[0], clip.fps
        )
        track = window_audio(feats, window)
        factor = clip.frames.shape[-1] // video.shape[-1]
        face = latent_face_masks(
            clip.face_boxes, video.shape[-2], video.shape[-1], factor, dilate
        )
        out.append(
            LatentClip(
                video=video,
                audio=torch.from_numpy(track.windowed),
                face_mask=face,
                name=clip.name,
            )
        )
    return out
