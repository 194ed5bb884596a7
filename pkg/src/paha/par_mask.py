"""Parts-aware loss re-weighting masks built from pose keypoint confidences.

The half-body figure is split into three regions. Hands and faces get an
"awareness area" made of circles around reliable keypoints; the body gets a
single bounding rectangle. Inside the hand/face area the mask weight is a
Gaussian-smoothed confidence field scaled by ``omega1``; inside the body
rectangle it is ``omega2``; everywhere else it stays 1 so the baseline
denoising loss is untouched.

All functions here are pure and operate on plain numpy arrays, so they are
safe to call from parallel data-loading workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

REGIONS = ("hand", "face", "body")

# Defaults for the re-weighting hyperparameters.
DEFAULT_TAU = 0.8
DEFAULT_RADIUS = 10.0
DEFAULT_OMEGA1 = 10.0
DEFAULT_OMEGA2 = 2.0
DEFAULT_BLUR_SIGMA = 1.5
BLUR_TRUNCATE = 3.0  # kernel cut at 3 sigma


@dataclass(frozen=True)
class Keypoint:
    """A single 2D pose keypoint with detector confidence.

    ``region`` must be one of ``hand``, ``face`` or ``body``. Coordinates are
    in pixels and may fall outside the frame; they are clamped to the border
    before any geometry is built.
    """

    x: float
    y: float
    confidence: float
    region: str

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValueError(f"unknown region {self.region!r}, expected one of {REGIONS}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class PoseSequence:
    """Per-frame keypoint sets for one clip."""

    frames: list[list[Keypoint]]
    width: int
    height: int
    fps: float = 25.0

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class AwarenessArea:
    """Boolean foreground maps for one frame.

    ``hand_face_mask`` is a union of filled circles around reliable hand and
    face keypoints; ``body_mask`` is a single axis-aligned rectangle spanning
    the reliable body keypoints (all False when none exist).
    """

    hand_face_mask: np.ndarray  # bool [H, W]
    body_mask: np.ndarray  # bool [H, W]


@dataclass
class ReweightMask:
    """Strictly positive per-pixel loss weights, one slice per frame."""

    weights: np.ndarray  # float64 [F, H, W]

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("reweight mask contains non-finite values")
        if self.weights.min() < 1.0 - 1e-9:
            raise ValueError("reweight mask must not down-weight below baseline 1")


def filter_reliable(keypoints: Iterable[Keypoint], tau: float) -> list[Keypoint]:
    """Keep the keypoints whose confidence is strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau {tau} outside [0, 1]")
    return [kp for kp in keypoints if kp.confidence > tau]


def _clamp_xy(kp: Keypoint, height: int, width: int) -> tuple[float, float]:
    return (
        float(np.clip(kp.x, 0.0, width - 1.0)),
        float(np.clip(kp.y, 0.0, height - 1.0)),
    )


def build_awareness_area(
    keypoints: Sequence[Keypoint],
    height: int,
    width: int,
    tau: float = DEFAULT_TAU,
    radius: float = DEFAULT_RADIUS,
) -> AwarenessArea:
    """Build the per-frame awareness area from one keypoint set.

    Hand and face keypoints above the confidence threshold each contribute a
    filled circle of ``radius`` pixels; body keypoints above the threshold
    contribute one rectangle spanning their extreme coordinates.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    reliable = filter_reliable(keypoints, tau)

    ys, xs = np.mgrid[0:height, 0:width]
    hand_face = np.zeros((height, width), dtype=bool)
    r2 = radius * radius
    for kp in reliable:
        if kp.region in ("hand", "face"):
            cx, cy = _clamp_xy(kp, height, width)
            hand_face |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r2

    body = np.zeros((height, width), dtype=bool)
    body_pts = [_clamp_xy(kp, height, width) for kp in reliable if kp.region == "body"]
    if body_pts:
        bx = [p[0] for p in body_pts]
        by = [p[1] for p in body_pts]
        body = (
            (xs >= min(bx)) & (xs <= max(bx)) & (ys >= min(by)) & (ys <= max(by))
        )
    return AwarenessArea(hand_face_mask=hand_face, body_mask=body)


def _confidence_field(
    keypoints: Sequence[Keypoint], height: int, width: int, radius: float
) -> np.ndarray:
    """Paint each keypoint's confidence inside its circle; overlaps add up."""
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width), dtype=np.float64)
    r2 = radius * radius
    for kp in keypoints:
        cx, cy = _clamp_xy(kp, height, width)
        out += kp.confidence * ((xs - cx) ** 2 + (ys - cy) ** 2 <= r2)
    return out


def build_reweight_mask(
    keypoints: Sequence[Keypoint],
    height: int,
    width: int,
    tau: float = DEFAULT_TAU,
    radius: float = DEFAULT_RADIUS,
    omega1: float = DEFAULT_OMEGA1,
    omega2: float = DEFAULT_OMEGA2,
    blur_sigma: float = DEFAULT_BLUR_SIGMA,
) -> np.ndarray:
    """Build one frame's loss re-weighting map.

    Inside the hand/face awareness area the weight is the smoothed confidence
    field times ``omega1``, floored at 1 so no pixel drops below the baseline
    loss. The body rectangle (outside any hand/face circle) gets ``omega2``,
    and everything else stays at 1.

    Returns a float64 [H, W] map.
    """
    if blur_sigma <= 0:
        raise ValueError("blur_sigma must be positive")
    if not omega1 >= omega2 >= 1.0:
        raise ValueError(f"expected omega1 >= omega2 >= 1, got {omega1}, {omega2}")

    area = build_awareness_area(keypoints, height, width, tau=tau, radius=radius)
    reliable_hf = [
        kp for kp in filter_reliable(keypoints, tau) if kp.region in ("hand", "face")
    ]
    mask = np.ones((height, width), dtype=np.float64)
    mask[area.body_mask] = omega2

    if reliable_hf:
        fld = _confidence_field(reliable_hf, height, width, radius)
        smoothed = gaussian_filter(
            fld, sigma=blur_sigma, mode="constant", cval=0.0, truncate=BLUR_TRUNCATE
        )
        hf = area.hand_face_mask
        mask[hf] = np.maximum(smoothed[hf] * omega1, 1.0)
    return mask


def build_reweight_sequence(pose: PoseSequence, **kwargs) -> ReweightMask:
    """Build the full [F, H, W] re-weighting mask for a pose sequence."""
    frames = [
        build_reweight_mask(kps, pose.height, pose.width, **kwargs)
        for kps in pose.frames
    ]
    return ReweightMask(weights=np.stack(frames, axis=0))


def downsample_mask(weights: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a [..., H, W] weight map down to latent resolution.

    Pooling preserves the mean exactly, so the normalised training loss sees
    the same total mass at either resolution.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = weights.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"shape {(h, w)} not divisible by factor {factor}")
    lead = weights.shape[:-2]
    pooled = weights.reshape(*lead, h // factor, factor, w // factor, factor)
    return pooled.mean(axis=(-3, -1))


# --- pose JSON-lines interchange ------------------------------------------

def save_pose_jsonl(pose: PoseSequence, path: str | Path) -> None:
    """Write one JSON object per frame: {frame_index, keypoints: [...]}."""
    with open(path, "w") as fh:
        for idx, kps in enumerate(pose.frames):
            rec = {
                "frame_index": idx,
                "keypoints": [
                    {"x": kp.x, "y": kp.y, "confidence": kp.confidence, "region": kp.region}
                    for kp in kps
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_pose_jsonl(
    path: str | Path, width: int, height: int, fps: float = 25.0
) -> PoseSequence:
    """Read a pose JSON-lines file back into a PoseSequence."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    records.sort(key=lambda r: r["frame_index"])
    frames = [
        [Keypoint(k["x"], k["y"], k["confidence"], k["region"]) for k in rec["keypoints"]]
        for rec in records
    ]
    return PoseSequence(frames=frames, width=width, height=height, fps=fps)
