"""Procedural audio-motion dataset: an articulated stick figure whose arm
swing speed is driven, frame by frame, by the audio energy envelope.

The coupling is exact by construction (angular speed = k * energy of that
frame), which gives the classifier stages a learnable sync signal and the
tests a ground-truth correlation of exactly 1. A "misaligned" pairing maps
every clip to another clip's audio for negative-control measurements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import save_wav
from .data import FaceBox, save_face_boxes
from .par_mask import Keypoint, PoseSequence, save_pose_jsonl
from .tensorio import save_tensor

BG_LEVEL = 0.08
K_SPEED = 0.55  # radians of arm swing per unit energy


@dataclass
class StickFigure:
    """Per-clip appearance parameters."""

    cx: float  # horizontal center
    head_y: float
    head_r: float
    torso_len: float
    shoulder_w: float
    upper_arm: float
    forearm: float
    tint: np.ndarray  # [3] per-channel color gains


def _draw_disk(img: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    h, w = img.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w]
    mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    for c in range(3):
        img[c][mask] = color[c]


def _draw_segment(img: np.ndarray, x0, y0, x1, y1, color, thick=0.9) -> None:
    h, w = img.shape[1:]
    n = int(max(abs(x1 - x0), abs(y1 - y0)) * 3) + 2
    ts = np.linspace(0.0, 1.0, n)
    ys, xs = np.mgrid[0:h, 0:w]
    for t in ts:
        px, py = x0 + (x1 - x0) * t, y0 + (y1 - y0) * t
        mask = (xs - px) ** 2 + (ys - py) ** 2 <= thick * thick
        for c in range(3):
            img[c][mask] = color[c]


def _smooth_envelope(frames: int, rng: np.random.Generator) -> np.ndarray:
    """Per-frame audio energy in [0.2, 1.0], smoothed random walk."""
    raw = rng.uniform(0.0, 1.0, size=frames)
    kernel = np.array([0.25, 0.5, 0.25])
    smooth = np.convolve(np.pad(raw, 1, mode="edge"), kernel, mode="valid")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-9:
        return np.full(frames, 0.6)
    return 0.2 + 0.8 * (smooth - lo) / (hi - lo)


def _arm_angles(frames: int, energy: np.ndarray, theta0: float, rng: np.random.Generator) -> np.ndarray:
    """Swing trajectory with |delta theta| = K_SPEED * energy exactly."""
    lo, hi = 0.35, 2.2  # radians below horizontal, wide enough for max step
    theta = np.zeros(frames)
    theta[0] = theta0
    direction = 1.0 if rng.random() < 0.5 else -1.0
    for f in range(frames - 1):
        step = K_SPEED * energy[f]
        if theta[f] + direction * step > hi or theta[f] + direction * step < lo:
            direction = -direction
        theta[f + 1] = theta[f] + direction * step
    return theta


@dataclass
class SyntheticClip:
    frames: np.ndarray  # uint8 [F, 3, H, W]
    pose: PoseSequence
    waveform: np.ndarray
    face_boxes: list[FaceBox]
    energy: np.ndarray  # [F] construction-time envelope
    limb_speed: np.ndarray  # [F-1] realized |delta theta| of the driven arm


def render_clip(
    n_frames: int,
    height: int,
    width: int,
    fps: float,
    sample_rate: int,
    rng: np.random.Generator,
) -> SyntheticClip:
    fig = StickFigure(
        cx=width / 2 + rng.uniform(-2, 2),
        head_y=height * 0.18 + rng.uniform(-1, 1),
        head_r=height * 0.09 + rng.uniform(0, 0.8),
        torso_len=height * 0.42,
        shoulder_w=width * 0.30 + rng.uniform(-1, 1),
        upper_arm=height * 0.17 + rng.uniform(0, 1),
        forearm=height * 0.14 + rng.uniform(0, 1),
        tint=rng.uniform(0.75, 1.0, size=3),
    )
    energy = _smooth_envelope(n_frames, rng)
    theta_l = _arm_angles(n_frames, energy, rng.uniform(0.6, 1.4), rng)
    # the right arm mirrors with its own start but the same driven speed
    theta_r = _arm_angles(n_frames, energy, rng.uniform(0.6, 1.4), rng)

    neck_y = fig.head_y + fig.head_r + 1
    hip_y = neck_y + fig.torso_len
    sh_l = (fig.cx - fig.shoulder_w / 2, neck_y + 1.5)
    sh_r = (fig.cx + fig.shoulder_w / 2, neck_y + 1.5)

    frames = np.zeros((n_frames, 3, height, width), dtype=np.float64)
    kps: list[list[Keypoint]] = []
    boxes: list[FaceBox] = []
    body_col = fig.tint * np.array([0.55, 0.75, 0.95])
    head_col = fig.tint * np.array([0.95, 0.8, 0.6])
    hand_col = fig.tint * np.array([0.95, 0.35, 0.35])

    for f in range(n_frames):
        img = frames[f]
        img += BG_LEVEL
        _draw_segment(img, fig.cx, neck_y, fig.cx, hip_y, body_col, thick=1.1)
        _draw_segment(img, sh_l[0], sh_l[1], sh_r[0], sh_r[1], body_col)
        _draw_disk(img, fig.cx, fig.head_y, fig.head_r, head_col)

        joints = {}
        for side, sh, th in (("l", sh_l, theta_l[f]), ("r", sh_r, theta_r[f])):
            sx = -1.0 if side == "l" else 1.0
            ex = sh[0] + sx * fig.upper_arm * np.sin(th)
            ey = sh[1] + fig.upper_arm * np.cos(th)
            wx = ex + sx * fig.forearm * np.sin(th)
            wy = ey + fig.forearm * np.cos(th)
            _draw_segment(img, sh[0], sh[1], ex, ey, body_col)
            _draw_segment(img, ex, ey, wx, wy, body_col)
            _draw_disk(img, wx, wy, 1.4, hand_col)
            joints[side] = ((ex, ey), (wx, wy))

        np.clip(img, 0.0, 1.0, out=img)

        conf = lambda: float(rng.uniform(0.5, 1.0))
        frame_kps = [
            Keypoint(fig.cx, fig.head_y, conf(), "face"),
            Keypoint(fig.cx - fig.head_r / 2, fig.head_y - 1, conf(), "face"),
            Keypoint(fig.cx + fig.head_r / 2, fig.head_y - 1, conf(), "face"),
            Keypoint(joints["l"][1][0], joints["l"][1][1], conf(), "hand"),
            Keypoint(joints["r"][1][0], joints["r"][1][1], conf(), "hand"),
            Keypoint(sh_l[0], sh_l[1], conf(), "body"),
            Keypoint(sh_r[0], sh_r[1], conf(), "body"),
            Keypoint(joints["l"][0][0], joints["l"][0][1], conf(), "body"),
            Keypoint(joints["r"][0][0], joints["r"][0][1], conf(), "body"),
            Keypoint(fig.cx - 2.5, hip_y, conf(), "body"),
            Keypoint(fig.cx + 2.5, hip_y, conf(), "body"),
            Keypoint(fig.cx, neck_y, conf(), "body"),
        ]
        kps.append(frame_kps)
        boxes.append(
            FaceBox(
                x0=fig.cx - fig.head_r - 1,
                y0=fig.head_y - fig.head_r - 1,
                x1=fig.cx + fig.head_r + 1,
                y1=fig.head_y + fig.head_r + 1,
            )
        )

    # waveform realising the envelope: a sine burst per frame with matching rms
    spf = int(round(sample_rate / fps))
    tone = rng.uniform(200.0, 500.0)
    t = np.arange(spf * n_frames) / sample_rate
    carrier = np.sin(2 * np.pi * tone * t)
    amps = np.repeat(energy * 0.7, spf)
    waveform = carrier * amps

    pose = PoseSequence(frames=kps, width=width, height=height, fps=fps)
    frames_u8 = np.round(frames * 255.0).astype(np.uint8)
    limb_speed = np.abs(np.diff(theta_l))
    return SyntheticClip(
        frames=frames_u8,
        pose=pose,
        waveform=waveform,
        face_boxes=boxes,
        energy=energy,
        limb_speed=limb_speed,
    )


def gen_synthetic_dataset(
    out_dir: str | Path,
    n_clips: int,
    n_frames: int = 8,
    height: int = 32,
    width: int = 32,
    fps: float = 25.0,
    sample_rate: int = 16000,
    seed: int = 0,
) -> Path:
    """Write a deterministic clip corpus; returns the dataset root."""
    if n_clips < 1:
        raise ValueError("need at least one clip")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for k in range(n_clips):
        name = f"clip_{k:05d}"
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        clip = render_clip(n_frames, height, width, fps, sample_rate, rng)
        save_tensor(cdir / "frames.tnsr", clip.frames)
        save_pose_jsonl(clip.pose, cdir / "pose.jsonl")
        save_wav(cdir / "audio.wav", clip.waveform, sample_rate)
        save_face_boxes(clip.face_boxes, cdir / "faceboxes.jsonl")
        meta = {
            "energy": [float(e) for e in clip.energy],
            "limb_speed": [float(s) for s in clip.limb_speed],
            "k_speed": K_SPEED,
        }
        (cdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        names.append(name)
    # misaligned control: every clip paired with its successor's audio
    misaligned = {names[i]: names[(i + 1) % n_clips] for i in range(n_clips)}
    index = {
        "clips": names,
        "fps": fps,
        "sample_rate": sample_rate,
        "frames": n_frames,
        "height": height,
        "width": width,
        "seed": seed,
        "misaligned": misaligned,
    }
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return root
