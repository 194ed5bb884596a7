"""Evaluation harness: gesture-distribution distance, diversity, beat
alignment and generation time cost.

Gesture features come from a small pose autoencoder trained on the available
pose corpus; its checkpoint hash is stamped into every metric report so
numbers are only ever compared within one feature space.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.signal import find_peaks

log = logging.getLogger("paha")

DEFAULT_SIGMA_B = 0.1  # seconds
MIN_PEAK_SEPARATION = 0.2  # seconds


# --- gesture feature space ---------------------------------------------------

class PoseFeatureEncoder(nn.Module):
    """Two-layer autoencoder over flattened pose sequences.

    Input is a [F, K, 2] keypoint trajectory, normalised to [0, 1] by frame
    size; the bottleneck vector is the gesture feature.
    """

    def __init__(self, frames: int, keypoints: int, feature_dim: int = 32, hidden: int = 128):
        super().__init__()
        self.frames = frames
        self.keypoints = keypoints
        self.feature_dim = feature_dim
        d_in = frames * keypoints * 2
        self.enc = nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(), nn.Linear(hidden, feature_dim))
        self.dec = nn.Sequential(nn.Linear(feature_dim, hidden), nn.SiLU(), nn.Linear(hidden, d_in))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dec(self.enc(x))

    def encode(self, trajectories: torch.Tensor) -> np.ndarray:
        """[N, F, K, 2] -> [N, feature_dim] numpy features."""
        with torch.no_grad():
            flat = trajectories.reshape(trajectories.shape[0], -1)
            return self.enc(flat).numpy()

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for key, value in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(value.numpy().tobytes())
        return h.hexdigest()[:16]


def train_pose_encoder(
    encoder: PoseFeatureEncoder,
    trajectories: torch.Tensor,
    steps: int = 300,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    flat = trajectories.reshape(trajectories.shape[0], -1)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, flat.shape[0], (batch_size,), generator=gen)
        batch = flat[idx]
        loss = torch.mean((encoder(batch) - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    encoder.eval()
    return losses


# --- distribution distance ----------------------------------------------------

def _sqrt_psd(mat: np.ndarray, warn_tol: float = 1e-6) -> np.ndarray:
    """Matrix square root of a (symmetrised) PSD matrix via eigenvalues."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -warn_tol:
        log.warning("clipping negative eigenvalue %.3e in matrix sqrt", vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd(real: np.ndarray, generated: np.ndarray, shrinkage: float | None = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with a diagonal
    shrinkage term applied when a set is too small for a full-rank
    covariance. Pass ``shrinkage=None`` to make that case an error instead.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if real.ndim != 2 or generated.ndim != 2 or real.shape[1] != generated.shape[1]:
        raise ValueError("feature sets must be [N, d] with matching d")
    d = real.shape[1]
    mu1, mu2 = real.mean(axis=0), generated.mean(axis=0)
    s1 = np.cov(real, rowvar=False)
    s2 = np.cov(generated, rowvar=False)
    if min(real.shape[0], generated.shape[0]) < d + 1:
        if shrinkage is None:
            raise ValueError(
                f"need at least d+1={d + 1} samples per set for a full-rank "
                "covariance; enable shrinkage or add samples"
            )
        scale = max(np.trace(s1), np.trace(s2), 1.0) / d
        s1 = s1 + shrinkage * scale * np.eye(d)
        s2 = s2 + shrinkage * scale * np.eye(d)
    s1_half = _sqrt_psd(s1)
    cross = _sqrt_psd(s1_half @ s2 @ s1_half)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def diversity(features: np.ndarray, n_pairs: int = 1000, seed: int = 0) -> float:
    """Mean Euclidean distance over randomly drawn distinct pairs."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        raise ValueError("diversity needs at least two samples")
    rng = np.random.default_rng(seed)
    n = features.shape[0]
    total = 0.0
    for _ in range(n_pairs):
        i, j = rng.choice(n, size=2, replace=False)
        total += float(np.linalg.norm(features[i] - features[j]))
    return total / n_pairs


# --- beat alignment -------------------------------------------------------------

@dataclass
class BeatTrack:
    audio_beats: list[float]
    motion_beats: list[float]

    def __post_init__(self):
        for name, beats in (("audio", self.audio_beats), ("motion", self.motion_beats)):
            if any(b2 <= b1 for b1, b2 in zip(beats, beats[1:])):
                raise ValueError(f"{name} beats must be strictly increasing")


def bas(beats: BeatTrack, sigma_b: float = DEFAULT_SIGMA_B) -> float:
    """Mean Gaussian kernel of each motion beat's distance to the nearest
    audio beat; 1.0 for perfectly coincident tracks."""
    if not beats.motion_beats:
        raise ValueError("motion beats must be non-empty")
    if not beats.audio_beats:
        log.warning("no audio beats; beat alignment score is 0")
        return 0.0
    audio = np.asarray(beats.audio_beats)
    total = 0.0
    for tm in beats.motion_beats:
        d2 = float(np.min((tm - audio) ** 2))
        total += math.exp(-d2 / (2.0 * sigma_b**2))
    return total / len(beats.motion_beats)


def onset_envelope(waveform: np.ndarray, sample_rate: int, hop_s: float = 0.01) -> tuple[np.ndarray, float]:
    """Half-wave-rectified first difference of log frame energy."""
    hop = max(int(sample_rate * hop_s), 1)
    n = len(waveform) // hop
    energy = np.array([np.sum(waveform[i * hop : (i + 1) * hop] ** 2) for i in range(n)])
    log_e = np.log(energy + 1e-10)
    flux = np.maximum(np.diff(log_e, prepend=log_e[0]), 0.0)
    return flux, 1.0 / hop_s


def audio_beats_from_waveform(waveform: np.ndarray, sample_rate: int) -> list[float]:
    """Peaks of the onset envelope, at least 0.2 s apart."""
    flux, fps = onset_envelope(waveform, sample_rate)
    if flux.max() <= 0:
        return []
    distance = max(int(MIN_PEAK_SEPARATION * fps), 1)
    peaks, _ = find_peaks(flux, height=0.1 * flux.max(), distance=distance)
    return [float(p / fps) for p in peaks]


def motion_beats_from_pose(positions: np.ndarray, fps: float) -> list[float]:
    """Local minima of mean keypoint speed; positions is [F, K, 2]."""
    if positions.shape[0] < 3:
        return []
    speed = np.linalg.norm(np.diff(positions, axis=0), axis=-1).mean(axis=1) * fps
    minima, _ = find_peaks(-speed)
    return [float((m + 0.5) / fps) for m in minima]


# --- time cost -------------------------------------------------------------------

def time_cost(run_reports: list[dict]) -> dict:
    """Mean seconds to produce one video segment, rounded to an integer.

    Sampling and decoding are averaged separately and summed; raw means are
    kept alongside the headline integer for trend comparisons.
    """
    if not run_reports:
        raise ValueError("time_cost needs at least one completed run")
    sampling = float(np.mean([r["sampling_seconds"] for r in run_reports]))
    decoding = float(np.mean([r.get("decoding_seconds", 0.0) for r in run_reports]))
    return {
        "sampling_seconds": sampling,
        "decoding_seconds": decoding,
        "total_seconds": sampling + decoding,
        "tc": int(math.floor(sampling + decoding + 0.5)),
        "n_runs": len(run_reports),
    }
