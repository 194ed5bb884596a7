"""Per-frame audio features and temporal windowing.

The driving condition is one feature row per video frame. The default
extractor is a log-mel energy band vector computed straight from the
waveform; anything implementing :class:`AudioFeatureExtractor` can be
plugged in instead. Windowing concatenates the ``m`` neighbouring rows on
each side (edges replicate) so the model can see motion cues slightly before
and after the current frame.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np


@dataclass
class AudioFeatureTrack:
    """Raw per-frame features plus their windowed form."""

    per_frame: np.ndarray  # float32 [F, d_a]
    m: int
    windowed: np.ndarray  # float32 [F, (2m+1) * d_a]

    @property
    def frames(self) -> int:
        return self.per_frame.shape[0]


def window_audio(per_frame: np.ndarray, m: int) -> AudioFeatureTrack:
    """Concatenate each frame's features with its m neighbours per side."""
    if m < 0:
        raise ValueError("window half-width m must be >= 0")
    per_frame = np.asarray(per_frame, dtype=np.float32)
    if per_frame.ndim != 2:
        raise ValueError("per-frame features must be [F, d_a]")
    n = per_frame.shape[0]
    rows = []
    for f in range(n):
        idx = np.clip(np.arange(f - m, f + m + 1), 0, n - 1)
        rows.append(per_frame[idx].reshape(-1))
    return AudioFeatureTrack(per_frame=per_frame, m=m, windowed=np.stack(rows).astype(np.float32))


class AudioFeatureExtractor(Protocol):
    def extract(self, waveform: np.ndarray, sample_rate: int, n_frames: int, fps: float) -> np.ndarray:
        """Return [n_frames, d_a] features for the given mono waveform."""
        ...


class LogMelEnergyExtractor:
    """Log energies in ``n_bands`` mel-spaced bands, one row per video frame."""

    def __init__(self, n_bands: int = 8, floor: float = 1e-8):
        self.n_bands = n_bands
        self.floor = floor

    def extract(self, waveform: np.ndarray, sample_rate: int, n_frames: int, fps: float) -> np.ndarray:
        waveform = np.asarray(waveform, dtype=np.float64)
        samples_per_frame = int(round(sample_rate / fps))
        feats = np.zeros((n_frames, self.n_bands), dtype=np.float64)
        spec_bins = samples_per_frame // 2 + 1
        freqs = np.fft.rfftfreq(samples_per_frame, d=1.0 / sample_rate)
        bank = _mel_filterbank(self.n_bands, freqs, sample_rate / 2.0)
        for f in range(n_frames):
            start = f * samples_per_frame
            chunk = waveform[start : start + samples_per_frame]
            if chunk.size < samples_per_frame:
                chunk = np.pad(chunk, (0, samples_per_frame - chunk.size))
            power = np.abs(np.fft.rfft(chunk)) ** 2 / samples_per_frame
            assert power.shape[0] == spec_bins
            feats[f] = np.log(bank @ power + self.floor)
        return feats.astype(np.float32)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def _mel_filterbank(n_bands: int, freqs: np.ndarray, f_max: float) -> np.ndarray:
    """Triangular filters on the mel scale, [n_bands, n_bins]."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(f_max), n_bands + 2))
    bank = np.zeros((n_bands, freqs.shape[0]))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def load_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV into a float waveform in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError("expected 16-bit PCM audio")
        sr = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        if wf.getnchannels() > 1:
            data = data.reshape(-1, wf.getnchannels()).mean(axis=1)
    return data, sr


def save_wav(path: str | Path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write a float waveform in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.asarray(waveform), -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())
