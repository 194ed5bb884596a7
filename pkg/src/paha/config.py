"""Run configuration: one flat, fully explicit record per run.

Every knob has a named field; loading a config file materialises defaults so
the stored copy is self-contained, and its content digest is embedded in all
artifacts the run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad or unknown configuration content."""


@dataclass
class RunConfig:
    # data / shapes
    dataset_dir: str = "data/synthetic"
    n_clips: int = 500
    frames: int = 8
    height: int = 32
    width: int = 32
    fps: float = 25.0
    sample_rate: int = 16000

    # parts-aware re-weighting
    tau: float = 0.8
    r: float = 10.0
    omega1: float = 10.0
    omega2: float = 2.0
    blur_sigma: float = 1.5

    # audio features
    d_audio: int = 8
    m: int = 2  # window half-width: each frame sees 2m+1 feature rows

    # latent codec
    codec: str = "conv"  # conv | patchify | identity
    spatial_down: int = 8
    latent_channels: int = 8
    codec_steps: int = 300
    codec_lr: float = 2e-3

    # diffusion backbone
    T_train: int = 200
    schedule_kind: str = "linear-beta"
    base_width: int = 48
    train_steps: int = 500
    batch_size: int = 8
    lr: float = 2e-3
    first_frame_prob: float = 0.5

    # classifier (token width is tied to the encoder: 2 * base_width)
    cls_layers: int = 4
    cls_heads: int = 4
    cls_steps: int = 400
    cls_lr: float = 1e-3
    cls_batch: int = 8
    mask_prob: float = 0.8
    length_schedule: tuple[int, ...] = (2, 4, 6, 8)
    n_negative_clips: int = 120
    freeze_encoder: bool = False

    # inference / guidance
    T_infer: int = 20
    mode: str = "off"  # off | sg | dg
    rate: float = 0.5
    lambda_face: float = 0.1
    lambda_nonface: float = 1.0
    lambda_diff: float = 0.25
    sign: str = "ascend"  # ascend | descend
    dg_strict_noop: bool = False
    face_dilate: int = 2

    # misc
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.mode not in ("off", "sg", "dg"):
            raise ConfigError(f"mode must be off|sg|dg, got {self.mode!r}")
        if self.sign not in ("ascend", "descend"):
            raise ConfigError(f"sign must be ascend|descend, got {self.sign!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"rate must lie in [0, 1], got {self.rate}")
        if self.codec not in ("conv", "patchify", "identity"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.schedule_kind not in ("linear-beta", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.schedule_kind!r}")
        if isinstance(self.length_schedule, list):
            self.length_schedule = tuple(self.length_schedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["length_schedule"] = list(self.length_schedule)
        return d

    def digest(self) -> str:
        """Content hash over the fully materialised config."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def arch_digest(self) -> str:
        """Hash of the classifier-architecture fields only.

        The face and non-face classifiers must agree on this; they may differ
        only in their training-data masking policy.
        """
        keys = (
            "latent_channels",
            "base_width",
            "cls_layers",
            "cls_heads",
            "d_audio",
            "m",
            "T_train",
            "schedule_kind",
        )
        sub = {k: self.to_dict()[k] for k in keys}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)
