"""Noise schedules for the latent video diffusion backbone.

A schedule holds per-step signal/noise coefficients with
``lambda_t**2 + sigma_t**2 == 1``; a noisy latent at step ``t`` is
``lambda_t * z0 + sigma_t * eps``. The deterministic sampler runs on an
evenly spaced sub-schedule of the training steps plus a terminal clean level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("linear-beta", "cosine")

# Classic per-step beta range at 1000 steps; rescaled by 1000/T for shorter
# schedules so the terminal signal level stays near zero.
_BETA_MIN_1000 = 1e-4
_BETA_MAX_1000 = 2e-2
_COSINE_OFFSET = 8e-3


@dataclass
class NoiseSchedule:
    """Signal (`lam`) and noise (`sigma`) coefficients, indexed by step."""

    kind: str
    lam: np.ndarray  # float64 [T], monotonically decreasing
    sigma: np.ndarray  # float64 [T], sqrt(1 - lam**2)

    @property
    def steps(self) -> int:
        return len(self.lam)

    def validate(self) -> None:
        if np.max(np.abs(self.lam**2 + self.sigma**2 - 1.0)) > 1e-6:
            raise ValueError("schedule violates lambda^2 + sigma^2 = 1")
        if np.any(np.diff(self.lam) > 0):
            raise ValueError("lambda must decrease monotonically")

    def coeffs(self, t: int) -> tuple[float, float]:
        if not 0 <= t < self.steps:
            raise ValueError(f"step {t} outside schedule of {self.steps} steps")
        return float(self.lam[t]), float(self.sigma[t])

    def add_noise(self, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        """Diffuse a clean latent to step ``t``: lam_t * z0 + sigma_t * eps."""
        if z0.shape != eps.shape:
            raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
        lam, sig = self.coeffs(t)
        return lam * z0 + sig * eps


def make_schedule(T: int, kind: str = "linear-beta") -> NoiseSchedule:
    """Build a schedule of ``T`` steps.

    ``linear-beta`` ramps the per-step variance linearly (rescaled so any T
    reaches a near-zero terminal signal level); ``cosine`` uses the squared
    cosine cumulative form with a small offset.
    """
    if T < 2:
        raise ValueError("schedule needs at least 2 steps")
    if kind == "linear-beta":
        scale = 1000.0 / T
        betas = np.linspace(_BETA_MIN_1000 * scale, _BETA_MAX_1000 * scale, T)
        betas = np.clip(betas, 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
        lam = np.sqrt(alpha_bar)
    elif kind == "cosine":
        lam = np.sqrt(cosine_alpha_bar(np.arange(T) / T))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    sigma = np.sqrt(1.0 - lam**2)
    sched = NoiseSchedule(kind=kind, lam=lam, sigma=sigma)
    sched.validate()
    return sched


def cosine_alpha_bar(frac: np.ndarray) -> np.ndarray:
    """Cumulative signal power of the cosine schedule at fraction ``t/T``."""
    s = _COSINE_OFFSET
    f = np.cos((frac + s) / (1.0 + s) * np.pi / 2.0) ** 2
    f0 = np.cos(s / (1.0 + s) * np.pi / 2.0) ** 2
    return f / f0


class InferenceSchedule:
    """Evenly spaced sub-schedule used by the deterministic sampler.

    Levels are numbered 0..n_steps with level 0 the clean endpoint
    (lam=1, sigma=0) and level n_steps the noisiest; level i>0 corresponds to
    training step ``taus[i-1]``. One solver advance moves from level i to
    level i-1.
    """

    def __init__(self, schedule: NoiseSchedule, n_steps: int):
        if not 1 <= n_steps <= schedule.steps:
            raise ValueError(f"n_steps {n_steps} outside [1, {schedule.steps}]")
        self.base = schedule
        self.n_steps = n_steps
        # descending from the last training step, so n_steps=1 still starts
        # at the noisiest level
        taus = np.linspace(schedule.steps - 1, 0, n_steps).round().astype(int)[::-1]
        self.taus = taus.copy()  # ascending; taus[i-1] is the step for level i
        self.lam = np.concatenate([[1.0], schedule.lam[taus]])
        self.sigma = np.concatenate([[0.0], schedule.sigma[taus]])

    def level_step(self, level: int) -> int:
        """Training step fed to the network when advancing from ``level``."""
        if not 1 <= level <= self.n_steps:
            raise ValueError(f"level {level} outside [1, {self.n_steps}]")
        return int(self.taus[level - 1])

    def timestep_at(self, level: int) -> int:
        """Training step matching a state at ``level`` (0 maps to step 0)."""
        if not 0 <= level <= self.n_steps:
            raise ValueError(f"level {level} outside [0, {self.n_steps}]")
        return 0 if level == 0 else int(self.taus[level - 1])
