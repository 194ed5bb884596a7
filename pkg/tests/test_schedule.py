"""Noise schedule contracts and the deterministic solver update."""

import numpy as np
import pytest
import torch

from paha.schedule import InferenceSchedule, cosine_alpha_bar, make_schedule
from paha.sampler import ddim_step


def closed_form_cosine(T):
    """Independent recomputation of the cosine schedule coefficients."""
    s = 0.008
    lam = np.zeros(T)
    for t in range(T):
        f = np.cos(((t / T) + s) / (1 + s) * np.pi / 2) ** 2
        f0 = np.cos(s / (1 + s) * np.pi / 2) ** 2
        lam[t] = np.sqrt(f / f0)
    return lam


@pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
@pytest.mark.parametrize("T", [10, 200, 1000])
def test_complementarity(kind, T):
    sched = make_schedule(T, kind)
    assert np.max(np.abs(sched.lam**2 + sched.sigma**2 - 1.0)) < 1e-6


@pytest.mark.parametrize("kind", ["linear-beta", "cosine"])
def test_lambda_monotone_and_endpoints(kind):
    sched = make_schedule(1000, kind)
    assert np.all(np.diff(sched.lam) < 0)
    assert sched.lam[0] > 0.99
    assert sched.lam[-1] < 0.05


def test_argmax_lambda_has_minimal_sigma():
    sched = make_schedule(64, "cosine")
    t = int(np.argmax(sched.lam))
    assert t == int(np.argmin(sched.sigma))


def test_cosine_matches_closed_form():
    sched = make_schedule(10, "cosine")
    np.testing.assert_allclose(sched.lam, closed_form_cosine(10), atol=1e-12)
    np.testing.assert_allclose(cosine_alpha_bar(np.array([0.0])), [1.0], atol=1e-12)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        make_schedule(1, "cosine")


# --- add_noise ---------------------------------------------------------------

def test_add_noise_zero_noise_endpoint():
    sched = make_schedule(50, "cosine")  # cosine has lam[0] == 1 exactly
    assert sched.lam[0] == 1.0
    z0 = torch.randn(2, 3, 4, 4)
    eps = torch.randn_like(z0)
    torch.testing.assert_close(sched.add_noise(z0, eps, 0), z0)


def test_add_noise_zero_signal_case():
    sched = make_schedule(50, "linear-beta")
    eps = torch.randn(2, 3, 4, 4)
    t = 30
    out = sched.add_noise(torch.zeros_like(eps), eps, t)
    torch.testing.assert_close(out, float(sched.sigma[t]) * eps)


def test_add_noise_matches_manual_combination():
    sched = make_schedule(100, "linear-beta")
    z0 = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = 50
    manual = float(sched.lam[t]) * z0 + float(sched.sigma[t]) * eps
    torch.testing.assert_close(sched.add_noise(z0, eps, t), manual, atol=1e-6, rtol=0)


def test_add_noise_validates_inputs():
    sched = make_schedule(10, "linear-beta")
    with pytest.raises(ValueError):
        sched.add_noise(torch.zeros(2, 2), torch.zeros(3, 2), 1)
    with pytest.raises(ValueError):
        sched.coeffs(10)


# --- inference sub-schedule ----------------------------------------------------

def test_inference_schedule_levels():
    sched = make_schedule(200, "linear-beta")
    inf = InferenceSchedule(sched, 20)
    assert inf.lam[0] == 1.0 and inf.sigma[0] == 0.0
    assert inf.level_step(inf.n_steps) == 199
    assert inf.timestep_at(0) == 0
    assert len(inf.taus) == 20
    with pytest.raises(ValueError):
        inf.level_step(0)
    with pytest.raises(ValueError):
        inf.level_step(21)


def test_single_step_schedule_starts_at_noisiest_level():
    sched = make_schedule(200, "linear-beta")
    inf = InferenceSchedule(sched, 1)
    assert inf.level_step(1) == 199
    assert inf.lam[0] == 1.0


def test_ddim_final_step_recovers_z0_with_perfect_denoiser():
    sched = make_schedule(100, "linear-beta")
    inf = InferenceSchedule(sched, 10)
    z0 = torch.randn(2, 2, 4, 4)
    eps = torch.randn_like(z0)
    lam1, sig1 = float(inf.lam[1]), float(inf.sigma[1])
    z1 = lam1 * z0 + sig1 * eps
    # a denoiser that predicts the true noise lands exactly on z0
    out = ddim_step(z1, eps, lam1, sig1, 1.0, 0.0)
    torch.testing.assert_close(out, z0, atol=1e-4, rtol=0)
