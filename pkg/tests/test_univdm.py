"""Backbone contracts: audio windowing, reference merging, noise prediction,
the re-weighted loss and the deterministic sampler."""

import numpy as np
import pytest
import torch

from paha.audio import LogMelEnergyExtractor, window_audio
from paha.network import (
    DenoiserNetwork,
    merge_reference,
    predict_noise,
    split_reference,
)
from paha.sampler import Sampler, make_unified_input
from paha.schedule import InferenceSchedule, make_schedule
from paha.training import DiffusionBatch, par_loss, train_diffusion, weighted_mse


def tiny_net(channels=4, d_audio=2, m=1, width=16, seed=0):
    torch.manual_seed(seed)
    return DenoiserNetwork(channels, audio_dim=(2 * m + 1) * d_audio, window=m, base_width=width)


# --- audio windowing ----------------------------------------------------------

def test_window_zero_is_identity():
    feats = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    track = window_audio(feats, 0)
    np.testing.assert_array_equal(track.windowed, feats)


def test_window_edge_replication_hand_expanded():
    feats = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]], dtype=np.float32)
    track = window_audio(feats, 2)
    np.testing.assert_array_equal(track.windowed[0], [1, 1, 1, 2, 3])
    np.testing.assert_array_equal(track.windowed[2], [1, 2, 3, 4, 5])
    np.testing.assert_array_equal(track.windowed[4], [3, 4, 5, 5, 5])


def test_window_constant_track():
    feats = np.full((4, 2), 7.0, dtype=np.float32)
    track = window_audio(feats, 1)
    assert track.windowed.shape == (4, 6)
    np.testing.assert_array_equal(track.windowed, np.full((4, 6), 7.0))


def test_window_invariant_general():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(7, 3)).astype(np.float32)
    m = 2
    track = window_audio(feats, m)
    for f in range(7):
        expect = np.concatenate([feats[min(max(f + o, 0), 6)] for o in range(-m, m + 1)])
        np.testing.assert_array_equal(track.windowed[f], expect)
    with pytest.raises(ValueError):
        window_audio(feats, -1)


def test_logmel_extractor_shapes_and_energy_ordering():
    sr, fps, frames = 16000, 25.0, 6
    n = int(sr / fps) * frames
    t = np.arange(n) / sr
    quiet = 0.01 * np.sin(2 * np.pi * 440 * t)
    loud = 0.5 * np.sin(2 * np.pi * 440 * t)
    ex = LogMelEnergyExtractor(n_bands=8)
    fq = ex.extract(quiet, sr, frames, fps)
    fl = ex.extract(loud, sr, frames, fps)
    assert fq.shape == (frames, 8)
    assert fl.sum() > fq.sum()


# --- reference merging ----------------------------------------------------------

def test_merge_reference_smallest_case():
    ref = torch.randn(3, 4, 4)
    with pytest.raises(ValueError):
        merge_reference(ref, torch.empty(0, 3, 4, 4))
    merged = merge_reference(ref, torch.randn(1, 3, 4, 4))
    assert merged.shape == (2, 3, 4, 4)


def test_merge_split_roundtrip_bit_exact():
    ref = torch.randn(2, 4, 4)
    vid = torch.randn(5, 2, 4, 4)
    r, v = split_reference(merge_reference(ref, vid))
    assert torch.equal(r, ref) and torch.equal(v, vid)


def test_merge_slots_verified_elementwise():
    ref = torch.randn(2, 3, 3)
    vid = torch.randn(4, 2, 3, 3)
    merged = merge_reference(ref, vid)
    assert torch.equal(merged[0], ref)
    for f in range(4):
        assert torch.equal(merged[f + 1], vid[f])
    with pytest.raises(ValueError):
        merge_reference(torch.randn(3, 3, 3), vid)


# --- noise prediction ----------------------------------------------------------

@pytest.mark.parametrize("frames", [1, 8, 16])
def test_predict_noise_shape_contract(frames):
    net = tiny_net()
    z = torch.randn(frames, 4, 4, 4)
    audio = torch.randn(frames, 6)
    out = predict_noise(net, z, audio, 3)
    assert out.shape == z.shape


def test_predict_noise_deterministic_in_eval():
    net = tiny_net().eval()
    z = torch.randn(3, 4, 4, 4)
    audio = torch.randn(3, 6)
    a = predict_noise(net, z, audio, 5)
    b = predict_noise(net, z, audio, 5)
    assert torch.equal(a, b)


def test_predict_noise_frame_mismatch_rejected():
    net = tiny_net()
    with pytest.raises(ValueError):
        predict_noise(net, torch.randn(3, 4, 4, 4), torch.randn(2, 6), 0)


def test_gradients_flow_to_latents_and_audio():
    net = tiny_net()
    z = torch.randn(2, 4, 4, 4, requires_grad=True)
    audio = torch.randn(2, 6, requires_grad=True)
    out = predict_noise(net, z, audio, 1)
    out.square().sum().backward()
    assert z.grad is not None and z.grad.abs().sum() > 0
    assert audio.grad is not None and audio.grad.abs().sum() > 0


def test_audio_conditioning_is_live_after_training():
    # brief training so cross-attention carries signal, then perturb audio
    torch.manual_seed(0)
    net = tiny_net(channels=2, d_audio=2, m=1, width=16)
    videos = torch.randn(6, 2, 2, 4, 4)
    audio = torch.randn(6, 2, 6)
    masks = torch.ones(6, 2, 4, 4)
    sched = make_schedule(50, "linear-beta")
    train_diffusion(net, videos, audio, masks, sched, steps=100, batch_size=4, lr=2e-3)
    z = torch.randn(2, 2, 4, 4)
    a = torch.randn(2, 6)
    with torch.no_grad():
        delta = (predict_noise(net, z, a, 10) - predict_noise(net, z, torch.zeros_like(a), 10)).abs().max()
    assert delta > 0


def test_predict_noise_gradient_matches_finite_differences():
    torch.manual_seed(3)
    net = tiny_net(channels=4, d_audio=2, m=1, width=16).double().eval()
    z = torch.randn(4, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    audio = torch.randn(4, 6, dtype=torch.float64)
    proj = torch.randn(4, 4, 8, 8, dtype=torch.float64)

    scalar = (predict_noise(net, z, audio, 7) * proj).sum()
    (grad,) = torch.autograd.grad(scalar, z)

    rng = np.random.default_rng(0)
    coords = [tuple(rng.integers(0, s) for s in z.shape) for _ in range(10)]
    eps = 1e-5
    for c in coords:
        zp = z.detach().clone()
        zm = z.detach().clone()
        zp[c] += eps
        zm[c] -= eps
        with torch.no_grad():
            fp = (predict_noise(net, zp, audio, 7) * proj).sum().item()
            fm = (predict_noise(net, zm, audio, 7) * proj).sum().item()
        fd = (fp - fm) / (2 * eps)
        rel = abs(fd - grad[c].item()) / max(abs(fd), abs(grad[c].item()), 1e-12)
        assert rel < 1e-3, f"coordinate {c}: fd={fd} autograd={grad[c].item()}"


# --- weighted loss ----------------------------------------------------------

def test_uniform_mask_equals_plain_mse():
    torch.manual_seed(1)
    pred = torch.randn(3, 2, 4, 8, 8)
    target = torch.randn_like(pred)
    w = torch.ones(3, 2, 8, 8)
    got = weighted_mse(pred, target, w)
    torch.testing.assert_close(got, torch.mean((pred - target) ** 2), atol=1e-6, rtol=0)


def test_mask_scale_invariance():
    torch.manual_seed(2)
    pred = torch.randn(2, 2, 3, 4, 4)
    target = torch.randn_like(pred)
    w = torch.rand(2, 2, 4, 4) + 0.5
    torch.testing.assert_close(
        weighted_mse(pred, target, w), weighted_mse(pred, target, 2 * w), atol=1e-6, rtol=0
    )


def test_two_region_mask_closed_form():
    # error confined to a weight-10 region vs the weight-1 remainder
    h = w = 8
    weights = torch.ones(1, 1, h, w)
    weights[..., :4, :] = 10.0  # region A: 32 cells, region B: 32 cells
    pred_a = torch.zeros(1, 1, 2, h, w)
    pred_a[..., :4, :] = 1.0  # unit error inside A only
    pred_b = torch.zeros(1, 1, 2, h, w)
    pred_b[..., 4:, :] = 1.0
    target = torch.zeros_like(pred_a)
    la = weighted_mse(pred_a, target, weights).item()
    lb = weighted_mse(pred_b, target, weights).item()
    n_a = n_b = 32.0
    denom = 10 * n_a + n_b
    assert abs(la - 10 * n_a / denom) < 1e-6
    assert abs(lb - n_b / denom) < 1e-6
    assert abs(la / lb - 10 * n_a / n_b) < 1e-6


def test_par_loss_uniform_matches_manual_eq1(tiny_batch=None):
    torch.manual_seed(4)
    net = tiny_net(channels=2, d_audio=2, m=1, width=16)
    sched = make_schedule(20, "linear-beta")
    batch = DiffusionBatch(
        videos=torch.randn(2, 3, 2, 4, 4),
        refs=torch.randn(2, 2, 4, 4),
        audio=torch.randn(2, 3, 6),
        masks=torch.ones(2, 3, 4, 4),
    )
    t = torch.tensor([5, 12])
    eps = torch.randn_like(batch.videos)
    loss = par_loss(net, batch, sched, t, eps)
    # manual: diffuse, run the net, plain MSE over the video slots
    lam = torch.tensor(sched.lam, dtype=torch.float32)[t].view(2, 1, 1, 1, 1)
    sig = torch.tensor(sched.sigma, dtype=torch.float32)[t].view(2, 1, 1, 1, 1)
    z_t = lam * batch.videos + sig * eps
    merged = torch.cat([batch.refs.unsqueeze(1), z_t], dim=1)
    audio_m = torch.cat([torch.zeros_like(batch.audio[:, :1]), batch.audio], dim=1)
    eps_hat = net(merged, audio_m, t)[:, 1:]
    torch.testing.assert_close(loss, torch.mean((eps_hat - eps) ** 2), atol=1e-6, rtol=0)


def test_par_loss_rejects_nonpositive_mask():
    net = tiny_net(channels=2, d_audio=2, m=1, width=16)
    sched = make_schedule(20, "linear-beta")
    batch = DiffusionBatch(
        videos=torch.randn(1, 2, 2, 4, 4),
        refs=torch.randn(1, 2, 4, 4),
        audio=torch.randn(1, 2, 6),
        masks=torch.zeros(1, 2, 4, 4),
    )
    with pytest.raises(ValueError):
        par_loss(net, batch, sched, torch.tensor([1]), torch.randn_like(batch.videos))


# --- sampler ----------------------------------------------------------

def test_unified_input_gaussian_statistics():
    out = make_unified_input(16, 8, 8, 8, seed=0)  # 8192 values
    more = make_unified_input(32, 8, 8, 8, seed=1)
    vals = torch.cat([out.video.flatten(), more.video.flatten()])
    assert vals.numel() >= 10_000
    assert abs(vals.mean().item()) < 0.05
    assert abs(vals.std().item() - 1.0) < 0.05
    assert out.mode == "noise"


def test_unified_input_first_frame_injection():
    ff = torch.randn(4, 4, 4)
    out = make_unified_input(6, 4, 4, 4, seed=3, first_frame=ff)
    assert out.mode == "first-frame"
    assert torch.equal(out.video[0], ff)
    with pytest.raises(ValueError):
        make_unified_input(6, 4, 4, 4, seed=3, first_frame=torch.randn(2, 4, 4))


def test_sampler_deterministic_and_shape_preserving():
    net = tiny_net().eval()
    sched = make_schedule(40, "linear-beta")
    inf = InferenceSchedule(sched, 6)
    ref = torch.randn(4, 4, 4)
    audio = torch.randn(5, 6)
    z = make_unified_input(5, 4, 4, 4, seed=9).video

    s1 = Sampler(net, inf, ref, audio)
    out1 = s1.plain_trajectory(z.clone())
    s2 = Sampler(net, inf, ref, audio)
    out2 = s2.plain_trajectory(z.clone())
    assert out1.shape == z.shape
    assert torch.equal(out1, out2)
    assert s1.stats.solver_calls == 6
    with pytest.raises(ValueError):
        s1.solve(z, 7)


def test_sampler_pins_first_frame_through_all_steps():
    net = tiny_net().eval()
    sched = make_schedule(40, "linear-beta")
    inf = InferenceSchedule(sched, 5)
    ref = torch.randn(4, 4, 4)
    ff = torch.randn(4, 4, 4)
    audio = torch.randn(4, 6)
    start = make_unified_input(4, 4, 4, 4, seed=2, first_frame=ff)
    sampler = Sampler(net, inf, ref, audio, first_frame=ff)
    out = sampler.plain_trajectory(start.video)
    assert torch.equal(out[0], ff)


def test_training_reduces_loss_on_small_dataset():
    # 50-clip corpus: loss after 500 steps falls by >= 50% of its starting
    # 10-step moving average
    torch.manual_seed(0)
    gen = torch.Generator().manual_seed(0)
    base = torch.randn(50, 1, 2, 4, 4, generator=gen)
    videos = base.repeat(1, 3, 1, 1, 1) + 0.05 * torch.randn(50, 3, 2, 4, 4, generator=gen)
    audio = torch.randn(50, 3, 6, generator=gen)
    masks = torch.ones(50, 3, 4, 4)
    net = tiny_net(channels=2, d_audio=2, m=1, width=16)
    sched = make_schedule(50, "linear-beta")
    losses = train_diffusion(net, videos, audio, masks, sched, steps=500, batch_size=8, lr=2e-3)
    start = float(np.mean(losses[:10]))
    end = float(np.mean(losses[-10:]))
    assert end <= 0.5 * start, f"loss only moved {start:.3f} -> {end:.3f}"
