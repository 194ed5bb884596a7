"""Tokenisation, scoring and gradient contracts for the sync classifiers."""

import math

import numpy as np
import pytest
import torch

from paha.classifier import (
    EncodingSet,
    SyncClassifier,
    apply_rope_3d,
    assemble_sequence,
    bce_loss,
    encode_audio_tokens,
    encode_video_tokens,
    global_max_pool,
    sync_gradient,
)
from paha.classifier_data import (
    SamplePair,
    apply_region_masking,
    augment_lengths,
    sample_reference_index,
)
from paha.network import DenoiserNetwork

C, D_AUDIO, M, WIDTH = 4, 2, 1, 16
AUDIO_DIM = (2 * M + 1) * D_AUDIO
N_STEPS = 50


def make_classifier(kind="non-face", seed=0):
    torch.manual_seed(seed)
    return SyncClassifier(
        latent_channels=C,
        audio_dim=AUDIO_DIM,
        window=M,
        n_steps=N_STEPS,
        kind=kind,
        base_width=WIDTH,
    ).eval()


def make_pair(frames=4, h=4, w=4, seed=0, label=1):
    g = torch.Generator().manual_seed(seed)
    face = torch.zeros(frames, h, w)
    face[:, : h // 2, : w // 2] = 1.0
    return SamplePair(
        video=torch.randn(frames, C, h, w, generator=g),
        audio=torch.randn(frames, AUDIO_DIM, generator=g),
        label=label,
        face_mask=face,
    )


# --- pooling and token construction ----------------------------------------

def test_gmp_matches_loop_oracle():
    feats = torch.randn(2, 3, 5, 2, 2)
    pooled = global_max_pool(feats)
    for b in range(2):
        for f in range(3):
            for c in range(5):
                expect = max(feats[b, f, c, y, x].item() for y in range(2) for x in range(2))
                assert pooled[b, f, c].item() == expect


def test_gmp_constant_map():
    feats = torch.full((1, 2, 3, 4, 4), 2.5)
    assert torch.all(global_max_pool(feats) == 2.5)


def test_video_token_count_independent_of_spatial_size():
    cls = make_classifier()
    t = torch.tensor([3])
    for h, w in [(4, 4), (8, 8)]:
        video = torch.randn(1, 8, C, h, w)
        audio = torch.randn(1, 8, AUDIO_DIM)
        tok = encode_video_tokens(cls.encoder, cls.enc_set, video, audio, t, N_STEPS)
        assert tok.shape == (1, 8, cls.width)


def test_video_tokens_reject_bad_timestep():
    cls = make_classifier()
    video = torch.randn(1, 2, C, 4, 4)
    audio = torch.randn(1, 2, AUDIO_DIM)
    with pytest.raises(ValueError):
        encode_video_tokens(cls.encoder, cls.enc_set, video, audio, torch.tensor([N_STEPS]), N_STEPS)


def test_zero_audio_tokens_equal_embeddings_exactly():
    cls = make_classifier()
    audio = torch.zeros(1, 5, AUDIO_DIM)
    tok = encode_audio_tokens(cls.audio_proj, cls.enc_set, audio)
    expect = cls.enc_set.modal[EncodingSet.MODAL_AUDIO] + cls.enc_set.temporal_audio[:5]
    torch.testing.assert_close(tok.squeeze(0), expect)


def test_audio_token_length_contract():
    cls = make_classifier()
    tok = encode_audio_tokens(cls.audio_proj, cls.enc_set, torch.randn(1, 16, AUDIO_DIM))
    assert tok.shape == (1, 16, cls.width)


def test_swapping_modal_rows_changes_tokens():
    cls = make_classifier()
    audio = torch.randn(1, 3, AUDIO_DIM)
    before = encode_audio_tokens(cls.audio_proj, cls.enc_set, audio)
    with torch.no_grad():
        cls.enc_set.modal.data = cls.enc_set.modal.data.flip(0)
    after = encode_audio_tokens(cls.audio_proj, cls.enc_set, audio)
    assert (before - after).abs().max() > 0


def test_sequence_assembly_lengths_and_layout():
    cls_tok = torch.randn(8)
    v = torch.randn(1, 8, 8)
    a = torch.randn(1, 16, 8)
    seq = assemble_sequence(v, a, cls_tok)
    assert seq.shape == (1, 25, 8)  # 8 + 16 + 1
    assert torch.equal(seq[0, 0], cls_tok)
    assert torch.equal(seq[0, 1], v[0, 0])
    assert torch.equal(seq[0, 9], a[0, 0])
    tiny = assemble_sequence(torch.randn(1, 1, 8), torch.randn(1, 1, 8), cls_tok)
    assert tiny.shape == (1, 3, 8)
    with pytest.raises(ValueError):
        assemble_sequence(v, torch.randn(1, 16, 4), cls_tok)


@pytest.mark.parametrize("t_v", [1, 2, 4, 6, 8])
@pytest.mark.parametrize("t_a", [1, 3, 5, 7, 16])
def test_token_length_reduction_grid(t_v, t_a):
    # pooled sequence length must be t_v + t_a + 1, never h*w*t_v + t_a + 1
    cls_tok = torch.randn(8)
    seq = assemble_sequence(torch.randn(2, t_v, 8), torch.randn(2, t_a, 8), cls_tok)
    assert seq.shape[1] == t_v + t_a + 1


def test_rope_preserves_norms_and_moves_phases():
    feats = torch.randn(1, 4, 12, 3, 3)
    rotated = apply_rope_3d(feats)
    # rotation is norm-preserving per channel pair (pairs along channel axis)
    e_in = feats[:, :, 0::2] ** 2 + feats[:, :, 1::2] ** 2
    e_out = rotated[:, :, 0::2] ** 2 + rotated[:, :, 1::2] ** 2
    torch.testing.assert_close(e_in, e_out, atol=1e-5, rtol=1e-5)
    # position (0,0,0) has zero phase everywhere, so it is untouched
    torch.testing.assert_close(rotated[0, 0, :, 0, 0], feats[0, 0, :, 0, 0])
    # some other position must actually rotate
    assert (rotated[0, 3, :, 2, 1] - feats[0, 3, :, 2, 1]).abs().max() > 1e-6


# --- scoring ----------------------------------------------------------------

def test_score_in_open_unit_interval():
    cls = make_classifier()
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        video = torch.randn(2, 3, C, 4, 4, generator=g) * 3
        audio = torch.randn(2, 3, AUDIO_DIM, generator=g) * 3
        s = cls(video, audio, torch.tensor([5, 40]))
        assert torch.all(s > 0) and torch.all(s < 1)


def test_head_reads_cls_position_only():
    cls = make_classifier()
    video = torch.randn(1, 4, C, 4, 4)
    audio = torch.randn(1, 4, AUDIO_DIM)
    tokens = cls.forward_tokens(video, audio, torch.tensor([7]))
    s = cls.head_score(tokens)
    perturbed = tokens.clone()
    perturbed[:, 1:] += torch.randn_like(perturbed[:, 1:]) * 10
    assert torch.equal(cls.head_score(perturbed), s)


def test_classifier_accepts_every_inference_timestep():
    cls = make_classifier()
    video = torch.randn(2, C, 4, 4)
    audio = torch.randn(2, AUDIO_DIM)
    with torch.no_grad():
        for t in range(0, N_STEPS, 7):
            s = cls.score(video, audio, t)
            assert 0 < float(s) < 1


def test_classifier_kind_validation_and_encoder_copy():
    with pytest.raises(ValueError):
        make_classifier(kind="hands")
    torch.manual_seed(0)
    net = DenoiserNetwork(C, AUDIO_DIM, window=M, base_width=WIDTH)
    cls = SyncClassifier.from_denoiser(net, "face", n_steps=N_STEPS)
    for a, b in zip(net.encoder.parameters(), cls.encoder.parameters()):
        assert torch.equal(a, b)
    # fine-tuning default: encoder parameters remain trainable
    assert all(p.requires_grad for p in cls.encoder.parameters())


# --- bce --------------------------------------------------------------------

def test_bce_values():
    half = torch.tensor(0.5)
    assert abs(bce_loss(half, torch.tensor(1.0)).item() - math.log(2)) < 1e-6
    assert abs(bce_loss(half, torch.tensor(0.0)).item() - math.log(2)) < 1e-6
    assert bce_loss(torch.tensor(0.999999), torch.tensor(1.0)).item() < 1e-4
    assert abs(bce_loss(torch.tensor(0.9), torch.tensor(0.0)).item() - 2.302585) < 1e-4
    # clamping keeps the loss finite at the boundary
    assert torch.isfinite(bce_loss(torch.tensor(1.0), torch.tensor(0.0)))


# --- sync gradient -----------------------------------------------------------

def test_sync_gradient_zero_mask_gives_zero():
    cls = make_classifier()
    z = torch.randn(2, C, 4, 4)
    audio = torch.randn(2, AUDIO_DIM)
    g = sync_gradient(cls, z, audio, 5, torch.zeros(2, 4, 4))
    assert torch.all(g == 0)


def test_sync_gradient_respects_mask_sparsity():
    cls = make_classifier()
    z = torch.randn(2, C, 4, 4)
    audio = torch.randn(2, AUDIO_DIM)
    mask = torch.zeros(2, 4, 4)
    mask[:, :2, :] = 1.0
    g = sync_gradient(cls, z, audio, 5, mask)
    assert torch.all(g[:, :, 2:, :] == 0)
    assert g[:, :, :2, :].abs().sum() > 0


def test_sync_gradient_requires_eval_mode():
    cls = make_classifier().train()
    with pytest.raises(RuntimeError):
        sync_gradient(cls, torch.randn(2, C, 4, 4), torch.randn(2, AUDIO_DIM), 5, torch.ones(2, 4, 4))


def test_sync_gradient_matches_finite_differences():
    torch.manual_seed(2)
    cls = make_classifier(seed=2).double().eval()
    z = torch.randn(2, C, 8, 8, dtype=torch.float64)
    audio = torch.randn(2, AUDIO_DIM, dtype=torch.float64)
    mask = torch.ones(2, 8, 8, dtype=torch.float64)
    for t in (5, 25, 45):
        g = sync_gradient(cls, z, audio, t, mask)
        rng = np.random.default_rng(t)
        coords = [tuple(rng.integers(0, s) for s in z.shape) for _ in range(10)]
        eps = 1e-5
        for c in coords:
            zp, zm = z.clone(), z.clone()
            zp[c] += eps
            zm[c] -= eps
            with torch.no_grad():
                fp = math.log(float(cls.score(zp, audio, t)))
                fm = math.log(float(cls.score(zm, audio, t)))
            fd = (fp - fm) / (2 * eps)
            rel = abs(fd - g[c].item()) / max(abs(fd), abs(g[c].item()), 1e-12)
            assert rel < 1e-3, f"t={t} coord={c}: fd={fd} grad={g[c].item()}"


# --- data factory -------------------------------------------------------------

def test_region_masking_forced_and_disabled():
    pair = make_pair()
    rng = np.random.default_rng(0)
    masked = apply_region_masking(pair, "non-face", rng, p=1.0)
    face = pair.face_mask.bool()
    assert torch.all(masked.video[face.unsqueeze(1).expand_as(masked.video)] == 0)
    assert torch.equal(masked.region_mask, 1.0 - pair.face_mask)
    untouched = apply_region_masking(pair, "non-face", rng, p=0.0)
    assert torch.equal(untouched.video, pair.video)
    assert untouched.region_mask is None

    face_kind = apply_region_masking(pair, "face", rng, p=1.0)
    outside = (~face).unsqueeze(1).expand_as(face_kind.video)
    assert torch.all(face_kind.video[outside] == 0)


def test_region_masking_probability():
    pair = make_pair()
    rng = np.random.default_rng(123)
    n = 10_000
    hits = sum(
        apply_region_masking(pair, "non-face", rng, p=0.8).region_mask is not None
        for _ in range(n)
    )
    assert 0.78 <= hits / n <= 0.82


def test_region_masking_empty_face_box_logged(caplog):
    pair = make_pair()
    pair = SamplePair(
        video=pair.video, audio=pair.audio, label=1, face_mask=torch.zeros_like(pair.face_mask)
    )
    rng = np.random.default_rng(0)
    with caplog.at_level("WARNING", logger="paha"):
        masked = apply_region_masking(pair, "face", rng, p=1.0)
    assert "empty face region" in caplog.text
    assert torch.all(masked.video == 0)


def test_augment_lengths_uniformity_and_scaling():
    pairs = [(make_pair(frames=12, seed=i), make_pair(frames=12, seed=i + 50, label=0)) for i in range(3)]
    rng = np.random.default_rng(7)
    lengths = (3, 6, 9, 12)  # a 1/10 desk scaling of {30, 60, 90, 120}
    draws = augment_lengths(pairs, lengths, 4000, rng)
    counts = {l: 0 for l in lengths}
    for d in draws:
        counts[d.length] += 1
        assert 0 <= d.start <= 12 - d.length
    for l in lengths:
        assert 900 <= counts[l] <= 1100, counts


def test_augment_skips_short_clips(caplog):
    pairs = [
        (make_pair(frames=4, seed=0), make_pair(frames=4, seed=1, label=0)),
        (make_pair(frames=8, seed=2), make_pair(frames=8, seed=3, label=0)),
    ]
    rng = np.random.default_rng(1)
    with caplog.at_level("WARNING", logger="paha"):
        draws = augment_lengths(pairs, (8,), 50, rng)
    assert all(pairs[d.pair_index][0].frames >= 8 for d in draws)
    assert "too short" in caplog.text


def test_reference_index_coverage():
    rng = np.random.default_rng(3)
    n_frames = 12
    seen = {sample_reference_index(n_frames, rng) for _ in range(10_000)}
    assert len(seen) > 0.9 * n_frames
    assert 0 in seen  # the first frame is always a candidate
