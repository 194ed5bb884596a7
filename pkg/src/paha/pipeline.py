"""End-to-end stages: backbone training, negative generation, classifier
training, guided generation, stitching and evaluation.

Each stage reads/writes the documented artifact formats so the CLI stays a
thin argument-parsing shell and the acceptance suite can drive stages
directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import LogMelEnergyExtractor
from .checkpoint import Checkpoint, save_checkpoint
from .classifier import SyncClassifier
from .classifier_data import (
    SamplePair,
    held_out_accuracy,
    make_negative_samples,
    train_classifier,
)
from .codec import ConvAutoencoder, PatchifyCodec, train_codec
from .config import RunConfig
from .data import Clip, encode_clips, load_dataset
from .guidance import Classifiers, GuidanceConfig, RegionMasks, generate_long, sample_video
from .metrics import PoseFeatureEncoder, train_pose_encoder
from .network import DenoiserNetwork, LatentVideo
from .par_mask import build_reweight_sequence, downsample_mask
from .runs import MissingArtifactError
from .schedule import InferenceSchedule, NoiseSchedule, make_schedule
from .tensorio import load_tensor, save_tensor
from .training import train_diffusion


# --- codec -----------------------------------------------------------------

def build_codec(cfg: RunConfig, clips: list[Clip] | None, seed: int = 0):
    """Construct (and for the conv codec, fit) the latent codec."""
    if cfg.codec == "identity":
        return PatchifyCodec(factor=1)
    if cfg.codec == "patchify":
        return PatchifyCodec(factor=cfg.spatial_down)
    torch.manual_seed(seed)
    codec = ConvAutoencoder(latent_channels=cfg.latent_channels)
    if clips is None:
        raise ValueError("conv codec needs training clips")
    frames = torch.cat([c.frames for c in clips], dim=0)
    train_codec(codec, frames, steps=cfg.codec_steps, lr=cfg.codec_lr, seed=seed)
    return codec


def latent_masks_for_clips(cfg: RunConfig, clips: list[Clip], factor: int) -> torch.Tensor:
    """PAR re-weighting masks per clip, pooled down to latent resolution."""
    masks = []
    for clip in clips:
        seq = build_reweight_sequence(
            clip.pose,
            tau=cfg.tau,
            radius=cfg.r,
            omega1=cfg.omega1,
            omega2=cfg.omega2,
            blur_sigma=cfg.blur_sigma,
        )
        masks.append(downsample_mask(seq.weights, factor))
    return torch.from_numpy(np.stack(masks)).float()


# --- backbone bundle -----------------------------------------------------------

@dataclass
class Backbone:
    net: DenoiserNetwork
    codec: object
    schedule: NoiseSchedule
    cfg: RunConfig

    def inference(self, n_steps: int | None = None) -> InferenceSchedule:
        return InferenceSchedule(self.schedule, n_steps or self.cfg.T_infer)


def _new_denoiser(cfg: RunConfig) -> DenoiserNetwork:
    return DenoiserNetwork(
        latent_channels=cfg.latent_channels if cfg.codec == "conv" else 3 * cfg.spatial_down**2,
        audio_dim=(2 * cfg.m + 1) * cfg.d_audio,
        window=cfg.m,
        base_width=cfg.base_width,
    )


def stage_train(cfg: RunConfig, run_dir: Path, log_every: int = 100) -> dict:
    """Fit codec and denoiser on the dataset; writes backbone.ckpt."""
    clips = load_dataset(cfg.dataset_dir, limit=cfg.n_clips)
    codec = build_codec(cfg, clips, seed=cfg.seed)
    latents = encode_clips(clips, codec, window=cfg.m,
                           extractor=LogMelEnergyExtractor(cfg.d_audio), dilate=cfg.face_dilate)
    factor = clips[0].frames.shape[-1] // latents[0].video.shape[-1]
    masks = latent_masks_for_clips(cfg, clips, factor)
    videos = torch.stack([lc.video for lc in latents])
    audio = torch.stack([lc.audio for lc in latents])

    torch.manual_seed(cfg.seed)
    net = _new_denoiser(cfg)
    schedule = make_schedule(cfg.T_train, cfg.schedule_kind)
    losses = train_diffusion(
        net, videos, audio, masks, schedule,
        steps=cfg.train_steps, batch_size=cfg.batch_size, lr=cfg.lr,
        first_frame_prob=cfg.first_frame_prob, seed=cfg.seed, log_every=log_every,
    )
    save_tensor(run_dir / "reweight_masks.tnsr", masks.numpy())
    ckpt = run_dir / "backbone.ckpt"
    state_dicts = {"denoiser": net.state_dict()}
    if isinstance(codec, ConvAutoencoder):
        state_dicts["codec"] = codec.state_dict()
    save_checkpoint(
        ckpt,
        kind="backbone",
        manifest={
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "latent_scale": float(getattr(codec, "latent_scale", 1.0)),
        },
        tensors={"schedule/lam": schedule.lam, "schedule/sigma": schedule.sigma},
        state_dicts=state_dicts,
    )
    start = float(np.mean(losses[:10]))
    end = float(np.mean(losses[-10:]))
    return {
        "checkpoint": str(ckpt),
        "loss_start_ma10": start,
        "loss_end_ma10": end,
        "loss_drop": 1.0 - end / start,
        "steps": len(losses),
    }


def load_backbone(path: str | Path) -> Backbone:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"backbone checkpoint not found: {path}")
    ck = Checkpoint.load(path)
    if ck.kind != "backbone":
        raise MissingArtifactError(f"{path} is a {ck.kind} checkpoint, expected backbone")
    cfg = RunConfig.from_dict(ck.manifest["config"])
    net = _new_denoiser(cfg)
    net.load_state_dict(ck.state_dict("denoiser"))
    net.eval()
    if cfg.codec == "conv":
        codec = ConvAutoencoder(latent_channels=cfg.latent_channels)
        codec.load_state_dict(ck.state_dict("codec"))
        codec.eval()
        codec.latent_scale = ck.manifest["latent_scale"]
    else:
        codec = PatchifyCodec(factor=1 if cfg.codec == "identity" else cfg.spatial_down)
    schedule = NoiseSchedule(
        kind=cfg.schedule_kind,
        lam=ck.tensor("schedule/lam"),
        sigma=ck.tensor("schedule/sigma"),
    )
    schedule.validate()
    return Backbone(net=net, codec=codec, schedule=schedule, cfg=cfg)


# --- negatives -----------------------------------------------------------------

def stage_make_negatives(cfg: RunConfig, backbone_path: str | Path, run_dir: Path) -> dict:
    """Generate the self-distilled negative set; writes pairs under run_dir."""
    bb = load_backbone(backbone_path)
    clips = load_dataset(cfg.dataset_dir, limit=cfg.n_negative_clips)
    latents = encode_clips(clips, bb.codec, window=cfg.m,
                           extractor=LogMelEnergyExtractor(cfg.d_audio), dilate=cfg.face_dilate)
    inference = bb.inference()
    pairs = make_negative_samples(bb.net, inference, latents, seed=cfg.seed)
    pair_dir = run_dir / "pairs"
    pair_dir.mkdir(exist_ok=True)
    entries = []
    for k, (real, gen) in enumerate(pairs):
        base = pair_dir / f"pair_{k:05d}"
        save_tensor(f"{base}.real.tnsr", real.video.numpy())
        save_tensor(f"{base}.gen.tnsr", gen.video.numpy())
        save_tensor(f"{base}.audio.tnsr", real.audio.numpy())
        save_tensor(f"{base}.face.tnsr", real.face_mask.numpy())
        entries.append({"name": f"pair_{k:05d}", "ref_index": real.ref_index,
                        "clip": latents[k].name})
    (run_dir / "pairs.json").write_text(json.dumps({
        "pairs": entries,
        "config_digest": cfg.digest(),
        "backbone_digest": bb.cfg.digest(),
        "n_steps": inference.n_steps,
    }, indent=2, sort_keys=True) + "\n")
    return {"n_pairs": len(pairs), "dir": str(run_dir)}


def load_pairs(neg_dir: str | Path) -> list[tuple[SamplePair, SamplePair]]:
    neg_dir = Path(neg_dir)
    index = neg_dir / "pairs.json"
    if not index.exists():
        raise MissingArtifactError(
            f"no negative-sample index at {index}; run make-negatives first"
        )
    meta = json.loads(index.read_text())
    pairs = []
    for entry in meta["pairs"]:
        base = neg_dir / "pairs" / entry["name"]
        audio = torch.from_numpy(load_tensor(f"{base}.audio.tnsr"))
        face = torch.from_numpy(load_tensor(f"{base}.face.tnsr"))
        real = SamplePair(
            video=torch.from_numpy(load_tensor(f"{base}.real.tnsr")),
            audio=audio, label=1, face_mask=face, ref_index=entry["ref_index"],
        )
        gen = SamplePair(
            video=torch.from_numpy(load_tensor(f"{base}.gen.tnsr")),
            audio=audio.clone(), label=0, face_mask=face.clone(),
            ref_index=entry["ref_index"],
        )
        pairs.append((real, gen))
    return pairs


# --- classifiers -----------------------------------------------------------------

def stage_train_classifier(
    cfg: RunConfig,
    backbone_path: str | Path,
    negatives_dir: str | Path,
    kind: str,
    run_dir: Path,
    log_every: int = 100,
) -> dict:
    bb = load_backbone(backbone_path)
    pairs = load_pairs(negatives_dir)
    n_holdout = max(len(pairs) // 10, 1)
    train_pairs, holdout = pairs[:-n_holdout], pairs[-n_holdout:]

    torch.manual_seed(cfg.seed + (1 if kind == "face" else 2))
    classifier = SyncClassifier.from_denoiser(
        bb.net, kind=kind, n_steps=bb.schedule.steps,
        layers=cfg.cls_layers, heads=cfg.cls_heads,
    )
    losses = train_classifier(
        classifier, train_pairs, bb.schedule,
        steps=cfg.cls_steps, batch_pairs=cfg.cls_batch // 2 or 1, lr=cfg.cls_lr,
        mask_prob=cfg.mask_prob, lengths=cfg.length_schedule, seed=cfg.seed,
        freeze_encoder=cfg.freeze_encoder, log_every=log_every,
    )
    metrics = held_out_accuracy(classifier, holdout, bb.schedule, seed=cfg.seed)
    ckpt = run_dir / f"classifier_{kind}.ckpt"
    save_checkpoint(
        ckpt,
        kind="classifier",
        manifest={
            "kind": kind,
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "arch_digest": cfg.arch_digest(),
            "holdout": metrics,
        },
        tensors={},
        state_dicts={"classifier": classifier.state_dict()},
    )
    return {"checkpoint": str(ckpt), "loss_final": losses[-1], **metrics}


def load_classifier(path: str | Path, bb: Backbone) -> SyncClassifier:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"classifier checkpoint not found: {path}")
    ck = Checkpoint.load(path)
    if ck.kind != "classifier":
        raise MissingArtifactError(f"{path} is a {ck.kind} checkpoint, expected classifier")
    cfg = RunConfig.from_dict(ck.manifest["config"])
    classifier = SyncClassifier.from_denoiser(
        bb.net, kind=ck.manifest["kind"], n_steps=bb.schedule.steps,
        layers=cfg.cls_layers, heads=cfg.cls_heads,
    )
    classifier.load_state_dict(ck.state_dict("classifier"))
    classifier.eval()
    return classifier


def load_classifier_pair(face_path, nonface_path, bb: Backbone) -> Classifiers:
    face = load_classifier(face_path, bb)
    nonface = load_classifier(nonface_path, bb)
    if face.kind != "face" or nonface.kind != "non-face":
        raise MissingArtifactError(
            f"classifier kinds are ({face.kind}, {nonface.kind}); "
            "expected (face, non-face)"
        )
    return Classifiers(face=face, nonface=nonface)


# --- generation -----------------------------------------------------------------

def guidance_config(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(
        mode=cfg.mode,
        rate=cfg.rate,
        n_steps=cfg.T_infer,
        lambda_face=cfg.lambda_face,
        lambda_nonface=cfg.lambda_nonface,
        lambda_diff=cfg.lambda_diff,
        sign=cfg.sign,
        dg_strict_noop=cfg.dg_strict_noop,
    )


def conditioning_from_clip(bb: Backbone, clip: Clip, cfg: RunConfig, ref_index: int = 0):
    latents = encode_clips([clip], bb.codec, window=cfg.m,
                           extractor=LogMelEnergyExtractor(cfg.d_audio), dilate=cfg.face_dilate)[0]
    masks = RegionMasks.from_face(latents.face_mask)
    return latents.video[ref_index], latents.audio, masks, latents


def dump_png_frames(frames: torch.Tensor, out_dir: Path) -> None:
    """Write decoded frames [F, 3, H, W] in [0, 1] as numbered PNGs."""
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    px = (frames.clamp(0, 1) * 255).round().to(torch.uint8)
    for f in range(px.shape[0]):
        img = px[f].permute(1, 2, 0).numpy()
        Image.fromarray(img).save(out_dir / f"frame_{f:04d}.png")


def stage_generate(
    cfg: RunConfig,
    backbone_path: str | Path,
    run_dir: Path,
    clip_index: int = 0,
    seeds: list[int] | None = None,
    face_ckpt: str | Path | None = None,
    nonface_ckpt: str | Path | None = None,
    decode: bool = True,
    png: bool = False,
) -> dict:
    """Sample one or more videos for a dataset clip's conditioning."""
    bb = load_backbone(backbone_path)
    gcfg = guidance_config(cfg)
    classifiers = None
    if gcfg.mode != "off":
        if face_ckpt is None or nonface_ckpt is None:
            raise MissingArtifactError("guided modes need --face-ckpt and --nonface-ckpt")
        classifiers = load_classifier_pair(face_ckpt, nonface_ckpt, bb)
    clips = load_dataset(cfg.dataset_dir)
    if not 0 <= clip_index < len(clips):
        raise MissingArtifactError(f"clip index {clip_index} outside dataset of {len(clips)}")
    reference, audio, masks, _ = conditioning_from_clip(bb, clips[clip_index], cfg)
    inference = bb.inference()
    seeds = seeds if seeds is not None else [cfg.seed]

    runs = []
    for seed in seeds:
        t0 = time.perf_counter()
        z0, sampler = sample_video(
            bb.net, inference, gcfg, reference, audio, seed=seed,
            classifiers=classifiers, masks=masks,
        )
        sampling_s = time.perf_counter() - t0
        video = LatentVideo(z0, frame_rate=cfg.fps)  # validates finiteness
        t1 = time.perf_counter()
        frames = bb.codec.decode(video.data) if decode else None
        decoding_s = time.perf_counter() - t1
        name = f"video_seed{seed}"
        save_tensor(run_dir / f"{name}.tnsr", video.data.numpy())
        if frames is not None:
            px = (frames.clamp(0, 1) * 255).round().to(torch.uint8)
            save_tensor(run_dir / f"{name}.frames.tnsr", px.numpy())
            if png:
                dump_png_frames(frames, run_dir / name)
        runs.append({
            "seed": seed,
            "latents": f"{name}.tnsr",
            "sampling_seconds": sampling_s,
            "decoding_seconds": decoding_s,
            "solver_calls": sampler.stats.solver_calls,
            "gradient_calls": sampler.stats.gradient_calls,
            "guided_steps": sampler.stats.guided_steps,
            "step_seconds": sampler.stats.step_seconds,
        })
    return {
        "mode": gcfg.mode,
        "rate": gcfg.rate,
        "n_steps": inference.n_steps,
        "clip_index": clip_index,
        "runs": runs,
    }


def stage_stitch(
    cfg: RunConfig,
    backbone_path: str | Path,
    run_dir: Path,
    segment_len: int,
    n_segments: int,
    clip_index: int = 0,
    face_ckpt=None,
    nonface_ckpt=None,
) -> dict:
    """Chain first-frame-conditioned segments into one long video."""
    bb = load_backbone(backbone_path)
    gcfg = guidance_config(cfg)
    classifiers = None
    if gcfg.mode != "off":
        classifiers = load_classifier_pair(face_ckpt, nonface_ckpt, bb)
    clips = load_dataset(cfg.dataset_dir)
    clip = clips[clip_index % len(clips)]
    reference, audio, masks, latents = conditioning_from_clip(bb, clip, cfg)
    total = n_segments * (segment_len - 1) + 1
    if audio.shape[0] < total:
        # tile the clip's audio track to cover the requested length
        reps = -(-total // audio.shape[0])
        audio = audio.repeat(reps, 1)[:total]
        face_track = latents.face_mask.repeat(reps, 1, 1)[:total]
    else:
        audio = audio[:total]
        face_track = latents.face_mask[:total]
    full, segments = generate_long(
        bb.net, bb.inference(), gcfg, reference, audio,
        segment_len=segment_len, seed=cfg.seed,
        classifiers=classifiers, face_mask_track=face_track,
    )
    full = LatentVideo(full, frame_rate=cfg.fps).data  # validates finiteness
    save_tensor(run_dir / "long_video.tnsr", full.numpy())
    for k, seg in enumerate(segments):
        save_tensor(run_dir / f"segment_{k:02d}.tnsr", seg.numpy())
    boundary_ok = all(
        bool(torch.equal(segments[k][-1], segments[k + 1][0]))
        for k in range(len(segments) - 1)
    )
    return {
        "segments": len(segments),
        "segment_len": segment_len,
        "unique_frames": int(full.shape[0]),
        "boundaries_bit_exact": boundary_ok,
    }


# --- evaluation -----------------------------------------------------------------

def pose_trajectories(clips: list[Clip]) -> torch.Tensor:
    """Normalised keypoint trajectories [N, F, K, 2] for the feature encoder."""
    out = []
    for clip in clips:
        w, h = clip.pose.width, clip.pose.height
        traj = [[(kp.x / w, kp.y / h) for kp in frame] for frame in clip.pose.frames]
        out.append(traj)
    return torch.tensor(out, dtype=torch.float32)


def stage_eval(
    cfg: RunConfig,
    run_dir: Path,
    gen_pose_dirs: list[Path] | None = None,
    reports: list[Path] | None = None,
    feature_ckpt: Path | None = None,
    baseline: Path | None = None,
) -> dict:
    """Metric harness over pose sets, audio tracks and run reports."""
    from .metrics import (
        BeatTrack,
        audio_beats_from_waveform,
        bas,
        diversity,
        fgd,
        motion_beats_from_pose,
        time_cost,
    )
    from .par_mask import load_pose_jsonl

    clips = load_dataset(cfg.dataset_dir, limit=cfg.n_clips)
    trajectories = pose_trajectories(clips)
    n, frames, keypoints, _ = trajectories.shape

    if feature_ckpt is not None:
        ck = Checkpoint.load(feature_ckpt)
        encoder = PoseFeatureEncoder(
            frames=ck.manifest["frames"], keypoints=ck.manifest["keypoints"],
            feature_dim=ck.manifest["feature_dim"],
        )
        encoder.load_state_dict(ck.state_dict("encoder"))
        encoder.eval()
    else:
        torch.manual_seed(cfg.seed)
        encoder = PoseFeatureEncoder(frames=frames, keypoints=keypoints)
        train_pose_encoder(encoder, trajectories, seed=cfg.seed)
        save_checkpoint(
            run_dir / "pose_features.ckpt",
            kind="pose-features",
            manifest={
                "frames": frames, "keypoints": keypoints,
                "feature_dim": encoder.feature_dim, "config_digest": cfg.digest(),
            },
            tensors={},
            state_dicts={"encoder": encoder.state_dict()},
        )
    feature_hash = encoder.weight_hash()

    report: dict = {"feature_ckpt_hash": feature_hash, "n_samples": n}
    real_features = encoder.encode(trajectories)
    half = n // 2
    report["fgd_real_split"] = fgd(real_features[:half], real_features[half:])
    report["diversity_real"] = diversity(real_features, seed=cfg.seed)

    if gen_pose_dirs:
        gen_trajs = []
        for d in gen_pose_dirs:
            for path in sorted(Path(d).glob("*.jsonl")):
                pose = load_pose_jsonl(path, width=cfg.width, height=cfg.height)
                gen_trajs.append(
                    [[(kp.x / cfg.width, kp.y / cfg.height) for kp in fr] for fr in pose.frames]
                )
        if gen_trajs:
            gen_features = encoder.encode(torch.tensor(gen_trajs, dtype=torch.float32))
            report["fgd"] = fgd(real_features, gen_features)
            report["diversity_generated"] = diversity(gen_features, seed=cfg.seed)

    scores = []
    for clip in clips:
        audio_beats = audio_beats_from_waveform(clip.waveform, clip.sample_rate)
        pos = np.array([[(kp.x, kp.y) for kp in frame] for frame in clip.pose.frames])
        motion_beats = motion_beats_from_pose(pos, clip.fps)
        if motion_beats:
            scores.append(bas(BeatTrack(audio_beats, motion_beats)))
    if scores:
        report["bas_real"] = float(np.mean(scores))

    if reports:
        run_payloads = []
        for path in reports:
            data = json.loads(Path(path).read_text())
            run_payloads.extend(data.get("runs", [data]))
        report["time_cost"] = time_cost(run_payloads)

    if baseline is not None:
        base = json.loads(Path(baseline).read_text())
        if base.get("feature_ckpt_hash") != feature_hash:
            raise MissingArtifactError(
                "baseline metric report used feature checkpoint "
                f"{base.get('feature_ckpt_hash')}, current is {feature_hash}; "
                "refusing to compare across feature spaces"
            )
        report["baseline_diff"] = {
            k: report[k] - base[k]
            for k in ("fgd_real_split", "diversity_real")
            if k in base and isinstance(base[k], (int, float))
        }
    return report
