"""Command-line surface for the full pipeline.

Stage order: gen-data -> train -> make-negatives -> train-classifier (face
and non-face) -> generate / stitch-long -> eval. Every command owns a run
directory with the materialised config, a log and a JSON report. Exit codes:
0 ok, 2 config error, 3 missing input artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .pipeline import (
    stage_eval,
    stage_generate,
    stage_make_negatives,
    stage_stitch,
    stage_train,
    stage_train_classifier,
)
from .runs import (
    EXIT_CONFIG,
    EXIT_MISSING,
    EXIT_NUMERIC,
    EXIT_OK,
    MissingArtifactError,
    NumericError,
    run_directory,
    write_report,
)
from .synthetic import gen_synthetic_dataset

log = logging.getLogger("paha")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for field in (
        "dataset_dir", "n_clips", "seed", "mode", "rate",
        "lambda_face", "lambda_nonface", "lambda_diff",
        "train_steps", "cls_steps", "n_negative_clips",
    ):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "steps", None) is not None:
        overrides["T_infer"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _add_common(p: argparse.ArgumentParser, default_run: str) -> None:
    p.add_argument("--config", help="JSON run config; defaults are materialised")
    p.add_argument("--run-dir", default=default_run, help="output directory for this run")
    p.add_argument("--dataset", dest="dataset_dir", help="dataset root override")
    p.add_argument("--seed", type=int, help="seed override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paha",
        description="Parts-aware audio-driven animation: training, guided "
        "sampling and evaluation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic audio-motion dataset")
    _add_common(p, "runs/gen-data")
    p.add_argument("--n-clips", dest="n_clips", type=int)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("train", help="train codec and diffusion backbone")
    _add_common(p, "runs/train")
    p.add_argument("--train-steps", dest="train_steps", type=int)

    p = sub.add_parser("make-negatives", help="generate classifier negatives")
    _add_common(p, "runs/negatives")
    p.add_argument("--backbone", required=True)
    p.add_argument("--n-clips", dest="n_negative_clips", type=int)

    p = sub.add_parser("train-classifier", help="train a regional sync classifier")
    _add_common(p, "runs/classifier")
    p.add_argument("--kind", choices=["face", "non-face"], required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--negatives", required=True)
    p.add_argument("--cls-steps", dest="cls_steps", type=int)

    p = sub.add_parser("generate", help="sample videos, optionally guided")
    _add_common(p, "runs/generate")
    p.add_argument("--backbone", required=True)
    p.add_argument("--mode", choices=["off", "sg", "dg"])
    p.add_argument("--rate", type=float)
    p.add_argument("--lambda-face", dest="lambda_face", type=float)
    p.add_argument("--lambda-nonface", dest="lambda_nonface", type=float)
    p.add_argument("--lambda-diff", dest="lambda_diff", type=float)
    p.add_argument("--steps", type=int, help="inference steps (T_infer)")
    p.add_argument("--clip", type=int, default=0, help="conditioning clip index")
    p.add_argument("--seeds", type=int, nargs="*", help="explicit list of seeds")
    p.add_argument("--face-ckpt")
    p.add_argument("--nonface-ckpt")
    p.add_argument("--no-decode", action="store_true")
    p.add_argument("--png", action="store_true", help="also dump decoded frames as PNGs")

    p = sub.add_parser("stitch-long", help="chain segments via first-frame conditioning")
    _add_common(p, "runs/stitch")
    p.add_argument("--backbone", required=True)
    p.add_argument("--mode", choices=["off", "sg", "dg"])
    p.add_argument("--rate", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--segment-len", type=int, default=8)
    p.add_argument("--segments", type=int, default=4)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--face-ckpt")
    p.add_argument("--nonface-ckpt")

    p = sub.add_parser("eval", help="compute metrics over poses, audio and run reports")
    _add_common(p, "runs/eval")
    p.add_argument("--gen-poses", nargs="*", help="directories of generated pose JSONL files")
    p.add_argument("--reports", nargs="*", help="generation run reports for time cost")
    p.add_argument("--feature-ckpt", help="existing pose feature checkpoint")
    p.add_argument("--baseline", help="earlier metric report to diff against")
    return parser


def run_command(args) -> int:
    cfg = _load_config(args)
    with run_directory(args.run_dir, cfg) as run_dir:
        if args.command == "gen-data":
            root = gen_synthetic_dataset(
                cfg.dataset_dir,
                n_clips=cfg.n_clips,
                n_frames=args.frames or cfg.frames,
                height=cfg.height,
                width=cfg.width,
                fps=cfg.fps,
                sample_rate=cfg.sample_rate,
                seed=cfg.seed,
            )
            payload = {"dataset": str(root), "n_clips": cfg.n_clips}
        elif args.command == "train":
            payload = stage_train(cfg, run_dir)
        elif args.command == "make-negatives":
            payload = stage_make_negatives(cfg, args.backbone, run_dir)
        elif args.command == "train-classifier":
            payload = stage_train_classifier(
                cfg, args.backbone, args.negatives, args.kind, run_dir
            )
        elif args.command == "generate":
            payload = stage_generate(
                cfg, args.backbone, run_dir,
                clip_index=args.clip, seeds=args.seeds,
                face_ckpt=args.face_ckpt, nonface_ckpt=args.nonface_ckpt,
                decode=not args.no_decode, png=args.png,
            )
        elif args.command == "stitch-long":
            payload = stage_stitch(
                cfg, args.backbone, run_dir,
                segment_len=args.segment_len, n_segments=args.segments,
                clip_index=args.clip,
                face_ckpt=args.face_ckpt, nonface_ckpt=args.nonface_ckpt,
            )
        elif args.command == "eval":
            payload = stage_eval(
                cfg, run_dir,
                gen_pose_dirs=[Path(d) for d in args.gen_poses] if args.gen_poses else None,
                reports=[Path(r) for r in args.reports] if args.reports else None,
                feature_ckpt=Path(args.feature_ckpt) if args.feature_ckpt else None,
                baseline=Path(args.baseline) if args.baseline else None,
            )
        else:  # pragma: no cover - argparse enforces choices
            raise ConfigError(f"unknown command {args.command}")
        write_report(run_dir, "report.json", payload, cfg)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
