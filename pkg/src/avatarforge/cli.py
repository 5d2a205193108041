"""Command-line interface.

Subcommands: run, select-exemplar, stylize, train, render, evaluate.
Exit code is 0 only on full success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .avatar import (AvatarModel, TrainConfig, load_checkpoint,
                     render_image, train)
from .dataset import load_dataset
from .images import masked, save_image
from .metrics import sharpness, temporal_consistency
from .pipeline import PipelineConfig, run_pipeline, select_exemplar
from .stylize import SynthesisParams, propagate_sequence
from .guides import build_guides


def _parse_lip_indices(text: str | None):
    if not text:
        return None
    parts = [int(p) for p in text.replace(",", " ").split()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two landmark indices, e.g. '2,3'")
    return (parts[0], parts[1])


def _cmd_run(args) -> int:
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        doc.pop("instruction", None)
        config = PipelineConfig.from_dict(doc)
    else:
        config = PipelineConfig()
    if args.editor:
        config.editor = args.editor
    if args.cycles is not None:
        config.cycles = args.cycles
    if args.mode:
        config.mode = args.mode.replace("-", "_")
    if args.seed is not None:
        config.seed = args.seed
    if args.exemplar is not None:
        config.exemplar_override = args.exemplar
    if args.lip_indices:
        config.lip_landmark_indices = _parse_lip_indices(args.lip_indices)
    if args.steps is not None:
        config.training.steps_per_cycle = args.steps
    result = run_pipeline(args.dataset, args.instruction, config, args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"previews:   {result.previews_dir}")
    print(f"report:     {result.report_path}")
    return 0


def _cmd_select_exemplar(args) -> int:
    ds = load_dataset(args.dataset)
    idx = select_exemplar(ds, _parse_lip_indices(args.lip_indices), args.exemplar)
    print(idx)
    return 0


def _cmd_stylize(args) -> int:
    ds = load_dataset(args.dataset)
    from .images import load_image

    style = load_image(args.style)
    params = SynthesisParams(rng_seed=args.seed)
    targets = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    if args.dump_guides:
        src = args.exemplar
        for i in range(len(ds.frames)):
            if i == src:
                continue
            stack = build_guides(targets[src], ds.mask(src), ds.frames[src].landmarks,
                                 targets[i], ds.mask(i), ds.frames[i].landmarks)
            base = Path(args.dump_guides) / f"pair_{src:03d}_{i:03d}"
            save_image(stack.appearance_src, base / "appearance_src.png")
            save_image(stack.appearance_tgt, base / "appearance_tgt.png")
            save_image(np.dstack([stack.positional_tgt, np.zeros(stack.shape)]), base / "positional_tgt.png")
            save_image(stack.seg_src, base / "seg_src.png")
            save_image(stack.seg_tgt, base / "seg_tgt.png")
    outputs = propagate_sequence(ds, args.exemplar, style, targets, params, workers=args.workers)
    out = Path(args.out)
    for i, img in enumerate(outputs):
        save_image(img, out / f"{i:06d}.png")
    print(f"wrote {len(outputs)} frames to {out}")
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    if args.resume_from:
        model = load_checkpoint(args.resume_from)
        resume = True
    else:
        model = AvatarModel.create(resolution=args.grid_resolution,
                                   coeff_count=ds.expression_dim,
                                   deform_resolution=args.deform_resolution)
        resume = False
    config = TrainConfig(steps_per_cycle=args.steps, rng_seed=args.seed,
                         rays_per_step=args.rays, samples_per_ray=args.samples)
    images = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    train(model, ds, images, config, resume=resume,
          on_step=(lambda s, l: print(f"step {s}: loss {l:.6f}"))
          if args.verbose else None)
    from .avatar import save_checkpoint

    save_checkpoint(model, args.out)
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_render(args) -> int:
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.model)
    frame = ds.frames[args.pose_from_frame]
    e = frame.expression
    if args.expression:
        e = np.array([float(v) for v in args.expression.replace(",", " ").split()])
    img = render_image(model, ds.intrinsics, frame.pose, e,
                       n_samples=args.samples, seed=args.seed)
    save_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    if args.frames:
        from .images import load_image

        frame_dir = Path(args.frames)
        images = [load_image(frame_dir / f"{i:06d}.png") for i in range(len(ds.frames))]
    else:
        images = [ds.image(i) for i in range(len(ds.frames))]
    masks = [ds.mask(i) for i in range(len(ds.frames))]
    tracks = [fr.landmarks for fr in ds.frames]
    report = temporal_consistency(images, masks, tracks)
    report.sharpness_per_frame = [sharpness(img, m) for img, m in zip(images, masks)]
    report.sharpness = float(np.mean(report.sharpness_per_frame))
    report.save(args.out)
    if args.csv:
        report.save_csv(args.csv)
    print(json.dumps({"temporal_consistency": report.temporal_consistency,
                      "sharpness": report.sharpness}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatarforge",
                                     description="Instruction-driven head avatar editing")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="full editing pipeline")
    run.add_argument("--dataset", required=True)
    run.add_argument("--instruction", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--editor", help="mock:<kind> or http endpoint")
    run.add_argument("--cycles", type=int)
    run.add_argument("--mode", choices=["full", "one-seed-once", "ebsynth-once"])
    run.add_argument("--seed", type=int)
    run.add_argument("--steps", type=int, help="training steps per cycle")
    run.add_argument("--exemplar", type=int, help="override exemplar frame index")
    run.add_argument("--lip-indices", help="upper,lower landmark indices for exemplar selection")
    run.add_argument("--config", help="JSON config file mirroring PipelineConfig")
    run.set_defaults(func=_cmd_run)

    sel = sub.add_parser("select-exemplar", help="pick the mouth-open exemplar frame")
    sel.add_argument("--dataset", required=True)
    sel.add_argument("--lip-indices")
    sel.add_argument("--exemplar", type=int)
    sel.set_defaults(func=_cmd_select_exemplar)

    sty = sub.add_parser("stylize", help="propagate an edited exemplar over all frames")
    sty.add_argument("--dataset", required=True)
    sty.add_argument("--exemplar", type=int, required=True)
    sty.add_argument("--style", required=True, help="edited exemplar PNG")
    sty.add_argument("--out", required=True)
    sty.add_argument("--seed", type=int, default=0)
    sty.add_argument("--workers", type=int, default=1)
    sty.add_argument("--dump-guides", help="directory for guide channel PNG dumps")
    sty.set_defaults(func=_cmd_stylize)

    tr = sub.add_parser("train", help="fit the avatar to a dataset")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--rays", type=int, default=4096)
    tr.add_argument("--samples", type=int, default=96)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--grid-resolution", type=int, default=64)
    tr.add_argument("--deform-resolution", type=int, default=8)
    tr.add_argument("--resume-from", help="checkpoint to continue training")
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(func=_cmd_train)

    ren = sub.add_parser("render", help="render one view from a checkpoint")
    ren.add_argument("--model", required=True)
    ren.add_argument("--dataset", required=True)
    ren.add_argument("--pose-from-frame", type=int, required=True)
    ren.add_argument("--expression", help="override expression coefficients, e.g. '0.5,0.1'")
    ren.add_argument("--out", required=True)
    ren.add_argument("--samples", type=int, default=96)
    ren.add_argument("--seed", type=int, default=0)
    ren.set_defaults(func=_cmd_render)

    ev = sub.add_parser("evaluate", help="temporal consistency and sharpness report")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--frames", help="directory of NNNNNN.png frames to evaluate "
                                     "(defaults to the dataset's own images)")
    ev.add_argument("--out", required=True)
    ev.add_argument("--csv", help="optional per-frame CSV path")
    ev.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
