"""Command-line entry point.

Subcommands cover the two training stages, joint finetuning, bucketed
evaluation, single-image inference, attention-map visualization, and mask
generation.  Training knobs layer three ways, lowest to highest precedence:
TrainConfig defaults, a YAML config file, explicit flags.  Every run
directory receives a frozen snapshot of the keys that shaped it.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from edge_lbam.config import (
    RUN_ROOT_ENV,
    load_config_file,
    merge_config,
    resolve_run_dir,
    snapshot_config,
)
from edge_lbam.data import (
    RATIO_BUCKETS,
    MaskSpec,
    bucket_label,
    generate_irregular_mask,
    load_image,
    load_mask,
    make_sample,
    preprocess,
    save_mask,
)
from edge_lbam.inpaint import VARIANTS
from edge_lbam.mecnet import VARIANTS as MECNET_VARIANTS
from edge_lbam.report import evaluate, inpaint_image, visualize_masks
from edge_lbam.train import (
    TrainConfig,
    finetune_joint,
    train_inpaint,
    train_mecnet,
)

logger = logging.getLogger(__name__)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True,
                        help="image list file, one path per line")
    parser.add_argument("--run", default=None,
                        help="run directory name under the run root "
                             f"(default: the stage name; root overridable "
                             f"via ${RUN_ROOT_ENV})")
    parser.add_argument("--config", default=None,
                        help="YAML file of TrainConfig keys")
    parser.add_argument("--resume", default=None,
                        help="checkpoint to continue from")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--adam-beta1", type=float, dest="adam_beta1")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--iterations", type=int,
                        help="explicit step budget replacing the epoch count")
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--mecnet-variant", choices=MECNET_VARIANTS,
                        dest="mecnet_variant")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--desk-scale", action=argparse.BooleanOptionalAction,
                        dest="desk_scale", default=None)
    parser.add_argument("--overfit", action=argparse.BooleanOptionalAction,
                        default=None)
    parser.add_argument("--size", type=int)
    parser.add_argument("--resize-min", type=int, dest="resize_min")
    parser.add_argument("--log-every", type=int, dest="log_every")
    parser.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    parser.add_argument("--vgg-weights", dest="vgg_weights")


_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def build_train_config(args: argparse.Namespace, stage: str) -> TrainConfig:
    """The effective config for one stage: defaults, then the config file,
    then flags; the subcommand pins the stage regardless of either."""
    file_values = load_config_file(args.config) if args.config else {}
    flag_values = {name: getattr(args, name, None) for name in _TRAIN_FIELDS}
    flag_values["stage"] = stage
    return merge_config(TrainConfig(stage=stage), file_values, flag_values)


def _snapshot(run_dir: Path, config: TrainConfig, **extras) -> None:
    payload = dataclasses.asdict(config)
    for key, value in extras.items():
        payload[key] = None if value is None else str(value)
    snapshot_config(run_dir, payload)


def cmd_train_mecnet(args) -> int:
    config = build_train_config(args, "mecnet")
    run_dir = resolve_run_dir(args.run or "mecnet")
    _snapshot(run_dir, config, manifest=args.manifest, resume=args.resume)
    ckpt = train_mecnet(config, args.manifest, run_dir, resume=args.resume)
    print(ckpt)
    return 0


def cmd_train_inpaint(args) -> int:
    config = build_train_config(args, "inpaint")
    run_dir = resolve_run_dir(args.run or "inpaint")
    _snapshot(run_dir, config, manifest=args.manifest,
              edge_source=args.edge_source,
              mecnet_checkpoint=args.mecnet_checkpoint, resume=args.resume)
    ckpt = train_inpaint(config, args.manifest, run_dir,
                         edge_source=args.edge_source,
                         mecnet_checkpoint=args.mecnet_checkpoint,
                         resume=args.resume)
    print(ckpt)
    return 0


def cmd_finetune_joint(args) -> int:
    config = build_train_config(args, "joint")
    run_dir = resolve_run_dir(args.run or "joint")
    _snapshot(run_dir, config, manifest=args.manifest,
              mecnet_checkpoint=args.mecnet_checkpoint,
              inpaint_checkpoint=args.inpaint_checkpoint, resume=args.resume)
    edge_ckpt, inpaint_ckpt = finetune_joint(
        args.mecnet_checkpoint, args.inpaint_checkpoint, config,
        args.manifest, run_dir, resume=args.resume)
    print(edge_ckpt)
    print(inpaint_ckpt)
    return 0


def cmd_eval(args) -> int:
    run_dir = resolve_run_dir(args.run or "eval")
    snapshot_config(run_dir, {
        "checkpoint": str(args.checkpoint),
        "manifest": str(args.manifest),
        "mecnet_checkpoint":
            None if args.mecnet_checkpoint is None
            else str(args.mecnet_checkpoint),
        "mask_dir": None if args.mask_dir is None else str(args.mask_dir),
        "seed": args.seed,
        "limit": args.limit,
        "size": args.size,
        "resize_min": args.resize_min,
    })
    report = evaluate(args.checkpoint, args.manifest, run_dir,
                      size=args.size, resize_min=args.resize_min,
                      mecnet=args.mecnet_checkpoint, seed=args.seed,
                      limit=args.limit, mask_dir=args.mask_dir)
    print(report.to_table())
    return 0


def _load_infer_inputs(args, resolution: int):
    """(corrupted image, mask, explicit edge) tensors at the model's
    resolution; the image is shortest-side resized then center cropped,
    masks and edge maps are nearest-resized."""
    arr = load_image(args.image)
    if arr is None:
        raise SystemExit(f"could not read image {args.image}")
    arr = preprocess(arr, None, resize_min=resolution, crop=resolution,
                     train=False)

    def binary_plane(path):
        plane = load_mask(path)
        if plane.shape != (resolution, resolution):
            img = Image.fromarray((plane * 255).astype(np.uint8), mode="L")
            img = img.resize((resolution, resolution), Image.NEAREST)
            plane = (np.asarray(img) > 127).astype(np.float32)
        return plane

    mask = binary_plane(args.mask)
    sample = make_sample(arr, mask)
    edge = None
    if args.edge is not None:
        edge = torch.from_numpy(binary_plane(args.edge))[None]
    return sample.image_corrupt, sample.mask, edge


def cmd_infer(args) -> int:
    from edge_lbam.train import inpaint_from_checkpoint

    model, _ = inpaint_from_checkpoint(args.checkpoint)
    corrupt, mask, edge = _load_infer_inputs(args, model.config.resolution)
    comp = inpaint_image(model, corrupt, mask, edge=edge,
                         mecnet=args.mecnet_checkpoint)
    out = (comp[0].clamp(0, 1).permute(1, 2, 0).numpy() * 255).round()
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out.astype(np.uint8), mode="RGB").save(args.output)
    print(args.output)
    return 0


def cmd_visualize_masks(args) -> int:
    from edge_lbam.train import inpaint_from_checkpoint

    model, _ = inpaint_from_checkpoint(args.checkpoint)
    corrupt, mask, edge = _load_infer_inputs(args, model.config.resolution)
    files = visualize_masks(model, corrupt, mask, args.out_dir, edge=edge,
                            mecnet=args.mecnet_checkpoint)
    for path in files.panels:
        print(path)
    print(files.grid)
    print(files.colorbar)
    return 0


def cmd_gen_masks(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buckets = RATIO_BUCKETS
    if args.bucket:
        wanted = set(args.bucket)
        buckets = tuple(b for b in RATIO_BUCKETS if bucket_label(b) in wanted)
    for bucket in buckets:
        label = bucket_label(bucket).rstrip("%")
        for i in range(args.count):
            spec = MaskSpec(ratio_bucket=bucket, seed=args.seed + i)
            mask = generate_irregular_mask(spec, args.size)
            save_mask(out_dir / f"mask_{label}_{i:03d}.png", mask)
    print(out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edge-lbam",
        description="edge-guided bidirectional attention inpainting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-mecnet", help="stage 1: edge completion")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_mecnet)

    p = sub.add_parser("train-inpaint", help="stage 2: attention U-Net")
    _add_train_flags(p)
    p.add_argument("--edge-source", dest="edge_source", default="ground_truth",
                   choices=("ground_truth", "mecnet_checkpoint"))
    p.add_argument("--mecnet-checkpoint", dest="mecnet_checkpoint",
                   default=None)
    p.set_defaults(func=cmd_train_inpaint)

    p = sub.add_parser("finetune-joint",
                       help="stage 3: finetune both networks end to end")
    _add_train_flags(p)
    p.add_argument("--mecnet-checkpoint", dest="mecnet_checkpoint",
                   required=True)
    p.add_argument("--inpaint-checkpoint", dest="inpaint_checkpoint",
                   required=True)
    p.set_defaults(func=cmd_finetune_joint)

    p = sub.add_parser("eval", help="bucketed metrics report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", default=None)
    p.add_argument("--mecnet-checkpoint", dest="mecnet_checkpoint",
                   default=None)
    p.add_argument("--mask-dir", dest="mask_dir", default=None,
                   help="evaluate under mask files instead of generated masks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None,
                   help="cap the number of images")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--resize-min", type=int, dest="resize_min", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="inpaint one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True,
                   help="8-bit mask image, white = known, black = hole")
    p.add_argument("--edge", default=None,
                   help="explicit edge map; otherwise the edge network "
                        "completes the visible edges")
    p.add_argument("--mecnet-checkpoint", dest="mecnet_checkpoint",
                   default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize-masks",
                       help="render traced attention maps to image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--edge", default=None)
    p.add_argument("--mecnet-checkpoint", dest="mecnet_checkpoint",
                   default=None)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_visualize_masks)

    p = sub.add_parser("gen-masks", help="write free-form mask files")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--count", type=int, default=10,
                   help="masks per ratio bucket")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bucket", action="append", default=None,
                   choices=[bucket_label(b) for b in RATIO_BUCKETS],
                   help="restrict to one or more buckets (repeatable)")
    p.set_defaults(func=cmd_gen_masks)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
