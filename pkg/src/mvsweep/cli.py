"""Command-line interface: each pipeline stage independently invocable on
disk artifacts, plus `reconstruct` for the full run and `synth` for oracle
scenes.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import dump_config, load_config
from .depth import DepthHypotheses, extract_depth, plane_sweep
from .errors import ReconstructionError
from .evaluation import cloud_metrics, flow_metrics, depth_loss
from .fusion import fuse
from .matching import extract_features
from .pipeline import (
    SCENE_KINDS,
    default_intrinsics_for,
    discover_images,
    flow_between_images,
    load_cameras_dir,
    make_scene,
    recover_pose,
    run_pipeline,
    upscale_flow,
    write_synth_bundle,
)


def _add_config_args(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )


def _config_from(args, extra=None):
    overrides = list(args.overrides)
    if extra:
        overrides.extend(extra)
    return load_config(args.config, overrides)


def cmd_reconstruct(args):
    extra = [
        f"pipeline.image_dir={args.images}",
        f"pipeline.output_dir={args.output}",
    ]
    if args.cameras:
        extra.append(f"pipeline.camera_dir={args.cameras}")
    if args.gt_cloud:
        extra.append(f"pipeline.gt_cloud={args.gt_cloud}")
    if args.seed is not None:
        extra.append(f"pipeline.seed={args.seed}")
        extra.append(f"ransac.seed={args.seed}")
    if args.threads is not None:
        extra.append(f"pipeline.threads={args.threads}")
    config = _config_from(args, extra)
    manifest = run_pipeline(config)
    for key, value in manifest.items():
        print(f"{key}={value}")
    return 0


def cmd_flow(args):
    config = _config_from(args)
    img_a = formats.load_image(args.image_a)
    img_b = formats.load_image(args.image_b)
    flow, cell = flow_between_images(img_a, img_b, config)
    out = upscale_flow(flow, cell) if args.full_resolution else flow
    formats.write_flow(args.output, out)
    print(f"flow={args.output}")
    print(f"grid={out.grid_width}x{out.grid_height}")
    print(f"valid_fraction={out.valid.mean():.6f}")
    return 0


def cmd_pose(args):
    config = _config_from(args)
    img_a = formats.load_image(args.image_a)
    img_b = formats.load_image(args.image_b)
    if args.camera:
        K, _ = formats.load_camera_sized(args.camera)
    else:
        K = default_intrinsics_for(img_a)
    pose, matches, mask = recover_pose(img_a, img_b, K, config)
    formats.write_camera_sized(args.output, K, pose)
    print(f"camera={args.output}")
    print(f"matches={len(matches)}")
    print(f"inliers={int(mask.sum())}")
    return 0


def cmd_depth(args):
    config = _config_from(args)
    paths = discover_images(args.images)
    stems = [p.stem for p in paths]
    K, poses = load_cameras_dir(args.cameras, stems)
    images = [formats.load_image(p) for p in paths]
    feats = [extract_features(im, config.features) for im in images]
    ref = args.ref
    if not (0 <= ref < len(images)):
        raise ReconstructionError(f"--ref {ref} out of range for {len(images)} views")
    if not (args.d_min and args.d_max):
        raise ReconstructionError("--d-min and --d-max are required for the depth stage")
    hyp = DepthHypotheses.inverse_uniform(args.d_min, args.d_max, config.num_planes)
    sources = [
        (feats[j], poses[j].compose(poses[ref].inverse()))
        for j in range(len(images))
        if j != ref
    ]
    cost = plane_sweep(feats[ref], sources, K, hyp)
    dmap = extract_depth(cost, hyp, config.depth)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_depth(out / f"{stems[ref]}.pfm", dmap)
    formats.write_depth_preview(out / f"{stems[ref]}_preview.png", dmap)
    print(f"depth={out / (stems[ref] + '.pfm')}")
    print(f"valid_fraction={dmap.valid.mean():.6f}")
    return 0


def cmd_fuse(args):
    config = _config_from(args)
    depth_dir = Path(args.depth_dir)
    pfms = sorted(depth_dir.glob("*.pfm"))
    if len(pfms) < 2:
        raise ReconstructionError(f"need at least 2 depth maps in {depth_dir}")
    stems = [p.stem for p in pfms]
    K, poses = load_cameras_dir(args.cameras, stems)
    maps = [formats.load_depth(p) for p in pfms]
    scale = K.width // maps[0].width
    K_used = K.scaled(scale) if scale > 1 else K
    cloud = fuse(list(zip(maps, poses)), K_used, config.fusion)
    formats.write_ply(args.output, cloud, ascii_mode=args.ascii)
    print(f"cloud={args.output}")
    print(f"points={len(cloud)}")
    return 0


def cmd_eval(args):
    config = _config_from(args)
    results = {}
    if args.recon and args.gt:
        m = cloud_metrics(
            formats.load_ply(args.recon), formats.load_ply(args.gt), config.eval_max_dist
        )
        results["cloud.mean_accuracy"] = m.mean_accuracy
        results["cloud.mean_completeness"] = m.mean_completeness
        results["cloud.overall"] = m.overall
    if args.pred_flow and args.gt_flow:
        m = flow_metrics(formats.load_flow(args.pred_flow), formats.load_flow(args.gt_flow))
        results["flow.avg_epe"] = m.avg_epe
        results["flow.frac_gt3px"] = m.frac_gt3px
        results["flow.avg_err_gt3px"] = m.avg_err_gt3px
    if args.pred_depth and args.gt_depth:
        loss, count = depth_loss(
            formats.load_depth(args.pred_depth), formats.load_depth(args.gt_depth)
        )
        results["depth.loss_sum"] = loss
        results["depth.pixels"] = count
        results["depth.loss_mean"] = loss / count
    if not results:
        raise ReconstructionError("nothing to evaluate; pass --recon/--gt or flow/depth pairs")

    width = max(len(k) for k in results)
    for key, value in results.items():
        print(f"{key:<{width}}  {value:.9g}" if isinstance(value, float) else f"{key:<{width}}  {value}")
    if args.metrics_out:
        formats.write_keyvalues(args.metrics_out, results)
    if args.max_overall is not None and results.get("cloud.overall", 0.0) > args.max_overall:
        print(f"FAIL cloud.overall {results['cloud.overall']:.9g} > {args.max_overall}")
        return 1
    return 0


def cmd_synth(args):
    scene = make_scene(args.scene, args.views, args.width, args.height, args.seed, args.noise)
    manifest = write_synth_bundle(scene, args.output, cloud_stride=args.cloud_stride)
    for key, value in manifest.items():
        print(f"{key}={value}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvsweep",
        description="Multi-view structure-from-motion and plane-sweep stereo.",
    )
    parser.add_argument(
        "--dump-config", action="store_true", help="print all defaults and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("reconstruct", help="full pipeline on an image directory")
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", help="calibrated camera dir; omitted -> five-point poses")
    p.add_argument("--gt-cloud", dest="gt_cloud", help="reference PLY for evaluation")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    _add_config_args(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("flow", help="dense flow between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--output", required=True)
    p.add_argument(
        "--full-resolution",
        action="store_true",
        help="upsample the feature-grid flow to image resolution",
    )
    _add_config_args(p)
    p.set_defaults(fn=cmd_flow)

    p = sub.add_parser("pose", help="relative pose between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--camera", help="camera file providing K (default: guessed)")
    p.add_argument("--output", required=True)
    _add_config_args(p)
    p.set_defaults(fn=cmd_pose)

    p = sub.add_parser("depth", help="plane-sweep depth for one reference view")
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--d-min", dest="d_min", type=float)
    p.add_argument("--d-max", dest="d_max", type=float)
    p.add_argument("--output", required=True)
    _add_config_args(p)
    p.set_defaults(fn=cmd_depth)

    p = sub.add_parser("fuse", help="fuse a directory of depth maps into a cloud")
    p.add_argument("--depth-dir", dest="depth_dir", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    _add_config_args(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="compare artifacts against ground truth")
    p.add_argument("--recon", help="reconstructed PLY")
    p.add_argument("--gt", help="ground-truth PLY")
    p.add_argument("--pred-flow", dest="pred_flow")
    p.add_argument("--gt-flow", dest="gt_flow")
    p.add_argument("--pred-depth", dest="pred_depth")
    p.add_argument("--gt-depth", dest="gt_depth")
    p.add_argument("--metrics-out", dest="metrics_out", help="write key=value metrics file")
    p.add_argument(
        "--max-overall",
        dest="max_overall",
        type=float,
        help="exit nonzero when cloud.overall exceeds this",
    )
    _add_config_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic scene bundle")
    p.add_argument("--scene", choices=SCENE_KINDS, default="plane")
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--cloud-stride", dest="cloud_stride", type=int, default=1)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        sys.stdout.write(dump_config(load_config()))
        return 0
    if not getattr(args, "fn", None):
        parser.print_help()
        return 2
    try:
        return args.fn(args)
    except ReconstructionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
