"""Pipeline driver: matching, pose recovery, plane-sweep depth, fusion, and
evaluation over a directory of images, with every intermediate written to
disk and a key=value run manifest.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .config import PipelineConfig, dump_config
from .depth import (
    DepthHypotheses,
    default_depth_range,
    extract_depth,
    plane_sweep,
)
from .errors import ConfigError, PipelineStageError
from .evaluation import cloud_metrics
from .fusion import fuse
from .geometry import (
    CameraIntrinsics,
    Match,
    Pose,
    decompose_essential,
    matches_as_arrays,
    ransac_essential,
    _normalized_homogeneous,
    _triangulate_normalized,
)
from .matching import (
    FeatureMap,
    FlowField,
    ImageBuffer,
    extract_features,
    flow_to_matches,
    solve_flow,
)
from .synth import plane_scene, point_scene, render, sphere_scene, ground_truth_flow

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".pgm", ".ppm", ".bmp")


def discover_images(image_dir):
    """Sorted image paths under a directory."""
    root = Path(image_dir)
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigError(f"no images found in {image_dir!r}")
    return paths


def default_intrinsics_for(img: ImageBuffer) -> CameraIntrinsics:
    """Fallback calibration guess: focal 1.2 * max dim, centered principal point."""
    f = 1.2 * max(img.width, img.height)
    return CameraIntrinsics(
        fx=f,
        fy=f,
        cx=(img.width - 1) / 2.0,
        cy=(img.height - 1) / 2.0,
        width=img.width,
        height=img.height,
    )


def _downscale_image(img: ImageBuffer, factor: int) -> ImageBuffer:
    if factor == 1:
        return img
    h = img.height // factor * factor
    w = img.width // factor * factor
    px = img.pixels[:h, :w]
    pooled = px.reshape(h // factor, factor, w // factor, factor, px.shape[2]).mean(axis=(1, 3))
    return ImageBuffer(pooled)


def _flow_cap_factor(img: ImageBuffer, max_dim: int) -> int:
    factor = 1
    while max(img.width, img.height) // factor > max_dim:
        factor *= 2
    return factor


def upscale_flow(flow: FlowField, factor: int) -> FlowField:
    """Nearest-neighbor upsample by `factor` with displacements rescaled."""
    if factor == 1:
        return flow
    f = np.repeat(np.repeat(flow.flow * factor, factor, axis=0), factor, axis=1)
    v = np.repeat(np.repeat(flow.valid, factor, axis=0), factor, axis=1)
    s = None
    if flow.score is not None:
        s = np.repeat(np.repeat(flow.score, factor, axis=0), factor, axis=1)
    return FlowField(f, v, score=s)


def flow_between_images(img_a: ImageBuffer, img_b: ImageBuffer, config: PipelineConfig):
    """Dense flow between two images, capped to config.flow_max_dim.

    Returns (FlowField, pixels_per_flow_cell): displacements are in cells of
    that many full-resolution pixels.
    """
    factor = _flow_cap_factor(img_a, config.flow_max_dim)
    a = _downscale_image(img_a, factor)
    b = _downscale_image(img_b, factor)
    fa = extract_features(a, config.features)
    fb = extract_features(b, config.features)
    flow = solve_flow(fa, fb, config.flow)
    return flow, factor * config.features.block


def matches_between_images(img_a: ImageBuffer, img_b: ImageBuffer, config: PipelineConfig):
    """Full-resolution matches from capped-resolution flow."""
    flow, cell = flow_between_images(img_a, img_b, config)
    return flow_to_matches(flow, scale=cell, stride=config.match_stride), flow, cell


def _triangulated_depths(matches, K: CameraIntrinsics, pose: Pose):
    """Reference-frame depths of matches under a relative pose (vectorized)."""
    xs, xps, _ = matches_as_arrays(matches)
    q1 = _normalized_homogeneous(xs, K)
    q2 = _normalized_homogeneous(xps, K)
    xh = _triangulate_normalized(q1, q2, pose)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = xh[:, 2] / xh[:, 3]
    return z


def recover_pose(img_ref: ImageBuffer, img_other: ImageBuffer, K, config: PipelineConfig):
    """Relative pose of `other` w.r.t. `ref` from dense flow + five-point RANSAC.

    Returns (pose with unit translation, matches, inlier mask).
    """
    matches, _, _ = matches_between_images(img_ref, img_other, config)
    e, mask = ransac_essential(matches, K, config.ransac)
    inliers = [m for m, keep in zip(matches, mask) if keep]
    pose = decompose_essential(e, inliers, K)
    return pose, matches, mask


class _StageTimer:
    def __init__(self, manifest):
        self.manifest = manifest

    def __call__(self, name):
        return _StageScope(self.manifest, name)


class _StageScope:
    def __init__(self, manifest, name):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest[f"stage.{self.name}.seconds"] = f"{time.perf_counter() - self.start:.3f}"
        return False


def _thread_map(fn, items, threads):
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    workers = threads if threads > 0 else None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_cameras_dir(camera_dir, stems):
    """Cameras named <image stem>.txt; all views must share one K."""
    cams = []
    for stem in stems:
        path = Path(camera_dir) / f"{stem}.txt"
        if not path.is_file():
            raise ConfigError(f"camera file missing for view {stem!r}: {path}")
        cams.append(formats.load_camera_sized(path))
    K0 = cams[0][0]
    for stem, (K, _) in zip(stems, cams):
        if (K.fx, K.fy, K.cx, K.cy, K.width, K.height) != (
            K0.fx,
            K0.fy,
            K0.cx,
            K0.cy,
            K0.width,
            K0.height,
        ):
            raise ConfigError(f"view {stem!r} has a different calibration; shared K required")
    return K0, [pose for _, pose in cams]


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute matching -> pose -> plane-sweep depth -> fusion -> evaluation.

    Pose recovery is skipped when calibrated cameras are supplied.  Returns
    the manifest (also written to <output>/manifest.txt); artifacts from
    completed stages stay on disk even if a later stage fails.
    """
    config.validate_paths()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    timer = _StageTimer(manifest)

    paths = discover_images(config.image_dir)
    if len(paths) < 2:
        raise ConfigError(f"need at least 2 images, found {len(paths)}")
    stems = [p.stem for p in paths]
    manifest["views.count"] = len(paths)
    for i, p in enumerate(paths):
        manifest[f"views.{i:02d}"] = p.name

    with timer("load"):
        images = [formats.load_image(p) for p in paths]
        sizes = {(im.width, im.height) for im in images}
        if len(sizes) != 1:
            raise PipelineStageError("load", f"inconsistent image sizes: {sorted(sizes)}")

    calibrated = bool(config.camera_dir)
    try:
        if calibrated:
            K, poses = load_cameras_dir(config.camera_dir, stems)
            if (K.width, K.height) != (images[0].width, images[0].height):
                raise ConfigError(
                    f"camera size {K.width}x{K.height} does not match images"
                )
            manifest["pose.source"] = "calibrated"
        else:
            with timer("pose"):
                K = default_intrinsics_for(images[0])
                poses = [Pose.identity()]
                pair_depths = {}
                for i in range(1, len(images)):
                    pose, matches, mask = recover_pose(images[0], images[i], K, config)
                    inliers = [m for m, keep in zip(matches, mask) if keep]
                    depths = _triangulated_depths(inliers, K, pose)
                    pair_depths[i] = (inliers, depths)
                    manifest[f"pose.{i:02d}.inliers"] = int(mask.sum())
                    poses.append(pose)
                # Express every pair in the scale of pair (0, 1): match the
                # triangulated depths of view-0 pixels shared across pairs.
                if len(images) > 2:
                    ref_map = {
                        tuple(np.round(m.x, 6)): d
                        for m, d in zip(*pair_depths[1])
                        if d > 0
                    }
                    for i in range(2, len(images)):
                        ratios = [
                            ref_map[key] / d
                            for m, d in zip(*pair_depths[i])
                            if d > 0 and (key := tuple(np.round(m.x, 6))) in ref_map
                        ]
                        if len(ratios) >= 10:
                            scale = float(np.median(ratios))
                            poses[i] = Pose(poses[i].rotation, poses[i].translation * scale)
                            manifest[f"pose.{i:02d}.scale"] = f"{scale:.9g}"
                est_dir = out / "cameras_est"
                est_dir.mkdir(exist_ok=True)
                for stem, pose in zip(stems, poses):
                    formats.write_camera_sized(est_dir / f"{stem}.txt", K, pose)
                manifest["pose.source"] = "five_point"
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError("pose", str(exc)) from exc

    try:
        with timer("features"):
            feats = _thread_map(
                lambda im: extract_features(im, config.features), images, config.threads
            )
    except Exception as exc:
        raise PipelineStageError("features", str(exc)) from exc

    try:
        with timer("range"):
            if config.d_min and config.d_max:
                d_min, d_max = config.d_min, config.d_max
                manifest["range.source"] = "config"
            else:
                rel = poses[1].compose(poses[0].inverse())
                matches, flow, cell = matches_between_images(images[0], images[1], config)
                flow_dir = out / "flow"
                flow_dir.mkdir(exist_ok=True)
                formats.write_flow(flow_dir / "flow_00_01.flo", flow)
                depths = _triangulated_depths(matches, K, rel)
                d_min, d_max = default_depth_range(depths)
                manifest["range.source"] = "triangulation"
            manifest["range.d_min"] = f"{d_min:.9g}"
            manifest["range.d_max"] = f"{d_max:.9g}"
            hyp = DepthHypotheses.inverse_uniform(d_min, d_max, config.num_planes)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError("range", str(exc)) from exc

    depth_dir = out / "depth"
    depth_dir.mkdir(exist_ok=True)

    def sweep_view(ref_i):
        sources = [
            (feats[j], poses[j].compose(poses[ref_i].inverse()))
            for j in range(len(images))
            if j != ref_i
        ]
        cost = plane_sweep(feats[ref_i], sources, K, hyp)
        return extract_depth(cost, hyp, config.depth)

    try:
        with timer("depth"):
            depth_maps = _thread_map(sweep_view, list(range(len(images))), config.threads)
            for stem, dmap in zip(stems, depth_maps):
                formats.write_depth(depth_dir / f"{stem}.pfm", dmap)
                formats.write_depth_preview(depth_dir / f"{stem}_preview.png", dmap)
                manifest[f"artifact.depth.{stem}"] = str(depth_dir / f"{stem}.pfm")
    except Exception as exc:
        raise PipelineStageError("depth", str(exc)) from exc

    try:
        with timer("fusion"):
            K_grid = K.scaled(config.features.block)
            min_views = min(config.fusion.min_views, len(images))
            fusion_params = config.fusion
            if min_views != config.fusion.min_views:
                fusion_params = replace(config.fusion, min_views=min_views)
                manifest["fusion.min_views_effective"] = min_views
            cloud = fuse(
                [(dmap, pose) for dmap, pose in zip(depth_maps, poses)],
                K_grid,
                fusion_params,
            )
            cloud_path = out / "cloud.ply"
            formats.write_ply(cloud_path, cloud)
            manifest["artifact.cloud"] = str(cloud_path)
            manifest["cloud.points"] = len(cloud)
    except Exception as exc:
        raise PipelineStageError("fusion", str(exc)) from exc

    if config.gt_cloud:
        try:
            with timer("eval"):
                gt = formats.load_ply(config.gt_cloud)
                metrics = cloud_metrics(cloud, gt, max_dist=config.eval_max_dist)
                manifest["metrics.cloud.mean_accuracy"] = f"{metrics.mean_accuracy:.9g}"
                manifest["metrics.cloud.mean_completeness"] = f"{metrics.mean_completeness:.9g}"
                manifest["metrics.cloud.overall"] = f"{metrics.overall:.9g}"
        except Exception as exc:
            raise PipelineStageError("eval", str(exc)) from exc

    (out / "config.txt").write_text(dump_config(config))
    formats.write_keyvalues(out / "manifest.txt", manifest)
    return manifest


# --- synthetic scene bundles ---

SCENE_KINDS = ("plane", "slanted", "sphere", "points", "plane_translate")


def make_scene(kind: str, num_views: int, width: int, height: int, seed: int, noise_sigma: float = 0.0):
    if kind == "plane":
        return plane_scene(num_views, width, height, seed=seed, noise_sigma=noise_sigma)
    if kind == "slanted":
        return plane_scene(num_views, width, height, slanted=True, seed=seed, noise_sigma=noise_sigma)
    if kind == "plane_translate":
        return plane_scene(
            num_views, width, height, converge=False, baseline=0.25, seed=seed, noise_sigma=noise_sigma
        )
    if kind == "sphere":
        return sphere_scene(num_views, width, height, seed=seed, noise_sigma=noise_sigma)
    if kind == "points":
        return point_scene(num_views, width, height, seed=seed)
    raise ConfigError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")


def write_synth_bundle(scene, out_dir, cloud_stride: int = 1) -> dict:
    """Render a scene into the exact directory layout the pipeline consumes.

    Writes images/, cameras/, depth_gt/, flow_gt/ (pairs 0 -> i), and
    cloud_gt.ply (back-projected valid ground-truth depths of every view).
    """
    out = Path(out_dir)
    for sub in ("images", "cameras", "depth_gt", "flow_gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    from .geometry import back_project

    manifest = {"scene.views": scene.num_views, "scene.seed": scene.seed}
    world_points = []
    for v in range(scene.num_views):
        img, dmap, pose = render(scene, v)
        stem = f"view{v:02d}"
        formats.write_image(out / "images" / f"{stem}.png", img)
        K = scene.cameras[v][0]
        formats.write_camera_sized(out / "cameras" / f"{stem}.txt", K, pose)
        formats.write_depth(out / "depth_gt" / f"{stem}.pfm", dmap)
        if v > 0:
            flow = ground_truth_flow(scene, 0, v)
            formats.write_flow(out / "flow_gt" / f"flow_00_{v:02d}.flo", flow)
        rr, cc = np.nonzero(dmap.valid)
        rr = rr[::cloud_stride]
        cc = cc[::cloud_stride]
        pix = np.stack([cc.astype(np.float64), rr.astype(np.float64)], axis=1)
        cam = back_project(K, pix, dmap.depth[rr, cc])
        world_points.append(pose.inverse().transform(cam))

    from .fusion import PointCloud

    points = np.concatenate(world_points)
    cloud = PointCloud(points, np.ones(len(points), dtype=np.int64), np.zeros(len(points)))
    formats.write_ply(out / "cloud_gt.ply", cloud)
    manifest["cloud_gt.points"] = len(cloud)
    formats.write_keyvalues(out / "scene.txt", manifest)
    return manifest
