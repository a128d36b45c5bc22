"""Visibility-based fusion of per-view depth maps into one point cloud.

All depth maps share one intrinsic matrix (expressed at the depth-map
resolution) and carry poses mapping a common world frame into each camera.
A pixel is fused when enough other views agree with it under reprojection;
the emitted point back-projects the average of the agreeing depths.
"""

from dataclasses import dataclass

import numpy as np

from .depth import DepthMap
from .errors import TooFewViews
from .geometry import CameraIntrinsics, Pose, back_project

WORLD_FRAME = "world"


@dataclass(frozen=True)
class FusionParams:
    """Consistency thresholds and the minimum supporting-view count.

    min_views counts the reference view itself: min_views=2 keeps pixels
    confirmed by at least one other view.
    """

    max_reproj_px: float = 1.0
    max_rel_depth_diff: float = 0.01
    min_views: int = 3

    def __post_init__(self):
        if self.max_reproj_px <= 0 or self.max_rel_depth_diff <= 0:
            raise ValueError("fusion thresholds must be strictly positive")
        if self.min_views < 2:
            raise ValueError("min_views must be >= 2")


@dataclass(frozen=True)
class PointCloud:
    """Fused 3D points with per-point support counts and reprojection errors."""

    points: np.ndarray  # N x 3
    support_counts: np.ndarray  # N, int
    mean_reproj_errors: np.ndarray  # N, pixels
    frame: str = WORLD_FRAME

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        sup = np.asarray(self.support_counts, dtype=np.int64).reshape(-1)
        err = np.asarray(self.mean_reproj_errors, dtype=np.float64).reshape(-1)
        if sup.shape[0] != pts.shape[0] or err.shape[0] != pts.shape[0]:
            raise ValueError("per-point arrays must have matching lengths")
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "support_counts", sup)
        object.__setattr__(self, "mean_reproj_errors", err)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class ConsistencyResult:
    consistent: bool
    reprojected_depth: float  # the other view's surface depth in the reference frame
    reason: str  # "ok", "behind", "out_of_view", "invalid_depth", "mismatch"


def _roundtrip(
    pix: np.ndarray,
    depths: np.ndarray,
    other_depth: DepthMap,
    rel: Pose,
    K: CameraIntrinsics,
):
    """Vectorized reference -> other -> reference consistency check.

    pix: (N, 2) reference pixels; depths: (N,) their depths; rel maps the
    reference camera frame into the other camera frame.  Returns
    (consistent mask, reprojected depths, roundtrip pixel error, reason codes,
    other-view integer pixels).
    """
    n = pix.shape[0]
    reasons = np.full(n, "ok", dtype=object)
    consistent = np.ones(n, dtype=bool)
    reproj_depth = np.full(n, np.nan)
    err_px = np.full(n, np.nan)

    cam_other = rel.transform(back_project(K, pix, depths))
    z = cam_other[:, 2]
    behind = z <= 0
    reasons[behind] = "behind"
    consistent &= ~behind

    with np.errstate(divide="ignore", invalid="ignore"):
        qx = K.fx * cam_other[:, 0] / z + K.cx
        qy = K.fy * cam_other[:, 1] / z + K.cy
    qc = np.round(qx).astype(np.int64)
    qr = np.round(qy).astype(np.int64)
    inside = (
        ~behind
        & (qx >= 0)
        & (qx <= other_depth.width - 1)
        & (qy >= 0)
        & (qy <= other_depth.height - 1)
    )
    reasons[~inside & ~behind] = "out_of_view"
    consistent &= inside

    qc_safe = np.clip(qc, 0, other_depth.width - 1)
    qr_safe = np.clip(qr, 0, other_depth.height - 1)
    has_depth = inside & other_depth.valid[qr_safe, qc_safe]
    reasons[inside & ~has_depth] = "invalid_depth"
    consistent &= has_depth

    # Back-project the other view's surface sample into the reference frame.
    d_other = other_depth.depth[qr_safe, qc_safe]
    qpix = np.stack([qc_safe.astype(np.float64), qr_safe.astype(np.float64)], axis=1)
    cam_back = rel.inverse().transform(back_project(K, qpix, d_other))
    z_back = cam_back[:, 2]
    ok_z = has_depth & (z_back > 0)
    reasons[has_depth & ~ok_z] = "mismatch"
    consistent &= ok_z

    with np.errstate(divide="ignore", invalid="ignore"):
        px_back = K.fx * cam_back[:, 0] / z_back + K.cx
        py_back = K.fy * cam_back[:, 1] / z_back + K.cy
        err = np.hypot(px_back - pix[:, 0], py_back - pix[:, 1])
        rel_diff = np.abs(z_back - depths) / depths

    err_px[ok_z] = err[ok_z]
    reproj_depth[ok_z] = z_back[ok_z]
    return consistent, reproj_depth, err_px, rel_diff, reasons, qr_safe, qc_safe


def check_consistency(
    p,
    ref_depth: DepthMap,
    other,
    K: CameraIntrinsics,
    params: FusionParams,
) -> ConsistencyResult:
    """Check one reference pixel against another view.

    `p` is an (x, y) pixel of the reference view, which must be valid in
    ref_depth.  `other` is (DepthMap, Pose) with the pose mapping the
    reference camera frame into the other camera frame.  A projection that
    leaves the other image is reported as inconsistent, not an error.
    """
    x, y = int(p[0]), int(p[1])
    if not ref_depth.valid[y, x]:
        raise ValueError(f"pixel {p} is not valid in the reference depth map")
    other_map, rel = other
    pix = np.array([[float(x), float(y)]])
    depths = np.array([ref_depth.depth[y, x]])
    ok, reproj, err_px, rel_diff, reasons, _, _ = _roundtrip(pix, depths, other_map, rel, K)
    if not ok[0]:
        return ConsistencyResult(False, float(reproj[0]), str(reasons[0]))
    good = err_px[0] < params.max_reproj_px and rel_diff[0] < params.max_rel_depth_diff
    return ConsistencyResult(
        bool(good), float(reproj[0]), "ok" if good else "mismatch"
    )


def fuse(
    depth_maps,
    K: CameraIntrinsics,
    params: FusionParams = FusionParams(),
    view_ids=None,
) -> PointCloud:
    """Fuse per-view depth maps into a world-frame point cloud.

    `depth_maps` is a sequence of (DepthMap, Pose); poses map the world frame
    into each camera.  Views are processed in ascending view id (ids default
    to input order), so permuting the inputs together with their ids changes
    nothing but point order.  Each emitted point back-projects the mean of
    the reference depth and all consistent reprojected depths; pixels
    consumed as support for an earlier emission never re-emit.
    """
    maps = list(depth_maps)
    if len(maps) < 2:
        raise TooFewViews(f"fusion needs at least 2 depth maps, got {len(maps)}")
    if view_ids is None:
        view_ids = list(range(len(maps)))
    if len(view_ids) != len(maps) or len(set(view_ids)) != len(maps):
        raise ValueError("view_ids must be unique and match depth_maps")
    order = np.argsort(view_ids)

    consumed = {i: np.zeros((m.height, m.width), dtype=bool) for i, (m, _) in enumerate(maps)}

    all_points = []
    all_support = []
    all_errors = []

    for ref_i in order:
        ref_map, ref_pose = maps[ref_i]
        usable = ref_map.valid & ~consumed[ref_i]
        if not usable.any():
            continue
        rr, cc = np.nonzero(usable)
        pix = np.stack([cc.astype(np.float64), rr.astype(np.float64)], axis=1)
        depths = ref_map.depth[rr, cc]
        n = pix.shape[0]

        depth_sum = depths.copy()
        support = np.ones(n, dtype=np.int64)
        err_sum = np.zeros(n)
        supporters = []  # (view index, rows, cols, agreeing mask)

        for other_i in order:
            if other_i == ref_i:
                continue
            other_map, other_pose = maps[other_i]
            rel = other_pose.compose(ref_pose.inverse())
            ok, reproj, err_px, rel_diff, _, qr, qc = _roundtrip(
                pix, depths, other_map, rel, K
            )
            with np.errstate(invalid="ignore"):
                agrees = ok & (err_px < params.max_reproj_px) & (
                    rel_diff < params.max_rel_depth_diff
                )
            depth_sum[agrees] += reproj[agrees]
            support[agrees] += 1
            err_sum[agrees] += err_px[agrees]
            supporters.append((other_i, qr, qc, agrees))

        keep = support >= params.min_views
        if not keep.any():
            continue

        avg_depth = depth_sum[keep] / support[keep]
        cam_pts = back_project(K, pix[keep], avg_depth)
        world = ref_pose.inverse().transform(cam_pts)
        all_points.append(world)
        all_support.append(support[keep])
        all_errors.append(err_sum[keep] / (support[keep] - 1))

        consumed[ref_i][rr[keep], cc[keep]] = True
        for other_i, qr, qc, agrees in supporters:
            used = agrees & keep
            consumed[other_i][qr[used], qc[used]] = True

    if all_points:
        points = np.concatenate(all_points)
        support = np.concatenate(all_support)
        errors = np.concatenate(all_errors)
    else:
        points = np.zeros((0, 3))
        support = np.zeros(0, dtype=np.int64)
        errors = np.zeros(0)
    return PointCloud(points, support, errors, frame=WORLD_FRAME)


def audit_cloud(
    cloud: PointCloud,
    depth_maps,
    K: CameraIntrinsics,
    params: FusionParams,
) -> bool:
    """Re-check every fused point against the fusion criteria.

    Each point must project into at least min_views views (its reference
    included) onto valid pixels whose stored depth matches the point's depth
    within the fusion thresholds.
    """
    if len(cloud) == 0:
        return True
    agree_counts = np.zeros(len(cloud), dtype=np.int64)
    for dmap, pose in depth_maps:
        cam = pose.transform(cloud.points)
        z = cam[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            qx = K.fx * cam[:, 0] / z + K.cx
            qy = K.fy * cam[:, 1] / z + K.cy
        inside = front & (qx >= 0) & (qx <= dmap.width - 1) & (qy >= 0) & (qy <= dmap.height - 1)
        qc = np.clip(np.round(qx).astype(np.int64), 0, dmap.width - 1)
        qr = np.clip(np.round(qy).astype(np.int64), 0, dmap.height - 1)
        has = inside & dmap.valid[qr, qc]
        with np.errstate(invalid="ignore"):
            close = has & (np.abs(dmap.depth[qr, qc] - z) / z < params.max_rel_depth_diff)
        agree_counts += close.astype(np.int64)
    return bool(np.all(agree_counts >= params.min_views))
