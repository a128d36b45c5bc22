"""Plane-sweep depth estimation: per-plane homography warps of source features
against a reference view, winner-take-all with subpixel refinement in inverse
depth.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveDepth, NoSourceViews
from .geometry import CameraIntrinsics, Pose
from .matching import FeatureMap


@dataclass(frozen=True)
class DepthHypotheses:
    """Candidate depth planes, uniformly spaced in inverse depth."""

    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"need at least 2 planes, got shape {p.shape}")
        if p[0] <= 0:
            raise NonPositiveDepth(f"plane depths must be positive, got {p[0]}")
        if not np.all(np.diff(p) > 0):
            raise ValueError("planes must be strictly increasing")
        inv = 1.0 / p
        steps = np.diff(inv)
        if p.size > 2 and np.abs(steps - steps[0]).max() > 1e-9 * abs(steps[0]):
            raise ValueError("planes must be uniform in inverse depth")
        object.__setattr__(self, "planes", p)

    @classmethod
    def inverse_uniform(cls, d_min: float, d_max: float, num_planes: int) -> "DepthHypotheses":
        if d_min <= 0:
            raise NonPositiveDepth(f"d_min must be positive, got {d_min}")
        if d_max <= d_min:
            raise ValueError(f"d_max ({d_max}) must exceed d_min ({d_min})")
        if num_planes < 2:
            raise ValueError("num_planes must be >= 2")
        inv = np.linspace(1.0 / d_min, 1.0 / d_max, num_planes)
        return cls(1.0 / inv)

    @property
    def num_planes(self):
        return self.planes.size

    @property
    def d_min(self):
        return float(self.planes[0])

    @property
    def d_max(self):
        return float(self.planes[-1])

    def spacing_at(self, depth: float) -> float:
        """Gap between the two planes bracketing `depth` (clamped at the ends)."""
        k = int(np.clip(np.searchsorted(self.planes, depth) - 1, 0, self.num_planes - 2))
        return float(self.planes[k + 1] - self.planes[k])


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth with a validity mask and its hypothesis range."""

    depth: np.ndarray
    valid: np.ndarray
    d_min: float
    d_max: float
    num_planes: int

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or v.shape != d.shape:
            raise ValueError(f"depth {d.shape} and mask {v.shape} must be matching 2D arrays")
        if not (self.d_min > 0 and self.d_max > self.d_min):
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.num_planes < 2:
            raise ValueError("num_planes must be >= 2")
        if v.any():
            held = d[v]
            if not np.all(np.isfinite(held)):
                raise ValueError("valid depths must be finite")
            if held.min() < self.d_min or held.max() > self.d_max:
                raise ValueError(
                    f"valid depths [{held.min()}, {held.max()}] escape "
                    f"[{self.d_min}, {self.d_max}]"
                )
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "valid", v)

    @classmethod
    def from_depths(cls, depth: np.ndarray, valid: np.ndarray) -> "DepthMap":
        """Wrap an exact depth image (e.g. rendered ground truth).

        The hypothesis range is the achieved range, padded so the bound
        invariants hold even for constant maps.
        """
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        if valid.any():
            lo = float(depth[valid].min())
            hi = float(depth[valid].max())
        else:
            lo, hi = 1.0, 2.0
        pad = max(1e-9 * hi, 1e-12)
        return cls(depth, valid, d_min=max(lo - pad, lo * 0.5), d_max=hi + pad, num_planes=2)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass(frozen=True)
class CostVolume:
    """Matching cost per (pixel, plane); +inf where no source view sees the warp."""

    cost: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=np.float64)
        if c.ndim != 3:
            raise ValueError(f"cost volume must be H x W x planes, got {c.shape}")
        if np.isnan(c).any():
            raise ValueError("cost volume contains NaN")
        object.__setattr__(self, "cost", c)


@dataclass(frozen=True)
class DepthParams:
    """Winner selection settings for extract_depth."""

    # A pixel is kept only when the best cost beats every plane outside the
    # refinement neighborhood by at least this margin...
    min_margin: float = 1e-3
    # ...and the best cost itself is good enough (1 - cosine units); border
    # pixels matched against few or clipped source views fail this.
    max_cost: float = 0.25

    def __post_init__(self):
        if self.min_margin < 0:
            raise ValueError("min_margin must be non-negative")
        if self.max_cost <= 0:
            raise ValueError("max_cost must be positive")


def homography_for_plane(K: CameraIntrinsics, pose: Pose, d: float) -> np.ndarray:
    """Pixel map induced by the fronto-parallel plane z = d in the reference frame.

    H = K (R - T n^T / d) K^-1 with n = (0, 0, -1), the plane normal facing
    the reference camera.  For any point X on the plane, H @ pi(X) equals the
    dehomogenized projection of K [R | T] X in the source view.
    """
    if d <= 0:
        raise NonPositiveDepth(f"plane depth must be positive, got {d}")
    k = K.as_matrix()
    mid = pose.rotation - np.outer(pose.translation, np.array([0.0, 0.0, -1.0])) / d
    return k @ mid @ K.inverse_matrix()


def _bilinear_features(feat: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an (h, w, D) feature array at (xs, ys); callers keep coords in bounds."""
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.clip(x0, 0, feat.shape[1] - 2)
    y0 = np.clip(y0, 0, feat.shape[0] - 2)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    top = feat[y0, x0] * (1 - fx) + feat[y0, x0 + 1] * fx
    bot = feat[y0 + 1, x0] * (1 - fx) + feat[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def plane_sweep(
    ref: FeatureMap,
    sources,
    K: CameraIntrinsics,
    hyp: DepthHypotheses,
) -> CostVolume:
    """Cost volume over depth hypotheses for a reference feature map.

    `sources` is a sequence of (FeatureMap, Pose) with poses mapping the
    reference camera frame into each source camera frame.  The cost at
    (pixel, plane) is the mean over visible sources of 1 - cosine similarity
    between the reference descriptor and the warped source descriptor; a
    source counts as visible when the warp lands at least one cell inside its
    grid.  Pixels no source sees get +inf.
    """
    sources = list(sources)
    if not sources:
        raise NoSourceViews("plane sweep needs at least one source view")
    for fmap, _ in sources:
        if fmap.descriptor_dim != ref.descriptor_dim or fmap.scale != ref.scale:
            raise DimensionMismatch("source feature map incompatible with reference")

    kg = K.scaled(ref.scale)
    h, w = ref.grid_height, ref.grid_width
    n = h * w
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ones = np.ones(n)
    grid_h = np.stack([xs.ravel(), ys.ravel(), ones], axis=0)  # 3 x N
    ref_flat = ref.features.reshape(n, ref.descriptor_dim)

    cost_sum = np.zeros((n, hyp.num_planes))
    seen = np.zeros((n, hyp.num_planes), dtype=np.int64)

    for fmap, pose in sources:
        feat = fmap.features
        sh, sw = fmap.grid_height, fmap.grid_width
        for k, d in enumerate(hyp.planes):
            hg = homography_for_plane(kg, pose, float(d))
            warped = hg @ grid_h
            zw = warped[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                px = warped[0] / zw
                py = warped[1] / zw
            visible = (
                (zw > 0)
                & (px >= 1.0)
                & (px <= sw - 2.0)
                & (py >= 1.0)
                & (py <= sh - 2.0)
            )
            if not visible.any():
                continue
            sample = _bilinear_features(feat, px[visible], py[visible])
            norms = np.linalg.norm(sample, axis=1)
            ok = norms > 1e-12
            cos = np.zeros(sample.shape[0])
            cos[ok] = np.einsum("nd,nd->n", ref_flat[visible][ok], sample[ok]) / norms[ok]
            idx = np.flatnonzero(visible)[ok]
            cost_sum[idx, k] += 1.0 - cos[ok]
            seen[idx, k] += 1

    with np.errstate(divide="ignore", invalid="ignore"):
        cost = cost_sum / seen
    cost[seen == 0] = np.inf
    return CostVolume(cost.reshape(h, w, hyp.num_planes))


def extract_depth(
    cost: CostVolume, hyp: DepthHypotheses, params: DepthParams = DepthParams()
) -> DepthMap:
    """Winner-take-all depth with single-parabola refinement in inverse depth.

    Pixels are invalid when the cost column is all +inf, the best cost
    exceeds `max_cost`, or the margin over every plane outside the winner's
    +-1 neighborhood is under `min_margin`.  Refinement never leaves the
    bracketing planes; edge winners keep the plane depth unrefined.
    """
    c = cost.cost
    h, w, num_planes = c.shape
    if num_planes != hyp.num_planes:
        raise DimensionMismatch(
            f"cost volume has {num_planes} planes, hypotheses {hyp.num_planes}"
        )
    flat = c.reshape(-1, num_planes)
    best = flat.argmin(axis=1)
    rows = np.arange(flat.shape[0])
    best_cost = flat[rows, best]
    valid = np.isfinite(best_cost) & (best_cost <= params.max_cost)

    # Margin against planes outside the refinement neighborhood of the winner.
    plane_idx = np.arange(num_planes)[None, :]
    near = np.abs(plane_idx - best[:, None]) <= 1
    masked = np.where(near, np.inf, flat)
    runner = masked.min(axis=1)
    with np.errstate(invalid="ignore"):
        margin = runner - best_cost
    valid &= ~(margin < params.min_margin)

    inv = 1.0 / hyp.planes
    depth = hyp.planes[best].astype(np.float64)

    interior = (best > 0) & (best < num_planes - 1) & valid
    if interior.any():
        i = np.flatnonzero(interior)
        k = best[i]
        lo = flat[i, k - 1]
        mid = flat[i, k]
        hi = flat[i, k + 1]
        finite = np.isfinite(lo) & np.isfinite(hi)
        denom = lo - 2.0 * mid + hi
        with np.errstate(divide="ignore", invalid="ignore"):
            t = 0.5 * (lo - hi) / denom
        t = np.where(finite & (denom > 0), np.clip(t, -0.5, 0.5), 0.0)
        du = (inv[k + 1] - inv[k - 1]) / 2.0
        depth[i] = 1.0 / (inv[k] + t * du)

    depth = np.clip(depth, hyp.d_min, hyp.d_max)
    out = np.where(valid, depth, 0.0).reshape(h, w)
    return DepthMap(
        out,
        valid.reshape(h, w),
        d_min=hyp.d_min,
        d_max=hyp.d_max,
        num_planes=num_planes,
    )


def default_depth_range(sparse_depths: np.ndarray) -> tuple:
    """Sweep range bracketing triangulated depths: [0.5 * p5, 2 * p95]."""
    d = np.asarray(sparse_depths, dtype=np.float64)
    d = d[np.isfinite(d) & (d > 0)]
    if d.size == 0:
        raise ValueError("no positive finite depths to derive a range from")
    return 0.5 * float(np.percentile(d, 5)), 2.0 * float(np.percentile(d, 95))
