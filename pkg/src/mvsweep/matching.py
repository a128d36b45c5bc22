"""Dense matching: hand-crafted features, 4D correlation volume, pyramid lookup,
and a fixed-iteration coarse-to-fine flow solver.

Flow convention: ``flow[..., 0]`` is the horizontal (x / column) displacement
and ``flow[..., 1]`` the vertical (y / row) displacement, in feature-grid
pixels.  Grid cell (r, c) at scale s corresponds to image coordinates
(s*c + (s-1)/2, s*r + (s-1)/2).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch, ImageTooSmall, NoValidFlow
from .geometry import Match

PYRAMID_KERNELS = (1, 2, 4, 8)


@dataclass(frozen=True)
class ImageBuffer:
    """An H x W x C intensity image with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"pixels must be HxWxC, got shape {px.shape}")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ImageTooSmall(f"image must be at least 16x16, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"intensities must lie in [0, 1], got [{px.min()}, {px.max()}]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def to_gray(self) -> np.ndarray:
        """Channel-mean luminance, H x W."""
        return self.pixels.mean(axis=2)


@dataclass(frozen=True)
class FeatureParams:
    """Descriptor settings for the hand-crafted per-pixel encoder."""

    block: int = 4  # image pixels per feature-grid cell
    sigma_fine: float = 1.0
    sigma_coarse: float = 2.5
    sigma_local_mean: float = 10.0  # DC estimate subtracted from gray channels
    orientation_bins: int = 8
    bias: float = 0.02  # constant channel; keeps flat patches normalizable

    def __post_init__(self):
        if self.block < 1:
            raise ValueError("block must be >= 1")
        if self.orientation_bins < 2:
            raise ValueError("need at least 2 orientation bins")
        if self.bias <= 0:
            raise ValueError("bias must be positive")

    @property
    def descriptor_dim(self):
        # gray x2, gradients x4, magnitude, orientation bins, bias
        return 7 + self.orientation_bins + 1


@dataclass(frozen=True)
class FeatureMap:
    """Unit-normalized descriptors on a 1/scale grid."""

    features: np.ndarray  # h x w x D
    scale: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError(f"features must be h x w x D, got {f.shape}")
        norms = np.linalg.norm(f, axis=2)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(
                f"descriptors must be unit norm, worst defect {np.abs(norms - 1.0).max():.3e}"
            )
        object.__setattr__(self, "features", f)

    @property
    def grid_height(self):
        return self.features.shape[0]

    @property
    def grid_width(self):
        return self.features.shape[1]

    @property
    def descriptor_dim(self):
        return self.features.shape[2]


@dataclass(frozen=True)
class CorrelationVolume:
    """Cosine similarities between all feature pairs: h1 x w1 x h2 x w2."""

    corr: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corr, dtype=np.float64)
        if c.ndim != 4:
            raise ValueError(f"correlation volume must be 4D, got {c.shape}")
        lo, hi = c.min(), c.max()
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"cosine similarities out of range: [{lo}, {hi}]")
        object.__setattr__(self, "corr", c)


@dataclass(frozen=True)
class CorrelationPyramid:
    """Mean-pooled copies of the volume over its last two dims, kernels 1/2/4/8."""

    levels: tuple

    def __post_init__(self):
        if len(self.levels) != len(PYRAMID_KERNELS):
            raise ValueError(f"expected {len(PYRAMID_KERNELS)} levels, got {len(self.levels)}")
        object.__setattr__(self, "levels", tuple(self.levels))


@dataclass(frozen=True)
class FlowField:
    """Dense displacement on the feature grid with a validity mask.

    Invalid pixels always carry zero flow.  `score` optionally records the
    center correlation produced by the solver (used as match confidence).
    """

    flow: np.ndarray  # h x w x 2, (dx, dy)
    valid: np.ndarray  # h x w bool
    score: np.ndarray = None

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=np.float64)
        v = np.asarray(self.valid, dtype=bool)
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError(f"flow must be h x w x 2, got {f.shape}")
        if v.shape != f.shape[:2]:
            raise ValueError(f"mask shape {v.shape} does not match flow {f.shape[:2]}")
        if not np.all(np.isfinite(f[v])):
            raise ValueError("flow must be finite at valid pixels")
        f = f.copy()
        f[~v] = 0.0
        object.__setattr__(self, "flow", f)
        object.__setattr__(self, "valid", v)
        if self.score is not None:
            s = np.asarray(self.score, dtype=np.float64)
            if s.shape != f.shape[:2]:
                raise ValueError(f"score shape {s.shape} does not match flow {f.shape[:2]}")
            object.__setattr__(self, "score", s)

    @property
    def grid_height(self):
        return self.flow.shape[0]

    @property
    def grid_width(self):
        return self.flow.shape[1]


@dataclass(frozen=True)
class FlowParams:
    """Iterative flow-solver settings.

    The default is a single stage: the pooled lookup pyramid already reaches
    displacements of radius * 8 grid cells, and extra stages built by pooling
    descriptors lose too much discriminability to help.
    """

    iterations: int = 12
    radius: int = 4
    smooth_lambda: float = 0.3
    stages: int = 1
    min_corr: float = 0.25

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not (0.0 <= self.smooth_lambda < 1.0):
            raise ValueError("smooth_lambda must lie in [0, 1)")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")


def _block_mean(arr: np.ndarray, block: int) -> np.ndarray:
    """Mean over non-overlapping block x block cells of the first two axes.

    Trailing rows/columns that do not fill a block are dropped.
    """
    h = arr.shape[0] // block * block
    w = arr.shape[1] // block * block
    a = arr[:h, :w]
    shape = (h // block, block, w // block, block) + a.shape[2:]
    return a.reshape(shape).mean(axis=(1, 3))


def extract_features(img: ImageBuffer, params: FeatureParams = FeatureParams()) -> FeatureMap:
    """Hand-crafted multi-channel descriptors at 1/block resolution.

    Channel layout (D = 7 + orientation_bins + 1, default 16):
      0: gray at sigma_fine, local mean removed
      1: gray at sigma_coarse, local mean removed
      2: d/dx at sigma_fine               3: d/dy at sigma_fine
      4: d/dx at sigma_coarse             5: d/dy at sigma_coarse
      6: gradient magnitude at sigma_fine
      7 .. 7+bins-1: oriented gradient energy, bin centers 2*pi*k/bins
      last: constant bias

    Every channel is (near) zero-mean so cosine similarity discriminates;
    each grid cell averages its block of pixels, then the descriptor is
    L2-normalized (the bias channel keeps flat patches well-defined).
    """
    gray = img.to_gray()
    if img.height < 4 * params.block or img.width < 4 * params.block:
        raise ImageTooSmall(
            f"need at least a 4x4 feature grid: image {img.height}x{img.width}, "
            f"block {params.block}"
        )

    dc = gaussian_filter(gray, params.sigma_local_mean, mode="reflect")
    g1 = gaussian_filter(gray, params.sigma_fine, mode="reflect") - dc
    g2 = gaussian_filter(gray, params.sigma_coarse, mode="reflect") - dc
    dx1 = gaussian_filter(gray, params.sigma_fine, order=(0, 1), mode="reflect")
    dy1 = gaussian_filter(gray, params.sigma_fine, order=(1, 0), mode="reflect")
    dx2 = gaussian_filter(gray, params.sigma_coarse, order=(0, 1), mode="reflect")
    dy2 = gaussian_filter(gray, params.sigma_coarse, order=(1, 0), mode="reflect")
    mag = np.hypot(dx1, dy1)
    theta = np.arctan2(dy1, dx1)

    channels = [g1, g2, dx1, dy1, dx2, dy2, mag]
    for k in range(params.orientation_bins):
        response = mag * np.clip(np.cos(theta - 2.0 * np.pi * k / params.orientation_bins), 0.0, None) ** 2
        channels.append(response)

    stack = np.stack(channels, axis=2)
    pooled = _block_mean(stack, params.block)
    bias = np.full(pooled.shape[:2] + (1,), params.bias)
    desc = np.concatenate([pooled, bias], axis=2)
    desc = desc / np.linalg.norm(desc, axis=2, keepdims=True)
    return FeatureMap(desc, scale=params.block)


def build_correlation_volume(f1: FeatureMap, f2: FeatureMap) -> CorrelationVolume:
    """All-pairs cosine similarity: corr[i, j, k, l] = <f1[i, j], f2[k, l]>."""
    if f1.descriptor_dim != f2.descriptor_dim:
        raise DimensionMismatch(
            f"descriptor dims differ: {f1.descriptor_dim} vs {f2.descriptor_dim}"
        )
    if f1.scale != f2.scale:
        raise DimensionMismatch(f"feature scales differ: {f1.scale} vs {f2.scale}")
    corr = np.tensordot(f1.features, f2.features, axes=([2], [2]))
    # Unit descriptors bound the inner product; clamp float residue only.
    corr = np.clip(corr, -1.0, 1.0)
    return CorrelationVolume(corr)


def _pool_last_two(vol: np.ndarray, kernel: int) -> np.ndarray:
    """Mean-pool the last two axes with `kernel`; edge blocks average what exists."""
    if kernel == 1:
        return vol
    h2, w2 = vol.shape[2], vol.shape[3]
    row_starts = np.arange(0, h2, kernel)
    col_starts = np.arange(0, w2, kernel)
    summed = np.add.reduceat(np.add.reduceat(vol, row_starts, axis=2), col_starts, axis=3)
    row_counts = np.minimum(row_starts + kernel, h2) - row_starts
    col_counts = np.minimum(col_starts + kernel, w2) - col_starts
    return summed / (row_counts[:, None] * col_counts[None, :])


def build_pyramid(vol: CorrelationVolume) -> CorrelationPyramid:
    """Four levels pooled from level 0 with kernels 1, 2, 4, 8."""
    return CorrelationPyramid(
        tuple(_pool_last_two(vol.corr, k) for k in PYRAMID_KERNELS)
    )


def _bilinear_rows(levels: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample levels[n] at (ys[n, s], xs[n, s]) bilinearly; out of bounds reads 0.

    levels: (N, hk, wk); ys, xs: (N, S).  Returns (N, S).
    """
    n, hk, wk = levels.shape
    flat = levels.reshape(n, hk * wk)
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape)
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yc = y0 + dy
        xc = x0 + dx
        inside = (yc >= 0) & (yc < hk) & (xc >= 0) & (xc < wk)
        yi = np.clip(yc, 0, hk - 1).astype(np.intp)
        xi = np.clip(xc, 0, wk - 1).astype(np.intp)
        vals = np.take_along_axis(flat, yi * wk + xi, axis=1)
        out += np.where(inside, vals * w, 0.0)
    return out


def _window_offsets(radius: int):
    """(S, 2) integer offsets (dy, dx), row-major over the window."""
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def lookup(pyr: CorrelationPyramid, flow: FlowField, radius: int) -> np.ndarray:
    """Windowed multi-scale correlation features for each reference pixel.

    For pixel p, level k is sampled bilinearly on a (2r+1)^2 grid centered at
    (p + flow(p)) / 2^k in that level's index space; samples outside the level
    read 0.  Returns (h, w, 4 * (2r+1)^2), levels ordered coarse-last and each
    window row-major in (dy, dx).
    """
    if radius < 1:
        raise ValueError("lookup radius must be >= 1")
    h1, w1 = pyr.levels[0].shape[:2]
    if flow.flow.shape[:2] != (h1, w1):
        raise DimensionMismatch(
            f"flow grid {flow.flow.shape[:2]} does not match volume {(h1, w1)}"
        )
    n = h1 * w1
    offsets = _window_offsets(radius)
    ys_grid, xs_grid = np.meshgrid(np.arange(h1), np.arange(w1), indexing="ij")
    tx = (xs_grid + flow.flow[:, :, 0]).reshape(n, 1)
    ty = (ys_grid + flow.flow[:, :, 1]).reshape(n, 1)

    chunks = []
    for level, kernel in zip(pyr.levels, PYRAMID_KERNELS):
        lv = level.reshape(n, level.shape[2], level.shape[3])
        ys = ty / kernel + offsets[None, :, 0]
        xs = tx / kernel + offsets[None, :, 1]
        chunks.append(_bilinear_rows(lv, ys, xs))
    return np.concatenate(chunks, axis=1).reshape(h1, w1, -1)


def _downscale_features(fmap: FeatureMap, factor: int) -> FeatureMap:
    """Block-mean the descriptor grid and renormalize to unit vectors."""
    if factor == 1:
        return fmap
    pooled = _block_mean(fmap.features, factor)
    norms = np.linalg.norm(pooled, axis=2, keepdims=True)
    return FeatureMap(pooled / norms, scale=fmap.scale * factor)


def _resize_flow(flow: np.ndarray, h: int, w: int) -> np.ndarray:
    """Crop or edge-pad a flow array to (h, w); values are left unscaled."""
    flow = flow[:h, :w]
    pad_h = h - flow.shape[0]
    pad_w = w - flow.shape[1]
    if pad_h > 0 or pad_w > 0:
        flow = np.pad(flow, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return flow


def _neighbor_mean(flow: np.ndarray) -> np.ndarray:
    """4-neighbor average; border pixels average their existing neighbors."""
    total = np.zeros_like(flow)
    count = np.zeros(flow.shape[:2])
    total[1:, :] += flow[:-1, :]
    count[1:, :] += 1
    total[:-1, :] += flow[1:, :]
    count[:-1, :] += 1
    total[:, 1:] += flow[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += flow[:, 1:]
    count[:, :-1] += 1
    return total / count[:, :, None]


def _solve_stage(vol: np.ndarray, flow: np.ndarray, params: FlowParams):
    """Fixed-count Jacobi updates of `flow` against one correlation volume.

    Returns (flow, per-iteration mean center correlation).  Every iteration
    proposes the best lookup sample (across pyramid levels, quadratically
    refined at level 0), blends it with the 4-neighbor flow average, and keeps
    the proposal only where it does not lower the center correlation.
    """
    h1, w1 = vol.shape[:2]
    n = h1 * w1
    pyramid = build_pyramid(CorrelationVolume(vol))
    level0 = pyramid.levels[0].reshape(n, vol.shape[2], vol.shape[3])
    offsets = _window_offsets(params.radius)
    side = 2 * params.radius + 1
    ys_grid, xs_grid = np.meshgrid(np.arange(h1), np.arange(w1), indexing="ij")
    px = xs_grid.reshape(n)
    py = ys_grid.reshape(n)

    means = []
    center = _bilinear_rows(
        level0,
        (py + flow[:, :, 1].reshape(n))[:, None],
        (px + flow[:, :, 0].reshape(n))[:, None],
    )[:, 0]

    for _ in range(params.iterations):
        fx = flow[:, :, 0].reshape(n)
        fy = flow[:, :, 1].reshape(n)
        tx = px + fx
        ty = py + fy

        best_val = np.full(n, -np.inf)
        best_dx = np.zeros(n)
        best_dy = np.zeros(n)
        windows0 = None
        for level, kernel in zip(pyramid.levels, PYRAMID_KERNELS):
            lv = level.reshape(n, level.shape[2], level.shape[3])
            ys = ty[:, None] / kernel + offsets[None, :, 0]
            xs = tx[:, None] / kernel + offsets[None, :, 1]
            vals = _bilinear_rows(lv, ys, xs)
            if kernel == 1:
                windows0 = vals
            arg = vals.argmax(axis=1)
            val = np.take_along_axis(vals, arg[:, None], axis=1)[:, 0]
            better = val > best_val
            best_val = np.where(better, val, best_val)
            best_dy = np.where(better, offsets[arg, 0] * kernel, best_dy)
            best_dx = np.where(better, offsets[arg, 1] * kernel, best_dx)

        # Sub-sample refinement from the level-0 window where the winner is
        # a level-0 interior sample: 1D parabola fits along x and y.
        w0 = windows0.reshape(n, side, side)
        arg0 = windows0.argmax(axis=1)
        r0 = arg0 // side
        c0 = arg0 % side
        at_level0 = (best_dy == offsets[arg0, 0]) & (best_dx == offsets[arg0, 1])
        interior = (r0 > 0) & (r0 < side - 1) & (c0 > 0) & (c0 < side - 1)
        refinable = at_level0 & interior
        rows = np.arange(n)
        rc = np.clip(r0, 1, side - 2)
        cc = np.clip(c0, 1, side - 2)
        cb = w0[rows, rc, cc]
        cl = w0[rows, rc, cc - 1]
        cr = w0[rows, rc, cc + 1]
        cu = w0[rows, rc - 1, cc]
        cd = w0[rows, rc + 1, cc]

        def parabola(lo, mid, hi):
            denom = lo - 2.0 * mid + hi
            with np.errstate(divide="ignore", invalid="ignore"):
                t = 0.5 * (lo - hi) / denom
            return np.clip(np.where(denom < 0, t, 0.0), -0.5, 0.5)

        sub_x = np.where(refinable, parabola(cl, cb, cr), 0.0)
        sub_y = np.where(refinable, parabola(cu, cb, cd), 0.0)

        data_fx = fx + best_dx + sub_x
        data_fy = fy + best_dy + sub_y

        smooth = _neighbor_mean(flow)
        cand_fx = (1.0 - params.smooth_lambda) * data_fx + params.smooth_lambda * smooth[
            :, :, 0
        ].reshape(n)
        cand_fy = (1.0 - params.smooth_lambda) * data_fy + params.smooth_lambda * smooth[
            :, :, 1
        ].reshape(n)

        # Greedy ascent with fallback: prefer the blended subpixel candidate,
        # else the raw window argmax, else stay.  Center correlation never
        # decreases, so the mean-correlation diagnostic is monotone.
        raw_fx = fx + best_dx
        raw_fy = fy + best_dy
        raw_center = _bilinear_rows(
            level0, (py + raw_fy)[:, None], (px + raw_fx)[:, None]
        )[:, 0]
        take_raw = raw_center >= center
        fx = np.where(take_raw, raw_fx, fx)
        fy = np.where(take_raw, raw_fy, fy)
        center = np.where(take_raw, raw_center, center)

        cand_center = _bilinear_rows(
            level0, (py + cand_fy)[:, None], (px + cand_fx)[:, None]
        )[:, 0]
        take_blend = cand_center >= center
        fx = np.where(take_blend, cand_fx, fx)
        fy = np.where(take_blend, cand_fy, fy)
        center = np.where(take_blend, cand_center, center)

        flow = np.stack([fx.reshape(h1, w1), fy.reshape(h1, w1)], axis=2)
        means.append(float(center.mean()))

    return flow, center.reshape(h1, w1), means


def solve_flow_with_diagnostics(
    f1: FeatureMap, f2: FeatureMap, params: FlowParams = FlowParams()
):
    """Run the coarse-to-fine solver and report mean center correlation.

    Returns (FlowField, stage_means) where stage_means[s] lists the mean
    center correlation after each iteration of stage s (coarsest first).
    """
    if f1.descriptor_dim != f2.descriptor_dim or f1.scale != f2.scale:
        raise DimensionMismatch("feature maps are not compatible")

    factors = [2 ** (params.stages - 1 - s) for s in range(params.stages)]
    # Skip coarse stages that would shrink either grid below 4 cells.
    min_dim = min(f1.grid_height, f1.grid_width, f2.grid_height, f2.grid_width)
    factors = [f for f in factors if min_dim // f >= 4] or [1]

    flow = None
    center = None
    stage_means = []
    for factor in factors:
        a = _downscale_features(f1, factor)
        b = _downscale_features(f2, factor)
        vol = build_correlation_volume(a, b).corr
        if flow is None:
            flow = np.zeros((a.grid_height, a.grid_width, 2))
        else:
            flow = 2.0 * np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1)
            flow = _resize_flow(flow, a.grid_height, a.grid_width)
        flow, center, means = _solve_stage(vol, flow, params)
        stage_means.append(means)

    valid = center >= params.min_corr
    return FlowField(flow, valid, score=center), stage_means


def solve_flow(f1: FeatureMap, f2: FeatureMap, params: FlowParams = FlowParams()) -> FlowField:
    """Dense flow from f1 to f2 after a fixed number of update iterations."""
    flow, _ = solve_flow_with_diagnostics(f1, f2, params)
    return flow


def flow_to_matches(flow: FlowField, scale: int, stride: int = 1):
    """One Match per valid flow pixel on a stride grid, at full image resolution.

    `scale` is the feature-grid downscale factor; grid cell centers map to
    image coordinates scale*c + (scale-1)/2.  Match weight is the stored
    center correlation clamped to [0, 1] (1.0 when no score is present).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not flow.valid.any():
        raise NoValidFlow("flow field has no valid pixels")
    off = (scale - 1) / 2.0
    matches = []
    for r in range(0, flow.grid_height, stride):
        for c in range(0, flow.grid_width, stride):
            if not flow.valid[r, c]:
                continue
            w = 1.0 if flow.score is None else float(np.clip(flow.score[r, c], 0.0, 1.0))
            x = np.array([scale * c + off, scale * r + off])
            dx, dy = flow.flow[r, c]
            matches.append(Match(x, x + np.array([scale * dx, scale * dy]), weight=w))
    if not matches:
        raise NoValidFlow("no valid pixels on the stride grid")
    return matches
