"""Synthetic scenes with analytic geometry: seeded procedural textures,
ray-cast renders with exact depth, and closed-form ground-truth flow.

All randomness is hash-based on (pixel, seed), never sequential, so renders
are bit-identical for a given seed regardless of evaluation order.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ViewIndexOutOfRange
from .geometry import CameraIntrinsics, Pose, project_points
from .matching import FlowField, ImageBuffer
from .depth import DepthMap


# --- hash-based value noise ---


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0, 1) values from integer lattice coordinates; stateless."""
    h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    h ^= np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    iu = np.floor(u)
    iv = np.floor(v)
    fu = _smoothstep(u - iu)
    fv = _smoothstep(v - iv)
    iu = iu.astype(np.int64)
    iv = iv.astype(np.int64)
    c00 = _hash01(iu, iv, seed)
    c10 = _hash01(iu + 1, iv, seed)
    c01 = _hash01(iu, iv + 1, seed)
    c11 = _hash01(iu + 1, iv + 1, seed)
    top = c00 * (1 - fu) + c10 * fu
    bot = c01 * (1 - fu) + c11 * fu
    return top * (1 - fv) + bot * fv


@dataclass(frozen=True)
class TextureParams:
    """Multi-octave value-noise texture over surface coordinates."""

    base_frequency: float = 3.0  # lattice cells per scene unit at octave 0
    octaves: int = 4
    persistence: float = 0.55

    def __post_init__(self):
        if self.base_frequency <= 0:
            raise ValueError("base_frequency must be positive")
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")


def sample_texture(u: np.ndarray, v: np.ndarray, params: TextureParams, seed: int) -> np.ndarray:
    """Procedural intensity in [0, 1] at surface coordinates (u, v)."""
    total = np.zeros_like(np.asarray(u, dtype=np.float64))
    amp_sum = 0.0
    for octave in range(params.octaves):
        freq = params.base_frequency * (2.0**octave)
        amp = params.persistence**octave
        total += amp * _value_noise(u * freq, v * freq, seed + 7919 * octave)
        amp_sum += amp
    return total / amp_sum


# --- analytic geometry ---


@dataclass(frozen=True)
class PlaneGeometry:
    """A bounded textured plane patch in the world frame."""

    point: np.ndarray  # a point on the plane
    normal: np.ndarray  # unit normal
    extent: float  # half-size along each in-plane axis

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = n / np.linalg.norm(n)
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)
        # Orthonormal in-plane axes, deterministic from the normal.
        helper = np.array([1.0, 0.0, 0.0])
        if abs(n @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        object.__setattr__(self, "_axes", (u, v))

    def intersect(self, origins, directions):
        """Ray parameters and surface UVs; t is in units of the direction vector."""
        denom = directions @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        rel = origins + directions * t[:, None] - self.point
        u_axis, v_axis = self._axes
        u = rel @ u_axis
        v = rel @ v_axis
        hit = (
            (np.abs(denom) > 1e-12)
            & (t > 0)
            & (np.abs(u) <= self.extent)
            & (np.abs(v) <= self.extent)
        )
        return t, hit, np.stack([u, v], axis=1)

    def surface_samples(self, n: int = 512) -> np.ndarray:
        side = int(np.ceil(np.sqrt(n)))
        lin = np.linspace(-self.extent, self.extent, side)
        uu, vv = np.meshgrid(lin, lin)
        u_axis, v_axis = self._axes
        return (
            self.point
            + uu.reshape(-1, 1) * u_axis
            + vv.reshape(-1, 1) * v_axis
        )


@dataclass(frozen=True)
class SphereGeometry:
    """A textured sphere."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", c)

    def intersect(self, origins, directions):
        oc = origins - self.center
        a = np.einsum("nd,nd->n", directions, directions)
        b = 2.0 * np.einsum("nd,nd->n", directions, oc)
        c = np.einsum("nd,nd->n", oc, oc) - self.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-b - sq) / (2.0 * a)
            t1 = (-b + sq) / (2.0 * a)
        t = np.where(t0 > 0, t0, t1)
        hit &= t > 0
        rel = origins + directions * t[:, None] - self.center
        # Angular surface coordinates scaled to scene units.
        u = np.arctan2(rel[:, 1], rel[:, 0]) * self.radius
        v = np.arccos(np.clip(rel[:, 2] / self.radius, -1.0, 1.0)) * self.radius
        return t, hit, np.stack([u, v], axis=1)

    def surface_samples(self, n: int = 512) -> np.ndarray:
        # Fibonacci sphere: deterministic, near-uniform.
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5**0.5) * i
        return self.center + self.radius * np.stack(
            [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1
        )


@dataclass(frozen=True)
class PointSetGeometry:
    """A sparse set of textured world points, splatted one pixel each."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if p.shape[0] < 1:
            raise ValueError("need at least one point")
        object.__setattr__(self, "points", p)

    def surface_samples(self, n: int = 512) -> np.ndarray:
        return self.points


@dataclass(frozen=True)
class SyntheticScene:
    """Analytic geometry plus cameras and a texture seed.

    Cameras are (CameraIntrinsics, Pose) with poses mapping the world frame
    (the reference frame of view 0) into each camera frame.
    """

    geometry: object
    cameras: list
    seed: int
    texture: TextureParams = field(default_factory=TextureParams)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("scene needs at least one camera")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def num_views(self):
        return len(self.cameras)

    def check_view(self, view: int):
        if not (0 <= view < self.num_views):
            raise ViewIndexOutOfRange(
                f"view {view} out of range for {self.num_views} cameras"
            )

    def coverage(self, view: int) -> float:
        """Fraction of geometry surface samples projecting inside the view."""
        self.check_view(view)
        K, pose = self.cameras[view]
        pts = self.geometry.surface_samples()
        px, z = project_points(K, pose, pts)
        inside = (
            (z > 0)
            & (px[:, 0] >= 0)
            & (px[:, 0] <= K.width - 1)
            & (px[:, 1] >= 0)
            & (px[:, 1] <= K.height - 1)
        )
        return float(inside.mean())


def _pixel_rays(K: CameraIntrinsics, pose: Pose, xs: np.ndarray, ys: np.ndarray):
    """World-frame camera center and per-pixel direction vectors.

    Directions are scaled so that the ray parameter equals camera-frame depth:
    X(z) = C + D * z has z as its depth in this camera.
    """
    d_cam = np.stack(
        [(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=1
    )
    center = -pose.rotation.T @ pose.translation
    dirs = d_cam @ pose.rotation  # R^T @ d per row
    return center, dirs


def _gaussian_pixel_noise(xs, ys, seed: int, sigma: float) -> np.ndarray:
    """Stateless per-pixel Gaussian noise via Box-Muller over hashed uniforms."""
    u1 = _hash01(xs.astype(np.int64), ys.astype(np.int64), seed ^ 0x5EED)
    u2 = _hash01(xs.astype(np.int64), ys.astype(np.int64), seed ^ 0xBEEF)
    u1 = np.clip(u1, 1e-12, 1.0)
    return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def render(scene: SyntheticScene, view: int):
    """Ray-cast one view: (ImageBuffer, DepthMap, Pose).

    Depth is exact camera-frame z wherever geometry is hit.  The image is the
    surface texture (mid-gray where nothing is hit), optionally with seeded
    per-pixel Gaussian noise.
    """
    scene.check_view(view)
    K, pose = scene.cameras[view]
    h, w = K.height, K.width
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xs = xs.ravel()
    ys = ys.ravel()

    if isinstance(scene.geometry, PointSetGeometry):
        depth = np.zeros(h * w)
        image = np.full(h * w, 0.5)
        hit = np.zeros(h * w, dtype=bool)
        px, z = project_points(K, pose, scene.geometry.points)
        order = np.argsort(z)[::-1]  # near points splat last and win
        for i in order:
            if z[i] <= 0:
                continue
            c = int(round(px[i, 0]))
            r = int(round(px[i, 1]))
            if not (0 <= c < w and 0 <= r < h):
                continue
            idx = r * w + c
            depth[idx] = z[i]
            hit[idx] = True
            image[idx] = sample_texture(
                np.array([float(i)]), np.array([0.0]), scene.texture, scene.seed
            )[0]
    else:
        center, dirs = _pixel_rays(K, pose, xs, ys)
        origins = np.broadcast_to(center, dirs.shape)
        depth, hit, uv = scene.geometry.intersect(origins, dirs)
        depth = np.where(hit, depth, 0.0)
        image = np.full(h * w, 0.5)
        if hit.any():
            image[hit] = sample_texture(uv[hit, 0], uv[hit, 1], scene.texture, scene.seed)

    if scene.noise_sigma > 0:
        image = image + _gaussian_pixel_noise(xs, ys, scene.seed + view, scene.noise_sigma)
    image = np.clip(image, 0.0, 1.0)

    buffer = ImageBuffer(image.reshape(h, w, 1))
    depth_map = DepthMap.from_depths(depth.reshape(h, w), hit.reshape(h, w))
    return buffer, depth_map, pose


def _first_hit_depth(scene: SyntheticScene, view: int, xs: np.ndarray, ys: np.ndarray):
    """Exact first-hit depth along the rays of arbitrary pixel coordinates."""
    K, pose = scene.cameras[view]
    center, dirs = _pixel_rays(K, pose, xs, ys)
    origins = np.broadcast_to(center, dirs.shape)
    t, hit, _ = scene.geometry.intersect(origins, dirs)
    return t, hit


def ground_truth_flow(
    scene: SyntheticScene, view_a: int, view_b: int, grid_block: int = 1
) -> FlowField:
    """Exact correspondence field from view_a to view_b.

    With grid_block > 1 the flow is produced on the 1/grid_block feature grid
    (cell centers, displacements in grid cells).  Pixels are invalid where
    view_a hits nothing, the point leaves view_b, or it is occluded in view_b
    (relative depth tolerance 1e-6).
    """
    scene.check_view(view_a)
    scene.check_view(view_b)
    K_a, pose_a = scene.cameras[view_a]
    K_b, pose_b = scene.cameras[view_b]

    if isinstance(scene.geometry, PointSetGeometry):
        return _point_set_flow(scene, view_a, view_b, grid_block)

    gh = K_a.height // grid_block
    gw = K_a.width // grid_block
    off = (grid_block - 1) / 2.0
    gy, gx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    xs = (grid_block * gx + off).ravel()
    ys = (grid_block * gy + off).ravel()

    center_a, dirs_a = _pixel_rays(K_a, pose_a, xs, ys)
    origins = np.broadcast_to(center_a, dirs_a.shape)
    z_a, hit, _ = scene.geometry.intersect(origins, dirs_a)
    world = origins + dirs_a * np.where(hit, z_a, 1.0)[:, None]

    px_b, z_b = project_points(K_b, pose_b, world)
    valid = (
        hit
        & (z_b > 0)
        & (px_b[:, 0] >= 0)
        & (px_b[:, 0] <= K_b.width - 1)
        & (px_b[:, 1] >= 0)
        & (px_b[:, 1] <= K_b.height - 1)
    )

    # Occlusion: another part of the geometry in front along view_b's ray.
    vis, vis_hit = _first_hit_depth(scene, view_b, px_b[:, 0], px_b[:, 1])
    occluded = vis_hit & (z_b > vis * (1.0 + 1e-6))
    valid &= ~occluded

    flow = np.zeros((gh * gw, 2))
    flow[:, 0] = (px_b[:, 0] - xs) / grid_block
    flow[:, 1] = (px_b[:, 1] - ys) / grid_block
    flow[~valid] = 0.0
    return FlowField(flow.reshape(gh, gw, 2), valid.reshape(gh, gw))


def _point_set_flow(scene, view_a, view_b, grid_block):
    K_a, pose_a = scene.cameras[view_a]
    K_b, pose_b = scene.cameras[view_b]
    gh = K_a.height // grid_block
    gw = K_a.width // grid_block
    flow = np.zeros((gh, gw, 2))
    valid = np.zeros((gh, gw), dtype=bool)
    pts = scene.geometry.points
    px_a, z_a = project_points(K_a, pose_a, pts)
    px_b, z_b = project_points(K_b, pose_b, pts)
    off = (grid_block - 1) / 2.0
    order = np.argsort(z_a)[::-1]
    for i in order:
        if z_a[i] <= 0 or z_b[i] <= 0:
            continue
        c = int(round((px_a[i, 0] - off) / grid_block))
        r = int(round((px_a[i, 1] - off) / grid_block))
        if not (0 <= c < gw and 0 <= r < gh):
            continue
        if not (0 <= px_b[i, 0] <= K_b.width - 1 and 0 <= px_b[i, 1] <= K_b.height - 1):
            continue
        gx = grid_block * c + off
        gy = grid_block * r + off
        flow[r, c, 0] = (px_b[i, 0] - gx) / grid_block
        flow[r, c, 1] = (px_b[i, 1] - gy) / grid_block
        valid[r, c] = True
    return FlowField(flow, valid)


# --- scene factories ---


def _look_at_pose(eye: np.ndarray, target: np.ndarray, down=None) -> Pose:
    """World->camera pose for a camera at `eye` looking toward `target`.

    Cameras are x-right / y-down / z-forward; `down` is the world direction
    the image y axis should roughly follow (+y by scene convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0]) if down is None else np.asarray(down, dtype=np.float64)
    right = np.cross(down, fwd)
    if np.linalg.norm(right) < 1e-9:
        down = np.array([0.0, 0.0, 1.0])
        right = np.cross(down, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_wc = np.stack([right, down, fwd], axis=0)  # rows: camera axes in world
    return Pose(r_wc, -r_wc @ eye)


def _default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 1.2 * max(width, height)
    return CameraIntrinsics(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height
    )


def _ring_cameras(num_views, width, height, target, distance, baseline, converge=True):
    """View 0 at the origin looking +z, others offset sideways on a small arc."""
    K = _default_intrinsics(width, height)
    cameras = [(K, Pose.identity())]
    for i in range(1, num_views):
        side = (i + 1) // 2 * (1 if i % 2 else -1)
        eye = np.array([side * baseline, 0.25 * baseline * (i % 3 - 1), 0.0])
        if converge:
            cameras.append((K, _look_at_pose(eye, target)))
        else:
            cameras.append((K, Pose(np.eye(3), -eye)))
    return cameras


def _frustum_extent_on_plane(plane: PlaneGeometry, cameras) -> float:
    """Largest |surface coordinate| the cameras' corner rays reach on the plane."""
    worst = 0.0
    for K, pose in cameras:
        corners_x = np.array([0.0, K.width - 1.0, 0.0, K.width - 1.0])
        corners_y = np.array([0.0, 0.0, K.height - 1.0, K.height - 1.0])
        center, dirs = _pixel_rays(K, pose, corners_x, corners_y)
        origins = np.broadcast_to(center, dirs.shape)
        unbounded = PlaneGeometry(plane.point, plane.normal, np.inf)
        t, hit, uv = unbounded.intersect(origins, dirs)
        if not hit.all():
            raise ValueError("a camera's frustum does not intersect the plane")
        worst = max(worst, float(np.abs(uv).max()))
    return worst


def _texture_for_image_scale(cameras, depth: float, cell_px: float = 10.0) -> TextureParams:
    """Texture whose finest octave spans ~cell_px pixels at the given depth.

    Keeps the finest detail well above the feature-grid pooling scale so
    descriptors stay consistent across viewpoints.
    """
    K = cameras[0][0]
    px_per_unit = max(K.fx, K.fy) / depth
    params = TextureParams()
    base = px_per_unit / (2.0 ** (params.octaves - 1) * cell_px)
    return TextureParams(
        base_frequency=base, octaves=params.octaves, persistence=params.persistence
    )


def plane_scene(
    num_views: int = 5,
    width: int = 96,
    height: int = 96,
    depth: float = 5.0,
    slanted: bool = False,
    extent: float = None,
    baseline: float = 1.0,
    converge: bool = True,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> SyntheticScene:
    """A textured plane facing the cameras; fronto-parallel unless `slanted`.

    With converge=False the side cameras translate without rotating, so a
    fronto-parallel plane renders a constant depth map in every view.
    """
    normal = np.array([0.25, -0.15, -1.0]) if slanted else np.array([0.0, 0.0, -1.0])
    plane_point = np.array([0.0, 0.0, depth])
    cameras = _ring_cameras(num_views, width, height, plane_point, depth, baseline, converge)
    if extent is None:
        # Converging rigs: size to the reference frustum (side views look at
        # the same spot).  Translation rigs: cover every frustum so all
        # images stay fully textured.
        probe = PlaneGeometry(plane_point, normal, np.inf)
        span = cameras[:1] if converge else cameras
        extent = 1.05 * _frustum_extent_on_plane(probe, span)
    geometry = PlaneGeometry(plane_point, normal, extent)
    scene = SyntheticScene(
        geometry,
        cameras,
        seed=seed,
        texture=_texture_for_image_scale(cameras, depth),
        noise_sigma=noise_sigma,
    )
    _require_coverage(scene)
    return scene


def sphere_scene(
    num_views: int = 5,
    width: int = 96,
    height: int = 96,
    distance: float = 6.0,
    radius: float = 1.5,
    baseline: float = 0.5,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> SyntheticScene:
    """A textured sphere centered on the reference optical axis."""
    geometry = SphereGeometry(np.array([0.0, 0.0, distance]), radius)
    cameras = _ring_cameras(num_views, width, height, geometry.center, distance, baseline)
    scene = SyntheticScene(geometry, cameras, seed=seed, noise_sigma=noise_sigma)
    _require_coverage(scene)
    return scene


def point_scene(
    num_views: int = 2,
    width: int = 96,
    height: int = 96,
    num_points: int = 60,
    baseline: float = 0.4,
    seed: int = 0,
) -> SyntheticScene:
    """A random point cluster in front of the cameras."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-1.5, -1.5, 4.0], [1.5, 1.5, 7.0], size=(num_points, 3))
    cameras = _ring_cameras(num_views, width, height, np.array([0.0, 0.0, 5.5]), 5.5, baseline)
    scene = SyntheticScene(PointSetGeometry(pts), cameras, seed=seed)
    _require_coverage(scene)
    return scene


def _require_coverage(scene: SyntheticScene, minimum: float = 0.5):
    for view in range(scene.num_views):
        cov = scene.coverage(view)
        if cov < minimum:
            raise ValueError(
                f"view {view} sees only {cov:.0%} of the geometry (need {minimum:.0%})"
            )
