"""Camera models, epipolar geometry, five-point pose recovery, triangulation.

Conventions used throughout:

- Pixel coordinates are (x, y) with the origin at the center of the top-left
  pixel; x runs along image columns, y along rows.
- A ``Pose`` maps points from the reference frame into its camera frame,
  ``X_cam = R @ X_ref + T``.
- The essential matrix satisfies ``x2n^T E x1n = 0`` for normalized
  homogeneous coordinates ``xn = K^-1 [u, v, 1]^T``, with ``E ~ [T]x R``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DepthNonPositive,
    InsufficientMatches,
    NoConsensus,
    RaysParallel,
    ZeroTranslation,
)

# Orthonormality defect above which compose() re-orthonormalizes via polar
# decomposition; also the construction gate for rotations.
_ORTHO_DEFECT_LIMIT = 1e-10


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole calibration: focal lengths, principal point, image size (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse_matrix(self) -> np.ndarray:
        # Closed form; K is upper triangular with unit bottom-right entry.
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, block: int) -> "CameraIntrinsics":
        """Intrinsics for a grid of `block`-pixel cells.

        Grid cell (r, c) has its center at image pixel
        (block*c + (block-1)/2, block*r + (block-1)/2), so the principal
        point shifts by that half-cell offset before dividing.
        """
        if block < 1:
            raise ValueError(f"block must be >= 1, got {block}")
        off = (block - 1) / 2.0
        return CameraIntrinsics(
            fx=self.fx / block,
            fy=self.fy / block,
            cx=(self.cx - off) / block,
            cy=(self.cy - off) / block,
            width=self.width // block,
            height=self.height // block,
        )


def _check_rotation(r: np.ndarray) -> None:
    defect = np.abs(r.T @ r - np.eye(3)).max()
    if defect > _ORTHO_DEFECT_LIMIT:
        raise ValueError(f"rotation not orthonormal (defect {defect:.3e})")
    if abs(np.linalg.det(r) - 1.0) > _ORTHO_DEFECT_LIMIT:
        raise ValueError(f"rotation determinant {np.linalg.det(r)} != 1")


def _polar_orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1.0
        out = u @ vt
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform into a camera frame: X_cam = rotation @ X_ref + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        _check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (..., 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, inner: "Pose") -> "Pose":
        """Pose mapping x to self(inner(x)), re-orthonormalizing on drift."""
        r = self.rotation @ inner.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_DEFECT_LIMIT:
            r = _polar_orthonormalize(r)
        t = self.rotation @ inner.translation + self.translation
        return Pose(r, t)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


@dataclass(frozen=True)
class EssentialMatrix:
    """Essential matrix, stored at unit Frobenius norm.

    Construction enforces det(E) = 0 and the cubic trace constraint
    2 E E^T E - tr(E E^T) E = 0, both within 1e-9.
    """

    e: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.e, dtype=np.float64)
        if e.shape != (3, 3):
            raise ValueError(f"essential matrix must be 3x3, got {e.shape}")
        norm = np.linalg.norm(e)
        if norm < 1e-15:
            raise ValueError("essential matrix is numerically zero")
        e = e / norm
        if abs(np.linalg.det(e)) > 1e-9:
            raise ValueError(f"det(E) = {np.linalg.det(e):.3e} exceeds 1e-9")
        ee_t = e @ e.T
        cubic = 2.0 * ee_t @ e - np.trace(ee_t) * e
        if np.abs(cubic).max() > 1e-9:
            raise ValueError(f"trace constraint violated by {np.abs(cubic).max():.3e}")
        object.__setattr__(self, "e", e)


@dataclass(frozen=True)
class Match:
    """A pixel correspondence between two images with a confidence weight."""

    x: np.ndarray
    x_prime: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(2)
        xp = np.asarray(self.x_prime, dtype=np.float64).reshape(2)
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError(f"weight must lie in [0, 1], got {self.weight}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_prime", xp)


@dataclass(frozen=True)
class Point3:
    """A 3D point in the reference-camera frame with its supporting views."""

    xyz: np.ndarray
    source_views: list = field(default_factory=list)

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(xyz)):
            raise ValueError(f"point coordinates must be finite, got {xyz}")
        object.__setattr__(self, "xyz", xyz)


@dataclass(frozen=True)
class RansacParams:
    """Robust five-point estimation settings.

    threshold is a Sampson distance in normalized-coordinate units.
    """

    threshold: float = 1e-3
    max_iterations: int = 2048
    confidence: float = 0.999
    min_inlier_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (0 < self.confidence < 1):
            raise ValueError("confidence must lie in (0, 1)")
        if not (0 < self.min_inlier_ratio <= 1):
            raise ValueError("min_inlier_ratio must lie in (0, 1]")


# --- basic projections ---


def project(K: CameraIntrinsics, pose: Pose, point) -> np.ndarray:
    """Project a 3D reference-frame point to pixel coordinates.

    Raises DepthNonPositive if the point has z <= 0 in the camera frame.
    """
    xyz = point.xyz if isinstance(point, Point3) else np.asarray(point, dtype=np.float64)
    cam = pose.rotation @ xyz + pose.translation
    if cam[2] <= 0:
        raise DepthNonPositive(f"point has depth {cam[2]} in the target camera")
    return np.array(
        [K.fx * cam[0] / cam[2] + K.cx, K.fy * cam[1] / cam[2] + K.cy]
    )


def project_points(K: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection of (N, 3) points.

    Returns (pixels (N, 2), depths (N,)); no depth check is applied, callers
    filter on the returned depths.
    """
    cam = pose.transform(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack(
            [K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=1
        )
    return px, z


def back_project(K: CameraIntrinsics, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Lift (N, 2) pixels at (N,) depths to camera-frame points (N, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    x = (pixels[:, 0] - K.cx) / K.fx * depths
    y = (pixels[:, 1] - K.cy) / K.fy * depths
    return np.stack([x, y, depths], axis=1)


def normalize_translation(pose: Pose) -> Pose:
    """Rescale the translation to unit norm; rotation unchanged."""
    norm = np.linalg.norm(pose.translation)
    if norm <= 1e-12:
        raise ZeroTranslation(f"translation norm {norm} too small to normalize")
    return Pose(pose.rotation, pose.translation / norm)


def essential_from_pose(pose: Pose) -> EssentialMatrix:
    """E ~ [T]x R for the relative pose of camera 2 w.r.t. camera 1."""
    t = pose.translation
    tx = np.array(
        [[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]]
    )
    return EssentialMatrix(tx @ pose.rotation)


def matches_as_arrays(matches):
    """Stack matches into ((N, 2), (N, 2), (N,)) arrays."""
    xs = np.array([m.x for m in matches], dtype=np.float64).reshape(-1, 2)
    xps = np.array([m.x_prime for m in matches], dtype=np.float64).reshape(-1, 2)
    ws = np.array([m.weight for m in matches], dtype=np.float64)
    return xs, xps, ws


def _normalized_homogeneous(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """(N, 2) pixels -> (N, 3) normalized coordinates with z = 1."""
    out = np.empty((pixels.shape[0], 3))
    out[:, 0] = (pixels[:, 0] - K.cx) / K.fx
    out[:, 1] = (pixels[:, 1] - K.cy) / K.fy
    out[:, 2] = 1.0
    return out


# --- five-point minimal solver ---
#
# The essential matrix is written E = x*B1 + y*B2 + z*B3 + B4 over the
# nullspace basis of the 5x9 epipolar constraint matrix.  det(E) = 0 and the
# trace constraint give ten cubic polynomials in (x, y, z); reducing their
# coefficient matrix and forming the multiplication-by-z action matrix on the
# degree-<=2 monomial basis turns root finding into a 10x10 eigenproblem.
#
# Monomial orders:
#   degree 1:  [x, y, z, 1]
#   degree 2:  [x2, xy, xz, y2, yz, z2, x, y, z, 1]
#   degree 3:  [x3, x2y, x2z, xy2, xyz, xz2, y3, y2z, yz2, z3] + degree-2 tail


def _poly_mul_1_1(a, b):
    return np.array(
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
            a[0] * b[3] + a[3] * b[0],
            a[1] * b[3] + a[3] * b[1],
            a[2] * b[3] + a[3] * b[2],
            a[3] * b[3],
        ]
    )


def _poly_mul_2_1(p, q):
    return np.array(
        [
            p[0] * q[0],
            p[0] * q[1] + p[1] * q[0],
            p[0] * q[2] + p[2] * q[0],
            p[1] * q[1] + p[3] * q[0],
            p[1] * q[2] + p[2] * q[1] + p[4] * q[0],
            p[2] * q[2] + p[5] * q[0],
            p[3] * q[1],
            p[3] * q[2] + p[4] * q[1],
            p[4] * q[2] + p[5] * q[1],
            p[5] * q[2],
            p[0] * q[3] + p[6] * q[0],
            p[1] * q[3] + p[6] * q[1] + p[7] * q[0],
            p[2] * q[3] + p[6] * q[2] + p[8] * q[0],
            p[3] * q[3] + p[7] * q[1],
            p[4] * q[3] + p[7] * q[2] + p[8] * q[1],
            p[5] * q[3] + p[8] * q[2],
            p[6] * q[3] + p[9] * q[0],
            p[7] * q[3] + p[9] * q[1],
            p[8] * q[3] + p[9] * q[2],
            p[9] * q[3],
        ]
    )


def _five_point_candidates(q1: np.ndarray, q2: np.ndarray):
    """Essential-matrix candidates for 5 normalized correspondences.

    q1, q2: (5, 3) with z = 1.  Returns a list of 3x3 arrays at unit
    Frobenius norm; raises DegenerateConfiguration on rank-deficient input.
    """
    # Rows are kron(q2_i, q1_i): coefficient of E_jk is q2_j * q1_k.
    A = (q2[:, :, None] * q1[:, None, :]).reshape(5, 9)
    _, s, vt = np.linalg.svd(A)
    if s[4] <= 1e-10 * max(s[0], 1e-300):
        raise DegenerateConfiguration(
            "five-point constraint matrix has rank < 5 (coincident or collinear points)"
        )
    basis = vt[5:9][::-1].reshape(4, 3, 3)  # E = x*B0 + y*B1 + z*B2 + B3

    # Each E entry as a degree-1 polynomial over [x, y, z, 1].
    ep = np.transpose(basis, (1, 2, 0))  # (3, 3, 4)

    def minor(i0, i1, j0, j1):
        return _poly_mul_1_1(ep[i0, j0], ep[i1, j1]) - _poly_mul_1_1(
            ep[i0, j1], ep[i1, j0]
        )

    det_row = (
        _poly_mul_2_1(minor(1, 2, 1, 2), ep[0, 0])
        - _poly_mul_2_1(minor(1, 2, 0, 2), ep[0, 1])
        + _poly_mul_2_1(minor(1, 2, 0, 1), ep[0, 2])
    )

    eet = np.empty((3, 3, 10))
    for i in range(3):
        for j in range(3):
            acc = np.zeros(10)
            for k in range(3):
                acc += _poly_mul_1_1(ep[i, k], ep[j, k])
            eet[i, j] = acc
    trace = eet[0, 0] + eet[1, 1] + eet[2, 2]

    m = np.empty((10, 20))
    m[0] = det_row
    row = 1
    for i in range(3):
        for j in range(3):
            acc = np.zeros(20)
            for k in range(3):
                acc += _poly_mul_2_1(eet[i, k], ep[k, j])
            m[row] = 2.0 * acc - _poly_mul_2_1(trace, ep[i, j])
            row += 1

    try:
        reduced = np.linalg.solve(m[:, :10], m[:, 10:])
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfiguration(f"polynomial system is singular: {exc}") from exc
    if not np.all(np.isfinite(reduced)):
        raise DegenerateConfiguration("polynomial system reduction overflowed")

    # Multiplication-by-z action on the basis [x2, xy, xz, y2, yz, z2, x, y, z, 1].
    action = np.zeros((10, 10))
    action[0] = -reduced[2]  # z * x2 = x2z
    action[1] = -reduced[4]  # z * xy = xyz
    action[2] = -reduced[5]  # z * xz = xz2
    action[3] = -reduced[7]  # z * y2 = y2z
    action[4] = -reduced[8]  # z * yz = yz2
    action[5] = -reduced[9]  # z * z2 = z3
    action[6, 2] = 1.0
    action[7, 4] = 1.0
    action[8, 5] = 1.0
    action[9, 8] = 1.0

    _, vecs = np.linalg.eig(action)
    candidates = []
    for col in range(10):
        v = vecs[:, col]
        scale = v[9]
        if abs(scale) < 1e-12 * np.linalg.norm(v):
            continue
        xyz = v[[6, 7, 8]] / scale
        if np.any(np.abs(xyz.imag) > 1e-6 * (1.0 + np.abs(xyz.real))):
            continue
        x, y, z = xyz.real
        e = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        norm = np.linalg.norm(e)
        if norm < 1e-12:
            continue
        e = e / norm
        residual = np.abs(np.einsum("ni,ij,nj->n", q2, e, q1)).max()
        if residual > 1e-9:
            continue
        candidates.append(e)
    return candidates


def estimate_essential_five_point(matches, K: CameraIntrinsics):
    """Solve the five-point problem for exactly five matches.

    Returns up to ten EssentialMatrix candidates, each consistent with the
    epipolar constraint on the inputs to 1e-9 in normalized coordinates.
    """
    if len(matches) < 5:
        raise InsufficientMatches(f"five-point solver needs 5 matches, got {len(matches)}")
    if len(matches) > 5:
        raise ValueError(f"five-point solver takes exactly 5 matches, got {len(matches)}")
    xs, xps, _ = matches_as_arrays(matches)
    q1 = _normalized_homogeneous(xs, K)
    q2 = _normalized_homogeneous(xps, K)
    out = []
    for e in _five_point_candidates(q1, q2):
        try:
            out.append(EssentialMatrix(e))
        except ValueError:
            continue
    return out


def sampson_distance(E: EssentialMatrix, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """First-order epipolar distance, in normalized-coordinate units.

    q1, q2: (N, 3) normalized homogeneous coordinates.
    """
    e = E.e
    l2 = q1 @ e.T  # epipolar lines in image 2
    l1 = q2 @ e  # epipolar lines in image 1
    num = np.einsum("ni,ni->n", q2, l2)
    denom = l2[:, 0] ** 2 + l2[:, 1] ** 2 + l1[:, 0] ** 2 + l1[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(denom)
    return np.where(denom > 0, d, np.inf)


def ransac_essential(matches, K: CameraIntrinsics, params: RansacParams):
    """RANSAC over five-point hypotheses with Sampson-distance scoring.

    Returns (EssentialMatrix, inlier mask).  Deterministic for a fixed seed:
    hypotheses are scored in generation order and ties keep the earlier one.
    """
    n = len(matches)
    if n < 5:
        raise InsufficientMatches(f"RANSAC needs at least 5 matches, got {n}")
    xs, xps, _ = matches_as_arrays(matches)
    q1 = _normalized_homogeneous(xs, K)
    q2 = _normalized_homogeneous(xps, K)

    rng = np.random.default_rng(params.seed)
    best_count = 0
    best_e = None
    best_mask = None
    needed = params.max_iterations

    for it in range(params.max_iterations):
        if it >= needed:
            break
        idx = rng.choice(n, size=5, replace=False)
        try:
            candidates = _five_point_candidates(q1[idx], q2[idx])
        except DegenerateConfiguration:
            continue
        for e in candidates:
            try:
                em = EssentialMatrix(e)
            except ValueError:
                continue
            mask = sampson_distance(em, q1, q2) < params.threshold
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_e = em
                best_mask = mask
                ratio = count / n
                if ratio >= 1.0:
                    needed = 0
                else:
                    # Standard stopping rule: enough samples that an
                    # all-inlier draw was seen with the requested confidence.
                    fail_p = 1.0 - ratio**5
                    if fail_p <= 0:
                        needed = 0
                    else:
                        needed = min(
                            params.max_iterations,
                            int(np.ceil(np.log(1.0 - params.confidence) / np.log(fail_p))),
                        )

    if best_e is None or best_count < 5 or best_count / n < params.min_inlier_ratio:
        raise NoConsensus(
            f"best consensus {best_count}/{n} below floor "
            f"(min ratio {params.min_inlier_ratio})"
        )
    return best_e, best_mask


def _triangulate_normalized(q1: np.ndarray, q2: np.ndarray, pose: Pose) -> np.ndarray:
    """DLT triangulation in normalized coordinates.

    q1, q2: (N, 3) with z = 1; camera 1 is the identity.  Returns (N, 4)
    homogeneous solutions (not dehomogenized: callers decide how to handle
    points near infinity).
    """
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
    n = q1.shape[0]
    a = np.empty((n, 4, 4))
    a[:, 0] = q1[:, 0, None] * p1[2] - p1[0]
    a[:, 1] = q1[:, 1, None] * p1[2] - p1[1]
    a[:, 2] = q2[:, 0, None] * p2[2] - p2[0]
    a[:, 3] = q2[:, 1, None] * p2[2] - p2[1]
    _, _, vt = np.linalg.svd(a)
    return vt[:, 3, :]


def triangulate(x, x_prime, K: CameraIntrinsics, pose: Pose) -> Point3:
    """Triangulate one correspondence; camera 1 at the identity, camera 2 at `pose`."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 2)
    xp = np.asarray(x_prime, dtype=np.float64).reshape(1, 2)
    q1 = _normalized_homogeneous(x, K)
    q2 = _normalized_homogeneous(xp, K)

    d1 = q1[0] / np.linalg.norm(q1[0])
    d2 = pose.rotation.T @ q2[0]
    d2 = d2 / np.linalg.norm(d2)
    angle = np.arccos(np.clip(np.dot(d1, d2), -1.0, 1.0))
    if angle <= 1e-6:
        raise RaysParallel(f"triangulation angle {angle:.3e} rad below 1e-6")

    xh = _triangulate_normalized(q1, q2, pose)[0]
    if abs(xh[3]) < 1e-15 * np.linalg.norm(xh[:3]):
        raise RaysParallel("triangulated point is at infinity")
    return Point3(xh[:3] / xh[3], source_views=[0, 1])


def decompose_essential(E: EssentialMatrix, matches, K: CameraIntrinsics) -> Pose:
    """Select the (R, T) of E whose triangulations are in front of both cameras.

    T is returned with unit norm.  Raises CheiralityAmbiguous when two
    candidates tie on positive-depth support.
    """
    if len(matches) < 1:
        raise InsufficientMatches("cheirality selection needs at least one match")
    xs, xps, _ = matches_as_arrays(matches)
    q1 = _normalized_homogeneous(xs, K)
    q2 = _normalized_homogeneous(xps, K)

    u, _, vt = np.linalg.svd(E.e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]

    counts = []
    poses = []
    for r, tv in ((r1, t), (r1, -t), (r2, t), (r2, -t)):
        pose = Pose(r, tv)
        xh = _triangulate_normalized(q1, q2, pose)
        # Depth signs are scale-aware: w < 0 flips the direction of X.
        z1 = xh[:, 2] * xh[:, 3]
        cam2 = xh[:, :3] @ pose.rotation.T + np.outer(xh[:, 3], pose.translation)
        z2 = cam2[:, 2] * xh[:, 3]
        counts.append(int(np.count_nonzero((z1 > 0) & (z2 > 0))))
        poses.append(pose)

    order = np.argsort(counts)[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise CheiralityAmbiguous(
            f"two decompositions tie with {counts[order[0]]} points in front"
        )
    return poses[order[0]]


def rotation_angle(r: np.ndarray) -> float:
    """Angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two 3-vectors in radians."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("angle undefined for zero vectors")
    return float(np.arccos(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))
