import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mvsweep.geometry import CameraIntrinsics, Match, Pose


DEFAULT_K = CameraIntrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng, rot_scale=0.15):
    """A small random rotation plus a unit-norm random translation."""
    rotvec = rng.normal(size=3)
    rotvec *= rot_scale / max(np.linalg.norm(rotvec), 1e-12)
    r = Rotation.from_rotvec(rotvec).as_matrix()
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    return Pose(r, t)


def project_raw(K, pose, point):
    """Homogeneous multiply-and-divide projection, independent of the library path."""
    p = K.as_matrix() @ (pose.rotation @ np.asarray(point, dtype=float) + pose.translation)
    return p[:2] / p[2]


def synthesize_pair(seed, n_points=50, K=DEFAULT_K, rot_scale=0.15):
    """Exact two-view correspondences from a random relative pose.

    Returns (pose, matches, points); every point projects inside both views.
    """
    rng = np.random.default_rng(seed)
    for _ in range(200):
        pose = random_pose(rng, rot_scale)
        pts = rng.uniform([-2.5, -2.0, 4.0], [2.5, 2.0, 9.0], size=(n_points, 3))
        matches = []
        kept = []
        for x in pts:
            cam2 = pose.rotation @ x + pose.translation
            if x[2] <= 0.1 or cam2[2] <= 0.1:
                continue
            p1 = project_raw(K, Pose.identity(), x)
            p2 = project_raw(K, pose, x)
            if not (0 <= p1[0] < K.width and 0 <= p1[1] < K.height):
                continue
            if not (0 <= p2[0] < K.width and 0 <= p2[1] < K.height):
                continue
            matches.append(Match(p1, p2))
            kept.append(x)
        if len(matches) >= max(20, n_points // 2):
            return pose, matches, np.array(kept)
    raise AssertionError("could not synthesize a well-covered pair")


@pytest.fixture
def camera():
    return DEFAULT_K
