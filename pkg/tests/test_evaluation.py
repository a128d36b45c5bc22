import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsweep.depth import DepthMap
from mvsweep.errors import EmptyCloud, NoOverlap, ShapeMismatch
from mvsweep.evaluation import (
    CloudMetrics,
    FlowMetrics,
    LossReport,
    cloud_metrics,
    depth_loss,
    flow_loss,
    flow_metrics,
    huber,
    total_loss,
)
from mvsweep.fusion import PointCloud
from mvsweep.matching import FlowField


def make_depth(values, valid=None):
    values = np.asarray(values, dtype=float)
    if valid is None:
        valid = np.ones(values.shape, bool)
    lo = values[valid].min() if valid.any() else 1.0
    hi = values[valid].max() if valid.any() else 2.0
    return DepthMap(values, valid, d_min=min(lo, 1.0) * 0.5, d_max=max(hi, 2.0) * 2, num_planes=2)


def make_cloud(points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = points.shape[0]
    return PointCloud(points, np.full(n, 3), np.zeros(n))


# --- huber ---


def test_huber_values():
    assert huber(0.0) == 0.0
    assert huber(0.5) == 0.125
    assert huber(-2.0) == 1.5


def test_huber_continuous_at_kink():
    assert huber(1.0) == 0.5
    assert abs(huber(1.0 - 1e-12) - 0.5) < 1e-11
    assert abs(huber(-1.0) - 0.5) < 1e-15
    assert abs(huber(-1.0 + 1e-12) - 0.5) < 1e-11


@given(st.floats(min_value=-50, max_value=50))
@settings(max_examples=200, deadline=None)
def test_huber_gradient_matches_finite_differences(z):
    if min(abs(abs(z) - 1.0), abs(z)) < 2e-3:
        return  # keep clear of the kink and of cancellation at 0
    h = 1e-6
    numeric = (huber(z + h) - huber(z - h)) / (2 * h)
    analytic = z if abs(z) < 1.0 else np.sign(z)
    assert abs(numeric - analytic) < 1e-6


@given(st.floats(min_value=-1e6, max_value=1e6))
@settings(max_examples=200, deadline=None)
def test_huber_non_negative_and_even(z):
    assert huber(z) >= 0.0
    assert huber(z) == huber(-z)


# --- depth loss ---


def test_depth_loss_zero_for_identical():
    d = make_depth(np.full((5, 5), 3.0))
    loss, count = depth_loss(d, d)
    assert loss == 0.0 and count == 25


def test_depth_loss_single_pixel():
    valid = np.zeros((4, 4), bool)
    valid[2, 2] = True
    pred = make_depth(np.full((4, 4), 3.5), valid)
    gt = make_depth(np.full((4, 4), 3.0), valid)
    loss, count = depth_loss(pred, gt)
    assert count == 1
    assert loss == pytest.approx(0.125, abs=1e-15)


def test_depth_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(1.0, 8.0, size=(6, 7))
    b = rng.uniform(1.0, 8.0, size=(6, 7))
    va = rng.random((6, 7)) > 0.2
    vb = rng.random((6, 7)) > 0.2
    loss, count = depth_loss(make_depth(a, va), make_depth(b, vb))
    want = 0.0
    n = 0
    for i in range(6):
        for j in range(7):
            if va[i, j] and vb[i, j]:
                z = a[i, j] - b[i, j]
                want += 0.5 * z * z if abs(z) < 1 else abs(z) - 0.5
                n += 1
    assert count == n
    assert abs(loss - want) < 1e-9


def test_depth_loss_errors():
    with pytest.raises(ShapeMismatch):
        depth_loss(make_depth(np.full((4, 4), 2.0)), make_depth(np.full((5, 5), 2.0)))
    v = np.zeros((4, 4), bool)
    v2 = np.zeros((4, 4), bool)
    v[0, 0] = True
    v2[1, 1] = True
    with pytest.raises(NoOverlap):
        depth_loss(make_depth(np.full((4, 4), 2.0), v), make_depth(np.full((4, 4), 2.0), v2))


# --- flow loss ---


def test_flow_loss_zero_for_identical():
    f = FlowField(np.random.default_rng(1).normal(size=(4, 4, 2)), np.ones((4, 4), bool))
    loss, count = flow_loss(f, f)
    assert loss == 0.0 and count == 16


def test_flow_loss_345_pixel():
    a = np.zeros((4, 4, 2))
    b = np.zeros((4, 4, 2))
    b[1, 1] = [3.0, 4.0]
    valid = np.ones((4, 4), bool)
    loss, _ = flow_loss(FlowField(a, valid), FlowField(b, valid))
    assert loss == pytest.approx(25.0, abs=1e-12)


def test_flow_loss_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 6, 2))
    b = rng.normal(size=(5, 6, 2))
    va = rng.random((5, 6)) > 0.3
    vb = rng.random((5, 6)) > 0.3
    loss, count = flow_loss(FlowField(a, va), FlowField(b, vb))
    want = 0.0
    n = 0
    for i in range(5):
        for j in range(6):
            if va[i, j] and vb[i, j]:
                want += (a[i, j, 0] - b[i, j, 0]) ** 2 + (a[i, j, 1] - b[i, j, 1]) ** 2
                n += 1
    assert count == n
    assert abs(loss - want) < 1e-9


def test_total_loss_is_exact_sum():
    rng = np.random.default_rng(3)
    d1 = make_depth(rng.uniform(1, 5, (4, 4)))
    d2 = make_depth(rng.uniform(1, 5, (4, 4)))
    f1 = FlowField(rng.normal(size=(4, 4, 2)), np.ones((4, 4), bool))
    f2 = FlowField(rng.normal(size=(4, 4, 2)), np.ones((4, 4), bool))
    report = total_loss(d1, d2, f1, f2)
    assert report.l_total == report.l_depth + report.l_flow
    assert report.pixel_count == 32


def test_loss_report_validates_sum():
    with pytest.raises(ValueError):
        LossReport(l_depth=1.0, l_flow=1.0, l_total=3.0, pixel_count=1)


# --- cloud metrics ---


def test_cloud_metrics_identical_clouds():
    rng = np.random.default_rng(4)
    cloud = make_cloud(rng.normal(size=(50, 3)))
    m = cloud_metrics(cloud, cloud)
    assert m.mean_accuracy == 0.0
    assert m.mean_completeness == 0.0
    assert m.overall == 0.0


def test_cloud_metrics_rigid_offset():
    # dense grid with spacing 1.0 >> 0.1 offset: every nearest neighbor is
    # the same grid point shifted, so both directed means equal the offset
    xs, ys = np.meshgrid(np.arange(10.0), np.arange(10.0))
    grid = np.stack([xs.ravel(), ys.ravel(), np.zeros(100)], axis=1)
    gt = make_cloud(grid)
    recon = make_cloud(grid + np.array([0.1, 0.0, 0.0]))
    m = cloud_metrics(recon, gt)
    assert m.mean_accuracy == pytest.approx(0.1, abs=1e-6)
    assert m.mean_completeness == pytest.approx(0.1, abs=1e-6)
    assert m.overall == pytest.approx(0.1, abs=1e-6)


def test_cloud_metrics_matches_brute_force():
    rng = np.random.default_rng(5)
    recon = make_cloud(rng.normal(size=(200, 3)))
    gt = make_cloud(rng.normal(size=(300, 3)))
    m = cloud_metrics(recon, gt, max_dist=20.0)
    d_acc = np.sqrt(((recon.points[:, None, :] - gt.points[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    d_comp = np.sqrt(((gt.points[:, None, :] - recon.points[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    assert m.mean_accuracy == np.minimum(d_acc, 20.0).mean()
    assert m.mean_completeness == np.minimum(d_comp, 20.0).mean()
    assert m.overall == 0.5 * (m.mean_accuracy + m.mean_completeness)


def test_cloud_metrics_clamps_outliers():
    gt = make_cloud([[0.0, 0.0, 0.0]])
    recon = make_cloud([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0]])
    m = cloud_metrics(recon, gt, max_dist=2.0)
    assert m.mean_accuracy == pytest.approx(1.0)  # (0 + 2) / 2


def test_cloud_metrics_empty_raises():
    cloud = make_cloud([[0.0, 0.0, 0.0]])
    empty = PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0))
    with pytest.raises(EmptyCloud):
        cloud_metrics(empty, cloud)
    with pytest.raises(EmptyCloud):
        cloud_metrics(cloud, empty)


def test_table_means_reconcile_within_print_rounding():
    # Each printed value carries +-0.0005 print rounding; the exact identity
    # overall = (acc + comp) / 2 therefore reconciles within 0.001.
    acc, comp, overall = 0.391, 0.429, 0.411
    assert abs((acc + comp) / 2.0 - overall) <= 0.0005 + 0.0005


# --- flow metrics ---


def test_flow_metrics_identical():
    f = FlowField(np.random.default_rng(6).normal(size=(4, 4, 2)), np.ones((4, 4), bool))
    m = flow_metrics(f, f)
    assert m.avg_epe == 0.0 and m.frac_gt3px == 0.0 and m.avg_err_gt3px == 0.0


def test_flow_metrics_constructed_half_and_half():
    a = np.zeros((2, 4, 2))
    b = np.zeros((2, 4, 2))
    b[0, :, 0] = 5.0  # top row off by exactly 5 px
    valid = np.ones((2, 4), bool)
    m = flow_metrics(FlowField(a, valid), FlowField(b, valid))
    assert m.frac_gt3px == pytest.approx(0.5)
    assert m.avg_err_gt3px == pytest.approx(5.0)
    assert m.avg_epe == pytest.approx(2.5)


def test_flow_metrics_matches_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(scale=3.0, size=(6, 6, 2))
    b = rng.normal(scale=3.0, size=(6, 6, 2))
    valid = rng.random((6, 6)) > 0.2
    m = flow_metrics(FlowField(a, valid), FlowField(b, valid))
    epes = []
    for i in range(6):
        for j in range(6):
            if valid[i, j]:
                epes.append(np.hypot(a[i, j, 0] - b[i, j, 0], a[i, j, 1] - b[i, j, 1]))
    epes = np.array(epes)
    assert m.avg_epe == pytest.approx(epes.mean(), abs=1e-12)
    assert m.frac_gt3px == pytest.approx((epes > 3).mean(), abs=1e-12)
    if (epes > 3).any():
        assert m.avg_err_gt3px == pytest.approx(epes[epes > 3].mean(), abs=1e-12)


def test_flow_metrics_shape_mismatch():
    a = FlowField(np.zeros((4, 4, 2)), np.ones((4, 4), bool))
    b = FlowField(np.zeros((5, 4, 2)), np.ones((5, 4), bool))
    with pytest.raises(ShapeMismatch):
        flow_metrics(a, b)


def test_metrics_dataclass_invariants():
    with pytest.raises(ValueError):
        CloudMetrics(mean_accuracy=1.0, mean_completeness=1.0, overall=0.9)
    with pytest.raises(ValueError):
        FlowMetrics(avg_epe=1.0, frac_gt3px=0.5, avg_err_gt3px=2.0)
