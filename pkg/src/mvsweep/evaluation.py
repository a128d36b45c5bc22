"""Losses and evaluation metrics: robust depth loss, squared flow loss,
point-cloud accuracy/completeness, end-point-error statistics.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .depth import DepthMap
from .errors import EmptyCloud, NoOverlap, ShapeMismatch
from .fusion import PointCloud
from .matching import FlowField


@dataclass(frozen=True)
class LossReport:
    """Depth and flow losses over jointly valid pixels (sums, not means)."""

    l_depth: float
    l_flow: float
    l_total: float
    pixel_count: int

    def __post_init__(self):
        if abs(self.l_total - (self.l_depth + self.l_flow)) > 1e-9:
            raise ValueError("l_total must equal l_depth + l_flow")
        if self.l_depth < 0 or self.l_flow < 0:
            raise ValueError("losses are non-negative")


@dataclass(frozen=True)
class CloudMetrics:
    """Distance metrics between a reconstruction and a reference cloud."""

    mean_accuracy: float
    mean_completeness: float
    overall: float

    def __post_init__(self):
        if self.mean_accuracy < 0 or self.mean_completeness < 0:
            raise ValueError("distances are non-negative")
        if abs(self.overall - 0.5 * (self.mean_accuracy + self.mean_completeness)) > 1e-12:
            raise ValueError("overall must be the mean of accuracy and completeness")


@dataclass(frozen=True)
class FlowMetrics:
    """End-point-error statistics; the >3px tail follows common benchmarks."""

    avg_epe: float
    frac_gt3px: float
    avg_err_gt3px: float

    def __post_init__(self):
        if not (0.0 <= self.frac_gt3px <= 1.0):
            raise ValueError("frac_gt3px must lie in [0, 1]")
        if self.frac_gt3px > 0 and self.avg_err_gt3px < 3.0:
            raise ValueError("mean error of the >3px subset cannot be under 3px")


def huber(z: float) -> float:
    """Robust penalty: 0.5 z^2 inside |z| < 1, |z| - 0.5 outside.

    The linear branch keeps the function continuous at |z| = 1 (both branches
    give 0.5) and its slope matches the quadratic's there.
    """
    z = float(z)
    if abs(z) < 1.0:
        return 0.5 * z * z
    return abs(z) - 0.5


def _huber_array(z: np.ndarray) -> np.ndarray:
    a = np.abs(z)
    return np.where(a < 1.0, 0.5 * z * z, a - 0.5)


def depth_loss(pred: DepthMap, gt: DepthMap):
    """Sum of huber(pred - gt) over jointly valid pixels; returns (loss, count)."""
    if pred.depth.shape != gt.depth.shape:
        raise ShapeMismatch(f"depth shapes differ: {pred.depth.shape} vs {gt.depth.shape}")
    both = pred.valid & gt.valid
    count = int(both.sum())
    if count == 0:
        raise NoOverlap("no jointly valid depth pixels")
    residuals = pred.depth[both] - gt.depth[both]
    return float(_huber_array(residuals).sum()), count


def flow_loss(pred: FlowField, gt: FlowField):
    """Sum of squared flow differences (both components) over jointly valid
    pixels; returns (loss, count)."""
    if pred.flow.shape != gt.flow.shape:
        raise ShapeMismatch(f"flow shapes differ: {pred.flow.shape} vs {gt.flow.shape}")
    both = pred.valid & gt.valid
    diff = pred.flow[both] - gt.flow[both]
    return float((diff**2).sum()), int(both.sum())


def total_loss(
    pred_depth: DepthMap, gt_depth: DepthMap, pred_flow: FlowField, gt_flow: FlowField
) -> LossReport:
    """Combined report; l_total is exactly the sum of the two terms."""
    l_d, n_d = depth_loss(pred_depth, gt_depth)
    l_f, n_f = flow_loss(pred_flow, gt_flow)
    return LossReport(l_depth=l_d, l_flow=l_f, l_total=l_d + l_f, pixel_count=n_d + n_f)


def cloud_metrics(recon: PointCloud, gt: PointCloud, max_dist: float = 20.0) -> CloudMetrics:
    """Accuracy (recon -> gt), completeness (gt -> recon), and their mean.

    Nearest-neighbor distances are exact (KD-tree) and clamped at max_dist to
    suppress outlier influence.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyCloud("cloud metrics need non-empty clouds")
    d_acc, _ = cKDTree(gt.points).query(recon.points)
    d_comp, _ = cKDTree(recon.points).query(gt.points)
    acc = float(np.minimum(d_acc, max_dist).mean())
    comp = float(np.minimum(d_comp, max_dist).mean())
    return CloudMetrics(
        mean_accuracy=acc, mean_completeness=comp, overall=0.5 * (acc + comp)
    )


def flow_metrics(pred: FlowField, gt: FlowField) -> FlowMetrics:
    """Per-pixel end-point error statistics over jointly valid pixels.

    Reports the mean EPE, the fraction of pixels with EPE > 3, and the mean
    EPE restricted to that subset (0 when the subset is empty).
    """
    if pred.flow.shape != gt.flow.shape:
        raise ShapeMismatch(f"flow shapes differ: {pred.flow.shape} vs {gt.flow.shape}")
    both = pred.valid & gt.valid
    if not both.any():
        return FlowMetrics(avg_epe=0.0, frac_gt3px=0.0, avg_err_gt3px=0.0)
    diff = pred.flow[both] - gt.flow[both]
    epe = np.hypot(diff[:, 0], diff[:, 1])
    tail = epe > 3.0
    return FlowMetrics(
        avg_epe=float(epe.mean()),
        frac_gt3px=float(tail.mean()),
        avg_err_gt3px=float(epe[tail].mean()) if tail.any() else 0.0,
    )
