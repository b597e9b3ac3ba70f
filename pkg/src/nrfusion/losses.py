"""Training losses of the correspondence network, as plain numpy functions.

Per-pixel losses are weighted by ``w_H = 1 + 10 G`` where ``G`` is the
ground-truth Gaussian. The soft-target negative log-likelihood is realised as
cross entropy ``-sum gt * log h_sm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_PX = 7.0
LAMBDA_NLL = 10.0
LAMBDA_DEPTH = 100.0
LAMBDA_VISIBILITY = 1.0
HEATMAP_WEIGHT_GAIN = 10.0
EPS = 1e-7


@dataclass(frozen=True)
class GroundTruthSample:
    gt_pixel: tuple[float, float]
    gt_depth: float
    visible: bool


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def gaussian_gt_heatmap(gt_pixel, height: int, width: int, sigma: float = SIGMA_PX) -> np.ndarray:
    """exp(-|x - x_gt|^2 / (2 sigma^2)) over the (height, width) pixel grid."""
    u, v = float(gt_pixel[0]), float(gt_pixel[1])
    if not (0 <= u <= width - 1 and 0 <= v <= height - 1):
        raise ValueError(f"ground-truth pixel {gt_pixel} outside a {width}x{height} image")
    du = np.arange(width) - u
    dv = np.arange(height) - v
    return np.exp(-(dv[:, None] ** 2 + du[None, :] ** 2) / (2.0 * sigma**2))


def heatmap_weight(gt_map: np.ndarray) -> np.ndarray:
    return 1.0 + HEATMAP_WEIGHT_GAIN * np.asarray(gt_map, dtype=np.float64)


def bce(pred, target) -> np.ndarray:
    p = _clamp(pred)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def heatmap_loss(h_sg: np.ndarray, h_sm: np.ndarray, gt_map: np.ndarray) -> float:
    h_sg = np.asarray(h_sg, dtype=np.float64)
    h_sm = np.asarray(h_sm, dtype=np.float64)
    gt = np.asarray(gt_map, dtype=np.float64)
    if not (h_sg.shape == h_sm.shape == gt.shape):
        raise ValueError(f"shape mismatch: {h_sg.shape}, {h_sm.shape}, {gt.shape}")
    w = heatmap_weight(gt)
    l_bce = np.sum(w * bce(h_sg, gt))
    l_nll = np.sum(w * (-gt * np.log(_clamp(h_sm))))
    return float(l_bce + LAMBDA_NLL * l_nll)


def depth_loss(pred_depth, gt_depth: float, gt_pixel, shape: tuple[int, int] | None = None) -> float:
    """Gaussian-weighted squared depth error.

    ``pred_depth`` is an (H, W) map, or a scalar broadcast over ``shape``.
    """
    pred = np.asarray(pred_depth, dtype=np.float64)
    if pred.ndim == 0:
        if shape is None:
            raise ValueError("a scalar prediction needs the map shape")
        pred = np.full(shape, float(pred))
    g = gaussian_gt_heatmap(gt_pixel, *pred.shape)
    return float(np.sum(g * (pred - gt_depth) ** 2))


def visibility_loss(pred, gt) -> float:
    return float(np.sum(bce(pred, gt)))


def total_loss(l_h: float, l_d: float, l_v: float) -> float:
    vals = (l_h, l_d, l_v)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("loss components must be finite")
    return float(l_h + LAMBDA_DEPTH * l_d + LAMBDA_VISIBILITY * l_v)


def sample_losses(h_sg, h_sm, pred_depth, pred_visibility, sample: GroundTruthSample) -> dict:
    """All three components and the total for one query."""
    h_sg = np.asarray(h_sg, dtype=np.float64)
    gt = gaussian_gt_heatmap(sample.gt_pixel, *h_sg.shape)
    l_h = heatmap_loss(h_sg, h_sm, gt)
    l_d = depth_loss(pred_depth, sample.gt_depth, sample.gt_pixel, h_sg.shape)
    l_v = visibility_loss(pred_visibility, 1.0 if sample.visible else 0.0)
    return {"L_H": l_h, "L_D": l_d, "L_V": l_v, "L": total_loss(l_h, l_d, l_v)}
