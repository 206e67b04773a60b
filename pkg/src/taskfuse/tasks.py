"""Surrogate downstream task heads, task losses, and task metrics.

Heads are small frozen conv stacks standing in for full-scale detection,
segmentation, and saliency networks. Each consumes the single-channel fused
image and emits dense logits; detection is cast as center-heatmap regression
so a dense differentiable loss exists. Losses backpropagate through the
frozen heads into the fused image during regulator training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, InputError
from .fusion import ConvParams, init_conv
from .tensor import (
    Tensor,
    bce_with_logits,
    conv2d,
    mse,
    relu,
    sigmoid,
    softmax_cross_entropy,
)

TASK_KINDS = ("seg", "sod", "det")
NUM_SEG_CLASSES = 4  # background, hot object, road band, vegetation
HEAD_WIDTH = 16


@dataclass
class TaskHeadParams:
    """Three 3x3 convs (relu between) from the fused image to logits."""

    kind: str
    convs: list  # ConvParams: 1 -> W -> W -> K


def head_output_channels(kind: str) -> int:
    if kind == "seg":
        return NUM_SEG_CLASSES
    if kind in ("sod", "det"):
        return 1
    raise ConfigurationError(f"unknown task kind {kind!r}")


def build_head(kind: str, rng: np.random.Generator, width: int = HEAD_WIDTH) -> TaskHeadParams:
    kout = head_output_channels(kind)
    convs = [
        init_conv(rng, width, 1, 3),
        init_conv(rng, width, width, 3),
        init_conv(rng, kout, width, 3),
    ]
    return TaskHeadParams(kind=kind, convs=convs)


def head_forward(head: TaskHeadParams, fused: Tensor) -> Tensor:
    """Dense logits: [B, K, H, W] for seg, [B, 1, H, W] for sod/det."""
    if fused.ndim != 4 or fused.shape[1] != 1:
        raise DimensionError(f"head expects [B, 1, H, W], got {fused.shape}")
    x = relu(conv2d(fused, head.convs[0].kernel, head.convs[0].bias, padding=1))
    x = relu(conv2d(x, head.convs[1].kernel, head.convs[1].bias, padding=1))
    return conv2d(x, head.convs[2].kernel, head.convs[2].bias, padding=1)


def task_loss(kind: str, prediction: Tensor, target: np.ndarray) -> Tensor:
    """Per-task training loss on dense predictions.

    seg: mean softmax cross entropy vs integer class map [B, H, W];
    sod: mean BCE on the sigmoid saliency logit vs binary mask [B, 1, H, W];
    det: mean squared error of the sigmoid heatmap vs target [B, 1, H, W].
    """
    if kind == "seg":
        return softmax_cross_entropy(prediction, target)
    if kind == "sod":
        return bce_with_logits(prediction, target)
    if kind == "det":
        return mse(sigmoid(prediction), target)
    raise ConfigurationError(f"unknown task kind {kind!r}")


# -- metrics (pure functions over ndarrays) --------------------------------------


def metric_miou(pred_classes: np.ndarray, gt_classes: np.ndarray) -> float:
    """Mean IoU over the classes present in gt or prediction."""
    if pred_classes.shape != gt_classes.shape:
        raise DimensionError("miou: shape mismatch")
    classes = np.union1d(np.unique(pred_classes), np.unique(gt_classes))
    ious = []
    for c in classes:
        p = pred_classes == c
        g = gt_classes == c
        union = np.logical_or(p, g).sum()
        inter = np.logical_and(p, g).sum()
        ious.append(inter / union if union else 1.0)
    return float(np.mean(ious))


def metric_mae(pred_map: np.ndarray, gt_mask: np.ndarray) -> float:
    """Mean absolute error of the continuous saliency map vs the mask."""
    if pred_map.shape != gt_mask.shape:
        raise DimensionError("mae: shape mismatch")
    return float(np.abs(pred_map - gt_mask).mean())


def metric_fbeta(pred_map: np.ndarray, gt_mask: np.ndarray, beta2: float = 0.3) -> float:
    """Weighted F-measure with the prediction thresholded at 0.5."""
    if pred_map.shape != gt_mask.shape:
        raise DimensionError("fbeta: shape mismatch")
    pred = pred_map >= 0.5
    gt = gt_mask >= 0.5
    tp = np.logical_and(pred, gt).sum()
    fp = np.logical_and(pred, ~gt).sum()
    fn = np.logical_and(~pred, gt).sum()
    if tp + fp + fn == 0:
        return 1.0  # empty gt, empty prediction
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    denom = beta2 * precision + recall
    if denom == 0.0:
        return 0.0
    return float((1.0 + beta2) * precision * recall / denom)


def seg_prediction_classes(logits: Tensor) -> np.ndarray:
    """Argmax class map [B, H, W] from seg logits."""
    return np.argmax(logits.data, axis=1)


def validate_seg_target(target: np.ndarray) -> None:
    if target.min() < 0 or target.max() >= NUM_SEG_CLASSES:
        raise InputError(f"segmentation labels must lie in 0..{NUM_SEG_CLASSES - 1}")
