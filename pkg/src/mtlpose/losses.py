"""Training losses with analytic gradients.

Each loss takes raw head outputs and ground truth as arrays and returns
``(value, gradient)`` where the gradient has the shape of the prediction.
Batched forms average over the leading axis.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DegenerateQuaternion, InvalidBox, InvalidInput
from .geometry import BBox, Pose

__all__ = ["BBox", "speed_loss", "speed_loss_batch", "ciou_loss", "ciou_loss_batch", "pixel_mse"]

#: Within this distance of 1 the arccos argument gets a zero rotation gradient.
ARCCOS_CLAMP = 1e-7

Array = NDArray[np.float64]


def speed_loss(pred: ArrayLike, gt: Pose) -> tuple[float, Array]:
    """SPEED score of a raw pose output ``(q_raw[4], t[3])`` against ground truth.

    ``q_raw`` is normalized here, so its scale never matters.
    """
    p = np.asarray(pred, dtype=np.float64)
    if p.shape != (7,):
        raise InvalidInput(f"pose output must have 7 values, got shape {p.shape}")
    q_raw, t_hat = p[:4], p[4:]
    q_norm = float(np.linalg.norm(q_raw))
    if q_norm < 1e-8:
        raise DegenerateQuaternion(f"raw quaternion norm {q_norm!r} is too small")
    q_hat = q_raw / q_norm
    grad = np.zeros(7)

    dot = float(np.dot(q_hat, gt.q))
    rotation = 2.0 * math.acos(min(abs(dot), 1.0))
    if abs(dot) < 1.0 - ARCCOS_CLAMP:
        cosine = abs(dot)
        d_rotation_d_dot = -2.0 / math.sqrt(1.0 - cosine * cosine) * math.copysign(1.0, dot)
        grad[:4] = d_rotation_d_dot * (gt.q - dot * q_hat) / q_norm

    range_gt = float(np.linalg.norm(gt.t))
    delta = t_hat - gt.t
    distance = float(np.linalg.norm(delta))
    if distance > 0.0:
        grad[4:] = delta / (distance * range_gt)
    return rotation + distance / range_gt, grad


def speed_loss_batch(pred: ArrayLike, gts: list[Pose]) -> tuple[float, Array]:
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim != 2 or len(p) != len(gts):
        raise InvalidInput(f"pose batch {p.shape} does not match {len(gts)} targets")
    grad = np.zeros_like(p)
    total = 0.0
    for i, gt in enumerate(gts):
        value, grad[i] = speed_loss(p[i], gt)
        total += value
    return total / len(gts), grad / len(gts)


def _ciou(p: Array, g: Array) -> tuple[Array, Array]:
    """Vectorized C-IoU loss and its gradient over (N, 4) center-size boxes."""
    cx, cy, w, h = p.T
    gcx, gcy, gw, gh = g.T
    x1, x2, y1, y2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    gx1, gx2, gy1, gy2 = gcx - gw / 2, gcx + gw / 2, gcy - gh / 2, gcy + gh / 2

    # Intersection and union.
    iw_raw = np.minimum(x2, gx2) - np.maximum(x1, gx1)
    ih_raw = np.minimum(y2, gy2) - np.maximum(y1, gy1)
    overlap_x, overlap_y = iw_raw > 0, ih_raw > 0
    iw, ih = np.where(overlap_x, iw_raw, 0.0), np.where(overlap_y, ih_raw, 0.0)
    inter = iw * ih
    union = w * h + gw * gh - inter
    iou = inter / union

    diw_dx1 = np.where(overlap_x, -(x1 > gx1).astype(float), 0.0)
    diw_dx2 = np.where(overlap_x, (x2 < gx2).astype(float), 0.0)
    dih_dy1 = np.where(overlap_y, -(y1 > gy1).astype(float), 0.0)
    dih_dy2 = np.where(overlap_y, (y2 < gy2).astype(float), 0.0)
    dI = {"x1": ih * diw_dx1, "x2": ih * diw_dx2, "y1": iw * dih_dy1, "y2": iw * dih_dy2}
    dU = {
        "x1": -h - dI["x1"], "x2": h - dI["x2"],
        "y1": -w - dI["y1"], "y2": w - dI["y2"],
    }
    d_iou = {k: (dI[k] * union - inter * dU[k]) / union ** 2 for k in dI}

    # Enclosing box diagonal and center distance.
    cw = np.maximum(x2, gx2) - np.minimum(x1, gx1)
    ch = np.maximum(y2, gy2) - np.minimum(y1, gy1)
    c2 = cw ** 2 + ch ** 2
    dc2 = {
        "x1": 2 * cw * -(x1 < gx1).astype(float), "x2": 2 * cw * (x2 > gx2).astype(float),
        "y1": 2 * ch * -(y1 < gy1).astype(float), "y2": 2 * ch * (y2 > gy2).astype(float),
    }
    rho2 = (cx - gcx) ** 2 + (cy - gcy) ** 2

    # Aspect-ratio consistency; alpha is held constant in the gradient.
    arc = np.arctan(gw / gh) - np.arctan(w / h)
    v = 4.0 / math.pi ** 2 * arc ** 2
    denominator = (1.0 - iou) + v
    positive = denominator > 0
    alpha = np.divide(v, denominator, out=np.zeros_like(v), where=positive)

    loss = 1.0 - iou + rho2 / c2 + alpha * v

    def corner_term(k: str) -> Array:
        return -d_iou[k] - rho2 * dc2[k] / c2 ** 2

    # Corner coordinates as functions of (cx, cy, w, h).
    d_cx = corner_term("x1") + corner_term("x2") + 2 * (cx - gcx) / c2
    d_cy = corner_term("y1") + corner_term("y2") + 2 * (cy - gcy) / c2
    d_w = (corner_term("x2") - corner_term("x1")) / 2
    d_h = (corner_term("y2") - corner_term("y1")) / 2
    dv_darc = 8.0 / math.pi ** 2 * arc
    diag = w ** 2 + h ** 2
    d_w = d_w + alpha * dv_darc * -(h / diag)
    d_h = d_h + alpha * dv_darc * (w / diag)
    return loss, np.stack([d_cx, d_cy, d_w, d_h], axis=1)


def _boxes(values: ArrayLike | BBox, name: str) -> Array:
    array = values.as_array() if isinstance(values, BBox) else np.asarray(values, dtype=np.float64)
    array = np.atleast_2d(array)
    if array.shape[1:] != (4,):
        raise InvalidInput(f"{name} boxes must be (N, 4), got {array.shape}")
    if np.any(array[:, 2:] <= 0):
        raise InvalidBox(f"{name} box has non-positive width or height: {array[:, 2:]!r}")
    return array


def ciou_loss(pred: ArrayLike | BBox, gt: ArrayLike | BBox) -> tuple[float, Array]:
    """Complete-IoU loss for one box pair; gradient w.r.t. ``(cx, cy, w, h)`` of ``pred``."""
    loss, grad = _ciou(_boxes(pred, "predicted"), _boxes(gt, "ground-truth"))
    return float(loss[0]), grad[0]


def ciou_loss_batch(pred: ArrayLike, gt: ArrayLike) -> tuple[float, Array]:
    p, g = _boxes(pred, "predicted"), _boxes(gt, "ground-truth")
    if p.shape != g.shape:
        raise InvalidInput(f"box batches differ: {p.shape} vs {g.shape}")
    loss, grad = _ciou(p, g)
    return float(loss.mean()), grad / len(p)


def pixel_mse(pred: ArrayLike, gt: ArrayLike) -> tuple[float, Array]:
    """Mean squared difference over every element."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise InvalidInput(f"pixel_mse: prediction {p.shape} and target {g.shape} differ")
    difference = p - g
    return float(np.mean(difference ** 2)), 2.0 * difference / difference.size
