"""Gaussian keypoint heatmaps: ground-truth encoding and subpixel decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidInput

#: Default Gaussian spread at 64x64; scale with the image size.
SIGMA_PX = 1.5
#: Default confidence gate before PnP.
TAU = 0.2


def default_sigma(image_size: int) -> float:
    return SIGMA_PX * image_size / 64.0


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    """K channels of H x W responses in [0, 1]."""
    maps: NDArray[np.float64]
    sigma_px: float

    @property
    def shape(self) -> tuple[int, int, int]:
        k, h, w = self.maps.shape
        return k, h, w


@dataclass(frozen=True, eq=False)
class DecodedKeypoints:
    """Per-channel decode results."""
    #: Subpixel ``(u, v)`` per channel, pixels.
    uv: NDArray[np.float64]
    #: Peak value per channel.
    confidence: NDArray[np.float64]
    #: ``confidence >= tau``.
    valid: NDArray[np.bool_]

    def __len__(self) -> int:
        return len(self.confidence)


def encode(keypoints_px: ArrayLike, height: int, width: int, sigma_px: float = SIGMA_PX) -> HeatmapStack:
    """One Gaussian per keypoint, evaluated at pixel centers; out-of-frame keypoints give zero channels."""
    if not sigma_px > 0:
        raise InvalidInput(f"sigma_px must be positive, got {sigma_px!r}")
    points = np.asarray(keypoints_px, dtype=np.float64).reshape(-1, 2)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    maps = np.zeros((len(points), height, width))
    for k, (u, v) in enumerate(points):
        if not (-0.5 <= u < width - 0.5 and -0.5 <= v < height - 0.5):
            continue
        maps[k] = np.exp(-((cols - u) ** 2 + (rows - v) ** 2) / (2.0 * sigma_px ** 2))
    return HeatmapStack(maps, sigma_px)


def _offset(left: float, center: float, right: float) -> float:
    """Vertex of the parabola through three log-intensities, clamped to half a pixel."""
    curvature = left - 2.0 * center + right
    if not curvature < 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def decode(stack: HeatmapStack | NDArray[np.float64], tau: float = TAU) -> DecodedKeypoints:
    """Peak pixel per channel, refined to subpixel by a quadratic fit on the 3x3 neighborhood.

    The fit is done on log-intensities, where a Gaussian peak is exactly
    quadratic; this makes the offset independent of the channel's scale.
    Ties in the peak go to the smallest row, then the smallest column.
    """
    maps = stack.maps if isinstance(stack, HeatmapStack) else np.asarray(stack, dtype=np.float64)
    n_channels, height, width = maps.shape
    uv = np.zeros((n_channels, 2))
    confidence = np.zeros(n_channels)
    for k in range(n_channels):
        channel = maps[k]
        flat = int(np.argmax(channel))
        row, col = divmod(flat, width)
        peak = float(channel[row, col])
        confidence[k] = max(peak, 0.0)
        du = dv = 0.0
        if peak > 0.0:
            log_at = np.log(np.maximum(channel, peak * 1e-12))
            if 0 < col < width - 1:
                du = _offset(*log_at[row, col - 1:col + 2])
            if 0 < row < height - 1:
                dv = _offset(*log_at[row - 1:row + 2, col])
        uv[k] = (col + du, row + dv)
    valid = (confidence >= tau) & (confidence > 0.0)
    return DecodedKeypoints(uv, confidence, valid)
