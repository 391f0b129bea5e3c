"""Background fidelity and removal-activity measures over latent grids."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MaskError, ShapeError
from .masking import ObjectMask


@dataclass(frozen=True)
class RegionMetrics:
    background_mse: float
    background_psnr: Optional[float]
    masked_divergence: Optional[float]


def _region(mask: ObjectMask, shape, value):
    if shape[-2:] != mask.bits.shape:
        raise ShapeError(f"mask {mask.bits.shape} does not match grid {shape}")
    return np.broadcast_to(mask.bits == value, shape)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def background_mse(output, reference, mask: ObjectMask) -> float:
    """Mean squared difference over background (mask = 0) pixels, all channels."""
    output, reference = _pair(output, reference)
    sel = _region(mask, output.shape, 0)
    if not sel.any():
        raise MaskError("mask has no background pixels")
    d = output[sel] - reference[sel]
    return float(np.mean(d * d))


def background_psnr(output, reference, mask: ObjectMask) -> Optional[float]:
    """PSNR with peak = dynamic range of ``reference``; ``None`` when the MSE is 0."""
    mse = background_mse(output, reference, mask)
    peak = float(np.max(reference) - np.min(reference))
    if mse == 0.0 or peak == 0.0:
        return None
    return 10.0 * math.log10(peak * peak / mse)


def masked_divergence(output, source, mask: ObjectMask) -> float:
    """Mean absolute change inside the mask."""
    output, source = _pair(output, source)
    sel = _region(mask, output.shape, 1)
    if not sel.any():
        raise MaskError("mask is empty")
    return float(np.mean(np.abs(output[sel] - source[sel])))


def region_metrics(output, reference, source, mask: ObjectMask) -> RegionMetrics:
    return RegionMetrics(
        background_mse(output, reference, mask),
        background_psnr(output, reference, mask),
        None if mask.is_empty else masked_divergence(output, source, mask),
    )
