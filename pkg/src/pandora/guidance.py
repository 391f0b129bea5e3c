"""Mask-localised guidance between the edited and inversion-branch noise predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .masking import ObjectMask, downsample

ALPHA_DEFAULT = 1.3


@dataclass(frozen=True)
class GuidanceSchedule:
    """``constant`` uses ``alpha_start`` everywhere; ``linear`` runs from
    ``alpha_start`` at ``t = T`` to ``alpha_end`` at ``t = 1``."""

    mode: str = "constant"
    alpha_start: float = ALPHA_DEFAULT
    alpha_end: float = ALPHA_DEFAULT

    def __post_init__(self):
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not (math.isfinite(self.alpha_start) and math.isfinite(self.alpha_end)):
            raise ValueError("guidance weights must be finite")

    @classmethod
    def constant(cls, alpha: float) -> "GuidanceSchedule":
        return cls("constant", alpha, alpha)

    @classmethod
    def linear(cls, start: float, end: float) -> "GuidanceSchedule":
        return cls("linear", start, end)


def alpha_at(sched: GuidanceSchedule, t: int, T: int) -> float:
    if not 1 <= t <= T:
        raise ValueError(f"t={t} outside [1, {T}]")
    if sched.mode == "constant" or T == 1:
        return sched.alpha_start
    return sched.alpha_start + (sched.alpha_end - sched.alpha_start) * (T - t) / (T - 1)


def latent_mask(mask: ObjectMask, shape) -> np.ndarray:
    """Max-pool ``mask`` to the latent grid and broadcast it over channels."""
    c, h, w = shape
    if h != w:
        raise ShapeError("latent grid must be square")
    if (mask.height, mask.width) == (h, w):
        grid = mask.bits
    else:
        grid = downsample(mask, h).grid()
    return np.broadcast_to(grid.astype(bool), (c, h, w))


def ladg_blend(eps_c, eps_u, mask, alpha: float) -> np.ndarray:
    """``(1-M) * eps_c + M * (alpha * eps_c + (1 - alpha) * eps_u)``.

    Outside the mask the result is ``eps_c`` itself, bit for bit.
    """
    eps_c = np.asarray(eps_c, dtype=np.float64)
    eps_u = np.asarray(eps_u, dtype=np.float64)
    m = np.asarray(mask)
    if eps_c.shape != eps_u.shape:
        raise ShapeError(f"noise predictions differ in shape: {eps_c.shape} vs {eps_u.shape}")
    m = np.broadcast_to(m, eps_c.shape) if m.shape != eps_c.shape else m
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("guidance mask must be binary")
        m = m.astype(bool)
    return np.where(m, alpha * eps_c + (1.0 - alpha) * eps_u, eps_c)
