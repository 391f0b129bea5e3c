"""Deterministic DDIM (eta = 0): schedule, inversion, sampling, trace files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError, TraceFormatError

BETA_START = 1e-4
BETA_END = 2e-2

TRACE_MAGIC = b"PNDR"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4s5I")

Denoiser = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2 or ab[0] != 1.0:
            raise ValueError("alpha_bar must start at 1 and have length T+1 >= 2")
        if not (np.all(np.diff(ab) < 0) and ab[-1] > 0):
            raise ValueError("alpha_bar must be strictly decreasing and positive")
        ab = ab.copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1


def make_schedule(T: int) -> DiffusionSchedule:
    """Linear betas from 1e-4 to 2e-2 over ``T`` steps, ``alpha_bar[t] = prod(1 - beta_s)``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    betas = np.linspace(BETA_START, BETA_END, T)
    return DiffusionSchedule(np.concatenate(([1.0], np.cumprod(1.0 - betas))))


def _check_step(t, sched):
    if not 1 <= t <= sched.T:
        raise ValueError(f"step t={t} outside [1, {sched.T}]")


def ddim_step(x_t, eps, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """One deterministic reverse step x_t -> x_{t-1}."""
    _check_step(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ShapeError(f"latent {x_t.shape} and noise {eps.shape} differ in shape")
    a_t = sched.alpha_bar[t]
    a_prev = sched.alpha_bar[t - 1]
    x0_pred = (x_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0_pred + np.sqrt(1.0 - a_prev) * eps


def ddim_inverse_step(x_prev, eps, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """One inversion step x_{t-1} -> x_t using noise predicted at x_{t-1}."""
    _check_step(t, sched)
    a_t = sched.alpha_bar[t]
    a_prev = sched.alpha_bar[t - 1]
    x0_pred = (x_prev - np.sqrt(1.0 - a_prev) * eps) / np.sqrt(a_prev)
    return np.sqrt(a_t) * x0_pred + np.sqrt(1.0 - a_t) * eps


@dataclass(frozen=True, eq=False)
class InversionTrace:
    """Latents ``x_0 .. x_T`` stacked along axis 0; read-only."""

    latents: np.ndarray

    def __post_init__(self):
        lat = np.ascontiguousarray(self.latents, dtype=np.float64)
        if lat.ndim != 4 or lat.shape[0] < 2:
            raise ShapeError("trace must have shape (T+1, C, H, W) with T >= 1")
        lat.setflags(write=False)
        object.__setattr__(self, "latents", lat)

    @property
    def T(self) -> int:
        return self.latents.shape[0] - 1

    @property
    def shape(self):
        return self.latents.shape[1:]

    def __len__(self):
        return self.latents.shape[0]

    def __getitem__(self, t):
        return self.latents[t]

    def to_bytes(self) -> bytes:
        c, h, w = self.shape
        head = _HEADER.pack(TRACE_MAGIC, TRACE_VERSION, self.T, c, h, w)
        return head + self.latents.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "InversionTrace":
        if len(data) < _HEADER.size:
            raise TraceFormatError("trace file truncated before header end")
        magic, version, T, c, h, w = _HEADER.unpack_from(data)
        if magic != TRACE_MAGIC:
            raise TraceFormatError(f"bad magic {magic!r}")
        if version != TRACE_VERSION:
            raise TraceFormatError(f"unsupported trace version {version}")
        n = (T + 1) * c * h * w
        body = data[_HEADER.size :]
        if len(body) != 8 * n:
            raise TraceFormatError(f"expected {8 * n} payload bytes, found {len(body)}")
        lat = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(T + 1, c, h, w)
        return cls(lat)


def invert(x0, denoiser: Denoiser, sched: DiffusionSchedule) -> InversionTrace:
    """First-order DDIM inversion; noise for step t is predicted at (x_{t-1}, t-1)."""
    x = np.asarray(x0, dtype=np.float64)
    lat = np.empty((sched.T + 1,) + x.shape)
    lat[0] = x
    for t in range(1, sched.T + 1):
        eps = denoiser(lat[t - 1], t - 1)
        lat[t] = ddim_inverse_step(lat[t - 1], eps, t, sched)
    return InversionTrace(lat)


def sample(x_T, denoiser: Denoiser, sched: DiffusionSchedule) -> np.ndarray:
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(sched.T, 0, -1):
        x = ddim_step(x, denoiser(x, t), t, sched)
    return x
