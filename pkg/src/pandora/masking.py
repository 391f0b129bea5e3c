"""Object masks and their token-grid downsamples."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import MaskError

THRESHOLD = 127


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObjectMask:
    """Binary pixel mask, 1 = object to remove, 0 = background."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or 0 in b.shape:
            raise MaskError(f"mask must be a non-empty 2-D grid, got shape {b.shape}")
        if not np.isin(b, (0, 1)).all():
            raise MaskError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", _frozen(b.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def has_background(self) -> bool:
        return bool((self.bits == 0).any())

    @property
    def is_empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other):
        return isinstance(other, ObjectMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None

    @classmethod
    def empty(cls, height: int, width: int) -> "ObjectMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def from_box(cls, height, width, top, left, size_y, size_x) -> "ObjectMask":
        bits = np.zeros((height, width), dtype=np.uint8)
        bits[top : top + size_y, left : left + size_x] = 1
        return cls(bits)


@dataclass(frozen=True, eq=False)
class TokenMask:
    """An :class:`ObjectMask` max-pooled onto a ``resolution x resolution`` token grid.

    Tokens are numbered row-major.
    """

    resolution: int
    bits: np.ndarray
    object_indices: np.ndarray = field(init=False)
    background_indices: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.bits).astype(np.uint8).reshape(-1)
        if b.size != self.resolution * self.resolution:
            raise MaskError("token bits do not match resolution")
        object.__setattr__(self, "bits", _frozen(b))
        object.__setattr__(self, "object_indices", _frozen(np.flatnonzero(b == 1).astype(np.int64)))
        object.__setattr__(self, "background_indices", _frozen(np.flatnonzero(b == 0).astype(np.int64)))

    @property
    def n_tokens(self) -> int:
        return self.bits.size

    @cached_property
    def is_object(self) -> np.ndarray:
        return _frozen(self.bits.astype(bool))

    def grid(self) -> np.ndarray:
        return self.bits.reshape(self.resolution, self.resolution)

    def __eq__(self, other):
        return (
            isinstance(other, TokenMask)
            and self.resolution == other.resolution
            and np.array_equal(self.bits, other.bits)
        )

    __hash__ = None


def load_mask(data: bytes) -> ObjectMask:
    """Decode an 8-bit single-channel PGM (P5) or PNG; ``pixel > 127`` is object."""
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise MaskError(f"malformed mask file: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise MaskError("zero-sized mask")
    if img.mode == "1":
        img = img.convert("L")
    if img.mode != "L":
        raise MaskError(f"mask must be 8-bit single channel, got mode {img.mode}")
    pix = np.asarray(img, dtype=np.uint8)
    return ObjectMask((pix > THRESHOLD).astype(np.uint8))


def _windows(n: int, r: int):
    """Covering windows of ``n`` pixels split into ``r`` tokens, ceil-sized."""
    step = -(-n // r)
    return [(min(i * step, n), min((i + 1) * step, n)) for i in range(r)]


def downsample(mask: ObjectMask, resolution: int) -> TokenMask:
    """Max-pool: a token is object iff ANY pixel it covers is object."""
    if resolution <= 0:
        raise MaskError("resolution must be positive")
    rows = _windows(mask.height, resolution)
    cols = _windows(mask.width, resolution)
    out = np.zeros((resolution, resolution), dtype=np.uint8)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            if r1 > r0 and c1 > c0:
                out[i, j] = mask.bits[r0:r1, c0:c1].max()
    return TokenMask(resolution, out)


def upsample(tokens: TokenMask, height: int, width: int) -> ObjectMask:
    """Nearest-neighbour expansion back to pixel resolution."""
    rows = _windows(height, tokens.resolution)
    cols = _windows(width, tokens.resolution)
    grid = tokens.grid()
    bits = np.zeros((height, width), dtype=np.uint8)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            bits[r0:r1, c0:c1] = grid[i, j]
    return ObjectMask(bits)


def complement(mask: TokenMask) -> TokenMask:
    return TokenMask(mask.resolution, 1 - mask.bits)


class TokenMaskCache:
    """Per-resolution token masks of one object mask, computed once."""

    def __init__(self, mask: ObjectMask):
        self.mask = mask
        self._cache: dict[int, TokenMask] = {}

    def __getitem__(self, resolution: int) -> TokenMask:
        tm = self._cache.get(resolution)
        if tm is None:
            tm = self._cache[resolution] = downsample(self.mask, resolution)
        return tm
