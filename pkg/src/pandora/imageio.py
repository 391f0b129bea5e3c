"""8-bit image files <-> latent grids, and atomic file writes."""
from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import PandoraError


class ImageFormatError(PandoraError, ValueError):
    pass


def read_image(path) -> np.ndarray:
    """Load an 8-bit grayscale or RGB PGM/PNG as a ``C x H x W`` grid in [-1, 1]."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported mode {mode} (need 8-bit L or RGB)")
            pix = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc
    if pix.ndim == 2:
        pix = pix[None]
    else:
        pix = pix.transpose(2, 0, 1)
    h, w = pix.shape[1:]
    if h != w or h < 8 or h & (h - 1):
        raise ImageFormatError(f"{path}: image must be square with a power-of-two side >= 8, got {w}x{h}")
    return pix.astype(np.float64) / 127.5 - 1.0


def to_uint8(latent) -> np.ndarray:
    x = np.clip(np.asarray(latent, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def encode_png(latent) -> bytes:
    from PIL import Image

    pix = to_uint8(latent)
    img = Image.fromarray(pix[0], "L") if pix.shape[0] == 1 else Image.fromarray(pix.transpose(1, 2, 0), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temp file in the same directory."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    umask = os.umask(0)
    os.umask(umask)
    try:
        os.chmod(tmp, 0o666 & ~umask)
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_png(path, latent) -> None:
    atomic_write(path, encode_png(latent))
