"""A small seeded noise predictor with real self-attention at two token grids.

The network stands in for a diffusion U-Net. Layout, for a ``C x H x W``
latent:

* level 0: 2x2 patches -> ``(H/2)^2`` tokens of width ``dim``; self-attention
  (layer 0), output projection, residual, tanh feed-forward, residual;
* level 1: 2x2 average pool of level-0 tokens -> ``(H/4)^2`` tokens, same
  block (layer 1), then nearest upsampling added back into level 0;
* a linear head maps level-0 tokens back to 2x2 patches.

Queries and keys carry positional columns whose dot product is a negative
squared token distance, so attention is spatially local as in image models. Every token projection feeds a hook:
a processor registered for a layer id replaces the attention computation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import ndkernel as nk
from .attnctl import AttentionContext, vanilla_attention
from .errors import PandoraError, PipelineError, ShapeError
from .masking import TokenMask

PATCH = 2
TIME_FEATURES = 16
POS_FEATURES = 4
# fast time features make eps(x, t-1) and eps(x, t) disagree, which inversion cannot absorb
MAX_TIME_FREQ = 0.005


@dataclass(frozen=True)
class AttentionLayer:
    layer_id: int
    resolution: int
    heads: int
    dim: int

    @property
    def n_tokens(self) -> int:
        return self.resolution * self.resolution


@dataclass(frozen=True, eq=False)
class AttentionPacket:
    layer_id: int
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    d: int
    step: int

    def __post_init__(self):
        for name in ("Q", "K", "V"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[1] != self.d:
                raise ShapeError(f"{name} has shape {m.shape}, expected (tokens, {self.d})")
        if not self.Q.shape[0] == self.K.shape[0] == self.V.shape[0]:
            raise ShapeError("Q, K, V must have the same token count")


Processor = Callable[[AttentionPacket, AttentionContext], np.ndarray]


def timestep_features(t: float, n: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of ``t`` with slow frequencies (at most MAX_TIME_FREQ rad per step)."""
    half = n // 2
    freqs = MAX_TIME_FREQ * np.power(0.01, np.arange(half) / max(half - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _patchify(x, p):
    c, h, w = x.shape
    r = h // p
    return x.reshape(c, r, p, r, p).transpose(1, 3, 0, 2, 4).reshape(r * r, c * p * p)


def _unpatchify(tokens, c, h, p):
    r = h // p
    return tokens.reshape(r, r, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, h, h)


def _pool2(h, r):
    d = h.shape[1]
    g = h.reshape(r // 2, 2, r // 2, 2, d)
    return ((g[:, 0, :, 0] + g[:, 0, :, 1]) + (g[:, 1, :, 0] + g[:, 1, :, 1])).reshape(-1, d) * 0.25


def _up2(h, r):
    d = h.shape[1]
    g = h.reshape(r, r, d)
    return np.repeat(np.repeat(g, 2, axis=0), 2, axis=1).reshape(-1, d)


class ToyDenoiser:
    """Seeded stand-in for the U-Net noise predictor ``eps(x_t, t)``.

    Weights are drawn from ``numpy.random.Generator(PCG64(seed))``; the same
    seed always yields bit-identical weights.
    """

    def __init__(
        self,
        seed: int,
        channels: int,
        height: int,
        width: int,
        dim: int = 32,
        locality: float = 2.0,
        out_gain: float = 0.05,
        qk_gain: float = 0.3,
    ):
        if height != width or height < 8 or height & (height - 1):
            raise ShapeError(f"latent must be square with a power-of-two side >= 8, got {height}x{width}")
        if channels < 1:
            raise ShapeError("need at least one channel")
        self.seed = seed
        self.shape = (channels, height, width)
        self.dim = dim
        r0, r1 = height // PATCH, height // (2 * PATCH)
        self.layers = (
            AttentionLayer(0, r0, 1, dim),
            AttentionLayer(1, r1, 1, dim),
        )
        rng = np.random.Generator(np.random.PCG64(seed))
        in_dim = channels * PATCH * PATCH

        def dense(n_in, n_out, gain=1.0):
            return rng.standard_normal((n_in, n_out)) * (gain / math.sqrt(n_in))

        def posenc(r):
            # q.k over these columns equals -locality * sqrt(dim) * |p - p'|^2
            ii, jj = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
            py, px = ii.ravel().astype(np.float64), jj.ravel().astype(np.float64)
            sq = py * py + px * px
            one = np.ones_like(sq)
            s = math.sqrt(locality * math.sqrt(dim))
            q = s * np.stack([2.0 * py, 2.0 * px, -sq, one], axis=1)
            k = s * np.stack([py, px, one, -sq], axis=1)
            return q, k

        w = {}
        w["in0"] = dense(in_dim, dim)
        w["time0"] = dense(TIME_FEATURES, dim, 0.5)
        w["in1"] = dense(dim, dim)
        w["time1"] = dense(TIME_FEATURES, dim, 0.5)
        for lvl, r in ((0, r0), (1, r1)):
            w[f"posq{lvl}"], w[f"posk{lvl}"] = posenc(r)
            w[f"q{lvl}"] = dense(dim, dim - POS_FEATURES, qk_gain)
            w[f"k{lvl}"] = dense(dim, dim - POS_FEATURES, qk_gain)
            w[f"v{lvl}"] = dense(dim, dim)
            w[f"o{lvl}"] = dense(dim, dim)
            w[f"ffa{lvl}"] = dense(dim, 2 * dim)
            w[f"ffb{lvl}"] = dense(2 * dim, dim, 0.5)
        w["up"] = dense(dim, dim, 0.5)
        w["out"] = dense(dim, in_dim, out_gain)
        for a in w.values():
            a.setflags(write=False)
        self.weights = w

    def __repr__(self):
        return f"ToyDenoiser(seed={self.seed}, shape={self.shape}, dim={self.dim})"

    def __call__(self, x, t):
        return self.forward(x, t)[0]

    def layer(self, layer_id: int) -> AttentionLayer:
        return self.layers[layer_id]

    def _block(self, lvl, h, t, processors, injected, token_masks, stats, captured):
        w = self.weights
        layer = self.layers[lvl]
        packet = AttentionPacket(
            layer.layer_id,
            np.hstack([nk.matmul(h, w[f"q{lvl}"]), w[f"posq{lvl}"]]),
            np.hstack([nk.matmul(h, w[f"k{lvl}"]), w[f"posk{lvl}"]]),
            nk.matmul(h, w[f"v{lvl}"]),
            layer.dim,
            t,
        )
        if captured is not None:
            captured.append(packet)
        proc = processors.get(layer.layer_id) if processors else None
        if proc is None:
            o = vanilla_attention(packet.Q, packet.K, packet.V, packet.d)
        else:
            ctx = AttentionContext(
                layer_id=layer.layer_id,
                step=t,
                token_mask=token_masks.get(layer.resolution) if token_masks else None,
                injected=injected.get(layer.layer_id) if injected else None,
                stats=stats,
            )
            try:
                o = proc(packet, ctx)
            except PandoraError as exc:
                raise PipelineError(t, layer.layer_id, exc) from exc
            o = np.asarray(o, dtype=np.float64)
            if o.shape != (layer.n_tokens, layer.dim):
                raise ShapeError(
                    f"processor for layer {layer.layer_id} returned {o.shape}, "
                    f"expected {(layer.n_tokens, layer.dim)}"
                )
        h = h + nk.matmul(o, w[f"o{lvl}"])
        return h + nk.matmul(np.tanh(nk.matmul(h, w[f"ffa{lvl}"])), w[f"ffb{lvl}"])

    def forward(
        self,
        x,
        t: int,
        processors: Optional[Mapping[int, Processor]] = None,
        capture: bool = False,
        injected: Optional[Mapping[int, AttentionPacket]] = None,
        token_masks: Optional[Mapping[int, TokenMask]] = None,
        stats: Optional[dict] = None,
    ):
        """Predict noise for ``x`` at step ``t``.

        ``token_masks`` maps token resolution to mask, ``injected`` maps layer id
        to a packet from another branch; both are only handed to processors.
        Returns ``(eps, captured)``; ``captured`` holds one packet per attention
        layer when ``capture`` is set and is empty otherwise.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise ShapeError(f"input shape {x.shape} does not match denoiser shape {self.shape}")
        if t < 0:
            raise ValueError(f"negative timestep {t}")
        w = self.weights
        c, hgt, _ = self.shape
        r0 = self.layers[0].resolution
        r1 = self.layers[1].resolution
        captured = [] if capture else None
        temb = timestep_features(t)[None, :]
        args = (t, processors, injected, token_masks, stats, captured)

        h0 = nk.matmul(_patchify(x, PATCH), w["in0"]) + nk.matmul(temb, w["time0"])
        h0 = self._block(0, h0, *args)
        h1 = nk.matmul(_pool2(h0, r0), w["in1"]) + nk.matmul(temb, w["time1"])
        h1 = self._block(1, h1, *args)
        h0 = h0 + nk.matmul(_up2(h1, r1), w["up"])
        eps = _unpatchify(nk.matmul(h0, w["out"]), c, hgt, PATCH)
        return eps, (captured if captured is not None else [])


def build_denoiser(seed: int, channels: int, height: int, width: int, **kwargs) -> ToyDenoiser:
    return ToyDenoiser(seed, channels, height, width, **kwargs)
