"""Background-preserving attention (BPA) and pixel-wise attention dissolution (PAD).

Both are exposed as plain functions over Q/K/V matrices and combined into an
attention processor that the denoiser calls at each self-attention layer.
A processor is any callable ``proc(packet, ctx) -> O`` where ``packet`` is the
layer's own :class:`~pandora.toydenoiser.AttentionPacket`, ``ctx`` an
:class:`AttentionContext`, and ``O`` a ``tokens x d`` matrix.

Only one head is modelled; a multi-head backend applies the same math per head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import ndkernel as nk
from .errors import AllKeysDissolved, MissingInjection, NoBackgroundKeys, ShapeError
from .masking import TokenMask

if TYPE_CHECKING:
    from .toydenoiser import AttentionPacket


@dataclass(frozen=True)
class DissolutionConfig:
    """PAD/BPA knobs.

    ``active_window`` is an inclusive range of timesteps ``t`` (denoising runs
    from ``t = T`` down to 1). ``layer_filter=None`` means every layer.
    """

    percentile: float = 0.05
    active_window: tuple[int, int] = (1, 50)
    layer_filter: Optional[frozenset] = None

    def __post_init__(self):
        if not 0.0 <= self.percentile < 1.0:
            raise ValueError(f"percentile must lie in [0, 1), got {self.percentile}")
        lo, hi = self.active_window
        if lo < 1 or hi < lo - 1:
            raise ValueError(f"invalid active window {self.active_window}")
        if self.layer_filter is not None:
            object.__setattr__(self, "layer_filter", frozenset(self.layer_filter))

    def k_for(self, n_keys: int) -> int:
        # p * n is rounded first so 0.03 * 100 counts as 3, not 4
        return min(n_keys, math.ceil(round(self.percentile * n_keys, 9)))

    def is_active(self, t: int, layer_id: int) -> bool:
        lo, hi = self.active_window
        if not lo <= t <= hi:
            return False
        return self.layer_filter is None or layer_id in self.layer_filter


@dataclass(frozen=True)
class DissolvedSet:
    """Dissolved key indices per masked query row (rows in ascending order)."""

    k: int
    rows: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(len(v) for v in self.rows.values())

    def __getitem__(self, i):
        return self.rows[i]


@dataclass
class AttentionContext:
    """What a processor may see besides its own packet."""

    layer_id: int
    step: int
    token_mask: Optional[TokenMask] = None
    injected: Optional["AttentionPacket"] = None
    stats: Optional[dict] = None


def attention_logits(Q, K, d: int) -> np.ndarray:
    """``Q K^T / sqrt(d)``."""
    Q = nk.as_matrix(Q, "Q")
    K = nk.as_matrix(K, "K")
    if Q.shape[1] != d or K.shape[1] != d:
        raise ShapeError(f"Q {Q.shape} / K {K.shape} do not have key dim {d}")
    return nk.scale(nk.matmul(Q, K.T), 1.0 / math.sqrt(d))


def vanilla_attention(Q, K, V, d: int) -> np.ndarray:
    return nk.matmul(nk.softmax_rows(attention_logits(Q, K, d)), V)


def topk_indices(row, k: int) -> np.ndarray:
    """Indices of the ``k`` largest weights, ascending; ties prefer the lower index."""
    return nk.topk_row(row, k)


def _check_square(S, mask):
    if S.shape[0] != S.shape[1] or S.shape[1] != mask.n_tokens:
        raise ShapeError(f"logits {S.shape} do not match a {mask.n_tokens}-token grid")


def pad_dissolve(S, mask: TokenMask, cfg: DissolutionConfig, all_rows: bool = False):
    """Set each masked query's top-k keys and all object keys to ``-inf``.

    ``all_rows=True`` dissolves background query rows too; their values are
    discarded by :func:`blend_outputs`, so the blended output is unchanged.
    """
    S = nk.as_matrix(S, "S")
    _check_square(S, mask)
    if mask.background_indices.size == 0:
        raise NoBackgroundKeys("no background keys left to attend to")
    k = cfg.k_for(S.shape[1])
    rows = np.arange(S.shape[0]) if all_rows else mask.object_indices
    S_diss, dissolved, bad = nk.dissolve_rows(S, rows, mask.is_object, k)
    if bad >= 0:
        raise AllKeysDissolved(bad, k, mask.object_indices.size, S.shape[1])
    sets = DissolvedSet(k, {int(i): tuple(np.flatnonzero(dissolved[i]).tolist()) for i in rows})
    return S_diss, sets


def _bpa_from_logits(S, V, mask):
    if mask.background_indices.size == 0:
        raise NoBackgroundKeys("background-preserving attention needs a background key")
    S = S.copy()
    S[:, mask.is_object] = nk.NEG_INF
    return nk.matmul(nk.softmax_rows(S), V)


def bpa_attention(Q, K_i, V_i, mask: TokenMask, d: int) -> np.ndarray:
    """Attention of every query restricted to the background keys of ``K_i``."""
    S = attention_logits(Q, K_i, d)
    if S.shape[1] != mask.n_tokens:
        raise ShapeError("key count does not match the token mask")
    return _bpa_from_logits(S, nk.as_matrix(V_i, "V_i"), mask)


def pad_attention(Q, K_i, V_i, mask: TokenMask, cfg: DissolutionConfig, d: int, all_rows=False):
    S = attention_logits(Q, K_i, d)
    S_diss, sets = pad_dissolve(S, mask, cfg, all_rows=all_rows)
    return nk.matmul(nk.softmax_rows(S_diss), V_i), sets


def blend_outputs(B, SC_bg, mask: TokenMask) -> np.ndarray:
    """Object rows from ``B``, background rows from ``SC_bg``, copied exactly."""
    B = np.asarray(B, dtype=np.float64)
    SC_bg = np.asarray(SC_bg, dtype=np.float64)
    if B.shape != SC_bg.shape or B.shape[0] != mask.n_tokens:
        raise ShapeError(f"cannot blend {B.shape} with {SC_bg.shape} over {mask.n_tokens} tokens")
    return np.where(mask.is_object[:, None], B, SC_bg)


class PandoraProcessor:
    """Within the active window: BPA for background rows, PAD for object rows,
    computed against the injected inversion-branch keys and values.
    Outside it: vanilla self-attention on the layer's own packet.
    """

    def __init__(self, cfg: DissolutionConfig):
        self.cfg = cfg

    def __call__(self, packet, ctx: AttentionContext) -> np.ndarray:
        if not self.cfg.is_active(ctx.step, ctx.layer_id):
            return vanilla_attention(packet.Q, packet.K, packet.V, packet.d)
        inj = ctx.injected
        if inj is None:
            raise MissingInjection(f"no injected K/V for layer {ctx.layer_id} at t={ctx.step}")
        mask = ctx.token_mask
        if mask is None:
            raise MissingInjection(f"no token mask for layer {ctx.layer_id}")
        S = attention_logits(packet.Q, inj.K, packet.d)
        sc_bg = _bpa_from_logits(S, inj.V, mask)
        S_diss, sets = pad_dissolve(S, mask, self.cfg)
        B = nk.matmul(nk.softmax_rows(S_diss), inj.V)
        if ctx.stats is not None:
            ctx.stats[ctx.layer_id] = {"k": sets.k, "dissolved": sets.count}
        return blend_outputs(B, sc_bg, mask)


def pandora_processor(cfg: DissolutionConfig) -> PandoraProcessor:
    return PandoraProcessor(cfg)


class InjectionProcessor:
    """Plain key/value injection: vanilla attention of the current queries over
    the injected K/V inside the window, own K/V outside. Used for the
    reconstruction reference run.
    """

    def __init__(self, active_window: tuple[int, int], layer_filter=None):
        self.cfg = DissolutionConfig(0.0, active_window, layer_filter)

    def __call__(self, packet, ctx: AttentionContext) -> np.ndarray:
        if not self.cfg.is_active(ctx.step, ctx.layer_id):
            return vanilla_attention(packet.Q, packet.K, packet.V, packet.d)
        inj = ctx.injected
        if inj is None:
            raise MissingInjection(f"no injected K/V for layer {ctx.layer_id} at t={ctx.step}")
        return vanilla_attention(packet.Q, inj.K, inj.V, packet.d)
