"""The removal loop: invert, then denoise with attention control and guidance."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import metrics
from .attnctl import DissolutionConfig, InjectionProcessor, pandora_processor
from .errors import MaskError, PandoraError, ShapeError
from .guidance import GuidanceSchedule, alpha_at, ladg_blend, latent_mask
from .masking import ObjectMask, TokenMaskCache
from .scheduler import InversionTrace, ddim_step, invert, make_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemovalConfig:
    steps: int = 50
    percentile: float = 0.05
    guidance: GuidanceSchedule = field(default_factory=GuidanceSchedule)
    active_steps: int = 45
    seed: int = 0
    layer_filter: Optional[frozenset] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.active_steps <= self.steps:
            raise ValueError(f"active_steps must lie in [0, {self.steps}]")
        if not 0.0 <= self.percentile < 1.0:
            raise ValueError("percentile must lie in [0, 1)")

    @property
    def active_window(self) -> tuple[int, int]:
        # the first `active_steps` denoising iterations are t = T .. T - N + 1
        return (self.steps - self.active_steps + 1, self.steps)

    def dissolution(self) -> DissolutionConfig:
        return DissolutionConfig(self.percentile, self.active_window, self.layer_filter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_filter"] = None if self.layer_filter is None else sorted(self.layer_filter)
        d["active_window"] = list(self.active_window)
        return d


@dataclass
class StepRecord:
    t: int
    alpha: float
    k: dict
    dissolved: dict
    latent_norm: float

    @property
    def dissolved_total(self) -> int:
        return sum(self.dissolved.values())


@dataclass
class RunReport:
    config: dict
    steps: list
    denoiser_calls: int = 0
    background_mse: Optional[float] = None
    background_mse_input: Optional[float] = None
    background_psnr: Optional[float] = None
    masked_divergence: Optional[float] = None
    wall_ms: float = 0.0

    @property
    def dissolved_total(self) -> int:
        return sum(s.dissolved_total for s in self.steps)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "steps": [
                {
                    "t": s.t,
                    "alpha": s.alpha,
                    "k": {str(l): v for l, v in s.k.items()},
                    "dissolved": {str(l): v for l, v in s.dissolved.items()},
                    "latent_norm": s.latent_norm,
                }
                for s in self.steps
            ],
            "denoiser_calls": self.denoiser_calls,
            "background_mse": self.background_mse,
            "background_mse_input": self.background_mse_input,
            "background_psnr": self.background_psnr,
            "masked_divergence": self.masked_divergence,
            "omitted_metrics": ["FID", "LPIPS", "CLIP"],
        }
        if timing:
            d["wall_ms"] = self.wall_ms
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


def _check_inputs(image, mask, denoiser):
    image = np.asarray(image, dtype=np.float64)
    if image.shape != tuple(denoiser.shape):
        raise ShapeError(f"image shape {image.shape} does not match denoiser {denoiser.shape}")
    if mask.bits.shape != image.shape[1:]:
        raise MaskError(f"mask {mask.bits.shape} does not match image {image.shape[1:]}")
    if not mask.has_background:
        raise MaskError("mask has no background pixels")
    return image


def prepare_trace(image, denoiser, steps: int, trace: Optional[InversionTrace] = None):
    sched = make_schedule(steps)
    if trace is None:
        trace = invert(image, denoiser, sched)
    elif trace.T != steps or trace.shape != tuple(denoiser.shape):
        raise ShapeError(f"cached trace (T={trace.T}, shape={trace.shape}) does not fit this run")
    return sched, trace


def _edit_loop(trace, sched, denoiser, processor, masks, lat_mask, guidance, record):
    layers = [l.layer_id for l in denoiser.layers]
    procs = {l: processor for l in layers}
    T = sched.T
    x = np.array(trace[T])
    calls = 0
    steps = []
    for t in range(T, 0, -1):
        eps_u, captured = denoiser.forward(trace[t], t, capture=True)
        injected = {p.layer_id: p for p in captured}
        stats: dict = {}
        eps_c, _ = denoiser.forward(
            x, t, processors=procs, injected=injected, token_masks=masks, stats=stats
        )
        calls += 2
        if guidance is None:
            alpha, eps = 1.0, eps_c
        else:
            alpha = alpha_at(guidance, t, T)
            eps = ladg_blend(eps_c, eps_u, lat_mask, alpha)
        x = ddim_step(x, eps, t, sched)
        if record:
            steps.append(
                StepRecord(
                    t,
                    alpha,
                    {l: stats.get(l, {}).get("k", 0) for l in layers},
                    {l: stats.get(l, {}).get("dissolved", 0) for l in layers},
                    float(np.sqrt(np.sum(x * x))),
                )
            )
    return x, steps, calls


def reconstruct(image, denoiser, cfg: RemovalConfig, trace: Optional[InversionTrace] = None):
    """Reference run: the same loop with plain K/V injection and no guidance."""
    image = np.asarray(image, dtype=np.float64)
    sched, trace = prepare_trace(image, denoiser, cfg.steps, trace)
    proc = InjectionProcessor(cfg.active_window, cfg.layer_filter)
    out, _, _ = _edit_loop(trace, sched, denoiser, proc, None, None, None, record=False)
    return out


def remove_objects(
    image,
    mask: ObjectMask,
    denoiser,
    cfg: RemovalConfig = RemovalConfig(),
    trace: Optional[InversionTrace] = None,
    reference=None,
):
    """Erase the masked objects from ``image`` (a latent grid; encoder is identity).

    ``trace`` reuses an existing inversion; ``reference`` (typically the output
    of :func:`reconstruct`) is what ``background_mse`` is measured against.
    Returns ``(output, report)``.
    """
    start = time.perf_counter()
    image = _check_inputs(image, mask, denoiser)
    sched, trace = prepare_trace(image, denoiser, cfg.steps, trace)
    cache = TokenMaskCache(mask)
    masks = {l.resolution: cache[l.resolution] for l in denoiser.layers}
    lat_mask = latent_mask(mask, image.shape)
    proc = pandora_processor(cfg.dissolution())
    out, steps, calls = _edit_loop(
        trace, sched, denoiser, proc, masks, lat_mask, cfg.guidance, record=True
    )
    report = RunReport(cfg.to_dict(), steps, calls)
    report.background_mse_input = metrics.background_mse(out, image, mask)
    if reference is not None:
        report.background_mse = metrics.background_mse(out, reference, mask)
        report.background_psnr = metrics.background_psnr(out, reference, mask)
    if not mask.is_empty:
        report.masked_divergence = metrics.masked_divergence(out, image, mask)
    report.wall_ms = (time.perf_counter() - start) * 1000.0
    log.info("removal done: T=%d p=%.4f dissolved=%d", cfg.steps, cfg.percentile, report.dissolved_total)
    return out, report


class SweepResult(NamedTuple):
    p: float
    report: Optional[RunReport]
    output: Optional[np.ndarray]
    error: Optional[str]


def percentile_sweep(
    image,
    mask: ObjectMask,
    denoiser,
    base_cfg: RemovalConfig,
    p_values,
    trace: Optional[InversionTrace] = None,
    reference=None,
    jobs: int = 1,
) -> list:
    """One removal run per percentile over a single shared inversion trace.

    A failing run is recorded with its error message and does not stop the
    sweep. Results follow the order of ``p_values``.
    """
    p_values = list(p_values)
    if not p_values:
        return []
    image = _check_inputs(image, mask, denoiser)
    _, trace = prepare_trace(image, denoiser, base_cfg.steps, trace)

    def one(p):
        try:
            cfg = replace(base_cfg, percentile=p)
            out, rep = remove_objects(image, mask, denoiser, cfg, trace=trace, reference=reference)
            return SweepResult(p, rep, out, None)
        except (PandoraError, ValueError) as exc:
            log.warning("sweep run p=%s failed: %s", p, exc)
            return SweepResult(p, None, None, str(exc))

    if jobs <= 1:
        return [one(p) for p in p_values]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, p_values))
