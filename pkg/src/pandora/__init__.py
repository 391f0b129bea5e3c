"""Zero-shot object removal by attention dissolution and localized guidance,
runnable end to end against a seeded toy denoiser."""
from ._jit import BACKEND
from .attnctl import DissolutionConfig, pandora_processor
from .guidance import GuidanceSchedule
from .masking import ObjectMask, TokenMask, downsample, load_mask
from .pipeline import RemovalConfig, RunReport, percentile_sweep, reconstruct, remove_objects
from .scheduler import InversionTrace, invert, make_schedule, sample
from .toydenoiser import ToyDenoiser, build_denoiser

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DissolutionConfig",
    "GuidanceSchedule",
    "InversionTrace",
    "ObjectMask",
    "RemovalConfig",
    "RunReport",
    "TokenMask",
    "ToyDenoiser",
    "build_denoiser",
    "downsample",
    "invert",
    "load_mask",
    "make_schedule",
    "pandora_processor",
    "percentile_sweep",
    "reconstruct",
    "remove_objects",
    "sample",
]
