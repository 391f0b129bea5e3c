"""Command line: ``pandora run | sweep | verify``.

Exit codes: 0 success, 1 failed invariant (verify), 2 input/format error,
3 pipeline error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import imageio, verify
from .errors import MaskError, PandoraError, TraceFormatError
from .guidance import ALPHA_DEFAULT, GuidanceSchedule
from .masking import THRESHOLD, load_mask
from .pipeline import RemovalConfig, percentile_sweep, prepare_trace, reconstruct, remove_objects
from .scheduler import InversionTrace
from .toydenoiser import build_denoiser

log = logging.getLogger("pandora")

EXIT_OK, EXIT_VERIFY, EXIT_IO, EXIT_PIPELINE = 0, 1, 2, 3
_DEFAULTS = RemovalConfig()


class InputError(Exception):
    pass


def _csv_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _csv_ints(text):
    try:
        return frozenset(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of layer ids: {text!r}")


def _seed_range(text):
    """``7`` or ``7..12`` (inclusive)."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be N or A..B, got {text!r}")


def _add_removal_flags(p):
    p.add_argument("--image", required=True, help="8-bit grayscale or RGB PGM/PNG, square power-of-two side >= 8")
    p.add_argument("--mask", required=True, help=f"8-bit grayscale PGM/PNG; pixels > {THRESHOLD} are object")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=_DEFAULTS.steps, help="DDIM steps T (default %(default)s)")
    p.add_argument("--alpha", type=float, default=ALPHA_DEFAULT, help="guidance weight (default %(default)s)")
    p.add_argument(
        "--alpha-end", type=float, default=None, help="if given, alpha runs linearly from --alpha at t=T to this at t=1"
    )
    p.add_argument(
        "--active-steps",
        type=int,
        default=_DEFAULTS.active_steps,
        help="number of initial denoising iterations with BPA/PAD engaged (default %(default)s)",
    )
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="toy denoiser seed (default %(default)s)")
    p.add_argument("--layers", type=_csv_ints, default=None, help="comma list of attention layer ids (default all)")
    p.add_argument("--cache-trace", default=None, help="inversion trace file; read if present, else written")


def build_parser():
    parser = argparse.ArgumentParser(prog="pandora", description="Zero-shot object removal on a toy denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="remove the masked objects from one image")
    _add_removal_flags(run)
    run.add_argument(
        "--percentile", type=float, default=_DEFAULTS.percentile, help="fraction of keys dissolved per masked query (default %(default)s)"
    )

    sweep = sub.add_parser("sweep", help="one run per percentile over a shared inversion")
    _add_removal_flags(sweep)
    sweep.add_argument("--percentiles", type=_csv_floats, required=True, help="comma list, e.g. 0.01,0.03,0.05,0.15,0.25")
    sweep.add_argument("--jobs", type=int, default=1, help="concurrent runs (default %(default)s)")

    ver = sub.add_parser("verify", help="run the built-in invariant suite")
    ver.add_argument("--seed", type=_seed_range, default=[0], help="seed N or inclusive range A..B (default 0)")
    return parser


def config_from_args(args, percentile) -> RemovalConfig:
    if args.alpha_end is None:
        guidance = GuidanceSchedule.constant(args.alpha)
    else:
        guidance = GuidanceSchedule.linear(args.alpha, args.alpha_end)
    return RemovalConfig(
        steps=args.steps,
        percentile=percentile,
        guidance=guidance,
        active_steps=args.active_steps,
        seed=args.seed,
        layer_filter=args.layers,
    )


def _load_inputs(args):
    try:
        image = imageio.read_image(args.image)
    except FileNotFoundError:
        raise InputError(f"{args.image}: no such file")
    except imageio.ImageFormatError as exc:
        raise InputError(str(exc))
    try:
        mask = load_mask(Path(args.mask).read_bytes())
    except FileNotFoundError:
        raise InputError(f"{args.mask}: no such file")
    except MaskError as exc:
        raise InputError(f"{args.mask}: {exc}")
    if mask.bits.shape != image.shape[1:]:
        raise InputError(f"{args.mask}: mask is {mask.width}x{mask.height}, image is {image.shape[2]}x{image.shape[1]}")
    if not mask.has_background:
        raise InputError(f"{args.mask}: mask has no background pixels")
    return image, mask


def _trace(args, image, denoiser, steps):
    path = args.cache_trace
    if path and os.path.exists(path):
        try:
            trace = InversionTrace.from_bytes(Path(path).read_bytes())
        except TraceFormatError as exc:
            raise InputError(f"{path}: {exc}")
        if trace.T != steps or trace.shape != image.shape:
            raise InputError(f"{path}: cached trace has T={trace.T}, shape {trace.shape}; run needs T={steps}, shape {image.shape}")
        log.info("loaded inversion trace from %s", path)
        return trace
    _, trace = prepare_trace(image, denoiser, steps)
    if path:
        imageio.atomic_write(path, trace.to_bytes())
        log.info("wrote inversion trace to %s", path)
    return trace


def _write_run(out_dir: Path, output, report):
    out_dir.mkdir(parents=True, exist_ok=True)
    imageio.write_png(out_dir / "result.png", output)
    imageio.atomic_write(out_dir / "report.json", report.to_json())


def _setup(args):
    image, mask = _load_inputs(args)
    denoiser = build_denoiser(args.seed, *image.shape)
    trace = _trace(args, image, denoiser, args.steps)
    cfg = config_from_args(args, _DEFAULTS.percentile)
    reference = reconstruct(image, denoiser, cfg, trace=trace)
    return image, mask, denoiser, trace, reference


def cmd_run(args) -> int:
    cfg = config_from_args(args, args.percentile)
    image, mask, denoiser, trace, reference = _setup(args)
    output, report = remove_objects(image, mask, denoiser, cfg, trace=trace, reference=reference)
    _write_run(Path(args.out), output, report)
    print(f"wrote {Path(args.out) / 'result.png'} (dissolved {report.dissolved_total} entries)")
    return EXIT_OK


def _dirname(i, p):
    return f"run{i:02d}_p{p:.4f}"


def cmd_sweep(args) -> int:
    base = config_from_args(args, _DEFAULTS.percentile)
    for p in args.percentiles:
        if not 0.0 <= p < 1.0:
            raise InputError(f"percentile {p} outside [0, 1)")
    image, mask, denoiser, trace, reference = _setup(args)
    results = percentile_sweep(
        image, mask, denoiser, base, args.percentiles, trace=trace, reference=reference, jobs=args.jobs
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, res in enumerate(results):
        entry = {"p": res.p, "dir": _dirname(i, res.p), "error": res.error}
        if res.report is not None:
            _write_run(out / entry["dir"], res.output, res.report)
            entry.update(
                dissolved_total=res.report.dissolved_total,
                background_mse=res.report.background_mse,
                masked_divergence=res.report.masked_divergence,
            )
        summary.append(entry)
    summary.sort(key=lambda e: e["p"])
    imageio.atomic_write(out / "summary.json", json.dumps({"runs": summary}, indent=2) + "\n")
    failed = [e for e in summary if e["error"]]
    for e in failed:
        print(f"p={e['p']}: {e['error']}", file=sys.stderr)
    print(f"{len(summary) - len(failed)}/{len(summary)} runs written under {out}")
    return EXIT_PIPELINE if failed else EXIT_OK


def cmd_verify(args) -> int:
    topk = None
    if os.environ.get("PANDORA_FAULT") == "flip-tiebreak":
        topk = verify.flipped_topk
    ok = verify.run_checks(args.seed, topk=topk)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def _configure_logging():
    level = os.environ.get("PANDORA_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PandoraError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
