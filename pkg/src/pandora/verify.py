"""Self-contained invariant suite behind ``pandora verify``.

Each check takes a seed and returns ``(ok, detail)``. Oracles here are written
independently of the code they check (sorting, explicit loops).
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import attnctl, ndkernel as nk
from .attnctl import DissolutionConfig
from .errors import AllKeysDissolved
from .guidance import GuidanceSchedule, ladg_blend
from .masking import ObjectMask, TokenMask
from .pipeline import RemovalConfig, reconstruct, remove_objects
from .scheduler import invert, make_schedule, sample
from .toydenoiser import build_denoiser


def topk_oracle(row, k):
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return sorted(order[:k])


def flipped_topk(row, k):
    """Deliberately wrong tie rule (prefers the higher index); negative control."""
    r = np.asarray(row, dtype=np.float64)
    idx = np.argsort(-r[::-1], kind="stable")[:k]
    return np.sort(r.size - 1 - idx)


def random_token_mask(rng, n_keys, max_frac=0.5):
    r = int(math.isqrt(n_keys))
    bits = (rng.random(r * r) < rng.uniform(0.0, max_frac)).astype(np.uint8)
    if bits.all():
        bits[rng.integers(bits.size)] = 0
    return TokenMask(r, bits)


def check_roundtrip(seed):
    den = build_denoiser(seed, 4, 32, 32)
    x0 = np.random.default_rng(seed).uniform(-1.0, 1.0, (4, 32, 32))
    sched = make_schedule(50)
    err = float(np.abs(sample(invert(x0, den, sched)[50], den, sched) - x0).max())
    return err <= 1e-3, f"max-abs {err:.2e} (<= 1e-3)"


def check_dissolution(seed, cases=300):
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    for _ in range(cases):
        r = int(rng.integers(4, 17))
        n = r * r
        mask = random_token_mask(rng, n)
        S = rng.normal(0.0, 3.0, (n, n))
        cfg = DissolutionConfig(float(rng.uniform(0.0, 0.3)))
        try:
            S_diss, sets = attnctl.pad_dissolve(S, mask, cfg)
        except AllKeysDissolved:
            continue
        A = nk.softmax_rows(S_diss)
        for i in mask.object_indices:
            row = A[i]
            if any(row[j] != 0.0 for j in sets[int(i)]):
                return False, f"row {i} leaks weight onto a dissolved key"
            worst = max(worst, abs(math.fsum(row) - 1.0))
        done += 1
    return worst <= 1e-12, f"{done} cases, worst row-sum error {worst:.1e}"


def check_topk(seed, rows=2000, topk=None):
    topk = topk or attnctl.topk_indices
    rng = np.random.default_rng(seed)
    for _ in range(rows):
        n = int(rng.integers(1, 257))
        # a small value alphabet forces plenty of ties
        row = rng.integers(0, 6, n) / 5.0
        k = int(rng.integers(0, n + 1))
        if list(topk(row, k)) != topk_oracle(row.tolist(), k):
            return False, f"mismatch on a length-{n} row, k={k}"
    return True, f"{rows} rows, zero mismatches"


def check_bpa(seed, cases=100):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        r = int(rng.integers(2, 9))
        n, d = r * r, int(rng.integers(1, 9))
        Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))
        mask = random_token_mask(rng, n)
        S = attnctl.attention_logits(Q, K, d)
        S[:, mask.is_object] = -np.inf
        if np.any(nk.softmax_rows(S)[:, mask.is_object] != 0.0):
            return False, "weight on an object key"
        empty = TokenMask(r, np.zeros(n))
        if not np.array_equal(attnctl.bpa_attention(Q, K, V, empty, d), attnctl.vanilla_attention(Q, K, V, d)):
            return False, "empty-mask BPA differs from vanilla attention"
    return True, f"{cases} packets"


def check_blend(seed, cases=100):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        r = int(rng.integers(2, 9))
        n = r * r
        B, SC = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        mask = random_token_mask(rng, n, max_frac=1.0)
        O = attnctl.blend_outputs(B, SC, mask)
        for i in range(n):
            want = B[i] if mask.bits[i] else SC[i]
            if not np.array_equal(O[i], want):
                return False, f"row {i} not copied from the right source"
    return True, f"{cases} cases"


def check_ladg(seed, cases=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        shape = (int(rng.integers(1, 5)), 8, 8)
        ec, eu = rng.normal(size=shape), rng.normal(size=shape)
        m = rng.random(shape[1:]) < 0.4
        a = float(rng.uniform(1.0, 1.6))
        if not np.array_equal(ladg_blend(ec, eu, m, 1.0), ec):
            return False, "alpha = 1 does not return eps_c"
        if not np.array_equal(ladg_blend(ec, eu, np.zeros_like(m), a), ec):
            return False, "empty mask does not return eps_c"
        out = ladg_blend(ec, eu, m, a)
        if not np.array_equal(out[:, ~m], ec[:, ~m]):
            return False, "background changed"
        h = 1e-3
        slope = (ladg_blend(ec, eu, m, a + h) - ladg_blend(ec, eu, m, a - h)) / (2 * h)
        worst = max(worst, float(np.abs(slope - (ec - eu))[:, m].max(initial=0.0)))
    return worst <= 1e-10, f"worst slope error {worst:.1e}"


def check_hooks(seed):
    den = build_denoiser(seed, 4, 16, 16)
    x = np.random.default_rng(seed).normal(size=(4, 16, 16))

    def plain(packet, ctx):
        return attnctl.vanilla_attention(packet.Q, packet.K, packet.V, packet.d)

    base, cap = den.forward(x, 7, capture=True)
    hooked, _ = den.forward(x, 7, processors={l.layer_id: plain for l in den.layers})
    ok = np.array_equal(base, hooked) and len(cap) == len(den.layers)
    return ok, "hooked vanilla attention is bit-identical" if ok else "hook changed the output"


def check_empty_mask(seed):
    den = build_denoiser(seed, 4, 32, 32)
    img = np.random.default_rng(seed + 1).uniform(-1.0, 1.0, (4, 32, 32))
    cfg = RemovalConfig(percentile=0.0, guidance=GuidanceSchedule.constant(1.0))
    trace = invert(img, den, make_schedule(cfg.steps))
    ref = reconstruct(img, den, cfg, trace=trace)
    out, _ = remove_objects(img, ObjectMask.empty(32, 32), den, cfg, trace=trace)
    ok = np.array_equal(out, ref)
    return ok, "bit-identical to the reconstruction run" if ok else "differs from reconstruction"


CHECKS = [
    ("ddim round trip", check_roundtrip),
    ("zero-weight dissolution", check_dissolution),
    ("top-k oracle equivalence", check_topk),
    ("BPA exclusivity", check_bpa),
    ("blend exactness", check_blend),
    ("LADG identities", check_ladg),
    ("hook neutrality", check_hooks),
    ("empty-mask collapse", check_empty_mask),
]


def run_checks(seeds, topk=None, out=print):
    """Run every check for every seed, printing one line each. Returns True iff all pass."""
    all_ok = True
    for seed in seeds:
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                ok, detail = fn(seed, topk=topk) if fn is check_topk else fn(seed)
            except Exception as exc:  # a crash is a failed check, not an abort
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            ms = (time.perf_counter() - t0) * 1000
            out(f"{'PASS' if ok else 'FAIL'}  seed={seed:<3d} {name:<26s} {detail}  [{ms:.0f} ms]")
            all_ok &= ok
    return all_ok
