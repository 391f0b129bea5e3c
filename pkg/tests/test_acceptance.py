"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line PASS/FAIL verdict that pytest prints in an
"acceptance criteria" section at the end of the run.
"""
import hashlib
import math
import time

import numpy as np
import pytest
from PIL import Image

from conftest import record, square_scene
from pandora import attnctl, cli, ndkernel as nk
from pandora.attnctl import DissolutionConfig
from pandora.errors import AllKeysDissolved
from pandora.guidance import GuidanceSchedule, ladg_blend
from pandora.masking import ObjectMask, TokenMask, downsample
from pandora.pipeline import RemovalConfig, percentile_sweep, reconstruct, remove_objects
from pandora.scheduler import invert, make_schedule, sample
from pandora.toydenoiser import build_denoiser
from pandora.verify import random_token_mask, topk_oracle

TABLE_PERCENTILES = [0.01, 0.03, 0.05, 0.15, 0.25]


@pytest.fixture(scope="module")
def warm():
    # compile the kernels outside the timed regions
    nk.softmax_rows(np.zeros((2, 2)))
    nk.topk_row(np.zeros(3), 1)
    nk.matmul(np.ones((2, 2)), np.ones((2, 2)))
    attnctl.pad_dissolve(np.zeros((4, 4)), TokenMask(2, [0, 0, 0, 1]), DissolutionConfig(0.25))


@pytest.fixture(scope="module")
def scene_run():
    img, mask = square_scene()
    den = build_denoiser(0, 4, 32, 32)
    cfg = RemovalConfig()
    trace = invert(img, den, make_schedule(cfg.steps))
    ref = reconstruct(img, den, cfg, trace=trace)
    return img, mask, den, cfg, trace, ref


def test_1_dissolution_nullification(warm):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    cases = zero_bad = 0
    worst = 0.0
    while cases < 1000:
        r = int(rng.integers(4, 17))
        n = r * r
        mask = random_token_mask(rng, n)
        S = rng.normal(0.0, 3.0, (n, n))
        try:
            S_diss, sets = attnctl.pad_dissolve(S, mask, DissolutionConfig(float(rng.uniform(0.0, 0.3))))
        except AllKeysDissolved:
            continue
        A = nk.softmax_rows(S_diss)
        for i in mask.object_indices:
            i = int(i)
            zero_bad += int(np.count_nonzero(A[i, list(sets[i])]))
            worst = max(worst, abs(math.fsum(A[i]) - 1.0))
        cases += 1
    secs = time.perf_counter() - t0
    ok = zero_bad == 0 and worst <= 1e-12 and secs < 10
    record(1, ok, f"1000 cases, {zero_bad} nonzero dissolved weights, worst |sum-1| {worst:.1e}, {secs:.2f} s")
    assert ok


def test_2_topk_oracle(warm):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 257))
        row = rng.integers(0, 8, n) / 7.0 if rng.random() < 0.5 else rng.normal(size=n)
        k = int(rng.integers(0, n + 1))
        mismatches += attnctl.topk_indices(row, k).tolist() != topk_oracle(row.tolist(), k)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 10
    record(2, ok, f"10000 rows, {mismatches} mismatches, {secs:.2f} s")
    assert ok


def test_3_bpa_exclusivity():
    rng = np.random.default_rng(303)
    leaked = differ = 0
    for _ in range(200):
        r = int(rng.integers(2, 9))
        n, d = r * r, int(rng.integers(1, 17))
        Q, K, V = (rng.normal(size=(n, d)) for _ in range(3))
        mask = random_token_mask(rng, n)
        # weights seen through V = I: columns of the output are the attention weights
        W = attnctl.bpa_attention(Q, K, np.eye(n), mask, d)
        leaked += int(np.count_nonzero(W[:, mask.is_object]))
        empty = TokenMask(r, np.zeros(n))
        differ += not np.array_equal(attnctl.bpa_attention(Q, K, V, empty, d), attnctl.vanilla_attention(Q, K, V, d))
    ok = leaked == 0 and differ == 0
    record(3, ok, f"200 packets, {leaked} nonzero object-key weights, {differ} empty-mask mismatches")
    assert ok


def test_4_blend_exactness():
    rng = np.random.default_rng(404)
    bad = 0
    for _ in range(200):
        r = int(rng.integers(1, 17))
        n = r * r
        B, SC = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
        mask = TokenMask(r, rng.random(n) < rng.random())
        O = attnctl.blend_outputs(B, SC, mask)
        m = mask.is_object
        bad += not (np.array_equal(O[m], B[m]) and np.array_equal(O[~m], SC[~m]))
    record(4, bad == 0, f"200 cases, {bad} with a row not bit-identical to its source")
    assert bad == 0


def test_5_ladg_identities():
    rng = np.random.default_rng(505)
    bad = 0
    worst = 0.0
    for _ in range(200):
        shape = (int(rng.integers(1, 5)), 16, 16)
        ec, eu = rng.normal(size=shape), rng.normal(size=shape)
        m = rng.random(shape[1:]) < rng.random()
        a = float(rng.uniform(1.0, 1.6))
        bad += not np.array_equal(ladg_blend(ec, eu, m, 1.0), ec)
        bad += not np.array_equal(ladg_blend(ec, eu, np.zeros_like(m), a), ec)
        h = 1e-3
        slope = (ladg_blend(ec, eu, m, a + h) - ladg_blend(ec, eu, m, a - h)) / (2 * h)
        worst = max(worst, float(np.abs(slope - (ec - eu))[:, m].max(initial=0.0)))
    ok = bad == 0 and worst <= 1e-10
    record(5, ok, f"200 cases, {bad} identity failures, worst slope error {worst:.1e}")
    assert ok


def test_6_ddim_round_trip(warm):
    den = build_denoiser(0, 4, 32, 32)
    x0 = np.random.default_rng(0).uniform(-1.0, 1.0, (4, 32, 32))
    sched = make_schedule(50)
    t0 = time.perf_counter()
    err = float(np.abs(sample(invert(x0, den, sched)[50], den, sched) - x0).max())
    secs = time.perf_counter() - t0
    ok = err <= 1e-3 and secs < 10
    record(6, ok, f"max-abs {err:.2e} at T=50, {secs:.2f} s")
    assert ok


def test_7_empty_mask_collapse(scene_run):
    img, _, den, cfg, trace, ref = scene_run
    empty = ObjectMask.empty(32, 32)
    out, _ = remove_objects(img, empty, den, cfg, trace=trace)
    err = float(np.abs(out - ref).max())
    plain = RemovalConfig(percentile=0.0, guidance=GuidanceSchedule.constant(1.0))
    out0, _ = remove_objects(img, empty, den, plain, trace=trace)
    same = np.array_equal(out0, reconstruct(img, den, plain, trace=trace))
    ok = err <= 1e-3 and same
    record(7, ok, f"default config max-abs {err:.1e}; p=0, alpha=1 bit-identical: {same}")
    assert ok


def background_everywhere(den, mask):
    bg = np.ones(mask.bits.shape, bool)
    for layer in den.layers:
        grid = downsample(mask, layer.resolution).grid().astype(bool)
        s = mask.height // layer.resolution
        bg &= ~np.kron(grid, np.ones((s, s), bool))
    return bg


def test_8_background_preservation(scene_run):
    img, mask, den, cfg, trace, ref = scene_run
    out, rep = remove_objects(img, mask, den, cfg, trace=trace, reference=ref)
    bg = background_everywhere(den, mask)
    bg_err = float(np.abs(out - ref)[:, bg].max())
    floor = float(np.abs(ref - img).max())
    ratio = rep.masked_divergence / floor
    ok = bg_err <= 1e-2 and ratio > 10
    record(8, ok, f"background max-abs {bg_err:.1e} (<= 1e-2); masked_divergence {ratio:.0f}x the round-trip floor {floor:.1e}")
    assert ok


def test_9_superset_monotonicity(scene_run):
    img, mask, den, cfg, trace, ref = scene_run
    T = cfg.steps
    # first edit step: both branches see trace[T], so the logits are shared by every p
    _, cap = den.forward(trace[T], T, capture=True)
    nested = True
    for p in cap:
        S = attnctl.attention_logits(p.Q, p.K, p.d)
        tmask = downsample(mask, den.layer(p.layer_id).resolution)
        prev = None
        for pct in TABLE_PERCENTILES:
            _, sets = attnctl.pad_dissolve(S, tmask, DissolutionConfig(pct))
            if prev is not None:
                nested &= all(set(prev[i]) <= set(sets[i]) for i in sets.rows)
            prev = sets
    res = percentile_sweep(img, mask, den, cfg, TABLE_PERCENTILES, trace=trace, reference=ref)
    counts = [r.report.dissolved_total for r in res]
    first = [r.report.steps[0].dissolved_total for r in res]
    monotone = counts == sorted(counts) and first == sorted(first)
    ok = nested and monotone and all(r.error is None for r in res)
    record(9, ok, f"nested sets: {nested}; dissolved counts {counts}")
    assert ok


def test_10_determinism(tmp_path):
    img, mask = square_scene(channels=3)
    Image.fromarray(np.rint((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8).transpose(1, 2, 0), "RGB").save(tmp_path / "img.png")
    Image.fromarray(mask.bits * 255, "L").save(tmp_path / "mask.png")
    hashes = []
    for name in ("a", "b"):
        assert cli.main(["run", "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"), "--out", str(tmp_path / name)]) == 0
        report = (tmp_path / name / "report.json").read_text()
        # wall_ms is the only timing field; hash everything else
        stable = "\n".join(l for l in report.splitlines() if '"wall_ms"' not in l)
        png = (tmp_path / name / "result.png").read_bytes()
        hashes.append((hashlib.sha256(png).hexdigest(), hashlib.sha256(stable.encode()).hexdigest()))
    t0 = time.perf_counter()
    verified = cli.main(["verify"]) == 0
    secs = time.perf_counter() - t0
    ok = hashes[0] == hashes[1] and verified and secs < 60
    record(10, ok, f"identical result/report hashes: {hashes[0] == hashes[1]}; verify passed in {secs:.1f} s")
    assert ok
