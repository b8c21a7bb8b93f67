"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from helpers import brute_force_ranking, group_key, random_instance, random_spotting, tiny_encoder

from tmfront import grounding
from tmfront.metrics import (
    EvalRecord,
    anls,
    contains_accuracy,
    lm_loss,
    relaxed_correct,
    spotting_pos,
    spotting_trans,
)
from tmfront.numerics import AttentionWeights, derivative_probes, multi_head_attention, relative_gap
from tmfront.redundancy import DEFAULT_THRESHOLDS, redundancy_sweep
from tmfront.resampler import token_filter
from tmfront.swa_encoder import (
    EncoderConfig,
    build_shift_mask,
    cyclic_shift,
    encode,
    init_encoder_weights,
    inverse_cyclic_shift,
    window_attention,
)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""

    def report(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {title} {detail}"

    return report


def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "tmfront", *map(str, args)], capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


def test_01_token_filter_matches_oracle(verdict):
    rng = np.random.default_rng(20240101)
    mismatches = 0
    impl_time = 0.0
    checked = 0
    for _ in range(500):
        tokens = random_instance(rng)
        _, ranked = brute_force_ranking(tokens)
        for r in range(1, len(tokens) + 1):
            t0 = time.perf_counter()
            got = token_filter(tokens, r).selected.tolist()
            impl_time += time.perf_counter() - t0
            checked += 1
            if got != sorted(ranked[:r]):
                mismatches += 1
    ok = mismatches == 0 and impl_time < 10.0
    verdict(1, "token filter equals brute-force oracle on 500 instances, all r", ok,
            f"{checked} (instance, r) pairs, {mismatches} mismatches, {impl_time:.2f}s")


def test_02_zero_init_transparency(verdict):
    t0 = time.perf_counter()
    # 2x2 attention windows of 16x16 patches; blocks 0 and 2 shift by 8
    cfg = EncoderConfig(depth=4, d_model=64, n_heads=4, swa_interval=2, window_patches=16)
    weights = init_encoder_weights(cfg, np.random.default_rng(2), std=0.1)
    grid = np.random.default_rng(3).normal(size=(32, 32, 64))
    with_adapters = encode(grid, cfg, weights, use_adapters=True)
    without = encode(grid, cfg, weights, use_adapters=False)
    elapsed = time.perf_counter() - t0
    gap = float(np.abs(with_adapters - without).max())
    all_zero = all(not weights[k].any() for k in weights if k.endswith("adapter.B"))
    ok = all_zero and gap <= 1e-12 and elapsed < 5.0
    verdict(2, "zero-B adapters leave the depth-4, d_model-64 encoder unchanged", ok,
            f"max gap {gap:.1e}, {elapsed:.2f}s")


def test_03_shift_mask_equals_per_region_attention(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    hp = wp = 4
    keys = [group_key(i, j, hp, wp, 2, 1) for i in range(hp) for j in range(wp)]
    groups = [[t for t, k in enumerate(keys) if k == key] for key in sorted(set(keys))]
    mask = build_shift_mask(hp, wp, 2, 1)
    worst = 0.0
    for _ in range(50):
        d = 8
        parts = []
        for _ in range(4):
            parts += [rng.normal(size=(d, d)), rng.normal(size=d)]
        w = AttentionWeights(*parts, n_heads=2)
        x = rng.normal(size=(hp, wp, d))
        got = inverse_cyclic_shift(window_attention(cyclic_shift(x, 1), w, mask, 2), 1).reshape(16, d)
        flat = x.reshape(16, d)
        expected = np.zeros_like(flat)
        for idx in groups:
            expected[idx] = multi_head_attention(flat[idx], flat[idx], w)
        worst = max(worst, float(np.abs(got - expected).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    verdict(3, "masked shifted attention equals per-region attention, 50 draws", ok,
            f"{len(groups)} regions, max gap {worst:.1e}, {elapsed:.2f}s")


def test_04_cyclic_shift_round_trip(verdict):
    rng = np.random.default_rng(44)
    failures = 0
    for _ in range(100):
        hp, wp = (int(v) for v in rng.integers(1, 40, size=2))
        grid = rng.normal(size=(hp, wp, int(rng.integers(1, 9))))
        s = int(rng.integers(0, min(hp, wp)))
        failures += not np.array_equal(inverse_cyclic_shift(cyclic_shift(grid, s), s), grid)
    verdict(4, "cyclic shift round trip is bit-exact on 100 grids", failures == 0, f"{failures} failures")


def test_05_cross_window_flow_iff_shift(verdict):
    rng = np.random.default_rng(55)
    x = rng.normal(size=(4, 4, 8))
    bumped = x.copy()
    bumped[1, 1] += rng.normal(size=8)
    outside = np.ones((4, 4), bool)
    outside[:2, :2] = False
    deltas = {}
    for shift in (1, 0):
        cfg, w = tiny_encoder(depth=2, shift=shift)
        delta = np.abs(encode(bumped, cfg, w) - encode(x, cfg, w)).max(axis=-1)
        deltas[shift] = float(delta[outside].max())
    ok = deltas[1] > 1e-6 and deltas[0] == 0.0
    verdict(5, "perturbation crosses a window boundary after 2 blocks iff shift > 0", ok,
            f"shift 1: {deltas[1]:.2e}, shift 0: {deltas[0]:.1e}")


@pytest.mark.parametrize("res,windows,L,r", [(896, 4, 1280, 512), (1344, 9, 2560, 1024)])
def test_06_shape_contract(verdict, res, windows, L, r):
    t0 = time.perf_counter()
    code, out, err = cli("forward", "--synthetic", f"{res}x{res}", "--random-init", "--seed", 0,
                         "--resolution", f"{res}x{res}", "--d-model", 64, "--depth", 2, "--threads", 1)
    elapsed = time.perf_counter() - t0
    summary = json.loads(out) if code == 0 else {}
    got = (summary.get("windows"), summary.get("L_before"), summary.get("r_after"))
    ok = code == 0 and got == (windows, L, r) and elapsed < 10.0
    verdict(6, f"forward at {res}x{res} reports {windows} windows / L={L} / {r} tokens", ok,
            f"got {got}, {elapsed:.2f}s wall incl. interpreter start" + (f", stderr {err.strip()}" if code else ""))


def test_07_redundancy_monotone_and_recount(verdict):
    rng = np.random.default_rng(77)
    problems = 0
    for _ in range(100):
        n, d = int(rng.integers(2, 30)), int(rng.integers(1, 8))
        t = rng.normal(size=(n, d))
        rep = redundancy_sweep(t)
        problems += bool(np.any(np.diff(rep.redundant_counts) > 0))
        rows = [list(map(float, v)) for v in t]
        best = []
        for i, a in enumerate(rows):
            sims = [sum(p * q for p, q in zip(a, b)) / math.sqrt(sum(p * p for p in a) * sum(q * q for q in b))
                    for j, b in enumerate(rows) if j != i]
            best.append(max(sims))
        recount = [sum(b >= th for b in best) for th in DEFAULT_THRESHOLDS]
        problems += rep.redundant_counts.tolist() != recount
    dup = redundancy_sweep(np.tile(rng.normal(size=5), (12, 1)), [0.8])
    full = dup.fractions()[0] == 1.0
    verdict(7, "redundancy counts monotone, equal to brute recount, duplicates fully redundant",
            problems == 0 and full, f"{problems} problems over 100 sets, duplicate fraction {dup.fractions()[0]:.4f}")


def random_grounded_span(rng):
    alphabet = list("abcxyz ABC019.,:;!?()[]<>/-_é漢字 ")
    while True:
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 20))))
        if not any(tag in text for tag in grounding.RESERVED_TAGS):
            break
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return grounding.GroundedSpan(text)
    if kind == 1:
        return grounding.GroundedSpan(text, grounding.Point(*map(int, rng.integers(0, 1001, size=2))))
    if kind == 2:
        a, b = rng.integers(0, 1001, size=(2, 2))
        return grounding.GroundedSpan(text, grounding.NormalizedBox.canonical(*map(int, (*a, *b))))
    pts = rng.integers(0, 1001, size=(int(rng.integers(3, 9)), 2))
    return grounding.GroundedSpan(text, grounding.Polygon(tuple(grounding.Point(int(x), int(y)) for x, y in pts)))


def test_08_grounding_round_trips(verdict):
    rng = np.random.default_rng(88)
    spans = [random_grounded_span(rng) for _ in range(1000)]
    markup_ok = sum(grounding.parse_grounded(grounding.serialize_grounded(s)) == [s] for s in spans)
    w_r, h_r = 1344, 896
    bx, by = math.ceil(w_r / 1000), math.ceil(h_r / 1000)
    worst_x = worst_y = 0
    for x in range(w_r + 1):
        for y in range(h_r + 1):
            dx, dy = grounding.denormalize_coord(*grounding.normalize_coord(x, y, w_r, h_r), w_r, h_r)
            worst_x = max(worst_x, abs(dx - x))
            worst_y = max(worst_y, abs(dy - y))
    box = grounding.NormalizedBox(*grounding.normalize_coord(224, 224, 448, 448),
                                  *grounding.normalize_coord(448, 448, 448, 448))
    midpoint = grounding.normalize_coord(224, 224, 448, 448) == (500, 500) and box.x1 == 500
    ok = markup_ok == 1000 and worst_x <= bx and worst_y <= by and midpoint
    verdict(8, "markup, coordinate and midpoint round trips", ok,
            f"{markup_ok}/1000 spans, pixel error x {worst_x}<={bx}, y {worst_y}<={by}")


def test_09_metric_fixtures(verdict):
    checks = {
        "anls kitten/sitting": abs(anls([EvalRecord("kitten", ["sitting"])]) - 0.5714) <= 1e-4,
        "contains 42": contains_accuracy([EvalRecord("the answer is 42", ["42"])]) == 1.0,
        "lm_loss uniform V=4": abs(lm_loss(np.zeros((6, 4)), np.arange(6) % 4) - math.log(4)) <= 1e-9,
        "relaxed 104 ok": relaxed_correct(EvalRecord("104", ["100"])),
        "relaxed 106 rejected": not relaxed_correct(EvalRecord("106", ["100"])),
    }
    rng = np.random.default_rng(99)
    pos_le_trans = 0
    for _ in range(100):
        inst = random_spotting(rng)
        pos_le_trans += spotting_pos(inst) <= spotting_trans(inst)
    checks["pos <= trans on 100 instances"] = pos_le_trans == 100
    failed = [k for k, v in checks.items() if not v]
    verdict(9, "metric fixtures", not failed, "all fixtures hold" if not failed else f"failed: {failed}")


def test_10_directional_derivative_probes(verdict):
    probes = derivative_probes(seed=10, h=1e-5)
    worst = max(relative_gap(a, n) for _, a, n in probes)
    kinds = {name.split("[")[0] for name, _, _ in probes}
    ok = worst <= 1e-4 and kinds == {"softmax", "attention"}
    verdict(10, "softmax and attention probes agree with finite differences at h=1e-5", ok,
            f"{len(probes)} probes, max relative gap {worst:.1e}")


def test_11_forward_determinism(verdict, tmp_path):
    dumps = []
    for name in ("a.bin", "b.bin"):
        code, _, err = cli("forward", "--synthetic", "896x896", "--random-init", "--seed", 7,
                           "--dump", tmp_path / name)
        assert code == 0, err
        dumps.append((tmp_path / name).read_bytes())
    verdict(11, "two seeded random-init forward runs give bit-identical dumps", dumps[0] == dumps[1],
            f"{len(dumps[0])} bytes each")
