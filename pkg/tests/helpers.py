import math
from decimal import Decimal, localcontext

import numpy as np

from tmfront.grounding import GroundedSpan, NormalizedBox, serialize_grounded
from tmfront.metrics import GTWord, SpottingInstance
from tmfront.swa_encoder import EncoderConfig, init_encoder_weights


def tiny_encoder(depth=2, d_model=8, n_heads=2, window=2, shift=1, interval=2, seed=0, zero_init=True):
    """Small encoder config plus seeded weights for grid-level tests."""
    cfg = EncoderConfig(depth=depth, d_model=d_model, n_heads=n_heads, swa_interval=interval,
                        shift_size=shift, window_patches=window)
    w = init_encoder_weights(cfg, np.random.default_rng(seed), std=0.5, zero_init=zero_init)
    return cfg, w


def group_key(i, j, hp, wp, ws, shift):
    """Attention group of original patch (i, j), derived without rolling the grid.

    After the top-left roll, patch (i, j) sits at ((i - s) % hp, (j - s) % wp).
    Within its shifted window, patches that wrapped around (original row or
    column index < s) form regions separate from the rest.
    """
    if shift == 0:
        return (i // ws, j // ws)
    si, sj = (i - shift) % hp, (j - shift) % wp
    return (si // ws, sj // ws, i < shift, j < shift)


def brute_force_ranking(tokens):
    """Pure-Python reimplementation: O(L^2) cosine table, sort by (-importance, index).

    Cosines are evaluated in 40-digit decimal arithmetic and rounded once, so
    parallel tokens come out at exactly 1.0 without any snapping.
    """
    with localcontext() as ctx:
        ctx.prec = 40
        rows = [[Decimal(float(v)) for v in t] for t in tokens]
        n = len(rows)
        sq = [sum(v * v for v in row) for row in rows]
        best = [-math.inf] * n
        for i in range(n):
            for j in range(i + 1, n):
                c = float(sum(a * b for a, b in zip(rows[i], rows[j])) / (sq[i] * sq[j]).sqrt())
                best[i] = max(best[i], c)
                best[j] = max(best[j], c)
    importance = [1.0 - b for b in best]
    return importance, sorted(range(n), key=lambda i: (-importance[i], i))


def brute_force_filter(tokens, r):
    importance, ranked = brute_force_ranking(tokens)
    return importance, sorted(ranked[:r])


def random_instance(rng):
    n = int(rng.integers(2, 65))
    d = int(rng.integers(1, 17))
    t = rng.normal(size=(n, d))
    # plant exact duplicates and scaled copies so ties actually occur
    for _ in range(int(rng.integers(0, 4))):
        i, j = rng.integers(0, n, size=2)
        t[j] = t[i] * rng.choice([1.0, 2.0, 3.0, 0.1])
    return t


VOCAB = ["stop", "exit", "Total", "42", "café", "road"]


def random_box(rng):
    x1, x2 = sorted(rng.integers(0, 1001, size=2))
    y1, y2 = sorted(rng.integers(0, 1001, size=2))
    return NormalizedBox(int(x1), int(y1), int(x2), int(y2))


def random_spotting(rng):
    gt = [GTWord(str(rng.choice(VOCAB)), random_box(rng)) for _ in range(int(rng.integers(1, 6)))]
    parts = []
    for _ in range(int(rng.integers(0, 8))):
        word = str(rng.choice(VOCAB))
        roll = rng.random()
        if roll < 0.4 and gt:
            # a span near one of the GT boxes, possibly a jittered copy
            src = gt[int(rng.integers(len(gt)))].box
            jit = int(rng.integers(0, 30))
            box = NormalizedBox(max(src.x1 - jit, 0), src.y1, min(src.x2 + jit, 1000), src.y2)
            parts.append(serialize_grounded(GroundedSpan(word, box)))
        elif roll < 0.7:
            parts.append(serialize_grounded(GroundedSpan(word, random_box(rng))))
        else:
            parts.append(word + str(rng.choice(["", ",", "."])))
    return SpottingInstance(" ".join(parts), gt)
