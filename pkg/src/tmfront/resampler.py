"""Image resampler (learnable queries, 2D sin/cos positions) and the Token Resampler.

The Token Resampler keeps the ``r`` tokens least similar to any other token,
restores their original order, and uses them as queries in a cross-attention
over the full token set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from tmfront.numerics import (
    AttentionWeights,
    ShapeError,
    as_tensor,
    cosine_similarity_matrix,
    multi_head_attention,
)
from tmfront.split import ConfigError

N_QUERIES = 256
QUERY_GRID = (16, 16)
KEY_GRID = (32, 32)

TOKEN_MODES = ("filter", "random", "filter_only", "unsorted")


def pos_enc_2d(rows: int, cols: int, d: int) -> np.ndarray:
    """Factorised sinusoidal encoding, shape (rows*cols, d), row-major positions.

    Channels ``[0, d/2)`` encode the row index and ``[d/2, d)`` the column
    index; each half is ``[sin(p*w_k)..., cos(p*w_k)...]`` with
    ``w_k = 10000 ** (-k / (d/4))``.
    """
    if d <= 0 or d % 4:
        raise ConfigError(f"positional width {d} must be a positive multiple of 4")
    quarter = d // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)

    def axis(n: int) -> np.ndarray:
        phase = np.arange(n)[:, None] * omega[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)

    r = axis(rows)
    c = axis(cols)
    return np.concatenate(
        [np.repeat(r, cols, axis=0), np.tile(c, (rows, 1))], axis=1
    )


@dataclass(frozen=True)
class ImageResamplerWeights:
    queries: np.ndarray
    attn: AttentionWeights
    query_grid: tuple[int, int] = QUERY_GRID
    key_grid: tuple[int, int] = KEY_GRID

    def __post_init__(self):
        n = self.query_grid[0] * self.query_grid[1]
        if self.queries.shape[0] != n:
            raise ShapeError(f"{self.queries.shape[0]} queries for a {self.query_grid} grid")


def image_resample(window_tokens, w: ImageResamplerWeights) -> np.ndarray:
    """Compress one window's encoded tokens to a fixed number of query outputs."""
    x = as_tensor(window_tokens)
    d = w.queries.shape[1]
    n_keys = w.key_grid[0] * w.key_grid[1]
    if x.shape != (n_keys, d):
        raise ShapeError(f"window tokens {x.shape} != ({n_keys}, {d})")
    q = w.queries + pos_enc_2d(*w.query_grid, d)
    k = x + pos_enc_2d(*w.key_grid, d)
    return multi_head_attention(q, k, w.attn, v_in=x)


@dataclass(frozen=True)
class TokenSet:
    tokens: np.ndarray
    origin: np.ndarray  # (L, 2): window_id, index within that window's block

    def __len__(self) -> int:
        return self.tokens.shape[0]


def assemble_token_set(window_features: list, global_features) -> TokenSet:
    """Windows in row-major order, then the global view last."""
    if not window_features:
        raise ShapeError("need at least one window")
    parts = [as_tensor(f) for f in window_features] + [as_tensor(global_features)]
    d = parts[0].shape[1]
    for i, p in enumerate(parts):
        if p.ndim != 2 or p.shape[1] != d:
            raise ShapeError(f"feature block {i} has shape {p.shape}, expected (*, {d})")
    origin = np.concatenate(
        [np.stack([np.full(len(p), i), np.arange(len(p))], axis=1) for i, p in enumerate(parts)]
    )
    return TokenSet(np.concatenate(parts, axis=0), origin.astype(np.int64))


@dataclass(frozen=True)
class ImportanceRanking:
    importances: np.ndarray
    selected: np.ndarray


def token_importance(tokens) -> np.ndarray:
    """1 - max cosine similarity to any *other* token."""
    t = as_tensor(tokens)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ShapeError(f"need at least two tokens, got shape {t.shape}")
    sim = cosine_similarity_matrix(t)
    np.fill_diagonal(sim, -np.inf)
    return 1.0 - sim.max(axis=1)


def token_filter(tokens, r: int, sort_by_original: bool = True) -> ImportanceRanking:
    """Select the ``r`` most distinctive tokens.

    Ties in importance go to the lower original index. The selection comes
    back in ascending original order unless ``sort_by_original`` is False, in
    which case it stays in descending-importance order.
    """
    t = as_tensor(tokens)
    n = t.shape[0] if t.ndim == 2 else 0
    if not 1 <= r <= n:
        raise ValueError(f"r={r} must satisfy 1 <= r <= L={n}")
    imp = token_importance(t)
    # stable sort on -importance keeps lower indices first among equals
    order = np.argsort(-imp, kind="stable")[:r]
    selected = np.sort(order) if sort_by_original else order
    return ImportanceRanking(imp, selected)


def token_resample(tokens, r: int, w: AttentionWeights, mode: str = "filter",
                   random_queries: Optional[np.ndarray] = None) -> np.ndarray:
    """Reduce L tokens to ``r``.

    ``mode`` selects the strategy: ``filter`` (selected tokens query all
    tokens), ``unsorted`` (same, queries in importance order), ``filter_only``
    (return the selected tokens, no cross-attention) and ``random`` (learned
    ``random_queries`` replace the selected tokens).
    """
    x = tokens.tokens if isinstance(tokens, TokenSet) else as_tensor(tokens)
    if mode not in TOKEN_MODES:
        raise ConfigError(f"unknown token_resampler.mode {mode!r}; expected one of {TOKEN_MODES}")
    if mode == "random":
        if random_queries is None or random_queries.shape != (r, x.shape[1]):
            raise ShapeError(f"random mode needs ({r}, {x.shape[1]}) queries")
        return multi_head_attention(random_queries, x, w)
    ranking = token_filter(x, r, sort_by_original=(mode != "unsorted"))
    queries = x[ranking.selected]
    if mode == "filter_only":
        return queries.copy()
    return multi_head_attention(queries, x, w)


def image_resampler_from(weights: Mapping[str, np.ndarray], n_heads: int = 1) -> ImageResamplerWeights:
    attn = AttentionWeights(
        *(weights[f"resampler.image.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
        n_heads=n_heads,
    )
    return ImageResamplerWeights(weights["resampler.image.queries"], attn)


def token_resampler_from(weights: Mapping[str, np.ndarray]) -> AttentionWeights:
    return AttentionWeights(
        *(weights[f"resampler.token.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
        n_heads=1,
    )


def init_resampler_weights(d: int, rng: np.random.Generator, std: float = 0.02,
                           random_queries: Optional[int] = None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"resampler.image.queries": rng.normal(0.0, std, size=(N_QUERIES, d))}
    for stage in ("image", "token"):
        for k in ("q", "k", "v", "o"):
            out[f"resampler.{stage}.w{k}"] = rng.normal(0.0, std, size=(d, d))
            out[f"resampler.{stage}.b{k}"] = np.zeros(d)
    if random_queries:
        out["resampler.token.random_queries"] = rng.normal(0.0, std, size=(random_queries, d))
    return out
