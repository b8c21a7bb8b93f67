"""Windowed transformer encoder with shifted-window blocks and zero-init adapters.

Blocks whose index is a multiple of ``swa_interval`` roll the patch grid toward
the top-left by ``shift_size`` before windowed attention, mask attention so a
patch only sees patches from its own contiguous pre-shift region, then roll
back. Those blocks also carry a parallel low-rank adapter ``x @ A @ B`` whose
``B`` starts at zero, so a freshly initialised shifted block leaves the
unshifted computation path untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from tmfront.numerics import (
    MASK_SENTINEL,
    AttentionWeights,
    ShapeError,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
)
from tmfront.split import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    d_model: int = 64
    n_heads: int = 4
    swa_interval: int = 4
    shift_size: Optional[int] = None
    window_patches: int = 32
    swa_enabled: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.depth < 0 or self.swa_interval < 1 or self.window_patches < 1:
            raise ConfigError("depth >= 0, swa_interval >= 1 and window_patches >= 1 required")
        if not 0 <= self.shift < self.window_patches:
            raise ConfigError(f"shift_size {self.shift} outside [0, {self.window_patches})")

    @property
    def shift(self) -> int:
        return self.window_patches // 2 if self.shift_size is None else self.shift_size

    def is_swa_block(self, index: int) -> bool:
        return self.swa_enabled and index % self.swa_interval == 0

    def block_shift(self, index: int) -> int:
        return self.shift if self.is_swa_block(index) else 0


@dataclass(frozen=True)
class AdapterWeights:
    A: np.ndarray
    B: np.ndarray

    @classmethod
    def init(cls, d_model: int, d_adapter: int, rng: np.random.Generator, std: float = 0.02,
             zero_init: bool = True) -> "AdapterWeights":
        a = rng.normal(0.0, std, size=(d_model, d_adapter))
        if zero_init:
            b = np.zeros((d_adapter, d_model))
        else:
            b = rng.normal(0.0, std, size=(d_adapter, d_model))
        return cls(a, b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return matmul(matmul(x, self.A), self.B)


@dataclass(frozen=True)
class MLPWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return matmul(gelu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


@dataclass(frozen=True)
class BlockWeights:
    attn: AttentionWeights
    mlp: MLPWeights
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass(frozen=True)
class ShiftMask:
    mask: np.ndarray  # (n_windows, T, T)


# -- grid plumbing ---------------------------------------------------------


def cyclic_shift(grid, shift: int) -> np.ndarray:
    """Roll toward the top-left: ``out[i, j] == grid[(i+shift) % Hp, (j+shift) % Wp]``."""
    grid = as_tensor(grid)
    if not 0 <= shift < min(grid.shape[0], grid.shape[1]):
        raise ValueError(f"shift {shift} outside [0, {min(grid.shape[:2])})")
    return np.roll(grid, (-shift, -shift), axis=(0, 1))


def inverse_cyclic_shift(grid, shift: int) -> np.ndarray:
    grid = as_tensor(grid)
    return np.roll(grid, (shift, shift), axis=(0, 1))


def partition_windows(grid: np.ndarray, ws: int) -> np.ndarray:
    """(Hp, Wp, D) -> (n_windows, ws*ws, D), windows in row-major order."""
    hp, wp = grid.shape[:2]
    if hp % ws or wp % ws:
        raise ShapeError(f"grid {hp}x{wp} not a multiple of window {ws}")
    rest = grid.shape[2:]
    x = grid.reshape(hp // ws, ws, wp // ws, ws, *rest)
    return x.swapaxes(1, 2).reshape((hp // ws) * (wp // ws), ws * ws, *rest)


def merge_windows(windows: np.ndarray, hp: int, wp: int, ws: int) -> np.ndarray:
    rest = windows.shape[2:]
    x = windows.reshape(hp // ws, wp // ws, ws, ws, *rest)
    return x.swapaxes(1, 2).reshape(hp, wp, *rest)


def region_labels(hp: int, wp: int, ws: int, shift: int) -> np.ndarray:
    """Integer label per position of the shifted grid; three bands per axis."""
    def bands(n: int) -> np.ndarray:
        b = np.zeros(n, dtype=np.int64)
        b[n - ws : n - shift] = 1
        b[n - shift :] = 2
        return b

    return bands(hp)[:, None] * 3 + bands(wp)[None, :]


def build_shift_mask(hp: int, wp: int, window_patches: int, shift: int) -> ShiftMask:
    if hp % window_patches or wp % window_patches:
        raise ShapeError(f"grid {hp}x{wp} not a multiple of window {window_patches}")
    n = (hp // window_patches) * (wp // window_patches)
    t = window_patches * window_patches
    if shift == 0:
        return ShiftMask(np.zeros((n, t, t)))
    labels = partition_windows(region_labels(hp, wp, window_patches, shift), window_patches)
    same = labels[:, :, None] == labels[:, None, :]
    return ShiftMask(np.where(same, 0.0, MASK_SENTINEL))


# -- blocks ----------------------------------------------------------------


def window_attention(tokens, weights: AttentionWeights, mask: Optional[ShiftMask],
                     window_patches: int) -> np.ndarray:
    """Multi-head self-attention computed independently inside each tile."""
    tokens = as_tensor(tokens)
    hp, wp, d = tokens.shape
    wins = partition_windows(tokens, window_patches)
    if mask is not None and mask.mask.shape[0] != wins.shape[0]:
        raise ShapeError(f"mask has {mask.mask.shape[0]} windows, grid has {wins.shape[0]}")
    out = np.empty_like(wins)
    for i, win in enumerate(wins):
        m = None if mask is None else mask.mask[i]
        out[i] = multi_head_attention(win, win, weights, m)
    return merge_windows(out, hp, wp, window_patches)


def effective_shift(hp: int, wp: int, window_patches: int, shift: int) -> int:
    # a grid that is a single attention window has no seams to bridge
    if hp == window_patches and wp == window_patches:
        return 0
    return shift


def swa_block(tokens, cfg: EncoderConfig, block_weights: BlockWeights,
              adapter: Optional[AdapterWeights] = None, shift: Optional[int] = None) -> np.ndarray:
    """One pre-norm transformer block over a patch grid.

    ``shift`` defaults to ``cfg.shift``; pass 0 for a plain windowed block.
    """
    x = as_tensor(tokens)
    hp, wp, d = x.shape
    if d != cfg.d_model:
        raise ShapeError(f"token width {d} != d_model {cfg.d_model}")
    ws = cfg.window_patches
    s = effective_shift(hp, wp, ws, cfg.shift if shift is None else shift)
    bw = block_weights
    h = layer_norm(x, bw.ln1_gamma, bw.ln1_beta, cfg.ln_eps)
    if s:
        h = cyclic_shift(h, s)
        h = window_attention(h, bw.attn, build_shift_mask(hp, wp, ws, s), ws)
        h = inverse_cyclic_shift(h, s)
    else:
        h = window_attention(h, bw.attn, None, ws)
    y = x + h
    flat = y.reshape(hp * wp, d)
    flat = flat + bw.mlp(layer_norm(flat, bw.ln2_gamma, bw.ln2_beta, cfg.ln_eps))
    if adapter is not None:
        flat = flat + adapter(x.reshape(hp * wp, d))
    return flat.reshape(hp, wp, d)


# -- weights ---------------------------------------------------------------


def attention_from(weights: Mapping[str, np.ndarray], prefix: str, n_heads: int) -> AttentionWeights:
    return AttentionWeights(
        *(weights[f"{prefix}.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
        n_heads=n_heads,
    )


def block_from(weights: Mapping[str, np.ndarray], i: int, n_heads: int) -> BlockWeights:
    p = f"block{i}"
    return BlockWeights(
        attn=attention_from(weights, f"{p}.attn", n_heads),
        mlp=MLPWeights(*(weights[f"{p}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2"))),
        ln1_gamma=weights[f"{p}.attn.ln_gamma"],
        ln1_beta=weights[f"{p}.attn.ln_beta"],
        ln2_gamma=weights[f"{p}.mlp.ln_gamma"],
        ln2_beta=weights[f"{p}.mlp.ln_beta"],
    )


def adapter_from(weights: Mapping[str, np.ndarray], i: int) -> AdapterWeights:
    return AdapterWeights(weights[f"block{i}.adapter.A"], weights[f"block{i}.adapter.B"])


def init_encoder_weights(cfg: EncoderConfig, rng: np.random.Generator, d_adapter: Optional[int] = None,
                         std: float = 0.02, zero_init: bool = True) -> dict[str, np.ndarray]:
    d = cfg.d_model
    d_adapter = d_adapter or max(1, d // 4)
    out: dict[str, np.ndarray] = {}
    for i in range(cfg.depth):
        p = f"block{i}"
        out[f"{p}.attn.ln_gamma"] = np.ones(d)
        out[f"{p}.attn.ln_beta"] = np.zeros(d)
        for k in ("q", "k", "v", "o"):
            out[f"{p}.attn.w{k}"] = rng.normal(0.0, std, size=(d, d))
            out[f"{p}.attn.b{k}"] = np.zeros(d)
        out[f"{p}.mlp.ln_gamma"] = np.ones(d)
        out[f"{p}.mlp.ln_beta"] = np.zeros(d)
        out[f"{p}.mlp.w1"] = rng.normal(0.0, std, size=(d, 4 * d))
        out[f"{p}.mlp.b1"] = np.zeros(4 * d)
        out[f"{p}.mlp.w2"] = rng.normal(0.0, std, size=(4 * d, d))
        out[f"{p}.mlp.b2"] = np.zeros(d)
        if cfg.is_swa_block(i):
            ad = AdapterWeights.init(d, d_adapter, rng, std, zero_init)
            out[f"{p}.adapter.A"] = ad.A
            out[f"{p}.adapter.B"] = ad.B
    return out


def encode(grid, cfg: EncoderConfig, weights: Mapping[str, np.ndarray],
           use_adapters: bool = True) -> np.ndarray:
    """Run ``cfg.depth`` blocks over an assembled Hp x Wp x D patch grid."""
    x = as_tensor(grid)
    for i in range(cfg.depth):
        bw = block_from(weights, i, cfg.n_heads)
        adapter = adapter_from(weights, i) if use_adapters and cfg.is_swa_block(i) else None
        x = swa_block(x, cfg, bw, adapter, shift=cfg.block_shift(i))
    return x
