"""End-to-end forward pass: split, encode, image resample, assemble, token resample."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from tmfront.archive import check_weight_names, load_archive, save_archive
from tmfront.config import PipelineConfig
from tmfront.resampler import (
    TokenSet,
    assemble_token_set,
    image_resample,
    image_resampler_from,
    init_resampler_weights,
    token_filter,
    token_resample,
    token_resampler_from,
)
from tmfront.split import (
    PATCH_DIM,
    ConfigError,
    RawImage,
    assemble_patch_grid,
    normalize_pixels,
    patchify,
    resize_image,
    split_windows,
    window_tokens,
)
from tmfront.swa_encoder import encode, init_encoder_weights


def random_weights(cfg: PipelineConfig, seed: Optional[int] = None) -> dict[str, np.ndarray]:
    """Seeded weight set, rounded to f32 so it survives an archive round trip unchanged."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w: dict[str, np.ndarray] = {
        "patch_embed.proj": rng.normal(0.0, cfg.init_std, size=(PATCH_DIM, cfg.d_model))
    }
    w.update(init_encoder_weights(cfg.encoder, rng, cfg.d_adapter, cfg.init_std, cfg.adapter_zero_init))
    random_q = cfg.r if cfg.token_resampler_mode == "random" else None
    w.update(init_resampler_weights(cfg.d_model, rng, cfg.init_std, random_q))
    return {k: v.astype(np.float32).astype(np.float64) for k, v in w.items()}


def load_weights(path) -> Mapping[str, np.ndarray]:
    weights = load_archive(path)
    check_weight_names(weights)
    return weights


@dataclass
class ForwardResult:
    windows: int
    grid: tuple[int, int]
    token_set: TokenSet
    tokens: np.ndarray
    selected: Optional[np.ndarray]
    wall_time: float

    @property
    def L_before(self) -> int:
        return len(self.token_set)

    @property
    def r_after(self) -> int:
        return self.tokens.shape[0]

    def summary(self) -> dict:
        return {
            "windows": self.windows,
            "grid": list(self.grid),
            "L_before": self.L_before,
            "r_after": self.r_after,
            "d_model": int(self.tokens.shape[1]),
            "wall_time_s": round(self.wall_time, 4),
        }

    def dump(self, path) -> None:
        tensors = {
            "tokens": self.tokens,
            "tokens_before": self.token_set.tokens,
            "origin": self.token_set.origin.astype(np.float64),
        }
        if self.selected is not None:
            tensors["selected"] = self.selected.astype(np.float64)
        save_archive(path, tensors)


def forward(img: RawImage, cfg: PipelineConfig, weights: Mapping[str, np.ndarray],
            threads: int = 1) -> ForwardResult:
    start = time.perf_counter()
    r_needed = cfg.r
    if cfg.token_resampler_enabled and r_needed > cfg.assembled_tokens:
        raise ConfigError(
            f"token_resampler.r={r_needed} exceeds the assembled token count "
            f"L={cfg.assembled_tokens} at {cfg.resolution_h}x{cfg.resolution_w}"
        )
    resized = resize_image(img, (cfg.resolution_h, cfg.resolution_w))
    grid = split_windows(resized)
    proj = weights["patch_embed.proj"]
    enc_cfg = cfg.encoder
    if proj.shape != (PATCH_DIM, cfg.d_model):
        raise ConfigError(f"model.d_model={cfg.d_model} does not match patch_embed.proj {proj.shape}")

    def embed(item):
        i, win = item
        return patchify(normalize_pixels(win, cfg.normalize_mean, cfg.normalize_std), proj, i)

    resampler_w = image_resampler_from(weights, cfg.image_resampler_heads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        patches = list(pool.map(embed, enumerate(grid.windows)))
        encoded = encode(assemble_patch_grid(patches, grid.rows, grid.cols), enc_cfg, weights)
        global_patches = embed((0, grid.global_view))
        global_encoded = encode(assemble_patch_grid([global_patches], 1, 1), enc_cfg, weights)
        per_window = window_tokens(encoded, grid.rows, grid.cols)
        window_feats = list(pool.map(lambda t: image_resample(t, resampler_w), per_window))
    global_feat = image_resample(window_tokens(global_encoded, 1, 1)[0], resampler_w)
    token_set = assemble_token_set(window_feats, global_feat)

    selected = None
    if cfg.token_resampler_enabled:
        mode = cfg.token_resampler_mode
        random_q = weights["resampler.token.random_queries"] if mode == "random" else None
        out = token_resample(token_set, r_needed, token_resampler_from(weights), mode, random_q)
        if mode != "random":
            selected = token_filter(token_set.tokens, r_needed, mode != "unsorted").selected
    else:
        out = token_set.tokens.copy()
    return ForwardResult(
        windows=len(grid.windows),
        grid=(grid.rows, grid.cols),
        token_set=token_set,
        tokens=out,
        selected=selected,
        wall_time=time.perf_counter() - start,
    )


__all__ = ["ForwardResult", "forward", "load_weights", "random_weights"]
