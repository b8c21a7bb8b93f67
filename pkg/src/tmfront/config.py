"""Flat ``key = value`` pipeline configuration.

Precedence, highest first: command-line overrides, config file, the
``TM_SEED`` environment variable (seed only), built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from tmfront.split import WINDOW, ConfigError
from tmfront.swa_encoder import EncoderConfig

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

# resolution -> tokens kept by the Token Resampler
DEFAULT_R = {896: 512, 1344: 1024}


@dataclass(frozen=True)
class PipelineConfig:
    resolution_h: int = 896
    resolution_w: int = 896
    normalize_mean: tuple[float, float, float] = CLIP_MEAN
    normalize_std: tuple[float, float, float] = CLIP_STD
    d_model: int = 64
    depth: int = 4
    n_heads: int = 4
    swa_interval: int = 4
    shift_size: Optional[int] = None
    window_patches: int = 32
    swa_enabled: bool = True
    d_adapter: Optional[int] = None
    adapter_zero_init: bool = True
    image_resampler_heads: int = 1
    token_resampler_enabled: bool = True
    token_resampler_r: Optional[int] = None
    token_resampler_mode: str = "filter"
    init_std: float = 0.02
    seed: int = 0
    weights_path: Optional[str] = None

    def __post_init__(self):
        for key, v in (("resolution.h", self.resolution_h), ("resolution.w", self.resolution_w)):
            if v <= 0 or v % WINDOW:
                raise ConfigError(f"{key}={v}: must be a positive multiple of {WINDOW}")
        if self.d_model % 4:
            raise ConfigError(f"model.d_model={self.d_model}: must be divisible by 4")
        if self.token_resampler_r is not None and self.token_resampler_r < 1:
            raise ConfigError(f"token_resampler.r={self.token_resampler_r}: must be positive")
        _ = self.encoder  # validates the encoder fields

    @property
    def windows(self) -> int:
        return (self.resolution_h // WINDOW) * (self.resolution_w // WINDOW)

    @property
    def assembled_tokens(self) -> int:
        return (self.windows + 1) * 256

    @property
    def r(self) -> int:
        if self.token_resampler_r is not None:
            return self.token_resampler_r
        side = max(self.resolution_h, self.resolution_w)
        return DEFAULT_R.get(side, self.assembled_tokens // 2)

    @property
    def encoder(self) -> EncoderConfig:
        try:
            return EncoderConfig(
                depth=self.depth,
                d_model=self.d_model,
                n_heads=self.n_heads,
                swa_interval=self.swa_interval,
                shift_size=self.shift_size,
                window_patches=self.window_patches,
                swa_enabled=self.swa_enabled,
            )
        except ConfigError as exc:
            raise ConfigError(f"encoder settings (model.*/swa.*): {exc}") from exc


# config key -> (field name, parser)
def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _triple(s: str) -> tuple[float, float, float]:
    parts = [float(p) for p in s.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated numbers")
    return tuple(parts)  # type: ignore[return-value]


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _opt_str(s: str) -> Optional[str]:
    return s.strip() or None


KEYS = {
    "resolution.h": ("resolution_h", int),
    "resolution.w": ("resolution_w", int),
    "normalize.mean": ("normalize_mean", _triple),
    "normalize.std": ("normalize_std", _triple),
    "model.d_model": ("d_model", int),
    "model.depth": ("depth", int),
    "model.n_heads": ("n_heads", int),
    "swa.interval": ("swa_interval", int),
    "swa.shift_size": ("shift_size", _opt_int),
    "swa.window_patches": ("window_patches", int),
    "swa.enabled": ("swa_enabled", _bool),
    "adapter.d_adapter": ("d_adapter", _opt_int),
    "adapter.zero_init": ("adapter_zero_init", _bool),
    "resampler.image.n_heads": ("image_resampler_heads", int),
    "token_resampler.enabled": ("token_resampler_enabled", _bool),
    "token_resampler.r": ("token_resampler_r", _opt_int),
    "token_resampler.mode": ("token_resampler_mode", str),
    "init.std": ("init_std", float),
    "seed": ("seed", int),
    "weights.path": ("weights_path", _opt_str),
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        out[key] = value
    return out


def apply(cfg: PipelineConfig, values: dict[str, str]) -> PipelineConfig:
    changes = {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        name, parse = KEYS[key]
        try:
            changes[name] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}={raw!r}: {exc}") from exc
    return replace(cfg, **changes)


def load_config(path=None, overrides: Optional[dict[str, str]] = None,
                env: Optional[dict[str, str]] = None) -> PipelineConfig:
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if env.get("TM_SEED"):
        values["seed"] = env["TM_SEED"]
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(overrides or {})
    return apply(PipelineConfig(), values)


def dump_config(cfg: PipelineConfig) -> str:
    by_field = {name: key for key, (name, _) in KEYS.items()}
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif v is None:
            v = "auto" if f.name in ("shift_size", "d_adapter", "token_resampler_r") else ""
        lines.append(f"{by_field[f.name]} = {v}")
    return "\n".join(lines) + "\n"
