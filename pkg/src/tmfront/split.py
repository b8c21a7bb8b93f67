"""Image loading, resizing, 448-pixel window tiling and 14-pixel patch tokens."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tmfront.numerics import ShapeError, as_tensor, matmul

WINDOW = 448
PATCH = 14
PATCHES_PER_SIDE = WINDOW // PATCH  # 32
PATCH_DIM = PATCH * PATCH * 3  # 588


class ConfigError(ValueError):
    """Invalid resolution or other configuration value."""


@dataclass(frozen=True)
class RawImage:
    """8-bit RGB raster, ``data`` shaped (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.dtype != np.uint8 or self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"RawImage needs uint8 HxWx3 data, got {self.data.dtype} {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class WindowGrid:
    rows: int
    cols: int
    windows: list[np.ndarray]
    global_view: np.ndarray
    source_resolution: tuple[int, int]


@dataclass(frozen=True)
class PatchTokens:
    window_id: int
    tokens: np.ndarray
    grid: tuple[int, int] = (PATCHES_PER_SIDE, PATCHES_PER_SIDE)


# -- file io ---------------------------------------------------------------


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ValueError("truncated PPM header")
        tokens.append(raw[start:i])
    return tokens, i


def read_ppm(path) -> RawImage:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), end = _ppm_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    if magic == b"P6":
        body = raw[end + 1 : end + 1 + w * h * 3]
        if len(body) != w * h * 3:
            raise ValueError(f"{path}: pixel data truncated")
        data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
    elif magic == b"P3":
        values, _ = _ppm_tokens(raw[end:], w * h * 3)
        data = np.array([int(v) for v in values], dtype=np.uint8).reshape(h, w, 3)
    else:
        raise ValueError(f"{path}: unsupported PPM magic {magic!r}")
    return RawImage(data)


def write_ppm(path, img: RawImage) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.data.tobytes())


def load_image(path, allow_png: bool = True) -> RawImage:
    """Read a PPM, or a PNG when ``allow_png`` and Pillow is importable."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] in (b"P6", b"P3"):
        return read_ppm(path)
    if head.startswith(b"\x89PNG"):
        if not allow_png:
            raise ValueError(f"{path}: PNG input disabled")
        try:
            from PIL import Image
        except ImportError as exc:
            raise ValueError(f"{path}: PNG support requires Pillow") from exc
        with Image.open(path) as im:
            return RawImage(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
    raise ValueError(f"{path}: unrecognized image format")


# -- geometry --------------------------------------------------------------


def _check_target(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % WINDOW or w % WINDOW:
        raise ConfigError(f"resolution {h}x{w} must be positive multiples of {WINDOW}")


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(data: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resample of an HxWxC float array to h x w."""
    if data.shape[:2] == (h, w):
        return data.copy()
    r0, r1, fr = _bilinear_axis(data.shape[0], h)
    c0, c1, fc = _bilinear_axis(data.shape[1], w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = data[r0][:, c0] * (1 - fc) + data[r0][:, c1] * fc
    bot = data[r1][:, c0] * (1 - fc) + data[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def resize_image(img: RawImage, target: tuple[int, int]) -> RawImage:
    h, w = target
    _check_target(h, w)
    if (img.height, img.width) == (h, w):
        return RawImage(img.data.copy())
    out = bilinear_resize(img.data.astype(np.float64), h, w)
    return RawImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def split_windows(img: RawImage) -> WindowGrid:
    """Tile a resized image into 448x448 windows (row-major) plus a global view.

    Window and global-view tensors hold the raw 0..255 sample values as float64.
    """
    _check_target(img.height, img.width)
    rows, cols = img.height // WINDOW, img.width // WINDOW
    pixels = img.data.astype(np.float64)
    windows = [
        pixels[r * WINDOW : (r + 1) * WINDOW, c * WINDOW : (c + 1) * WINDOW].copy()
        for r in range(rows)
        for c in range(cols)
    ]
    global_view = resize_image(img, (WINDOW, WINDOW)).data.astype(np.float64)
    return WindowGrid(rows, cols, windows, global_view, (img.height, img.width))


def reassemble(grid: WindowGrid) -> np.ndarray:
    """Inverse of the tiling in :func:`split_windows`."""
    return np.concatenate(
        [
            np.concatenate(grid.windows[r * grid.cols : (r + 1) * grid.cols], axis=1)
            for r in range(grid.rows)
        ],
        axis=0,
    )


def normalize_pixels(window: np.ndarray, mean, std) -> np.ndarray:
    """Scale 0..255 samples to [0, 1], then standardize per channel."""
    mean = as_tensor(mean)
    std = as_tensor(std)
    if mean.shape != (3,) or std.shape != (3,) or np.any(std <= 0):
        raise ConfigError("normalize.mean/std need three entries, std positive")
    return (as_tensor(window) / 255.0 - mean) / std


def extract_patches(window: np.ndarray) -> np.ndarray:
    """1024 x 588 matrix of flattened 14x14x3 patches in row-major patch order."""
    window = as_tensor(window)
    if window.shape != (WINDOW, WINDOW, 3):
        raise ShapeError(f"window must be {WINDOW}x{WINDOW}x3, got {window.shape}")
    p = window.reshape(PATCHES_PER_SIDE, PATCH, PATCHES_PER_SIDE, PATCH, 3)
    return p.transpose(0, 2, 1, 3, 4).reshape(PATCHES_PER_SIDE**2, PATCH_DIM)


def patchify(window: np.ndarray, patch_proj: np.ndarray, window_id: int = 0) -> PatchTokens:
    patch_proj = as_tensor(patch_proj)
    if patch_proj.ndim != 2 or patch_proj.shape[0] != PATCH_DIM:
        raise ShapeError(f"patch projection must be {PATCH_DIM} x D, got {patch_proj.shape}")
    return PatchTokens(window_id, matmul(extract_patches(window), patch_proj))


def assemble_patch_grid(tokens: list[PatchTokens], rows: int, cols: int) -> np.ndarray:
    """Place per-window 32x32 token grids into one (rows*32) x (cols*32) x D layout."""
    if len(tokens) != rows * cols:
        raise ShapeError(f"{len(tokens)} windows for a {rows}x{cols} grid")
    side = PATCHES_PER_SIDE
    d = tokens[0].tokens.shape[1]
    out = np.empty((rows * side, cols * side, d))
    for pt in tokens:
        r, c = divmod(pt.window_id, cols)
        out[r * side : (r + 1) * side, c * side : (c + 1) * side] = pt.tokens.reshape(side, side, d)
    return out


def window_tokens(grid: np.ndarray, rows: int, cols: int) -> list[np.ndarray]:
    """Cut an assembled patch grid back into per-window 1024 x D token matrices."""
    side = PATCHES_PER_SIDE
    d = grid.shape[-1]
    return [
        grid[r * side : (r + 1) * side, c * side : (c + 1) * side].reshape(side * side, d)
        for r in range(rows)
        for c in range(cols)
    ]
