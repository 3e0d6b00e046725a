"""Frame decoding, grayscale conversion, bilinear resizing, temporal resampling."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

N_FRAMES = 15
LUMA = (0.299, 0.587, 0.114)


class FrameDecodeError(OSError):
    pass


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centers, edge-clamped."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[o, lo] += 1.0 - frac
        w[o, hi] += frac
    w.setflags(write=False)
    return w


def resize_bilinear(img: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    width = height if width is None else width
    img = np.asarray(img, dtype=np.float64)
    if img.shape == (height, width):
        return img.copy()
    out = bilinear_matrix(img.shape[0], height) @ img @ bilinear_matrix(img.shape[1], width).T
    return out


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
        return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    if arr.ndim == 3 and arr.shape[2] in (1, 2):
        return arr[..., 0]
    raise ValueError(f"unsupported image array shape {arr.shape}")


def decode_image(path) -> np.ndarray:
    """8-bit image file to a float array in 0..255 (gray or RGB)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("RGBA", "P", "LA", "I;16", "I", "F", "1"):
                arr = np.asarray(im.convert("RGB" if im.mode in ("RGBA", "P") else "L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise FrameDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float64)


def preprocess_frame(raw, image_size: int) -> np.ndarray:
    """Path or 8-bit array -> float32 (image_size, image_size) grayscale in [0, 1]."""
    arr = decode_image(raw) if isinstance(raw, (str, Path)) else np.asarray(raw, dtype=np.float64)
    gray = to_grayscale(arr)
    out = resize_bilinear(gray, image_size, image_size) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def temporal_indices(t: int, n: int = N_FRAMES) -> np.ndarray:
    """Source index for each of ``n`` output frames: round(k*(t-1)/(n-1)).

    Rounding is half-up so ties resolve identically everywhere.
    """
    if t < 1:
        raise ValueError("cannot resample an empty video")
    if n < 1:
        raise ValueError("target frame count must be positive")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(n, dtype=np.int64)
    # exact integer half-up rounding of k*(t-1)/(n-1)
    num = k * (t - 1)
    return (2 * num + (n - 1)) // (2 * (n - 1))


def temporal_resample(frames, n: int = N_FRAMES) -> list:
    frames = list(frames)
    return [frames[i] for i in temporal_indices(len(frames), n)]


def map_label(i_lus) -> int:
    """Collapse the 4-level i-LUS score to 3 levels (1 and 2 merge)."""
    table = {0: 0, 1: 1, 2: 1, 3: 2}
    try:
        key = int(i_lus)
    except (TypeError, ValueError):
        raise ValueError(f"invalid i-LUS score {i_lus!r}") from None
    if key != i_lus or key not in table:
        raise ValueError(f"i-LUS score must be one of 0..3, got {i_lus!r}")
    return table[key]
