"""Raster primitives.

Images are plain ``float32`` arrays of shape ``(H, W, C)`` with ``C`` in
{1, 3} and values in ``[0, 1]``. Every function here returns a fresh array
and clips on write, so the range invariant holds after any call.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import fft as sp_fft
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def check_image(image, name: str = "image") -> np.ndarray:
    """Validate and normalise an image to a ``float32`` HxWxC array.

    2-D input is treated as a single-channel plane.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} has an empty spatial dimension: {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} has pixels outside [0, 1]")
    return arr


def _clip(arr) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0).astype(np.float32, copy=False)


# ---------------------------------------------------------------- PNG I/O

def to_uint8(image) -> np.ndarray:
    image = check_image(image)
    return np.rint(image * 255.0).astype(np.uint8)


def save_png(image, path) -> None:
    data = to_uint8(image)
    if data.shape[2] == 1:
        pil = Image.fromarray(data[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(data, mode="RGB")
    pil.save(str(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG."""
    path = Path(path)
    try:
        with Image.open(path) as pil:
            if pil.format != "PNG":
                raise ValueError(f"{path}: not a PNG file")
            if pil.mode not in ("L", "RGB"):
                raise ValueError(f"{path}: unsupported PNG mode {pil.mode!r} (need 8-bit L or RGB)")
            pil.load()
            data = np.asarray(pil, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: cannot decode PNG ({exc})") from exc
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float32) / 255.0


# ---------------------------------------------------------------- geometry

def center_crop(image, size: int) -> np.ndarray:
    image = check_image(image)
    h, w = image.shape[:2]
    if size < 1 or size > min(h, w):
        raise ValueError(f"crop size {size} does not fit a {h}x{w} image")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top:top + size, left:left + size].copy()


def random_crop_offset(height: int, width: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size < 1 or size > min(height, width):
        raise ValueError(f"crop size {size} does not fit a {height}x{width} image")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return top, left


def random_crop(image, size: int, rng: np.random.Generator) -> np.ndarray:
    image = check_image(image)
    top, left = random_crop_offset(image.shape[0], image.shape[1], size, rng)
    return image[top:top + size, left:left + size].copy()


def crop_bottom(image, rows: int) -> np.ndarray:
    """Drop the last ``rows`` rows (e.g. a service watermark strip)."""
    image = check_image(image)
    if rows < 0 or rows >= image.shape[0]:
        raise ValueError(f"cannot crop {rows} rows from an image {image.shape[0]} tall")
    return image[:image.shape[0] - rows].copy()


def resize(image, height: int, width: int) -> np.ndarray:
    image = check_image(image)
    if (height, width) == image.shape[:2]:
        return image.copy()
    planes = []
    for c in range(image.shape[2]):
        pil = Image.fromarray(image[:, :, c], mode="F")
        planes.append(np.asarray(pil.resize((width, height), Image.BILINEAR), dtype=np.float32))
    return _clip(np.stack(planes, axis=2))


def resize_short_side(image, target: int) -> np.ndarray:
    """Bilinear resize so that ``min(H, W) == target``, keeping aspect ratio."""
    if target < 1:
        raise ValueError("target must be >= 1")
    image = check_image(image)
    h, w = image.shape[:2]
    if h <= w:
        nh, nw = target, max(1, int(round(w * target / h)))
    else:
        nh, nw = max(1, int(round(h * target / w))), target
    return resize(image, nh, nw)


# ---------------------------------------------------------------- filtering

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge clamping."""
    image = check_image(image)
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(image.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return _clip(out)


def luma(image) -> np.ndarray:
    """HxW luma plane (the single channel for grayscale input)."""
    image = check_image(image)
    if image.shape[2] == 1:
        return image[:, :, 0].copy()
    return image @ LUMA


def to_grayscale(image) -> np.ndarray:
    """ITU-R 601 luma replicated into three channels; 1-channel input is returned as is."""
    image = check_image(image)
    if image.shape[2] == 1:
        return image.copy()
    y = image.astype(np.float64) @ LUMA.astype(np.float64)
    return _clip(np.repeat(y[:, :, None], 3, axis=2))


# ---------------------------------------------------------------- block DCT

def _pad8(plane):
    h, w = plane.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    return plane


def block_dct8(plane) -> np.ndarray:
    """Orthonormal 8x8 DCT-II of every block.

    Planes whose sides are not multiples of 8 are reflect-padded first, so
    the result can be larger than the input.
    """
    plane = _pad8(np.asarray(plane, dtype=np.float64))
    h, w = plane.shape
    blocks = plane.reshape(h // 8, 8, w // 8, 8)
    coeffs = sp_fft.dctn(blocks, type=2, axes=(1, 3), norm="ortho")
    return coeffs.reshape(h, w)


def block_idct8(coeffs, shape: tuple[int, int] | None = None) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    h, w = coeffs.shape
    if h % 8 or w % 8:
        raise ValueError("coefficient plane sides must be multiples of 8")
    blocks = coeffs.reshape(h // 8, 8, w // 8, 8)
    plane = sp_fft.idctn(blocks, type=2, axes=(1, 3), norm="ortho").reshape(h, w)
    if shape is not None:
        plane = plane[:shape[0], :shape[1]]
    return plane
