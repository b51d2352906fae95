"""Training-time augmentation and the invisible block-DCT watermark."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import imaging
from ._rng import derive_rng

WATERMARK_BITS = 32
WATERMARK_COEFF = (2, 1)
DEFAULT_PAYLOAD = 0xA5C31E7B
DEFAULT_STRENGTH = 8.0 / 255.0
AUGMENT_ORDER = ("blur", "gray", "watermark")


def payload_bits(payload) -> np.ndarray:
    """32-element 0/1 array from an int or an iterable of bits (MSB first)."""
    if isinstance(payload, (int, np.integer)):
        if not 0 <= int(payload) < 2 ** WATERMARK_BITS:
            raise ValueError("integer payload must fit in 32 bits")
        return np.array([(int(payload) >> (31 - i)) & 1 for i in range(WATERMARK_BITS)], dtype=np.uint8)
    bits = np.asarray(list(payload), dtype=np.int64)
    if bits.shape != (WATERMARK_BITS,) or not np.isin(bits, (0, 1)).all():
        raise ValueError("payload must be 32 bits")
    return bits.astype(np.uint8)


def bits_to_int(bits) -> int:
    out = 0
    for b in np.asarray(bits).astype(int):
        out = (out << 1) | int(b)
    return out


def _dct_basis(u: int, v: int) -> np.ndarray:
    x = np.arange(8)

    def alpha(k):
        return math.sqrt(1 / 8) if k == 0 else math.sqrt(2 / 8)

    row = alpha(u) * np.cos(np.pi * (2 * x + 1) * u / 16)
    col = alpha(v) * np.cos(np.pi * (2 * x + 1) * v / 16)
    return np.outer(row, col)


_BASIS = _dct_basis(*WATERMARK_COEFF)


def _block_view(plane):
    h, w = plane.shape
    bh, bw = h // 8, w // 8
    return plane[:bh * 8, :bw * 8].reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)


def _check_wm_size(image):
    if image.shape[0] < 32 or image.shape[1] < 32:
        raise ValueError(f"watermarking needs at least 32x32 pixels, got {image.shape[0]}x{image.shape[1]}")


def embed_watermark(image, payload=DEFAULT_PAYLOAD, strength: float = DEFAULT_STRENGTH) -> np.ndarray:
    """Quantisation-index modulation of DCT coefficient (2, 1) in every 8x8 luma block.

    Bit ``b`` snaps the coefficient to the nearest multiple ``k * strength``
    with ``k % 2 == b``. Bits are tiled over blocks in row-major order. The
    luma change is added equally to every channel.
    """
    image = imaging.check_image(image)
    _check_wm_size(image)
    if not strength > 0:
        raise ValueError("strength must be positive")
    bits = payload_bits(payload)
    y = imaging.luma(image).astype(np.float64)
    blocks = _block_view(y)
    coeff = np.einsum("ijxy,xy->ij", blocks, _BASIS)
    nb = coeff.size
    want = np.resize(bits, nb).reshape(coeff.shape).astype(np.int64)
    q = coeff / strength
    # nearest integer of the requested parity
    k = 2.0 * np.round((q - want) / 2.0) + want
    delta = (k * strength - coeff)
    bh, bw = coeff.shape
    change = np.zeros(y.shape)
    change[:bh * 8, :bw * 8] = (delta[:, :, None, None] * _BASIS).transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)
    out = image.astype(np.float64) + change[:, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class WatermarkReading:
    payload: np.ndarray
    confidence: np.ndarray

    @property
    def value(self) -> int:
        return bits_to_int(self.payload)


def decode_watermark(image, strength: float = DEFAULT_STRENGTH) -> WatermarkReading:
    """Best-guess payload with a per-bit confidence in [0, 1].

    Every block votes for ``round(c / strength) % 2``; bits take the majority
    vote, ties broken by summed reliability. Reliability of a block is
    ``1 - 2 * |c / strength - round(c / strength)|`` (1 on the lattice, 0
    halfway between), and the reported confidence is its mean over a bit's
    blocks, so an unmarked image sits near 0.5.
    """
    image = imaging.check_image(image)
    _check_wm_size(image)
    y = imaging.luma(image).astype(np.float64)
    coeff = np.einsum("ijxy,xy->ij", _block_view(y), _BASIS).ravel()
    q = coeff / strength
    k = np.round(q)
    votes = np.mod(k, 2).astype(np.int64)
    rel = 1.0 - 2.0 * np.abs(q - k)
    slot = np.arange(coeff.size) % WATERMARK_BITS
    bits = np.zeros(WATERMARK_BITS, dtype=np.uint8)
    conf = np.zeros(WATERMARK_BITS)
    for b in range(WATERMARK_BITS):
        sel = slot == b
        if not sel.any():
            conf[b] = 0.0
            continue
        ones = votes[sel].sum()
        zeros = sel.sum() - ones
        if ones != zeros:
            bits[b] = int(ones > zeros)
        else:
            w1 = rel[sel][votes[sel] == 1].sum()
            w0 = rel[sel][votes[sel] == 0].sum()
            bits[b] = int(w1 > w0)
        conf[b] = rel[sel].mean()
    return WatermarkReading(payload=bits, confidence=conf)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------- pipeline

@dataclass
class AugmentConfig:
    crop_size: int = 64
    p_blur: float = 0.01
    p_gray: float = 0.05
    p_watermark: float = 0.2
    payload: int = DEFAULT_PAYLOAD
    strength: float = DEFAULT_STRENGTH
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    order: tuple[str, ...] = field(default=AUGMENT_ORDER)

    def __post_init__(self):
        for name in ("p_blur", "p_gray", "p_watermark"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.crop_size < 16:
            raise ValueError("crop_size must be >= 16")
        if sorted(self.order) != sorted(AUGMENT_ORDER):
            raise ValueError(f"order must be a permutation of {AUGMENT_ORDER}")
        self.blur_sigma = tuple(self.blur_sigma)
        self.order = tuple(self.order)
        payload_bits(self.payload)

    def to_dict(self):
        d = asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        d["order"] = list(self.order)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class AugmentPlan:
    """The random decisions for one sample, drawn before any pixel work."""

    top: int
    left: int
    blur_sigma: float | None
    gray: bool
    watermark: bool


def draw_plan(height: int, width: int, config: AugmentConfig, rng: np.random.Generator) -> AugmentPlan:
    # always consume the same number of draws so the stream layout is fixed
    top, left = imaging.random_crop_offset(height, width, config.crop_size, rng)
    coins = rng.random(3)
    sigma = float(rng.uniform(*config.blur_sigma))
    return AugmentPlan(
        top=top,
        left=left,
        blur_sigma=sigma if coins[0] < config.p_blur else None,
        gray=bool(coins[1] < config.p_gray),
        watermark=bool(coins[2] < config.p_watermark),
    )


def apply_plan(image, plan: AugmentPlan, config: AugmentConfig) -> np.ndarray:
    image = imaging.check_image(image)
    s = config.crop_size
    out = image[plan.top:plan.top + s, plan.left:plan.left + s].copy()
    for step in config.order:
        if step == "blur" and plan.blur_sigma is not None:
            out = imaging.gaussian_blur(out, plan.blur_sigma)
        elif step == "gray" and plan.gray:
            out = imaging.to_grayscale(out)
        elif step == "watermark" and plan.watermark:
            out = embed_watermark(out, config.payload, config.strength)
    return out


def apply_train_augment(image, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """random crop -> blur (p_blur) -> grayscale (p_gray) -> watermark (p_watermark)."""
    image = imaging.check_image(image)
    plan = draw_plan(image.shape[0], image.shape[1], config, rng)
    return apply_plan(image, plan, config)


def apply_eval_transform(image, config: AugmentConfig) -> np.ndarray:
    return imaging.center_crop(image, config.crop_size)


class TrainAugmenter(BaseEstimator, TransformerMixin):
    """Stateless transformer applying the training pipeline to an image batch.

    Sample ``i`` uses a stream derived from ``(random_state, i)``.
    """

    def __init__(self, crop_size=64, p_blur=0.01, p_gray=0.05, p_watermark=0.2,
                 strength=DEFAULT_STRENGTH, random_state=0):
        self.crop_size = crop_size
        self.p_blur = p_blur
        self.p_gray = p_gray
        self.p_watermark = p_watermark
        self.strength = strength
        self.random_state = random_state

    def _config(self):
        return AugmentConfig(crop_size=self.crop_size, p_blur=self.p_blur, p_gray=self.p_gray,
                             p_watermark=self.p_watermark, strength=self.strength)

    def fit(self, X, y=None):
        self._config()
        return self

    def transform(self, X):
        config = self._config()
        return np.stack([
            apply_train_augment(img, config, derive_rng(self.random_state, "augment", i))
            for i, img in enumerate(X)
        ])


class EvalCrop(BaseEstimator, TransformerMixin):
    def __init__(self, crop_size=64):
        self.crop_size = crop_size

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([imaging.center_crop(img, self.crop_size) for img in X])
