"""Pixel-labelled training data: stroke masks, simulated inpainting, CutMix, and the pixel trainer."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import detector as D
from . import imaging
from ._rng import derive_rng
from .corpus import FingerprintSpec, apply_fingerprint, octave_noise, quantize8
from .events import emit

log = logging.getLogger(__name__)

PROVENANCES = ("simulated_inpaint", "cutmix", "whole")
SHAPES = ("stroke", "ellipse", "rectangle")


class MaskGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    coverage: tuple[float, float] = (0.15, 0.35)
    strokes: tuple[int, int] = (3, 8)
    width: tuple[float, float] = (0.03, 0.12)
    # relative odds of stroke / ellipse / rectangle
    shape_mix: tuple[float, float, float] = (0.6, 0.2, 0.2)
    max_attempts: int = 20

    def __post_init__(self):
        lo, hi = self.coverage
        if not 0 < lo < hi < 1:
            raise ValueError(f"coverage range must satisfy 0 < lo < hi < 1, got {self.coverage}")
        if not 1 <= self.strokes[0] <= self.strokes[1]:
            raise ValueError(f"bad stroke count range {self.strokes}")
        if not 0 < self.width[0] <= self.width[1] < 1:
            raise ValueError(f"bad stroke width range {self.width}")
        if len(self.shape_mix) != 3 or min(self.shape_mix) < 0 or sum(self.shape_mix) <= 0:
            raise ValueError("shape_mix needs three non-negative weights")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def to_dict(self) -> dict:
        return {"coverage": list(self.coverage), "strokes": list(self.strokes), "width": list(self.width),
                "shape_mix": list(self.shape_mix), "max_attempts": self.max_attempts}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        d = dict(d)
        for k in ("coverage", "strokes", "width", "shape_mix"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class StrokeMask:
    plane: np.ndarray  # uint8 {0, 1}, H x W

    def __post_init__(self):
        p = np.asarray(self.plane)
        if p.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {p.shape}")
        if not np.isin(p, (0, 1)).all():
            raise ValueError("mask must be binary")
        self.plane = p.astype(np.uint8)

    @property
    def coverage(self) -> float:
        return float(self.plane.mean())

    @property
    def shape(self):
        return self.plane.shape


@dataclass
class PixelSample:
    image: np.ndarray
    mask: StrokeMask
    provenance: str
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.image = imaging.check_image(self.image)
        if not isinstance(self.mask, StrokeMask):
            self.mask = StrokeMask(self.mask)
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.source_ids = tuple(self.source_ids)


# ---------------------------------------------------------------- masks

def _segment_distance(yy, xx, p, q):
    d = q - p
    den = float(d @ d)
    if den == 0:
        return np.hypot(yy - p[0], xx - p[1])
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / den, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _draw_element(plane, rng: np.random.Generator, spec: MaskSpec) -> None:
    h, w = plane.shape
    side = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    p = np.asarray(spec.shape_mix, dtype=np.float64)
    kind = SHAPES[int(rng.choice(3, p=p / p.sum()))]
    if kind == "stroke":
        radius = rng.uniform(*spec.width) * side / 2
        n = int(rng.integers(3, 7))
        pts = [np.array([rng.uniform(0, h), rng.uniform(0, w)])]
        for _ in range(n - 1):
            ang = rng.uniform(0, 2 * np.pi)
            step = rng.uniform(0.15, 0.3) * side
            nxt = pts[-1] + step * np.array([np.sin(ang), np.cos(ang)])
            pts.append(np.clip(nxt, 0, [h, w]))
        for a, b in zip(pts[:-1], pts[1:]):
            # distance threshold gives round caps and joints for free
            plane |= _segment_distance(yy, xx, a, b) <= radius
    elif kind == "ellipse":
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.06, 0.18, size=2) * side
        plane |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:
        ry, rx = rng.uniform(0.06, 0.18, size=2) * side
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        plane |= (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def generate_stroke_mask(h: int, w: int, spec: MaskSpec | None = None,
                         rng: np.random.Generator | None = None) -> StrokeMask:
    """Random overlapping strokes and shapes with coverage inside ``spec.coverage``.

    Too little coverage adds more elements; too much throws the whole mask
    away and starts over, up to ``spec.max_attempts`` times.
    """
    spec = spec or MaskSpec()
    rng = rng if rng is not None else np.random.default_rng()
    if h < 1 or w < 1:
        raise ValueError("mask dimensions must be positive")
    lo, hi = spec.coverage
    for _ in range(spec.max_attempts):
        plane = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(spec.strokes[0], spec.strokes[1] + 1))):
            _draw_element(plane, rng, spec)
        extra = 0
        while plane.mean() < lo and extra < 64:
            _draw_element(plane, rng, spec)
            extra += 1
        if lo <= plane.mean() <= hi:
            return StrokeMask(plane.astype(np.uint8))
    raise MaskGenerationError(f"no {h}x{w} mask with coverage in [{lo}, {hi}] after {spec.max_attempts} attempts")


# ---------------------------------------------------------------- simulated inpainting

def simulate_inpaint_fill(original, mask: StrokeMask, fp: FingerprintSpec, rng: np.random.Generator,
                          sigma: float = 4.0, noise: float = 0.04) -> np.ndarray:
    """Full-frame fill: the blurred original with low-frequency noise, then the generator fingerprint.

    Building on the blurred original keeps the fill consistent with its
    surroundings, so a detector has to find the fingerprint rather than a
    colour mismatch.
    """
    img = imaging.check_image(original)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    base = imaging.gaussian_blur(img, sigma).astype(np.float64)
    if noise > 0:
        h, w = img.shape[:2]
        n = octave_noise(rng, max(h, w))[:h, :w]
        base = base + noise * (n - n.mean())[:, :, None]
    return apply_fingerprint(np.clip(base, 0, 1).astype(np.float32), fp, rng)


def composite_inpaint(original, fill, mask: StrokeMask, source_ids: Sequence[str] = ()) -> PixelSample:
    """Hard blend: generated pixels inside the mask, the original copied back everywhere else."""
    orig = imaging.check_image(original)
    fill = imaging.check_image(fill, "fill")
    if orig.shape != fill.shape:
        raise ValueError(f"original {orig.shape} and fill {fill.shape} differ")
    if mask.shape != orig.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {orig.shape[:2]}")
    out = np.where(mask.plane.astype(bool)[:, :, None], fill, orig)
    return PixelSample(out, mask, "simulated_inpaint", tuple(source_ids))


def prepare_original(image, size: int) -> np.ndarray:
    """Short-side resize then center crop to ``size``; a no-op for images already that size."""
    img = imaging.check_image(image)
    if img.shape[:2] == (size, size):
        return img
    return imaging.center_crop(imaging.resize_short_side(img, size), size)


def inpaint_sample(original, fp: FingerprintSpec, rng: np.random.Generator, spec: MaskSpec | None = None,
                   source_id: str = "") -> PixelSample:
    img = imaging.check_image(original)
    mask = generate_stroke_mask(img.shape[0], img.shape[1], spec, rng)
    fill = quantize8(simulate_inpaint_fill(img, mask, fp, rng))
    return composite_inpaint(img, fill, mask, (source_id,) if source_id else ())


# ---------------------------------------------------------------- cutmix

def cutmix_sample(real_image, fake_image, rng: np.random.Generator, blocks: tuple[int, int] = (1, 3),
                  side: tuple[float, float] = (0.1, 0.4), swap_p: float = 0.5,
                  source_ids: Sequence[str] = ()) -> PixelSample:
    """Paste 1-3 rectangles of one image into the other; the label marks the generated pixels.

    With probability ``swap_p`` the fake image is the canvas and the pasted
    rectangles are real, so the label is the complement of the rectangles.
    """
    real = imaging.check_image(real_image, "real_image")
    fake = imaging.check_image(fake_image, "fake_image")
    if real.shape != fake.shape:
        raise ValueError(f"real {real.shape} and fake {fake.shape} differ")
    if blocks[0] < 1 or blocks[1] < blocks[0]:
        raise ValueError(f"block count range must start at 1 or more, got {blocks}")
    if not 0 < side[0] <= side[1] <= 1:
        raise ValueError(f"bad block side range {side}")
    h, w = real.shape[:2]
    rect = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(blocks[0], blocks[1] + 1))):
        bh = max(1, int(round(rng.uniform(*side) * h)))
        bw = max(1, int(round(rng.uniform(*side) * w)))
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        rect[y:y + bh, x:x + bw] = True
    swap = rng.random() < swap_p
    canvas, patch = (fake, real) if swap else (real, fake)
    out = np.where(rect[:, :, None], patch, canvas)
    label = ~rect if swap else rect
    return PixelSample(out, StrokeMask(label.astype(np.uint8)), "cutmix", tuple(source_ids))


def whole_sample(image, label: int, source_ids: Sequence[str] = ()) -> PixelSample:
    img = imaging.check_image(image)
    plane = np.full(img.shape[:2], int(bool(label)), dtype=np.uint8)
    return PixelSample(img, StrokeMask(plane), "whole", tuple(source_ids))


# ---------------------------------------------------------------- pixel training

@dataclass
class PixelTrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hflip: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "seed": self.seed,
                "hflip": self.hflip}

    @classmethod
    def from_dict(cls, d: dict) -> "PixelTrainConfig":
        return cls(**d)


def _as_pairs(samples: Iterable):
    images, masks, prov, sources = [], [], {}, set()
    for s in samples:
        if isinstance(s, PixelSample):
            img, m = s.image, s.mask.plane
            prov[s.provenance] = prov.get(s.provenance, 0) + 1
            sources.update(s.source_ids)
        else:
            img, m = s
            img = imaging.check_image(img)
            m = StrokeMask(np.asarray(m).round()).plane
        images.append(img)
        masks.append(m)
    return images, masks, prov, sorted(sources)


def train_pixel_detector(samples, config: PixelTrainConfig | None = None, input_size: int | None = None,
                         model: D.DetectorModel | None = None) -> D.DetectorModel:
    """Fit the pixel net with weighted Dice on a list of :class:`PixelSample` (or (image, mask) pairs)."""
    config = config or PixelTrainConfig()
    config.validate()
    images, masks, prov, sources = _as_pairs(samples)
    if not images:
        raise ValueError("no training samples")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"training images differ in shape: {sorted(shapes)}")
    h, w, _ = images[0].shape
    if h != w or h % 8:
        raise ValueError(f"pixel training needs square images with sides divisible by 8, got {h}x{w}")
    if input_size is not None and input_size != h:
        raise ValueError(f"input_size {input_size} does not match image size {h}")
    x_all = np.stack(images)
    m_all = np.stack(masks).astype(np.float32)
    model = model.clone() if model is not None else D.build_pixel_net(h, seed=config.seed)
    opt = D.T.Adam(learning_rate=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    losses = []
    for epoch in range(config.epochs):
        rng = derive_rng(config.seed, "pixel", epoch)
        order = rng.permutation(len(x_all))
        flips = rng.random(len(x_all)) < 0.5 if config.hflip else np.zeros(len(x_all), dtype=bool)
        batch_losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, m = x_all[idx].copy(), m_all[idx].copy()
            f = flips[idx]
            x[f] = x[f, :, ::-1]
            m[f] = m[f, :, ::-1]
            batch_losses.append(D.pixel_step(model, opt, D.to_nchw(x), m))
        losses.append(float(np.mean(batch_losses)))
        emit("pixel_epoch_end", epoch=epoch + 1, loss=losses[-1], batches=len(batch_losses))
    model.stage = 0
    model.metadata.update({"epoch_losses": losses, "provenance": prov, "source_ids": sources,
                           "n_samples": len(images), "train_config": config.to_dict()})
    return model


def evaluate_pixel(model: D.DetectorModel, samples: Sequence[PixelSample], threshold: float = 0.5,
                   batch_size: int = 64) -> dict[str, float]:
    """Pixel accuracy / precision / recall / F1 pooled over every pixel of every sample."""
    if not samples:
        raise ValueError("no evaluation samples")
    pred = D.predict_masks(model, np.stack([s.image for s in samples]), batch_size=batch_size)
    target = np.stack([s.mask.plane for s in samples])
    return D.pixel_metrics(pred, target, threshold)


# ---------------------------------------------------------------- persistence

def save_mask_png(mask: StrokeMask, path) -> None:
    Image.fromarray((mask.plane * 255).astype(np.uint8), mode="L").save(str(path), format="PNG")


def load_mask_png(path) -> StrokeMask:
    with Image.open(path) as im:
        if im.format != "PNG" or im.mode != "L":
            raise ValueError(f"{path}: expected a single-channel PNG mask, got {im.format} {im.mode}")
        arr = np.asarray(im)
    if not np.isin(arr, (0, 255)).all():
        raise ValueError(f"{path}: mask values must be 0 or 255")
    return StrokeMask((arr == 255).astype(np.uint8))


def save_pixel_dataset(samples: Sequence[PixelSample], root, source: str, split: str) -> Path:
    """Write ``<root>/<source>/<split>/{images,masks}/NNNNNN.png``."""
    base = Path(root) / source / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        imaging.save_png(s.image, base / "images" / f"{i:06d}.png")
        save_mask_png(s.mask, base / "masks" / f"{i:06d}.png")
    return base


def load_pixel_dataset(root, source: str, split: str, provenance: str = "simulated_inpaint") -> list[PixelSample]:
    base = Path(root) / source / split
    imgs = sorted((base / "images").glob("*.png"))
    masks = sorted((base / "masks").glob("*.png"))
    if not imgs:
        raise FileNotFoundError(f"no images under {base / 'images'}")
    if [p.name for p in imgs] != [p.name for p in masks]:
        raise ValueError(f"{base}: images and masks do not pair up")
    return [PixelSample(imaging.load_png(i), load_mask_png(m), provenance, (source,)) for i, m in zip(imgs, masks)]


# ---------------------------------------------------------------- dataset builders

def build_inpaint_set(corpus, source_id: str, n: int, split: str = "train", spec: MaskSpec | None = None,
                      seed: int = 0) -> list[PixelSample]:
    """Inpaint real ``split`` images with ``source_id``'s fingerprint, one sample per image (cycled)."""
    manifest = corpus.manifest
    source = manifest.source(source_id)
    if source.fingerprint is None:
        raise ValueError(f"source {source_id!r} has no fingerprint to inpaint with")
    originals = corpus.images(manifest.real.id, split)
    size = manifest.image_size
    out = []
    for i in range(n):
        rng = derive_rng(seed, "inpaint", source_id, split, i)
        out.append(inpaint_sample(prepare_original(originals[i % len(originals)], size), source.fingerprint,
                                  rng, spec, source_id))
    return out


def build_cutmix_set(corpus, source_id: str, n: int, split: str = "train", seed: int = 0) -> list[PixelSample]:
    real = corpus.images(corpus.manifest.real.id, split)
    fake = corpus.images(source_id, split)
    out = []
    for i in range(n):
        rng = derive_rng(seed, "cutmix", source_id, split, i)
        r = real[int(rng.integers(len(real)))]
        f = fake[int(rng.integers(len(fake)))]
        out.append(cutmix_sample(r, f, rng, source_ids=(source_id,)))
    return out


def build_whole_set(corpus, source_id: str, n: int, split: str = "train", seed: int = 0) -> list[PixelSample]:
    """Alternating whole real (all-zero mask) and whole fake (all-one mask) images."""
    real = corpus.images(corpus.manifest.real.id, split)
    fake = corpus.images(source_id, split)
    rng = derive_rng(seed, "whole", source_id, split)
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(whole_sample(real[int(rng.integers(len(real)))], 0, (source_id,)))
        else:
            out.append(whole_sample(fake[int(rng.integers(len(fake)))], 1, (source_id,)))
    return out
