"""Procedural real/generated image corpus on a release-ordered timeline.

Real images are octave value noise with a colour palette and a few soft
shapes. Generated sources take the same kind of base image and stamp a
generator fingerprint on it (channel mixing, block-DCT quantisation,
resampling artefacts, a periodic spectral spike). Sources can instead point
at a directory of PNGs laid out as ``<dir>/<split>/*.png``.
"""
from __future__ import annotations

import copy
import json
import logging
import re
import shutil
import tempfile
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import jsonschema
import numpy as np

from . import imaging
from ._rng import derive_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# JPEG luminance table (quality 50), used as the quantisation shape
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


# ---------------------------------------------------------------- fingerprints

@dataclass(frozen=True)
class UpsampleArtifact:
    factor: int
    alpha: float


@dataclass(frozen=True)
class SpectralSpike:
    fx: float
    fy: float
    amplitude: float


@dataclass(frozen=True)
class DctQuantization:
    scale: float


@dataclass(frozen=True)
class FingerprintSpec:
    family: str
    upsample_artifact: UpsampleArtifact | None = None
    spectral_spike: SpectralSpike | None = None
    dct_quantization: DctQuantization | None = None
    channel_mix: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        up = self.upsample_artifact
        if up is not None:
            if not 0.0 <= up.alpha <= 1.0:
                raise ValueError("upsample alpha must be in [0, 1]")
            if up.factor < 2:
                raise ValueError("upsample factor must be >= 2")
        spike = self.spectral_spike
        if spike is not None and not 0.0 <= spike.amplitude <= 0.1:
            raise ValueError("spike amplitude must be in [0, 0.1]")
        if self.dct_quantization is not None and self.dct_quantization.scale < 0:
            raise ValueError("dct quantisation scale must be non-negative")
        if self.channel_mix is not None:
            m = np.asarray(self.channel_mix, dtype=np.float64)
            if m.shape != (3, 3):
                raise ValueError("channel_mix must be 3x3")
            if np.any(np.abs(m.sum(axis=1) - 1.0) > 0.2):
                raise ValueError("channel_mix rows must sum to 1 +/- 0.2")
            object.__setattr__(self, "channel_mix", tuple(tuple(float(v) for v in row) for row in m))

    @property
    def is_identity(self) -> bool:
        return (self.upsample_artifact is None and self.spectral_spike is None
                and self.dct_quantization is None and self.channel_mix is None)

    def to_dict(self) -> dict:
        d = {"family": self.family}
        for name in ("upsample_artifact", "spectral_spike", "dct_quantization"):
            value = getattr(self, name)
            if value is not None:
                d[name] = asdict(value)
        if self.channel_mix is not None:
            d["channel_mix"] = [list(row) for row in self.channel_mix]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintSpec":
        up = d.get("upsample_artifact")
        spike = d.get("spectral_spike")
        quant = d.get("dct_quantization")
        mix = d.get("channel_mix")
        return cls(
            family=d.get("family", ""),
            upsample_artifact=UpsampleArtifact(int(up["factor"]), float(up["alpha"])) if up else None,
            spectral_spike=SpectralSpike(float(spike["fx"]), float(spike["fy"]), float(spike["amplitude"])) if spike else None,
            dct_quantization=DctQuantization(float(quant["scale"])) if quant else None,
            channel_mix=tuple(tuple(r) for r in mix) if mix else None,
        )

    def perturbed(self, rng: np.random.Generator, spread: float = 0.2) -> "FingerprintSpec":
        """A sibling version: every continuous parameter moved by +/- ``spread``."""
        def jitter(v):
            return float(v * (1.0 + rng.choice([-1.0, 1.0]) * spread))

        up = self.upsample_artifact
        spike = self.spectral_spike
        quant = self.dct_quantization
        mix = None
        if self.channel_mix is not None:
            m = np.asarray(self.channel_mix)
            off = m - np.eye(3)
            mix = np.eye(3) + off * (1.0 + rng.choice([-1.0, 1.0]) * spread)
        return FingerprintSpec(
            family=self.family,
            upsample_artifact=UpsampleArtifact(up.factor, min(1.0, jitter(up.alpha))) if up else None,
            spectral_spike=SpectralSpike(jitter(spike.fx), jitter(spike.fy), min(0.1, jitter(spike.amplitude))) if spike else None,
            dct_quantization=DctQuantization(jitter(quant.scale)) if quant else None,
            channel_mix=mix,
        )

    def scaled(self, strength: float) -> "FingerprintSpec":
        """Same fingerprint with every artefact attenuated towards identity."""
        up = self.upsample_artifact
        spike = self.spectral_spike
        quant = self.dct_quantization
        mix = None
        if self.channel_mix is not None:
            mix = np.eye(3) + (np.asarray(self.channel_mix) - np.eye(3)) * strength
        return FingerprintSpec(
            family=self.family,
            upsample_artifact=UpsampleArtifact(up.factor, up.alpha * strength) if up else None,
            spectral_spike=SpectralSpike(spike.fx, spike.fy, spike.amplitude * strength) if spike else None,
            dct_quantization=DctQuantization(quant.scale * strength) if quant else None,
            channel_mix=mix,
        )


# ---------------------------------------------------------------- synthesis

def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """One octave of smooth value noise on a ``cells`` x ``cells`` lattice."""
    lattice = rng.random((cells + 1, cells + 1))
    offset = rng.random(2)
    coords = (np.arange(size) + 0.5) / size * (cells - 1) + offset[:, None]
    coords = np.minimum(coords, cells - 1e-9)
    i = np.floor(coords).astype(int)
    f = _smoothstep(coords - i)
    fy, fx = f[0][:, None], f[1][None, :]
    iy, ix = i[0][:, None], i[1][None, :]
    a = lattice[iy, ix]
    b = lattice[iy, ix + 1]
    c = lattice[iy + 1, ix]
    d = lattice[iy + 1, ix + 1]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    return top + (bot - top) * fy


def octave_noise(rng: np.random.Generator, size: int, octaves: int = 4, persistence: float = 0.5) -> np.ndarray:
    total = np.zeros((size, size))
    amp, norm = 1.0, 0.0
    cells = max(2, size // 2 ** octaves)
    for _ in range(octaves):
        total += amp * value_noise(rng, size, min(cells, size))
        norm += amp
        amp *= persistence
        cells *= 2
    return total / norm


def synth_real_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural stand-in for a photograph: palette-mapped octave noise, soft shapes, sensor grain."""
    if size < 32:
        raise ValueError("size must be >= 32")
    t = octave_noise(rng, size)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    n_colors = int(rng.integers(2, 4))
    palette = rng.uniform(0.1, 0.9, size=(n_colors, 3))
    pos = t * (n_colors - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_colors - 2)
    frac = (pos - lo)[:, :, None]
    img = palette[lo] * (1 - frac) + palette[lo + 1] * frac

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(int(rng.integers(1, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2) * size
        softness = rng.uniform(0.05, 0.3)
        if rng.random() < 0.5:
            d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        else:
            d = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx)
        alpha = np.clip((1.0 - d) / softness, 0.0, 1.0)[:, :, None] * rng.uniform(0.5, 0.9)
        img = img * (1 - alpha) + color * alpha
    # sensor grain: fine texture that resampling and quantisation destroy
    grain = rng.uniform(0.025, 0.04)
    img = img + rng.normal(0.0, grain, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _apply_channel_mix(img, mix):
    return img @ np.asarray(mix, dtype=np.float64).T


def _apply_dct_quantization(img, scale):
    if scale <= 0:
        return img
    q = np.tile(JPEG_LUMA_TABLE * scale / 255.0, (1, 1))
    out = np.empty_like(img)
    h, w = img.shape[:2]
    for c in range(img.shape[2]):
        coeffs = imaging.block_dct8(img[:, :, c])
        ch, cw = coeffs.shape
        qt = np.tile(q, (ch // 8, cw // 8))
        coeffs = np.round(coeffs / qt) * qt
        out[:, :, c] = imaging.block_idct8(coeffs, (h, w))
    return out


def _apply_upsample_artifact(img, factor, alpha):
    h, w = img.shape[:2]
    hh, ww = h - h % factor, w - w % factor
    core = img[:hh, :ww]
    low = core.reshape(hh // factor, factor, ww // factor, factor, -1).mean(axis=(1, 3))
    up = np.repeat(np.repeat(low, factor, axis=0), factor, axis=1)
    out = img.copy()
    out[:hh, :ww] = (1 - alpha) * core + alpha * up
    return out


def _apply_spectral_spike(img, spike, phase):
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    wave = spike.amplitude * np.cos(2 * np.pi * (spike.fx * xx / w + spike.fy * yy / h) + phase)
    return img + wave[:, :, None]


def apply_fingerprint(image, fp: FingerprintSpec, rng: np.random.Generator) -> np.ndarray:
    """channel_mix -> dct_quantization -> upsample_artifact -> spectral_spike, clipping after each."""
    img = imaging.check_image(image).astype(np.float64)
    # the phase draw happens unconditionally to keep the stream layout fixed
    phase = float(rng.uniform(0, 2 * np.pi))
    if fp.channel_mix is not None and img.shape[2] == 3:
        img = np.clip(_apply_channel_mix(img, fp.channel_mix), 0, 1)
    if fp.dct_quantization is not None:
        img = np.clip(_apply_dct_quantization(img, fp.dct_quantization.scale), 0, 1)
    if fp.upsample_artifact is not None:
        up = fp.upsample_artifact
        img = np.clip(_apply_upsample_artifact(img, up.factor, up.alpha), 0, 1)
    if fp.spectral_spike is not None:
        img = np.clip(_apply_spectral_spike(img, fp.spectral_spike, phase), 0, 1)
    return img.astype(np.float32)


def synth_generated_image(rng: np.random.Generator, size: int, fp: FingerprintSpec) -> np.ndarray:
    base = synth_real_image(rng, size)
    return apply_fingerprint(base, fp, rng)


# ---------------------------------------------------------------- manifest / timeline

_DATE = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")

_SOURCE_SCHEMA = {
    "type": "object",
    "required": ["id", "name", "kind", "counts"],
    "properties": {
        "id": {"type": "string", "minLength": 1, "pattern": r"^[A-Za-z0-9_.-]+$"},
        "name": {"type": "string"},
        "release_date": {"type": "string"},
        "kind": {"enum": ["real", "generated"]},
        "fingerprint": {"type": ["object", "null"]},
        "dir": {"type": ["string", "null"]},
        "counts": {
            "type": "object",
            "required": list(SPLITS),
            "properties": {s: {"type": "integer", "minimum": 0} for s in SPLITS},
        },
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["seed", "image_size", "real", "sources"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "image_size": {"type": "integer", "minimum": 32},
        "real": _SOURCE_SCHEMA,
        "sources": {"type": "array", "items": _SOURCE_SCHEMA},
    },
}


class ManifestError(ValueError):
    pass


@dataclass
class GeneratorSource:
    id: str
    name: str
    kind: str
    counts: dict[str, int]
    release_date: str | None = None
    fingerprint: FingerprintSpec | None = None
    dir: str | None = None
    order: int = 0

    def to_dict(self) -> dict:
        d = {"id": self.id, "name": self.name, "kind": self.kind}
        if self.release_date is not None:
            d["release_date"] = self.release_date
        if self.fingerprint is not None:
            d["fingerprint"] = self.fingerprint.to_dict()
        if self.dir is not None:
            d["dir"] = self.dir
        d["counts"] = dict(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSource":
        fp = d.get("fingerprint")
        return cls(
            id=d["id"],
            name=d["name"],
            kind=d["kind"],
            counts={s: int(d["counts"][s]) for s in SPLITS},
            release_date=d.get("release_date"),
            fingerprint=FingerprintSpec.from_dict(fp) if fp else None,
            dir=d.get("dir"),
        )


@dataclass
class Manifest:
    seed: int
    image_size: int
    real: GeneratorSource
    sources: list[GeneratorSource]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "real": self.real.to_dict(),
            "sources": [s.to_dict() for s in self.sources],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            jsonschema.validate(d, MANIFEST_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ManifestError(f"invalid manifest: {exc.message}") from None
        real = GeneratorSource.from_dict(d["real"])
        sources = [GeneratorSource.from_dict(s) for s in d["sources"]]
        manifest = cls(seed=int(d["seed"]), image_size=int(d["image_size"]), real=real, sources=sources)
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if self.real.kind != "real":
            raise ManifestError("the real source must have kind 'real'")
        if self.real.fingerprint is not None:
            raise ManifestError("the real source cannot carry a fingerprint")
        ids = [self.real.id] + [s.id for s in self.sources]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate source ids: {dupes}")
        for s in self.sources:
            if s.kind != "generated":
                raise ManifestError(f"source {s.id!r}: only the real source may have kind 'real'")
            if (s.fingerprint is None) == (s.dir is None):
                raise ManifestError(f"source {s.id!r}: exactly one of fingerprint/dir is required")
            if not s.release_date or not _DATE.match(s.release_date):
                raise ManifestError(f"source {s.id!r}: release_date must be 'YYYY-MM', got {s.release_date!r}")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from None
        manifest = cls.from_dict(data)
        # directory backings are relative to the manifest file
        for s in [manifest.real] + manifest.sources:
            if s.dir is not None and not Path(s.dir).is_absolute():
                s.dir = str((path.parent / s.dir).resolve())
        return manifest

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")

    def source(self, source_id: str) -> GeneratorSource:
        for s in [self.real] + self.sources:
            if s.id == source_id:
                return s
        raise KeyError(f"unknown source {source_id!r}")


@dataclass
class Timeline:
    real: GeneratorSource
    sources: list[GeneratorSource] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.sources)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sources]

    def through(self, stage: int) -> list[GeneratorSource]:
        """Generated sources seen by the end of ``stage`` (1-based)."""
        return self.sources[:stage]


def build_timeline(manifest: Manifest) -> Timeline:
    """Sort generated sources by release date and number them 1..N.

    Ties keep manifest order and emit a warning.
    """
    manifest.validate()
    sources = [copy.copy(s) for s in manifest.sources]
    ordered = sorted(sources, key=lambda s: s.release_date)  # stable
    dates = [s.release_date for s in ordered]
    for d in sorted(set(dates)):
        if dates.count(d) > 1:
            tied = [s.id for s in ordered if s.release_date == d]
            warnings.warn(f"sources {tied} share release date {d}; keeping manifest order", stacklevel=2)
    for k, s in enumerate(ordered, start=1):
        s.order = k
    return Timeline(real=copy.copy(manifest.real), sources=ordered)


# ---------------------------------------------------------------- default corpus

def _mix(off_diag: float, rotate: int) -> list[list[float]]:
    m = np.eye(3) * (1.0 - off_diag)
    for i in range(3):
        m[i, (i + rotate) % 3] += off_diag
    return m.tolist()


def default_fingerprints() -> dict[str, FingerprintSpec]:
    """Three families, two versions each; version 2 perturbs every parameter by 20%."""
    a1 = FingerprintSpec(family="pixel_unet",
                         spectral_spike=SpectralSpike(fx=11.0, fy=5.0, amplitude=0.05),
                         channel_mix=tuple(map(tuple, _mix(0.15, 1))))
    b1 = FingerprintSpec(family="latent",
                         dct_quantization=DctQuantization(scale=3.0))
    c1 = FingerprintSpec(family="upsampler",
                         upsample_artifact=UpsampleArtifact(factor=2, alpha=1.0))
    rng = np.random.default_rng(2023)
    return {
        "a1": a1, "a2": a1.perturbed(rng),
        "b1": b1, "b2": b1.perturbed(rng),
        "c1": c1, "c2": c1.perturbed(rng),
    }


DEFAULT_RELEASES = [
    ("a1", "PixelUNet v1", "2020-06"),
    ("b1", "Latent v1", "2021-05"),
    ("a2", "PixelUNet v2", "2021-12"),
    ("c1", "Upsampler v1", "2022-04"),
    ("b2", "Latent v2", "2022-08"),
    ("c2", "Upsampler v2", "2023-01"),
]


def default_manifest(seed: int = 0, image_size: int = 64, counts=(400, 50, 100)) -> Manifest:
    fps = default_fingerprints()
    c = dict(zip(SPLITS, counts))
    real = GeneratorSource(id="real", name="Procedural photographs", kind="real", counts=dict(c))
    sources = [
        GeneratorSource(id=sid, name=name, kind="generated", counts=dict(c),
                        release_date=date, fingerprint=fps[sid])
        for sid, name, date in DEFAULT_RELEASES
    ]
    return Manifest(seed=seed, image_size=image_size, real=real, sources=sources)


# ---------------------------------------------------------------- materialisation

def quantize8(image) -> np.ndarray:
    return (np.rint(np.asarray(image) * 255.0) / 255.0).astype(np.float32)


def synth_sample(manifest: Manifest, source: GeneratorSource, split: str, index: int) -> np.ndarray:
    """One procedural sample, already at 8-bit precision so memory and disk agree."""
    rng = derive_rng(manifest.seed, source.id, split, index)
    if source.kind == "real":
        img = synth_real_image(rng, manifest.image_size)
    else:
        img = synth_generated_image(rng, manifest.image_size, source.fingerprint)
    return quantize8(img)


def _dir_files(source: GeneratorSource, split: str) -> list[Path]:
    d = Path(source.dir) / split
    files = sorted(d.glob("*.png"))
    if len(files) < source.counts[split]:
        raise ManifestError(
            f"source {source.id!r}: {d} has {len(files)} PNGs, manifest expects {source.counts[split]}"
        )
    return files[:source.counts[split]]


def materialize_corpus(manifest: Manifest, out_dir) -> Path:
    """Write every procedural split as PNGs plus the resolved manifest.

    Output is assembled in a sibling temp directory and renamed into place,
    so a failure leaves no partial corpus behind.
    """
    out_dir = Path(out_dir)
    manifest.validate()
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        for source in [manifest.real] + manifest.sources:
            if source.dir is not None:
                for split in SPLITS:
                    for f in _dir_files(source, split):
                        imaging.load_png(f)
                continue
            for split in SPLITS:
                split_dir = tmp / source.id / split
                split_dir.mkdir(parents=True, exist_ok=True)
                for i in range(source.counts[split]):
                    imaging.save_png(synth_sample(manifest, source, split, i), split_dir / f"{i:06d}.png")
            log.info("materialised %s: %s", source.id, source.counts)
        manifest.save(tmp / "manifest.json")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


class Corpus:
    """Image access for a manifest, from disk when materialised, else synthesised in memory."""

    def __init__(self, manifest: Manifest, root=None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    @classmethod
    def open(cls, root) -> "Corpus":
        root = Path(root)
        return cls(Manifest.load(root / "manifest.json"), root)

    def images(self, source_id: str, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        key = (source_id, split)
        if key not in self._cache:
            source = self.manifest.source(source_id)
            if source.counts[split] < 1:
                raise ManifestError(f"source {source_id!r} has no {split} split")
            if source.dir is not None:
                imgs = [imaging.load_png(f) for f in _dir_files(source, split)]
            elif self.root is not None:
                d = self.root / source_id / split
                imgs = [imaging.load_png(d / f"{i:06d}.png") for i in range(source.counts[split])]
            else:
                imgs = [synth_sample(self.manifest, source, split, i) for i in range(source.counts[split])]
            imgs = [np.repeat(im, 3, axis=2) if im.shape[2] == 1 else im for im in imgs]
            self._cache[key] = np.stack(imgs)
        return self._cache[key]


# ---------------------------------------------------------------- learnability probe

def probe_features(images) -> np.ndarray:
    """(variance of Laplacian, log of top non-DC spectral peak over median) per image."""
    feats = []
    for img in images:
        y = imaging.luma(img).astype(np.float64)
        lap = (-4 * y[1:-1, 1:-1] + y[:-2, 1:-1] + y[2:, 1:-1] + y[1:-1, :-2] + y[1:-1, 2:])
        power = np.abs(np.fft.fft2(y - y.mean())) ** 2
        power[0, 0] = 0.0
        # ignore the lowest frequencies where image content dominates
        fy = np.abs(np.fft.fftfreq(y.shape[0]))[:, None]
        fx = np.abs(np.fft.fftfreq(y.shape[1]))[None, :]
        band = np.maximum(fy, fx) >= 0.0625
        peak = power[band].max() / (np.median(power[band]) + 1e-12)
        feats.append((np.log(lap.var() + 1e-12), np.log(peak)))
    return np.asarray(feats)
