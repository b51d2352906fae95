"""Progressive training over a release-ordered timeline of generator sources.

Stage ``k`` trains on the real source plus generated sources ``1..k``,
starting from stage ``k - 1``'s weights. Nothing from the history is dropped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import detector as D
from . import tensor as T
from ._rng import derive_rng
from .augment import AugmentConfig, apply_train_augment
from .events import emit

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 3e-3
    min_batches: int = 50
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.min_batches < 0:
            raise ValueError("min_batches must be >= 0")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "min_batches": self.min_batches, "lr_schedule": self.lr_schedule,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "seed": self.seed,
                "augment": self.augment.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def learning_rate_at(self, step: int, total: int) -> float:
        """Per-step rate; ``cosine`` anneals from ``learning_rate`` to zero over a stage."""
        if self.lr_schedule == "constant" or total <= 1:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / total))

    def optimizer(self) -> T.Adam:
        return T.Adam(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class SampleRef:
    source_id: str
    index: int
    label: int


def class_balanced_batches(pool: Sequence, batch_size: int, rng: np.random.Generator,
                           label_of: Callable = lambda s: s.label, min_batches: int = 0) -> Iterator[list]:
    """One epoch of batches, each exactly half real (label 0) and half synthetic.

    Each class is drawn from its own stream of reshuffled passes, so the
    synthetic half is uniform over all synthetic samples and every source
    contributes in proportion to its size. An epoch has enough batches to
    see the larger class once, and never fewer than ``min_batches``.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be a positive even number")
    real = [s for s in pool if label_of(s) == 0]
    fake = [s for s in pool if label_of(s) == 1]
    if not real or not fake:
        raise ValueError("class-balanced sampling needs at least one real and one synthetic sample")
    half = batch_size // 2
    n_batches = max(math.ceil(max(len(real), len(fake)) / half), min_batches)

    def stream(items):
        while True:
            for i in rng.permutation(len(items)):
                yield items[i]

    real_it, fake_it = stream(real), stream(fake)
    for _ in range(n_batches):
        yield [next(real_it) for _ in range(half)] + [next(fake_it) for _ in range(half)]


@dataclass
class StageCheckpoint:
    stage: int
    source_id: str
    model: D.DetectorModel
    cumulative_ids: list[str]
    epoch_losses: list[float] = field(default_factory=list)


class TrainingPool:
    """Train-split images for the real source and the generated sources seen so far."""

    def __init__(self, corpus, real_id: str, fake_ids: Sequence[str], split: str = "train"):
        self.corpus = corpus
        self.real_id = real_id
        self.fake_ids = list(fake_ids)
        self.split = split
        self.images = {sid: corpus.images(sid, split) for sid in [real_id] + self.fake_ids}

    @property
    def source_ids(self) -> list[str]:
        return [self.real_id] + self.fake_ids

    def refs(self) -> list[SampleRef]:
        out = [SampleRef(self.real_id, i, 0) for i in range(len(self.images[self.real_id]))]
        for sid in self.fake_ids:
            out += [SampleRef(sid, i, 1) for i in range(len(self.images[sid]))]
        return out


def train_stage(model: D.DetectorModel, pool: TrainingPool, config: TrainConfig, stage: int,
                optimizer: T.Adam | None = None) -> list[float]:
    """Train ``model`` in place for one stage; returns the per-epoch mean loss."""
    config.validate()
    if model.head != "whole_image":
        raise ValueError("online training needs a whole_image model")
    if model.stage != stage - 1:
        raise ValueError(f"model is at stage {model.stage}; stage {stage} needs stage {stage - 1} weights")
    if len(pool.fake_ids) != stage:
        raise ValueError(f"stage {stage} pool must hold {stage} generated sources, got {len(pool.fake_ids)}")
    opt = optimizer or config.optimizer()
    refs = pool.refs()
    aug = config.augment
    seed = config.seed
    n_real = sum(r.label == 0 for r in refs)
    per_epoch = max(math.ceil(max(n_real, len(refs) - n_real) / (config.batch_size // 2)), config.min_batches)
    total = per_epoch * config.epochs
    step = 0
    epoch_losses = []
    for epoch in range(config.epochs):
        rng = derive_rng(seed, "sampler", stage, epoch)
        losses = []
        for batch in class_balanced_batches(refs, config.batch_size, rng, min_batches=config.min_batches):
            opt.learning_rate = config.learning_rate_at(step, total)
            step += 1
            x = np.stack([
                apply_train_augment(pool.images[r.source_id][r.index], aug,
                                    derive_rng(seed, r.source_id, pool.split, r.index, epoch, stage))
                for r in batch
            ])
            y = np.array([r.label for r in batch])
            losses.append(D.whole_image_step(model, opt, D.to_nchw(x), y))
        epoch_losses.append(float(np.mean(losses)))
        emit("epoch_end", stage=stage, epoch=epoch + 1, loss=epoch_losses[-1], batches=len(losses))
    model.stage = stage
    return epoch_losses


# ---------------------------------------------------------------- persistence

def checkpoint_name(stage: int, source_id: str) -> str:
    return f"stage_{stage}_{source_id}.ckpt"


def save_checkpoint(ckpt: StageCheckpoint, path) -> None:
    model = ckpt.model.clone()
    model.stage = ckpt.stage
    model.metadata.update({"source_id": ckpt.source_id, "cumulative_ids": list(ckpt.cumulative_ids),
                           "epoch_losses": list(ckpt.epoch_losses)})
    D.save_model(model, path)


def load_checkpoint(path) -> StageCheckpoint:
    model = D.load_model(path)
    meta = model.metadata
    if "source_id" not in meta or "cumulative_ids" not in meta:
        raise D.CheckpointError(f"{path}: missing stage metadata")
    return StageCheckpoint(stage=model.stage, source_id=meta["source_id"], model=model,
                           cumulative_ids=list(meta["cumulative_ids"]),
                           epoch_losses=list(meta.get("epoch_losses", [])))


def run_online(timeline, corpus, config: TrainConfig, run_dir=None, stages: int | None = None,
               input_size: int | None = None) -> list[StageCheckpoint]:
    """Train every stage of ``timeline`` in order.

    With ``run_dir`` each stage is written as it completes and a rerun picks
    up after the last checkpoint whose config hash matches.
    """
    config.validate()
    n = timeline.n if stages is None else min(stages, timeline.n)
    size = input_size or config.augment.crop_size
    run_dir = Path(run_dir) if run_dir is not None else None
    digest = config.digest()
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = run_dir / "run_manifest.json"
        info = {"config_hash": digest, "seed": config.seed, "config": config.to_dict(),
                "timeline": timeline.ids}
        if manifest_path.exists():
            prev = json.loads(manifest_path.read_text())
            if prev.get("config_hash") != digest or prev.get("timeline") != timeline.ids:
                raise ValueError(f"{run_dir} holds a run with a different config or timeline")
        else:
            manifest_path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")

    model = D.build_whole_image_net(size, seed=config.seed)
    model.metadata["config_hash"] = digest
    checkpoints: list[StageCheckpoint] = []
    for k in range(1, n + 1):
        source = timeline.sources[k - 1]
        cumulative = [timeline.real.id] + timeline.ids[:k]
        path = run_dir / checkpoint_name(k, source.id) if run_dir is not None else None
        if path is not None and path.exists():
            ckpt = load_checkpoint(path)
            if ckpt.model.metadata.get("config_hash") == digest and ckpt.cumulative_ids == cumulative:
                emit("stage_resumed", stage=k, source=source.id, cumulative=cumulative)
                checkpoints.append(ckpt)
                model = ckpt.model.clone()
                continue
        emit("stage_start", stage=k, source=source.id, cumulative=cumulative)
        pool = TrainingPool(corpus, timeline.real.id, timeline.ids[:k])
        # optimizer moments restart each stage; weights carry over
        losses = train_stage(model, pool, config, k)
        ckpt = StageCheckpoint(stage=k, source_id=source.id, model=model.clone(),
                               cumulative_ids=cumulative, epoch_losses=losses)
        if path is not None:
            save_checkpoint(ckpt, path)
            ckpt = load_checkpoint(path)
        checkpoints.append(ckpt)
        emit("stage_end", stage=k, source=source.id, cumulative=cumulative, losses=losses)
    return checkpoints
