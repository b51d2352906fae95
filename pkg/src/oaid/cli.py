"""Command-line entry point: ``oaid <group> <action>``.

Every command validates its inputs before writing anything. Exit status is
0 on success, 1 for invalid configuration or inputs, 2 for failures while
running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import corpus as C
from . import detector as D
from . import inpaint as I
from . import metrics as M
from . import online_train as O
from .augment import AugmentConfig
from .events import JsonLineFormatter, emit

log = logging.getLogger("oaid.cli")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    seed: int | None = None
    out: str | None = None
    threads: int | None = None
    image_size: int | None = None
    crop_size: int | None = None
    train: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    mask: dict = field(default_factory=dict)
    pixel: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{p}: unknown config keys {sorted(unknown)}")
        cfg = cls(**data)
        if cfg.manifest is not None and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str((p.parent / cfg.manifest).resolve())
        return cfg

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required (--seed or \"seed\" in the config)")
        return int(self.seed)

    def require_out(self) -> Path:
        if not self.out:
            raise ConfigError("an output directory is required (--out)")
        return Path(self.out)

    def augment_config(self) -> AugmentConfig:
        d = dict(self.augment)
        if self.crop_size is not None:
            d["crop_size"] = self.crop_size
        return AugmentConfig.from_dict(d) if d else AugmentConfig()

    def train_config(self) -> O.TrainConfig:
        d = dict(self.train)
        d["seed"] = self.require_seed()
        d["augment"] = self.augment_config()
        return O.TrainConfig(**d)

    def mask_spec(self) -> I.MaskSpec:
        return I.MaskSpec.from_dict(self.mask) if self.mask else I.MaskSpec()

    def pixel_config(self) -> I.PixelTrainConfig:
        d = dict(self.pixel)
        d["seed"] = self.require_seed()
        return I.PixelTrainConfig(**d)


def _open_corpus(path) -> C.Corpus:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"no corpus at {p} (manifest.json missing)")
    return C.Corpus.open(p)


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands
# each returns a zero-argument callable that does the work, after validating

def cmd_corpus_gen(cfg: RunConfig, args) -> Callable[[], None]:
    out = cfg.require_out()
    manifest_path = args.manifest or cfg.manifest
    if manifest_path:
        manifest = C.Manifest.load(_existing(manifest_path, "manifest"))
        if cfg.seed is not None:
            manifest.seed = int(cfg.seed)
        if cfg.image_size is not None:
            manifest.image_size = int(cfg.image_size)
    else:
        manifest = C.default_manifest(seed=cfg.require_seed(), image_size=cfg.image_size or 64)
    C.build_timeline(manifest)

    def run():
        C.materialize_corpus(manifest, out)
        for s in [manifest.real] + manifest.sources:
            print(f"{s.id}\t" + "\t".join(f"{k}={s.counts[k]}" for k in C.SPLITS))
    return run


def cmd_train_online(cfg: RunConfig, args) -> Callable[[], None]:
    out = cfg.require_out()
    train = cfg.train_config()
    corpus = _open_corpus(args.corpus)
    timeline = C.build_timeline(corpus.manifest)
    if args.stages is not None and not 1 <= args.stages <= timeline.n:
        raise ConfigError(f"--stages must be in 1..{timeline.n}")
    if corpus.manifest.image_size < train.augment.crop_size:
        raise ConfigError(f"crop size {train.augment.crop_size} exceeds image size {corpus.manifest.image_size}")

    def run():
        ckpts = O.run_online(timeline, corpus, train, run_dir=out, stages=args.stages)
        for c in ckpts:
            print(f"stage {c.stage}\t{c.source_id}\t{O.checkpoint_name(c.stage, c.source_id)}")
    return run


def _load_run(run_dir: Path, timeline) -> list[O.StageCheckpoint]:
    ckpts = []
    for k, s in enumerate(timeline.sources, start=1):
        p = run_dir / O.checkpoint_name(k, s.id)
        if not p.exists():
            if k == 1:
                raise ConfigError(f"missing checkpoint {p}")
            break
        ckpts.append(O.load_checkpoint(p))
    return ckpts


def cmd_eval_matrix(cfg: RunConfig, args) -> Callable[[], None]:
    out = cfg.require_out()
    corpus = _open_corpus(args.corpus)
    timeline = C.build_timeline(corpus.manifest)
    run_dir = _existing(args.run, "run directory")
    ckpts = _load_run(run_dir, timeline)
    augment = cfg.augment_config()
    manifest_path = run_dir / "run_manifest.json"
    if not cfg.augment and cfg.crop_size is None and manifest_path.exists():
        augment = AugmentConfig.from_dict(json.loads(manifest_path.read_text())["config"]["augment"])

    def run():
        matrix = M.build_matrix(ckpts, timeline, corpus, augment)
        for rec in matrix.to_records():
            emit("cell", **rec)
        for p in M.emit_reports(matrix, out):
            print(p)
    return run


def cmd_inpaint_gen(cfg: RunConfig, args) -> Callable[[], None]:
    out = cfg.require_out()
    seed = cfg.require_seed()
    corpus = _open_corpus(args.corpus)
    spec = cfg.mask_spec()
    sources = args.source or []
    if not sources:
        raise ConfigError("--source is required")
    for sid in sources:
        try:
            src = corpus.manifest.source(sid)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        if src.fingerprint is None:
            raise ConfigError(f"source {sid!r} has no fingerprint")
    n = args.n if args.n is not None else corpus.manifest.real.counts[args.split]
    if n < 1:
        raise ConfigError("--n must be positive")

    def run():
        for sid in sources:
            samples = I.build_inpaint_set(corpus, sid, n, split=args.split, spec=spec, seed=seed)
            base = I.save_pixel_dataset(samples, out, sid, args.split)
            print(f"{sid}\t{args.split}\t{len(samples)}\t{base}")
    return run


def cmd_train_pixel(cfg: RunConfig, args) -> Callable[[], None]:
    out = cfg.require_out()
    pcfg = cfg.pixel_config()
    sources = args.source or []
    if not sources:
        raise ConfigError("--source is required")
    if args.kind == "inpaint":
        data = _existing(args.data, "pixel dataset") if args.data else None
        if data is None:
            raise ConfigError("--data is required for --kind inpaint")
        for sid in sources:
            _existing(data / sid / args.split / "images", "pixel dataset split")
    else:
        if not args.corpus:
            raise ConfigError(f"--corpus is required for --kind {args.kind}")
        corpus = _open_corpus(args.corpus)
        for sid in sources:
            try:
                corpus.manifest.source(sid)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None

    def run():
        samples = []
        for sid in sources:
            if args.kind == "inpaint":
                samples += I.load_pixel_dataset(data, sid, args.split)
            else:
                n = args.n if args.n is not None else corpus.manifest.real.counts[args.split]
                build = I.build_cutmix_set if args.kind == "cutmix" else I.build_whole_set
                samples += build(corpus, sid, n, split=args.split, seed=pcfg.seed)
        model = I.train_pixel_detector(samples, pcfg)
        model.metadata["kind"] = args.kind
        out.mkdir(parents=True, exist_ok=True)
        path = out / "pixel.ckpt"
        D.save_model(model, path)
        print(path)
    return run


def cmd_eval_pixel(cfg: RunConfig, args) -> Callable[[], None]:
    out = Path(cfg.out) if cfg.out else None
    model_path = _existing(args.model, "model")
    data = _existing(args.data, "pixel dataset")
    sources = args.source or []
    if not sources:
        raise ConfigError("--source is required")
    for sid in sources:
        _existing(data / sid / args.split / "images", "pixel dataset split")
    model = D.load_model(model_path)
    if model.head != "pixel":
        raise ConfigError(f"{model_path} is not a pixel model")

    def run():
        rows = {}
        for sid in sources:
            rows[sid] = I.evaluate_pixel(model, I.load_pixel_dataset(data, sid, args.split))
        cols = ("accuracy", "precision", "recall", "f1")
        print("\t".join(("source",) + cols))
        for sid, r in rows.items():
            print("\t".join([sid] + [f"{r[c]:.4f}" for c in cols]))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "pixel_metrics.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return run


COMMANDS = {
    ("corpus", "gen"): cmd_corpus_gen,
    ("train", "online"): cmd_train_online,
    ("eval", "matrix"): cmd_eval_matrix,
    ("inpaint", "gen"): cmd_inpaint_gen,
    ("train", "pixel"): cmd_train_pixel,
    ("eval", "pixel"): cmd_eval_pixel,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog="oaid", description="Online synthetic-image detection toolkit",
                                     parents=[common])
    groups = parser.add_subparsers(dest="group", required=True)

    corpus = groups.add_parser("corpus").add_subparsers(dest="action", required=True)
    p = corpus.add_parser("gen", parents=[common], help="materialise a procedural corpus")
    p.add_argument("--manifest", help="manifest JSON (default: built-in 6-source manifest)")

    train = groups.add_parser("train").add_subparsers(dest="action", required=True)
    p = train.add_parser("online", parents=[common], help="stage-wise training over the timeline")
    p.add_argument("--corpus", required=True, help="corpus root written by 'corpus gen'")
    p.add_argument("--stages", type=int, help="stop after this many stages (rerun to resume)")
    p = train.add_parser("pixel", parents=[common], help="train the pixel-level detector")
    p.add_argument("--kind", choices=("inpaint", "cutmix", "whole"), default="inpaint")
    p.add_argument("--data", help="pixel dataset root (for --kind inpaint)")
    p.add_argument("--corpus", help="corpus root (for --kind cutmix/whole)")
    p.add_argument("--source", action="append", help="generator source id; repeat to mix sources")
    p.add_argument("--split", default="train")
    p.add_argument("--n", type=int, help="samples per source for cutmix/whole (default: real count of the split)")

    ev = groups.add_parser("eval").add_subparsers(dest="action", required=True)
    p = ev.add_parser("matrix", parents=[common], help="score every stage on every test split")
    p.add_argument("--corpus", required=True, help="corpus root written by 'corpus gen'")
    p.add_argument("--run", required=True, help="directory holding stage checkpoints")
    p = ev.add_parser("pixel", parents=[common], help="pixel accuracy/precision/recall/F1 table")
    p.add_argument("--model", required=True, help="pixel checkpoint from 'train pixel'")
    p.add_argument("--data", required=True, help="pixel dataset root from 'inpaint gen'")
    p.add_argument("--source", action="append", help="source id; repeat for several")
    p.add_argument("--split", default="test")

    inp = groups.add_parser("inpaint").add_subparsers(dest="action", required=True)
    p = inp.add_parser("gen", parents=[common], help="simulated-inpaint composites and masks")
    p.add_argument("--corpus", required=True, help="corpus root written by 'corpus gen'")
    p.add_argument("--source", action="append", help="generator source id; repeat for several")
    p.add_argument("--split", default="train")
    p.add_argument("--n", type=int, help="composites per source (default: real count of the split)")
    return parser


def _resolve_config(args) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = RunConfig.load(path) if path else RunConfig()
    for name in ("seed", "out", "threads"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if cfg.seed is not None and cfg.seed < 0:
        raise ConfigError("--seed must be non-negative")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("oaid")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "log_level", "INFO"))
    try:
        cfg = _resolve_config(args)
        action = COMMANDS[(args.group, args.action)](cfg, args)
    except (ValueError, KeyError, FileNotFoundError, D.CheckpointError) as exc:
        log.error("invalid input: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if cfg.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=cfg.threads):
                action()
        else:
            action()
    except Exception as exc:
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
