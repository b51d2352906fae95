"""ROC/AuC, average precision, thresholded accuracies and the generalization matrix."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

CELL_METRICS = ("synthetic_accuracy", "real_accuracy", "balanced_accuracy", "auc", "ap",
                "precision", "recall", "f1")
REPORT_FILES = {
    "synthetic_accuracy": "accuracy",
    "real_accuracy": "real_accuracy",
    "balanced_accuracy": "balanced_accuracy",
    "auc": "auc",
    "ap": "ap",
    "precision": "precision",
    "recall": "recall",
    "f1": "f1",
}


def _scores(values, name):
    arr = np.asarray(values, dtype=np.float64).ravel()
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite scores")
    return arr


@dataclass
class ScoreSet:
    real_scores: np.ndarray
    fake_scores: np.ndarray
    source_id: str | None = None
    stage: int | None = None

    def __post_init__(self):
        self.real_scores = _scores(self.real_scores, "real_scores")
        self.fake_scores = _scores(self.fake_scores, "fake_scores")

    def require_both(self):
        if self.real_scores.size == 0 or self.fake_scores.size == 0:
            raise ValueError("both real and fake scores are required")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _sweep(scores: ScoreSet):
    """Cumulative (fp, tp) counts at each distinct threshold, highest first."""
    scores.require_both()
    s = np.concatenate([scores.fake_scores, scores.real_scores])
    y = np.concatenate([np.ones(scores.fake_scores.size, dtype=np.int64),
                        np.zeros(scores.real_scores.size, dtype=np.int64)])
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return s[ends], fp, tp


def roc_curve(scores: ScoreSet) -> RocCurve:
    """ROC points from (0, 0) to (1, 1); tied scores form a single step."""
    thr, fp, tp = _sweep(scores)
    n_neg, n_pos = scores.real_scores.size, scores.fake_scores.size
    fpr = np.r_[0, fp] / n_neg
    tpr = np.r_[0, tp] / n_pos
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=np.r_[np.inf, thr])


def auc(scores: ScoreSet) -> float:
    """Trapezoidal area under the ROC curve.

    Counts are kept integral until the final division, so the result equals
    P(fake > real) + P(tie) / 2 up to one rounding.
    """
    _, fp, tp = _sweep(scores)
    fp = np.r_[0, fp]
    tp = np.r_[0, tp]
    # twice the trapezoid area in count units
    twice = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return twice / (2.0 * scores.real_scores.size * scores.fake_scores.size)


def average_precision(scores: ScoreSet) -> float:
    """Sum of (R_k - R_{k-1}) * P_k over a descending-score sweep, fake = positive."""
    _, fp, tp = _sweep(scores)
    recall = tp / scores.fake_scores.size
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def synthetic_accuracy(fake_scores, threshold: float = 0.5) -> float:
    fake = _scores(fake_scores, "fake_scores")
    if fake.size == 0:
        raise ValueError("no fake scores")
    return float(np.mean(fake > threshold))


def real_accuracy(real_scores, threshold: float = 0.5) -> float:
    real = _scores(real_scores, "real_scores")
    if real.size == 0:
        raise ValueError("no real scores")
    return float(np.mean(real <= threshold))


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    undefined: bool


def confusion_prf(tp: int, fp: int, fn: int) -> PRF:
    """Precision/recall/F1 from counts; any zero denominator yields 0 and sets ``undefined``."""
    undefined = False
    if tp + fp == 0:
        precision, undefined = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, undefined = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return PRF(float(precision), float(recall), float(f1), undefined)


def precision_recall_f1(scores, labels, threshold: float = 0.5) -> PRF:
    s = _scores(scores, "scores")
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pred = s > threshold
    pos = y.astype(bool)
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return confusion_prf(tp, fp, fn)


def score_cell(scores: ScoreSet, threshold: float = 0.5) -> dict[str, float]:
    syn = synthetic_accuracy(scores.fake_scores, threshold)
    rea = real_accuracy(scores.real_scores, threshold)
    labels = np.r_[np.zeros(scores.real_scores.size), np.ones(scores.fake_scores.size)]
    prf = precision_recall_f1(np.r_[scores.real_scores, scores.fake_scores], labels, threshold)
    return {
        "synthetic_accuracy": syn,
        "real_accuracy": rea,
        "balanced_accuracy": (syn + rea) / 2.0,
        "auc": auc(scores),
        "ap": average_precision(scores),
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
    }


# ---------------------------------------------------------------- matrix

def region_of(source_order: int, stage: int) -> str:
    if source_order == stage:
        return "diagonal"
    return "seen" if source_order < stage else "unseen"


@dataclass
class MetricsMatrix:
    """Test source (rows, release order) x training stage (columns)."""

    rows: list[str]
    stages: list[int]
    cells: dict[tuple[str, int], dict[str, float]] = field(default_factory=dict)
    regions: dict[tuple[str, int], str] = field(default_factory=dict)
    real_accuracy: dict[int, float] = field(default_factory=dict)

    def value(self, metric: str, row: str, stage: int) -> float:
        return self.cells[(row, stage)][metric]

    def grid(self, metric: str) -> np.ndarray:
        return np.array([[self.value(metric, r, k) for k in self.stages] for r in self.rows])

    def to_records(self) -> list[dict]:
        out = []
        for r in self.rows:
            for k in self.stages:
                out.append({"test_source": r, "stage": k, "region": self.regions[(r, k)],
                            "metrics": {m: self.cells[(r, k)][m] for m in CELL_METRICS}})
        return out


def assemble_matrix(row_ids: list[str], stage_scores: dict[int, dict[str, ScoreSet]],
                    threshold: float = 0.5) -> MetricsMatrix:
    """Matrix from per-stage score sets; row ``i`` is the source added at stage ``i + 1``."""
    stages = sorted(stage_scores)
    matrix = MetricsMatrix(rows=list(row_ids), stages=stages)
    for k in stages:
        for order, row in enumerate(row_ids, start=1):
            ss = stage_scores[k][row]
            matrix.cells[(row, k)] = score_cell(ss, threshold)
            matrix.regions[(row, k)] = region_of(order, k)
        any_row = stage_scores[k][row_ids[0]]
        matrix.real_accuracy[k] = real_accuracy(any_row.real_scores, threshold)
    return matrix


def build_matrix(checkpoints, timeline, corpus, augment_config, threshold: float = 0.5,
                 batch_size: int = 128) -> MetricsMatrix:
    """Score every checkpoint on every generated source's held-out test split.

    Each cell pairs the full real test split against that source's fake test
    split, after the deterministic evaluation crop.
    """
    from .augment import apply_eval_transform
    from .detector import predict_scores

    missing = [s.id for s in [timeline.real] + timeline.sources if s.counts.get("test", 0) < 1]
    if missing:
        raise ValueError(f"no test split for sources: {missing}")
    stages = sorted(c.stage for c in checkpoints)
    if stages != list(range(1, len(stages) + 1)):
        raise ValueError(f"checkpoints must cover stages 1..N, got {stages}")

    def prep(images):
        return np.stack([apply_eval_transform(im, augment_config) for im in images])

    real_x = prep(corpus.images(timeline.real.id, "test"))
    fake_x = {s.id: prep(corpus.images(s.id, "test")) for s in timeline.sources}
    stage_scores = {}
    for ckpt in sorted(checkpoints, key=lambda c: c.stage):
        real_s = predict_scores(ckpt.model, real_x, batch_size=batch_size)
        stage_scores[ckpt.stage] = {
            sid: ScoreSet(real_s, predict_scores(ckpt.model, x, batch_size=batch_size), sid, ckpt.stage)
            for sid, x in fake_x.items()
        }
    return assemble_matrix(timeline.ids, stage_scores, threshold)


# ---------------------------------------------------------------- reports

_VIRIDIS = np.array([
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
], dtype=np.float64)


def ramp_color(value: float) -> tuple[int, int, int]:
    v = float(np.clip(value, 0.0, 1.0)) * (len(_VIRIDIS) - 1)
    i = min(int(np.floor(v)), len(_VIRIDIS) - 2)
    t = v - i
    rgb = _VIRIDIS[i] * (1 - t) + _VIRIDIS[i + 1] * t
    return tuple(int(round(c)) for c in rgb)


def write_heatmap(grid: np.ndarray, path, cell: int = 16) -> None:
    rows, cols = grid.shape
    img = np.zeros((rows * cell, cols * cell, 3), dtype=np.uint8)
    for i in range(rows):
        for j in range(cols):
            img[i * cell:(i + 1) * cell, j * cell:(j + 1) * cell] = ramp_color(grid[i, j])
    Image.fromarray(img, mode="RGB").save(str(path), format="PPM")


def write_csv(matrix: MetricsMatrix, metric: str, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_source"] + [f"stage_{k}" for k in matrix.stages])
        for r in matrix.rows:
            w.writerow([r] + [repr(float(matrix.value(metric, r, k))) for k in matrix.stages])
        if metric == "synthetic_accuracy":
            w.writerow(["real"] + [repr(float(matrix.real_accuracy[k])) for k in matrix.stages])


def read_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header[1:], [r[0] for r in body], np.array([[float(v) for v in r[1:]] for r in body])


def emit_reports(matrix: MetricsMatrix, out_dir) -> list[Path]:
    """Per-metric CSV and PPM heatmap, plus ``matrix.json`` (one record per cell)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, stem in REPORT_FILES.items():
        p = out_dir / f"{stem}.csv"
        write_csv(matrix, metric, p)
        h = out_dir / f"{stem}.ppm"
        write_heatmap(matrix.grid(metric), h)
        written += [p, h]
    j = out_dir / "matrix.json"
    j.write_text(json.dumps(matrix.to_records(), indent=1) + "\n")
    written.append(j)
    return written
