"""Whole-image and per-pixel detectors, their losses and checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import tensor as T
from ._rng import check_random_state
from .metrics import confusion_prf

HEADS = ("whole_image", "pixel")
CHECKPOINT_MAGIC = b"OAID"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class DetectorModel:
    layers: list[T.LayerSpec]
    head: str
    params: dict[str, np.ndarray]
    input_size: int
    stage: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        T.validate_layers(self.layers)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "DetectorModel":
        return DetectorModel(list(self.layers), self.head, {k: v.copy() for k, v in self.params.items()},
                             self.input_size, self.stage, json.loads(json.dumps(self.metadata)))

    def descriptor(self) -> dict:
        return {
            "head": self.head,
            "input_size": self.input_size,
            "layers": [l.to_dict() for l in self.layers],
            "params": [[name, list(p.shape)] for name, p in self.params.items()],
            "metadata": self.metadata,
        }


def _conv(cin, cout):
    # edge padding keeps flat inputs flat, so the pixel head has no border bias
    return T.conv2d(cin, cout, padding_mode="edge")


def _encoder() -> list[T.LayerSpec]:
    return [
        _conv(3, 16), T.relu(), T.maxpool2(),
        _conv(16, 32), T.relu(), T.maxpool2(),
        _conv(32, 64), T.relu(), T.maxpool2(),
    ]


def whole_image_layers() -> list[T.LayerSpec]:
    return _encoder() + [_conv(64, 64), T.relu(), T.global_avg_pool(), T.linear(64, 2)]


def pixel_layers() -> list[T.LayerSpec]:
    return _encoder() + [T.conv2d(64, 1, kernel=1), T.bilinear_upsample(8), T.sigmoid()]


def build_whole_image_net(input_size: int = 64, seed=0) -> DetectorModel:
    """Four 3x3 conv blocks, global average pooling and a 2-way linear head."""
    if input_size < 32:
        raise ValueError("input_size must be >= 32")
    layers = whole_image_layers()
    params = T.init_params(layers, check_random_state(seed))
    # zero logit head: both classes start equiprobable whatever the seed
    head = f"{len(layers) - 1}.weight"
    params[head] = np.zeros_like(params[head])
    return DetectorModel(layers, "whole_image", params, input_size)


def build_pixel_net(input_size: int = 64, seed=0) -> DetectorModel:
    """Stride-8 conv encoder, 1x1 score conv, x8 bilinear upsampling and a sigmoid."""
    if input_size < 8 or input_size % 8:
        raise ValueError(f"pixel net input size must be divisible by 8, got {input_size}")
    layers = pixel_layers()
    return DetectorModel(layers, "pixel", T.init_params(layers, check_random_state(seed)), input_size)


def to_nchw(images) -> np.ndarray:
    """(N, H, W, C) images in [0, 1] -> zero-centred (N, 3, H, W) network input in [-1, 1]."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] == 1:
        x = np.repeat(x, 3, axis=-1)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) * np.float32(2.0) - np.float32(1.0)


# ---------------------------------------------------------------- losses

def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` (0 real, 1 synthetic) and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    if z.ndim != 2 or z.shape[0] != y.size:
        raise ValueError(f"logits {z.shape} and labels {y.shape} disagree")
    if not np.isin(y, np.arange(z.shape[1])).all():
        raise ValueError("labels out of range")
    logp = _log_softmax(z)
    n = y.size
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), (grad / n).astype(np.asarray(logits).dtype)


def weighted_dice_loss(pred, target, eps: float = 1e-6) -> tuple[float, np.ndarray]:
    """Two-class generalised Dice loss and its gradient with respect to ``pred``.

    Class weights are ``1 / (volume + eps)**2`` over the whole batch, for the
    foreground (target 1) and background (target 0) class. The smoothing term
    is added once to the numerator so a perfect prediction scores exactly 0.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and target {g.shape} shapes differ")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("target mask must be binary")
    w_fg = 1.0 / (g.sum() + eps) ** 2
    w_bg = 1.0 / ((1.0 - g).sum() + eps) ** 2
    inter = w_fg * np.sum(p * g) + w_bg * np.sum((1.0 - p) * (1.0 - g))
    total = w_fg * np.sum(p + g) + w_bg * np.sum((1.0 - p) + (1.0 - g))
    num = 2.0 * inter + eps
    den = total + eps
    loss = 1.0 - num / den
    dnum = 2.0 * (w_fg * g - w_bg * (1.0 - g))
    dden = w_fg - w_bg
    grad = -(dnum * den - num * dden) / den ** 2
    return float(loss), grad.astype(np.asarray(pred).dtype)


def pixel_metrics(pred_map, target_mask, threshold: float = 0.5) -> dict[str, float]:
    """Accuracy, precision, recall and F1 over all pixels (positive = generated).

    A zero denominator yields 0 for that metric.
    """
    p = np.asarray(pred_map, dtype=np.float64)
    g = np.asarray(target_mask)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and target {g.shape} shapes differ")
    pred = p > threshold
    pos = g.astype(bool)
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(pred.size - tp - fp - fn)
    prf = confusion_prf(tp, fp, fn)
    return {"accuracy": (tp + tn) / pred.size, "precision": prf.precision,
            "recall": prf.recall, "f1": prf.f1}


# ---------------------------------------------------------------- inference

def logits(model: DetectorModel, x) -> np.ndarray:
    out, _ = T.forward(model.layers, model.params, x)
    return out.data


def _softmax2(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_from_logits(z) -> np.ndarray:
    return _softmax2(np.asarray(z, dtype=np.float64))[:, 1]


def predict_scores(model: DetectorModel, images, batch_size: int = 128) -> np.ndarray:
    """Synthetic-class probability for a batch of HxWxC images."""
    if model.head != "whole_image":
        raise ValueError("predict_scores needs a whole_image model")
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(score_from_logits(logits(model, to_nchw(images[i:i + batch_size]))))
    return np.concatenate(out) if out else np.zeros(0)


def predict_score(model: DetectorModel, image) -> float:
    return float(predict_scores(model, np.asarray(image)[None])[0])


def predict_masks(model: DetectorModel, images, batch_size: int = 64) -> np.ndarray:
    """Per-pixel generated-probability maps, shape (N, H, W)."""
    if model.head != "pixel":
        raise ValueError("predict_masks needs a pixel model")
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(logits(model, to_nchw(images[i:i + batch_size]))[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3])


def whole_image_step(model: DetectorModel, opt: T.Adam, x, labels) -> float:
    out, trace = T.forward(model.layers, model.params, x)
    loss, g = cross_entropy_loss(out.data, labels)
    grads = T.backward(trace, g, need_input_grad=False)
    opt.step(model.params, grads.params)
    return loss


def pixel_step(model: DetectorModel, opt: T.Adam, x, masks) -> float:
    out, trace = T.forward(model.layers, model.params, x)
    loss, g = weighted_dice_loss(out.data, np.asarray(masks, dtype=np.float32)[:, None])
    grads = T.backward(trace, g, need_input_grad=False)
    opt.step(model.params, grads.params)
    return loss


# ---------------------------------------------------------------- checkpoints

def dumps_model(model: DetectorModel) -> bytes:
    """OAID | u16 version | u32 len + JSON descriptor | f32 LE params | u32 stage."""
    desc = json.dumps(model.descriptor(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", model.stage))
    return buf.getvalue()


def loads_model(data: bytes, name: str = "<bytes>") -> DetectorModel:
    if len(data) < 10 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{name}: bad magic, not an OAID checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<I", data, 6)
    off = 10
    if off + dlen > len(data):
        raise CheckpointError(f"{name}: truncated descriptor")
    try:
        desc = json.loads(data[off:off + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{name}: corrupt descriptor ({exc})") from None
    off += dlen
    params = {}
    for pname, shape in desc["params"]:
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(data):
            raise CheckpointError(f"{name}: truncated parameter blob")
        params[pname] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
        off += nbytes
    if off + 4 != len(data):
        raise CheckpointError(f"{name}: truncated or trailing bytes after parameters")
    (stage,) = struct.unpack_from("<I", data, off)
    layers = [T.LayerSpec.from_dict(d) for d in desc["layers"]]
    return DetectorModel(layers, desc["head"], params, int(desc["input_size"]), int(stage), desc.get("metadata", {}))


def save_model(model: DetectorModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_model(model))
    tmp.replace(path)


def load_model(path) -> DetectorModel:
    path = Path(path)
    return loads_model(path.read_bytes(), str(path))


# ---------------------------------------------------------------- estimators

def _check_images(X, name="X"):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must be an (N, H, W, C) image batch, got shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} pixels must lie in [0, 1]")
    return X


class WholeImageDetector(BaseEstimator, ClassifierMixin):
    """Real (0) vs synthetic (1) image classifier with a scikit-learn interface.

    ``fit`` trains from scratch on class-balanced batches; ``partial_fit``
    continues from the current weights, which is how the online protocol
    advances one stage.
    """

    def __init__(self, input_size=64, epochs=3, batch_size=32, learning_rate=1e-3, random_state=0):
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        self.model_ = build_whole_image_net(self.input_size, seed=self.random_state)
        self.optimizer_ = T.Adam(learning_rate=self.learning_rate)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        from .online_train import class_balanced_batches

        X = _check_images(X)
        y = np.asarray(y).astype(np.int64)
        if not hasattr(self, "model_"):
            self.model_ = build_whole_image_net(self.input_size, seed=self.random_state)
            self.optimizer_ = T.Adam(learning_rate=self.learning_rate)
        self.classes_ = np.array([0, 1])
        pool = [(int(label), i) for i, label in enumerate(y)]
        rng = check_random_state(self.random_state)
        losses = []
        for _ in range(self.epochs):
            for batch in class_balanced_batches(pool, self.batch_size, rng, label_of=lambda s: s[0]):
                idx = [s[1] for s in batch]
                losses.append(whole_image_step(self.model_, self.optimizer_, to_nchw(X[idx]), y[idx]))
        self.loss_curve_ = losses
        return self

    @classmethod
    def from_model(cls, model: DetectorModel) -> "WholeImageDetector":
        est = cls(input_size=model.input_size)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est

    def decision_function(self, X):
        X = _check_images(X)
        z = np.concatenate([logits(self.model_, to_nchw(X[i:i + 128])) for i in range(0, len(X), 128)])
        return z[:, 1] - z[:, 0]

    def predict_proba(self, X):
        s = predict_scores(self.model_, _check_images(X))
        return np.column_stack([1 - s, s])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)


class PixelDetector(BaseEstimator):
    """Per-pixel generated-region segmenter trained with weighted Dice."""

    def __init__(self, input_size=64, epochs=10, batch_size=16, learning_rate=1e-3, threshold=0.5,
                 random_state=0):
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, masks):
        from .inpaint import PixelTrainConfig, train_pixel_detector

        X = _check_images(X)
        masks = np.asarray(masks, dtype=np.float32)
        cfg = PixelTrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                               learning_rate=self.learning_rate, seed=self.random_state)
        self.model_ = train_pixel_detector(list(zip(X, masks)), cfg, input_size=self.input_size)
        self.loss_curve_ = self.model_.metadata.get("epoch_losses", [])
        return self

    def predict_proba(self, X):
        return predict_masks(self.model_, _check_images(X))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, masks):
        return pixel_metrics(self.predict_proba(X), masks, self.threshold)["f1"]
