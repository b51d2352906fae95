"""Small dense-tensor engine with reverse-mode gradients.

Only the fixed layer vocabulary used by the detectors is supported. A network
is a list of :class:`LayerSpec` plus an ordered parameter dict keyed
``"<layer index>.weight"`` / ``"<layer index>.bias"``. Callers pass and
receive NCHW arrays.

The engine is dtype-agnostic: training runs in float32, gradient checks feed
float64 parameters and inputs through the exact same code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = (
    "conv2d",
    "relu",
    "maxpool2",
    "global_avg_pool",
    "linear",
    "bilinear_upsample",
    "sigmoid",
    "softmax",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Tensor:
    """Dense array with an optional same-shape gradient buffer."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        if self.grad is not None and np.shape(self.grad) != self.data.shape:
            raise ShapeError(f"grad shape {np.shape(self.grad)} != data shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    factor: int = 0
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.padding_mode not in ("zeros", "edge"):
            raise ValueError("padding_mode must be 'zeros' or 'edge'")
        if self.kind == "conv2d":
            if self.kernel not in (1, 3):
                raise ValueError("conv2d kernel must be 1 or 3")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d channel counts must be positive")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d stride must be positive and padding non-negative")
        elif self.kind == "linear":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("linear feature counts must be positive")
        elif self.kind == "bilinear_upsample" and self.factor < 1:
            raise ValueError("upsample factor must be positive")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "linear")

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind}
        for name in ("in_channels", "out_channels", "kernel", "stride", "padding", "factor", "padding_mode"):
            value = getattr(self, name)
            if value != LayerSpec.__dataclass_fields__[name].default:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(**d)


def conv2d(cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
           padding_mode: str = "zeros") -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout, kernel=kernel,
                     stride=stride, padding=padding, padding_mode=padding_mode)


def linear(fin: int, fout: int) -> LayerSpec:
    return LayerSpec("linear", in_channels=fin, out_channels=fout)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2() -> LayerSpec:
    return LayerSpec("maxpool2")


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def bilinear_upsample(factor: int) -> LayerSpec:
    return LayerSpec("bilinear_upsample", factor=factor)


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def validate_layers(layers: list[LayerSpec]) -> None:
    """Check channel counts chain consistently through the stack."""
    channels = None
    for i, layer in enumerate(layers):
        if layer.has_params:
            if channels is not None and layer.in_channels != channels:
                raise ShapeError(
                    f"layer {i} ({layer.kind}) expects {layer.in_channels} channels, "
                    f"previous layer produces {channels}"
                )
            channels = layer.out_channels


def param_shapes(layers: list[LayerSpec]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, layer in enumerate(layers):
        if layer.kind == "conv2d":
            shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            shapes[f"{i}.bias"] = (layer.out_channels,)
        elif layer.kind == "linear":
            shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels)
            shapes[f"{i}.bias"] = (layer.out_channels,)
    return shapes


def init_params(layers: list[LayerSpec], rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases."""
    validate_layers(layers)
    params = {}
    for name, shape in param_shapes(layers).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


# --------------------------------------------------------------------------
# layer kernels. Internally 4-D activations are NHWC; forward/backward convert
# at the boundary so callers only ever see NCHW.


def _conv_forward(layer, x, w, b):
    n, h, wd, c = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    if p:
        mode = "edge" if layer.padding_mode == "edge" else "constant"
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode=mode)
    hp, wp = x.shape[1], x.shape[2]
    if hp < k or wp < k:
        raise ShapeError("input smaller than kernel")
    if k == 1:
        win = x[:, ::s, ::s, :]
        ho, wo = win.shape[1], win.shape[2]
        cols = win.reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = cols @ wmat.T
    out += b
    return out.reshape(n, ho, wo, -1), (cols, (n, h, wd, c), (hp, wp), (ho, wo))


def _conv_backward(layer, cache, g, w, need_input=True):
    cols, (n, h, wd, c), (hp, wp), (ho, wo) = cache
    k, s, p = layer.kernel, layer.stride, layer.padding
    cout = w.shape[0]
    g2 = g.reshape(n * ho * wo, cout)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    dw = (g2.T @ cols).reshape(cout, k, k, c).transpose(0, 3, 1, 2)
    db = g2.sum(axis=0)
    pg = {"weight": np.ascontiguousarray(dw), "bias": db}
    if not need_input:
        return None, pg
    dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
    if k == 1 and s == 1 and p == 0:
        return dcols[:, :, :, 0, 0, :], pg
    dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    if not p:
        return dxp, pg
    if layer.padding_mode == "edge":
        # fold gradient of replicated border pixels back onto the edge rows/cols
        dxp[:, p, :, :] += dxp[:, :p, :, :].sum(axis=1)
        dxp[:, p + h - 1, :, :] += dxp[:, p + h:, :, :].sum(axis=1)
        dxp[:, :, p, :] += dxp[:, :, :p, :].sum(axis=2)
        dxp[:, :, p + wd - 1, :] += dxp[:, :, p + wd:, :].sum(axis=2)
    return dxp[:, p:p + h, p:p + wd, :], pg


_POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _maxpool_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    out = x[:, 0::2, 0::2, :]
    for di, dj in _POOL_TAPS[1:]:
        out = np.maximum(out, x[:, di::2, dj::2, :])
    return out, x


def _maxpool_backward(x, out, g):
    # gradient goes to the first tap (row-major) that attains the max
    dx = np.zeros_like(x, dtype=g.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for di, dj in _POOL_TAPS:
        hit = (x[:, di::2, dj::2, :] == out) & ~taken
        dx[:, di::2, dj::2, :] = g * hit
        taken |= hit
    return dx


def upsample_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """1-D bilinear interpolation operator (half-pixel centres, edge clamp)."""
    m = np.zeros((n * factor, n), dtype=dtype)
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Trace:
    """Everything backward needs from one forward pass."""

    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    caches: list[Any] = field(default_factory=list)
    input_shape: tuple[int, ...] = ()
    output: Tensor | None = None


def _to_nhwc(a):
    return a.transpose(0, 2, 3, 1) if a.ndim == 4 else a


def _to_nchw(a):
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2)) if a.ndim == 4 else a


def _check_input(i, layer, x):
    if layer.kind in ("conv2d", "maxpool2", "global_avg_pool", "bilinear_upsample"):
        if x.ndim != 4:
            raise ShapeError(f"layer {i} ({layer.kind}) expects NCHW input, got {x.ndim}-d")
    if layer.kind == "conv2d" and x.shape[3] != layer.in_channels:
        raise ShapeError(
            f"layer {i} (conv2d) expects {layer.in_channels} input channels, got {x.shape[3]}"
        )
    if layer.kind == "linear":
        feats = int(np.prod(x.shape[1:]))
        if feats != layer.in_channels:
            raise ShapeError(f"layer {i} (linear) expects {layer.in_channels} features, got {feats}")


def forward(layers: list[LayerSpec], params: dict[str, np.ndarray], x: Tensor | np.ndarray):
    """Run the stack on an NCHW batch and return ``(output, trace)``."""
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.ndim != 4 and layers and layers[0].kind != "linear":
        if layers[0].kind not in ("relu", "sigmoid", "softmax"):
            raise ShapeError(f"layer 0 ({layers[0].kind}) expects NCHW input, got shape {x.shape}")
    trace = Trace(layers=layers, params=params, input_shape=x.shape)
    x = _to_nhwc(x)
    for i, layer in enumerate(layers):
        _check_input(i, layer, x)
        kind = layer.kind
        if kind == "conv2d":
            w, b = params[f"{i}.weight"], params[f"{i}.bias"]
            if w.shape != (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel):
                raise ShapeError(f"layer {i} (conv2d) weight has shape {w.shape}")
            try:
                x, cache = _conv_forward(layer, x, w, b)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} (conv2d): {exc}") from None
        elif kind == "relu":
            cache = x > 0
            x = x * cache
        elif kind == "maxpool2":
            try:
                x, src = _maxpool_forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} (maxpool2): {exc}") from None
            cache = (src, x)
        elif kind == "global_avg_pool":
            cache = x.shape
            x = x.mean(axis=(1, 2))
        elif kind == "linear":
            w, b = params[f"{i}.weight"], params[f"{i}.bias"]
            if x.ndim == 4:
                x = _to_nchw(x)
            cache = (x.shape, x.reshape(x.shape[0], -1))
            x = cache[1] @ w.T + b
        elif kind == "bilinear_upsample":
            uh = upsample_matrix(x.shape[1], layer.factor, x.dtype)
            uw = upsample_matrix(x.shape[2], layer.factor, x.dtype)
            cache = (uh, uw)
            # (n, h, w, c) -> rows then columns
            x = np.einsum("ih,nhwc->niwc", uh, x, optimize=True)
            x = np.einsum("jw,niwc->nijc", uw, x, optimize=True)
        elif kind == "sigmoid":
            x = _sigmoid(x)
            cache = x
        elif kind == "softmax":
            x = _softmax(x, axis=-1 if x.ndim == 4 else 1)
            cache = x
        if not np.isfinite(x).all():
            raise NonFiniteError(f"layer {i} ({kind}) produced non-finite values")
        trace.caches.append(cache)
    trace.output = Tensor(_to_nchw(x))
    return trace.output, trace


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray | None


def backward(trace: Trace | None, output_grad: Tensor | np.ndarray,
             need_input_grad: bool = True) -> Gradients:
    """Reverse pass through a completed forward trace.

    With ``need_input_grad=False`` the first layer skips its input gradient,
    which is the expensive half of a conv backward.
    """
    if trace is None or trace.output is None or len(trace.caches) != len(trace.layers):
        raise RuntimeError("backward called without a completed forward trace")
    g = output_grad.data if isinstance(output_grad, Tensor) else np.asarray(output_grad)
    if g.shape != trace.output.shape:
        raise ShapeError(f"output_grad shape {g.shape} != forward output shape {trace.output.shape}")
    g = _to_nhwc(g.astype(trace.output.data.dtype, copy=False))
    grads: dict[str, np.ndarray] = {}
    for i in range(len(trace.layers) - 1, -1, -1):
        layer, cache = trace.layers[i], trace.caches[i]
        kind = layer.kind
        if kind == "conv2d":
            w = trace.params[f"{i}.weight"]
            g, pg = _conv_backward(layer, cache, g, w, need_input=need_input_grad or i > 0)
            grads[f"{i}.weight"], grads[f"{i}.bias"] = pg["weight"], pg["bias"]
            if g is None:
                break
        elif kind == "relu":
            g = g * cache
        elif kind == "maxpool2":
            g = _maxpool_backward(cache[0], cache[1], g)
        elif kind == "global_avg_pool":
            n, h, w, c = cache
            g = np.broadcast_to((g / (h * w))[:, None, None, :], cache)
        elif kind == "linear":
            shape, x2 = cache
            w = trace.params[f"{i}.weight"]
            grads[f"{i}.weight"] = g.T @ x2
            grads[f"{i}.bias"] = g.sum(axis=0)
            g = (g @ w).reshape(shape)
            g = _to_nhwc(g)
        elif kind == "bilinear_upsample":
            uh, uw = cache
            g = np.einsum("jw,nijc->niwc", uw, g, optimize=True)
            g = np.einsum("ih,niwc->nhwc", uh, g, optimize=True)
        elif kind == "sigmoid":
            g = g * cache * (1 - cache)
        elif kind == "softmax":
            s = cache
            axis = -1 if s.ndim == 4 else 1
            g = s * (g - (g * s).sum(axis=axis, keepdims=True))
    ordered = {name: grads[name] for name in trace.params if name in grads}
    return Gradients(params=ordered, input=None if g is None else _to_nchw(np.asarray(g)))


@dataclass
class Adam:
    """Adam optimizer state; moment buffers are created lazily per parameter."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Apply one update in place and return ``params``.

        Raises before touching any state if a gradient is non-finite or
        mis-shaped.
        """
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.learning_rate / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return params


def optimizer_step(state: Adam, params, grads):
    return state.step(params, grads)
